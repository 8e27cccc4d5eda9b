use std::fs;
use std::path::Path;

use super::network::ForwardOutput;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-frame activation energy of a (c, t, h, w) volume, min-max normalized
/// to [0, 1] within each frame. Returns (t, h, w); a frame with a constant
/// energy maps to zeros.
pub fn activation_energy<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<f32>> {
    let d = a.dims();
    if d.len() != 4 {
        return Err(Error::shape("activation_energy", d, &[0, 0, 0, 0]));
    }
    let (c, t, plane) = (d[0], d[1], d[2] * d[3]);
    let mut out = vec![0.0f32; t * plane];
    for f in 0..t {
        let energy: Vec<f64> = (0..plane)
            .map(|p| {
                (0..c)
                    .map(|ch| a.data()[(ch * t + f) * plane + p].as_f64().powi(2))
                    .sum()
            })
            .collect();
        let lo = energy.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range > 0.0 && range.is_finite() {
            for (o, e) in out[f * plane..(f + 1) * plane].iter_mut().zip(&energy) {
                *o = (((e - lo) / range) as f32).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[t, d[2], d[3]], out)
}

/// Attention maps for clip `clip` at `stage` (1..=4; 0 is the stem) from a
/// pass run with capture enabled.
pub fn attention_export<T: Scalar>(out: &ForwardOutput<T>, clip: usize, stage: usize) -> Result<Tensor<f32>> {
    let act = if stage == 0 {
        out.stem_capture
            .as_ref()
            .ok_or_else(|| Error::Contract("forward pass was run without activation capture".into()))?
    } else {
        out.stage_activation(stage)?
    };
    if clip >= act.dims()[0] {
        return Err(Error::Contract(format!("clip {clip} out of range for batch of {}", act.dims()[0])));
    }
    activation_energy(&act.index_axis0(clip))
}

/// Write an (h, w) map with values in [0, 1] as binary PGM.
pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let &[h, w] = map.dims() else {
        return Err(Error::shape("write_pgm", map.dims(), &[0, 0]));
    };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::storage(path, e))
}
