//! Deterministic synthetic tracklets, the on-disk dataset format, augmentation
//! and identity-balanced batches.
//!
//! Every identity is a two-tone body on a uniform background. Identities are
//! grouped into appearance twins: members of a group share a palette and step
//! through the same set of poses, but at different rates. Over a tracklet
//! whose length is a multiple of every cycle, twins show exactly the same
//! multiset of frames, so only temporal order separates them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::reid::{clip_indices, SampleMode, Split, Tracklet};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";
/// Background intensity in [0, 1].
pub const BACKGROUND: f32 = 0.5;
/// Number of distinct poses a body cycles through.
pub const POSES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub identities: usize,
    /// Training tracklets per identity, spread over the cameras.
    pub tracklets_per_identity: usize,
    pub frames: usize,
    /// (height, width).
    pub frame_size: [usize; 2],
    /// Identities sharing one palette.
    pub twins_per_palette: usize,
    /// Horizontal pixels between consecutive poses.
    pub motion_amplitude: usize,
    pub occlusion_probability: f64,
    /// (height, width) of the gray occluder.
    pub occluder_size: [usize; 2],
    /// Maximum per-frame shift of the crop window in pixels.
    pub jitter: usize,
    pub cameras: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            identities: 8,
            tracklets_per_identity: 4,
            frames: 32,
            frame_size: [64, 32],
            twins_per_palette: 2,
            motion_amplitude: 4,
            occlusion_probability: 0.0,
            occluder_size: [16, 16],
            jitter: 0,
            cameras: 2,
            seed: 0,
        }
    }
}

/// Per-identity factors of the generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityFactors {
    pub palette: usize,
    /// Pose steps per frame.
    pub motion_frequency: f64,
    pub motion_amplitude: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.frame_size;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.identities == 0 || self.tracklets_per_identity == 0 || self.frames == 0 {
            return bad("identities, tracklets and frames must be positive");
        }
        if self.cameras < 2 {
            return bad("at least two cameras are needed for cross-camera retrieval");
        }
        if self.twins_per_palette == 0 {
            return bad("twins_per_palette must be positive");
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return bad("occlusion probability must lie in [0, 1]");
        }
        let body = self.body_size();
        if body[0] == 0 || body[1] == 0 || body[1] + (POSES - 1) * self.motion_amplitude > w || body[0] > h {
            return bad("frame too small for the body and its motion range");
        }
        Ok(())
    }

    pub fn factors(&self, identity: usize) -> IdentityFactors {
        let hold = 1usize << (identity % self.twins_per_palette);
        IdentityFactors {
            palette: identity / self.twins_per_palette,
            motion_frequency: 1.0 / hold as f64,
            motion_amplitude: self.motion_amplitude,
        }
    }

    fn body_size(&self) -> [usize; 2] {
        let [h, w] = self.frame_size;
        [h * 5 / 8, (w * 3 / 8).max(2)]
    }

    /// Frames per pose of `identity`.
    fn hold(&self, identity: usize) -> usize {
        1 << (identity % self.twins_per_palette)
    }
}

/// Torso and legs colors of a palette.
pub fn palette_colors(palette: usize) -> [[f32; 3]; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ palette as u64);
    let mut color = || {
        // quantized to 8 bits so frames survive the codec unchanged
        std::array::from_fn(|_| rng.gen_range(0u8..=255) as f32 / 255.0)
    };
    [color(), color()]
}

fn camera_gain(camera: usize) -> f32 {
    1.0 - 0.12 * (camera % 4) as f32
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// A rendered tracklet with its split assignment.
fn render_tracklet(spec: &SynthSpec, identity: usize, camera: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f32>> {
    let [h, w] = spec.frame_size;
    let [bh, bw] = spec.body_size();
    let colors = palette_colors(spec.factors(identity).palette);
    let gain = camera_gain(camera);
    let hold = spec.hold(identity);
    let phase = rng.gen_range(0..POSES * hold);
    let y0 = (h - bh) / 2;
    let x_base = (w - bw - (POSES - 1) * spec.motion_amplitude) / 2;
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let pose = ((t + phase) / hold) % POSES;
        let (dy, dx) = if spec.jitter > 0 {
            let j = spec.jitter as i64;
            (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
        } else {
            (0, 0)
        };
        let top = y0 as i64 + dy;
        let left = (x_base + pose * spec.motion_amplitude) as i64 + dx;
        let occluder = (spec.occlusion_probability > 0.0 && rng.gen_bool(spec.occlusion_probability)).then(|| {
            let [oh, ow] = [spec.occluder_size[0].min(h), spec.occluder_size[1].min(w)];
            (rng.gen_range(0..=h - oh), rng.gen_range(0..=w - ow), oh, ow)
        });
        let mut data = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (yi, xi) = (y as i64 - top, x as i64 - left);
                let mut rgb = [BACKGROUND; 3];
                if (0..bh as i64).contains(&yi) && (0..bw as i64).contains(&xi) {
                    rgb = colors[usize::from(yi as usize >= bh * 2 / 5)];
                }
                if let Some((oy, ox, oh, ow)) = occluder {
                    if (oy..oy + oh).contains(&y) && (ox..ox + ow).contains(&x) {
                        rgb = [0.5; 3];
                    }
                }
                for c in 0..3 {
                    data[(c * h + y) * w + x] = quantize(rgb[c] * gain);
                }
            }
        }
        frames.push(Tensor::new(&[3, h, w], data).expect("dims match by construction"));
    }
    frames
}

/// Render the whole dataset in memory. Training tracklets alternate cameras;
/// every identity also gets one query tracklet on camera 0 and one gallery
/// tracklet on each other camera.
pub fn render(spec: &SynthSpec) -> Result<Vec<Tracklet>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for id in 0..spec.identities {
        let mut plan: Vec<(Split, usize)> = (0..spec.tracklets_per_identity)
            .map(|k| (Split::Train, k % spec.cameras))
            .collect();
        plan.push((Split::Query, 0));
        plan.extend((1..spec.cameras).map(|c| (Split::Gallery, c)));
        for (k, (split, camera)) in plan.into_iter().enumerate() {
            let frames = render_tracklet(spec, id, camera, &mut rng);
            let name = format!("{}/{:04}/c{}_t{:03}", split.as_str(), id, camera, k);
            out.push(Tracklet::new(frames, id, camera, split, name)?);
        }
    }
    Ok(out)
}

/// Render `spec` into `root` as PPM frames plus a manifest. Returns the
/// tracklets as rendered.
pub fn generate(spec: &SynthSpec, root: impl AsRef<Path>) -> Result<Vec<Tracklet>> {
    let root = root.as_ref();
    let tracklets = render(spec)?;
    let mut manifest = String::new();
    for t in &tracklets {
        let dir = root.join(&t.name);
        fs::create_dir_all(&dir).map_err(|e| Error::storage(&dir, e))?;
        for (i, f) in t.frames.iter().enumerate() {
            write_ppm(dir.join(format!("frame_{i:05}.ppm")), f)?;
        }
        let _ = writeln!(manifest, "{}\t{}\t{}\t{}", t.name, t.id, t.camera, t.split.as_str());
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::storage(path, e))?;
    Ok(tracklets)
}

/// Write a (3, h, w) tensor with values in [0, 1] as binary PPM.
pub fn write_ppm(path: impl AsRef<Path>, frame: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let d = frame.dims();
    if d.len() != 3 || d[0] != 3 {
        return Err(Error::shape("write_ppm", d, &[3, 0, 0]));
    }
    let (h, w) = (d[1], d[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for c in 0..3 {
            bytes.push((frame.data()[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::storage(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::storage(path, e))
}

/// Read a binary PPM (maxval 255) into a (3, h, w) tensor in [0, 1].
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    let bad = |m: &str| Error::load(path, m.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("bad magic, expected P6"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header field"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 || w == 0 || h == 0 {
        return Err(bad("only non-empty 8-bit images are supported"));
    }
    let body = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| bad("truncated pixel data"))?;
    let mut data = vec![0.0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = body[3 * p + c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Per-channel normalization applied at load time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalize {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalize {
    pub const IDENTITY: Normalize = Normalize {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub fn apply(&self, frame: &mut Tensor<f32>) {
        let plane = frame.numel() / 3;
        for (c, chunk) in frame.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
        }
    }
}

/// Load every tracklet listed in a manifest.
pub fn load(manifest: impl AsRef<Path>, norm: Normalize) -> Result<Vec<Tracklet>> {
    let manifest = manifest.as_ref();
    let root = manifest.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(manifest).map_err(|e| Error::load(manifest, e.to_string()))?;
    let mut out = Vec::new();
    let mut size: Option<Vec<usize>> = None;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::load(manifest, e.to_string()))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| Error::load(manifest, format!("line {}: {m}", n + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        let [path, id, camera, split] = cols[..] else {
            return Err(bad("expected path, id, camera, split".into()));
        };
        let id = id.parse().map_err(|_| bad(format!("bad id `{id}`")))?;
        let camera = camera.parse().map_err(|_| bad(format!("bad camera `{camera}`")))?;
        let split = split.parse().map_err(|_| bad(format!("bad split `{split}`")))?;
        let dir = root.join(path);
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::load(&dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::load(&dir, "no frames"));
        }
        let mut frames = Vec::with_capacity(files.len());
        for f in &files {
            let mut frame = read_ppm(f)?;
            match &size {
                Some(s) if s.as_slice() != frame.dims() => {
                    return Err(Error::load(f, format!("dims {:?} differ from {:?}", frame.dims(), s)));
                }
                None => size = Some(frame.dims().to_vec()),
                _ => {}
            }
            norm.apply(&mut frame);
            frames.push(frame);
        }
        out.push(Tracklet::new(frames, id, camera, split, path)?);
    }
    Ok(out)
}

/// Tracklets of one split, in manifest order.
pub fn split_of(tracklets: &[Tracklet], split: Split) -> Vec<Tracklet> {
    tracklets.iter().filter(|t| t.split == split).cloned().collect()
}

/// Random erasing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EraseConfig {
    pub probability: f64,
    pub area: (f64, f64),
    pub aspect: (f64, f64),
    pub fill: [f32; 3],
}

impl Default for EraseConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            area: (0.02, 0.4),
            aspect: (0.3, 3.3),
            fill: [0.0; 3],
        }
    }
}

/// Mirror every frame of a (3, t, h, w) clip horizontally.
pub fn flip_clip(clip: &mut Tensor<f32>) {
    let w = clip.dims()[3];
    clip.data_mut().chunks_mut(w).for_each(|row| row.reverse());
}

/// Fill rows `y0..y0+rh`, cols `x0..x0+rw` of every frame.
pub fn erase_rect(clip: &mut Tensor<f32>, [y0, x0, rh, rw]: [usize; 4], fill: [f32; 3]) {
    let d = clip.dims().to_vec();
    let (t, h, w) = (d[1], d[2], d[3]);
    let data = clip.data_mut();
    for (c, &v) in fill.iter().enumerate() {
        for f in 0..t {
            for y in y0..(y0 + rh).min(h) {
                let o = ((c * t + f) * h + y) * w;
                data[o + x0.min(w)..o + (x0 + rw).min(w)].fill(v);
            }
        }
    }
}

/// Clip-consistent horizontal flip and random erasing.
pub fn augment(clip: &Tensor<f32>, flip_p: f64, erase: &EraseConfig, seed: u64) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&flip_p) || !(0.0..=1.0).contains(&erase.probability) {
        return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
    }
    if clip.rank() != 4 || clip.dims()[0] != 3 {
        return Err(Error::shape("augment", clip.dims(), &[3, 0, 0, 0]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = clip.clone();
    if rng.gen_bool(flip_p) {
        flip_clip(&mut out);
    }
    if rng.gen_bool(erase.probability) {
        let (h, w) = (clip.dims()[2], clip.dims()[3]);
        for _ in 0..100 {
            let area = rng.gen_range(erase.area.0..=erase.area.1) * (h * w) as f64;
            let aspect = rng.gen_range(erase.aspect.0.ln()..=erase.aspect.1.ln()).exp();
            let rh = (area * aspect).sqrt().round() as usize;
            let rw = (area / aspect).sqrt().round() as usize;
            if rh >= 1 && rw >= 1 && rh < h && rw < w {
                let y0 = rng.gen_range(0..=h - rh);
                let x0 = rng.gen_range(0..=w - rw);
                erase_rect(&mut out, [y0, x0, rh, rw], erase.fill);
                break;
            }
        }
    }
    Ok(out)
}

/// Mean pixel value per channel over all frames.
pub fn channel_mean(tracklets: &[Tracklet]) -> [f32; 3] {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for f in tracklets.iter().flat_map(|t| &t.frames) {
        let plane = f.numel() / 3;
        for (c, ch) in f.data().chunks(plane).enumerate() {
            sum[c] += ch.iter().map(|&v| v as f64).sum::<f64>();
        }
        n += plane;
    }
    sum.map(|s| (s / n.max(1) as f64) as f32)
}

/// A training batch: clips (p*k, 3, t, h, w) with identity labels.
#[derive(Debug, Clone)]
pub struct ClipBatch {
    pub clips: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Sample `p` identities and `k` train clips of each.
pub fn make_batch(tracklets: &[Tracklet], p: usize, k: usize, t: usize, stride: usize, seed: u64) -> Result<ClipBatch> {
    let mut by_id: BTreeMap<usize, Vec<&Tracklet>> = BTreeMap::new();
    for tr in tracklets {
        by_id.entry(tr.id).or_default().push(tr);
    }
    if by_id.len() < p || p == 0 || k == 0 {
        return Err(Error::Contract(format!(
            "batch of {p} identities x {k} clips needs at least {p} identities, have {}",
            by_id.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = by_id.keys().copied().collect();
    let chosen: Vec<usize> = ids.choose_multiple(&mut rng, p).copied().collect();
    let mut clips = Vec::with_capacity(p * k);
    let mut labels = Vec::with_capacity(p * k);
    for id in chosen {
        let pool = &by_id[&id];
        let picks: Vec<&Tracklet> = if pool.len() >= k {
            pool.choose_multiple(&mut rng, k).copied().collect()
        } else {
            (0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        };
        for tr in picks {
            let idx = clip_indices(tr.len(), t, stride, SampleMode::Train, rng.gen())?;
            clips.push(tr.clip(&idx[0]));
            labels.push(id);
        }
    }
    Ok(ClipBatch {
        clips: Tensor::stack(&clips)?,
        labels,
    })
}

/// Hash of every file under `root` in path order; used to compare trees.
pub fn tree_digest(root: impl AsRef<Path>) -> Result<u64> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let root = root.as_ref();
    let mut files = Vec::new();
    walk(root, &mut files).map_err(|e| Error::load(root, e.to_string()))?;
    files.sort();
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    };
    for f in files {
        eat(f.strip_prefix(root).unwrap_or(&f).to_string_lossy().as_bytes());
        let mut buf = Vec::new();
        fs::File::open(&f)
            .and_then(|mut r| r.read_to_end(&mut buf))
            .map_err(|e| Error::load(&f, e.to_string()))?;
        eat(&buf);
    }
    Ok(h)
}
