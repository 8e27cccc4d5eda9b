// Run one STRF unit on a random feature volume under each integration
// scheme and inspect its attention masks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strf::strf::{fam_mask, strf_forward, Branch, Integration, StrfConfig, StrfParams};
use strf::Tensor;

pub struct UnitSummary {
    pub dims: Vec<usize>,
    pub worst_row_sum_error: f64,
    pub outputs: Vec<(Integration, Tensor<f32>)>,
}

pub fn run_example() -> strf::Result<UnitSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // (c, t, h, w): 32 channels, 4 frames of 8x4
    let f = Tensor::<f32>::from_fn(&[32, 4, 8, 4], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0);
    let params = StrfParams::<f32>::init(32, 16, &mut rng);

    let mut worst: f64 = 0.0;
    for b in Branch::ALL {
        let cfg = StrfConfig::default().fam(b);
        let mask = fam_mask(&f, &cfg, params.get(b))?;
        println!("{:<3} mask {}x{}  row-sum error {:.2e}", b.short(), mask.side(), mask.side(), mask.row_sum_error());
        worst = worst.max(mask.row_sum_error());
    }

    let mut outputs = Vec::new();
    for integration in Integration::ALL {
        let cfg = StrfConfig { integration, ..StrfConfig::default() };
        let out = strf_forward(&f, &cfg, &params)?;
        println!("{integration:<22} out {:?}  mean |y| {:.4}", out.dims(), out.map(f32::abs).mean());
        outputs.push((integration, out));
    }
    Ok(UnitSummary {
        dims: f.dims().to_vec(),
        worst_row_sum_error: worst,
        outputs,
    })
}

fn main() {
    run_example().expect("strf unit example");
}
