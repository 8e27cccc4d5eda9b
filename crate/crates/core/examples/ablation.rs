// Sweep the STRF hyperparameters one factor at a time on the toy network
// and print the comparison CSV.
//
// `cargo run --release --example ablation -- 20` trains each setting for
// 20 steps.

use strf::ablate::{run, AblationRow};
use strf::backbone::BlockVariant;
use strf::config::{AblateConfig, ModelConfig};
use strf::synth::{render, SynthSpec};
use strf::train::TrainConfig;

pub fn run_example_with(steps: usize, frames: usize) -> strf::Result<Vec<AblationRow>> {
    let data = render(&SynthSpec { frames, ..SynthSpec::default() })?;
    let model = ModelConfig::toy(BlockVariant::P3DC, true);
    let train = TrainConfig {
        lr: 1e-3,
        stride: 1,
        ..TrainConfig::default()
    };
    let cfg = AblateConfig { steps, ..AblateConfig::default() };
    run(&model, &train, &data, &cfg, std::io::stdout().lock())
}

pub fn run_example() -> strf::Result<Vec<AblationRow>> {
    run_example_with(1, 8)
}

fn main() {
    let steps = std::env::args().nth(1).map_or(20, |s| s.parse().expect("step count"));
    run_example_with(steps, 32).expect("ablation");
}
