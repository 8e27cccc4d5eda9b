// Train the toy STRF-P3DC network on synthetic tracklets and evaluate it
// on the query and gallery splits.
//
// `cargo run --release --example train_toy -- 300` trains for 300 steps.

use strf::backbone::{BlockVariant, Network, NetworkSpec};
use strf::reid::{evaluate_network, RetrievalResult, Split};
use strf::synth::{render, split_of, SynthSpec};
use strf::train::{TrainConfig, Trainer, LOG_HEADER};

pub struct ToyRun {
    pub losses: Vec<f32>,
    pub train_retrieval: RetrievalResult,
    pub test_retrieval: RetrievalResult,
}

/// Toy recipe: stride 1 so that consecutive frames carry the motion, no
/// augmentation, and a higher learning rate than the full-scale default.
pub fn toy_config(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        stride: 1,
        seed,
        max_steps: Some(steps),
        flip_probability: 0.0,
        erase_probability: 0.0,
        ..TrainConfig::default()
    }
}

pub fn run_toy(synth: &SynthSpec, variant: BlockVariant, strf: bool, seed: u64, steps: usize, verbose: bool) -> strf::Result<ToyRun> {
    let data = render(synth)?;
    let spec = NetworkSpec::toy(variant, strf, synth.identities)?;
    let mut net = Network::<f32>::build(&spec, seed)?;
    let mut trainer = Trainer::new(&net, &data, toy_config(seed, steps))?;
    if verbose {
        println!("{LOG_HEADER}");
    }
    let mut losses = Vec::new();
    for _ in 0..trainer.total_steps() {
        let r = trainer.step(&mut net)?;
        if verbose && (r.step % 10 == 0 || r.step + 1 == steps) {
            println!("{}", r.csv_line());
        }
        losses.push(r.total);
    }
    let train = split_of(&data, Split::Train);
    Ok(ToyRun {
        losses,
        train_retrieval: evaluate_network(&net, &train, &train, 4)?,
        test_retrieval: evaluate_network(&net, &split_of(&data, Split::Query), &split_of(&data, Split::Gallery), 4)?,
    })
}

pub fn run_example_with(steps: usize) -> strf::Result<ToyRun> {
    let synth = SynthSpec { seed: 1, ..SynthSpec::default() };
    let run = run_toy(&synth, BlockVariant::P3DC, true, 0, steps, true)?;
    println!("train R@1 {:.3}  test R@1 {:.3}  test mAP {:.3}", run.train_retrieval.rank(1), run.test_retrieval.rank(1), run.test_retrieval.map);
    Ok(run)
}

pub fn run_example() -> strf::Result<ToyRun> {
    run_example_with(12)
}

fn main() {
    let steps = std::env::args().nth(1).map_or(60, |s| s.parse().expect("step count"));
    run_example_with(steps).expect("toy training");
}
