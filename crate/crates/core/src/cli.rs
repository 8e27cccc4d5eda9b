//! Command-line front end. `main` parses a [`Cli`] and hands it to [`run`].

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::backbone::{attention_export, write_pgm, Network};
use crate::checks::{component_names, run_component, TOLERANCE};
use crate::config::{RunConfig, DEFAULT_CLASSES};
use crate::error::{Error, Result};
use crate::reid::{evaluate_network, sample_clips, SampleMode, Split, Tracklet};
use crate::strf::strf_param_count;
use crate::synth::{generate, split_of, tree_digest, MANIFEST};
use crate::tensor::Tensor;
use crate::train::train;

#[derive(Debug, Parser)]
#[command(name = "strf", version, about = "Spatio-temporal representation factorization for video re-id")]
pub struct Cli {
    /// Run configuration file; defaults apply when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference gradient check of every differentiable component.
    Gradcheck {
        /// Check only these components.
        #[arg(long)]
        component: Vec<String>,
    },
    /// Parameter accounting of the configured model against its STRF-free baseline.
    Params {
        /// Also print the per-tensor table.
        #[arg(long)]
        table: bool,
    },
    /// Write the configured synthetic dataset to disk.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Overrides `[data] seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train, writing log.csv, model.ini and checkpoint/ into `out`.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Overrides `[train] max_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Retrieval evaluation of a checkpoint on the query and gallery splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-frame activation maps of one tracklet as PGM images.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tracklet name as listed in the manifest.
        #[arg(long)]
        tracklet: String,
        #[arg(long)]
        out: PathBuf,
        /// Stages to export; 0 is the stem.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        stages: Vec<usize>,
    },
    /// Train and evaluate every setting of the `[ablate]` matrix.
    Ablate {
        /// CSV destination.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Execute `cli`, writing human-readable output to `out`. Returns the exit
/// status for a run that completed.
pub fn run(cli: Cli, mut out: impl Write) -> Result<i32> {
    let checkpoint_config = match &cli.command {
        Command::Eval { checkpoint, .. } | Command::ExportAttn { checkpoint, .. } => {
            Some(checkpoint.join("..").join("model.ini"))
        }
        _ => None,
    };
    let config = match (&cli.config, checkpoint_config) {
        (Some(p), _) => RunConfig::from_file(p)?,
        (None, Some(p)) if p.exists() => RunConfig::from_file(p)?,
        _ => RunConfig::default(),
    };
    match cli.command {
        Command::Gradcheck { component } => gradcheck(&component, out),
        Command::Params { table } => params(&config, table, out),
        Command::Synth { out: dir, seed } => {
            let mut spec = config.data.synth.clone();
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = generate(&spec, &dir)?;
            writeln!(
                out,
                "wrote {} tracklets to {} (digest {:016x})",
                data.len(),
                dir.join(MANIFEST).display(),
                tree_digest(&dir)?
            )?;
            Ok(0)
        }
        Command::Train { out: dir, steps } => train_command(config, &dir, steps, out),
        Command::Eval { checkpoint, out: dir } => {
            let data = config.data.tracklets()?;
            let net = load_network(&config, &data, &checkpoint)?;
            let r = evaluate_network(
                &net,
                &split_of(&data, Split::Query),
                &split_of(&data, Split::Gallery),
                config.train.t,
            )?;
            r.write(&dir, &config.eval.ranks)?;
            write!(out, "{}", r.report(&config.eval.ranks))?;
            Ok(0)
        }
        Command::ExportAttn {
            checkpoint,
            tracklet,
            out: dir,
            stages,
        } => {
            let data = config.data.tracklets()?;
            let net = load_network(&config, &data, &checkpoint)?;
            let t = data
                .iter()
                .find(|t| t.name == tracklet)
                .ok_or_else(|| Error::Config(format!("no tracklet named `{tracklet}`")))?;
            let n = export_attention(&net, t, config.train.t, &stages, &dir)?;
            writeln!(out, "wrote {n} maps to {}", dir.display())?;
            Ok(0)
        }
        Command::Ablate { out: path } => {
            let data = config.data.tracklets()?;
            let file = fs::File::create(&path).map_err(|e| Error::storage(&path, e))?;
            let rows = crate::ablate::run(&config.model, &config.train, &data, &config.ablate, file)?;
            writeln!(out, "{} settings written to {}", rows.len(), path.display())?;
            Ok(0)
        }
    }
}

fn gradcheck(only: &[String], mut out: impl Write) -> Result<i32> {
    let names = if only.is_empty() { component_names() } else { only.to_vec() };
    let mut worst: f64 = 0.0;
    writeln!(out, "{:<36} {:>12} {:>12} {:>5}", "component", "max_rel_err", "margin", "draw")?;
    for name in &names {
        let c = run_component(name)?;
        writeln!(
            out,
            "{:<36} {:>12.3e} {:>12.3e} {:>5} {}",
            c.name,
            c.error,
            c.margin,
            c.seed,
            if c.passed() { "ok" } else { "FAIL" }
        )?;
        worst = worst.max(c.error);
    }
    writeln!(out, "max relative error {worst:.3e} (tolerance {TOLERANCE:e})")?;
    Ok(if worst <= TOLERANCE { 0 } else { 1 })
}

fn params(config: &RunConfig, table: bool, mut out: impl Write) -> Result<i32> {
    let spec = config.model.network_spec(DEFAULT_CLASSES)?;
    let base = config.model.baseline().network_spec(DEFAULT_CLASSES)?;
    let with = crate::backbone::count_params(&spec)?;
    let without = crate::backbone::count_params(&base)?;
    let units: Vec<usize> = spec
        .block_specs()
        .iter()
        .flatten()
        .filter_map(|b| b.strf.map(|s| strf_param_count(b.bottleneck(), s.reduction)))
        .collect();
    if table {
        write!(out, "{}", with.render())?;
    }
    let m = |n: usize| n as f64 / 1e6;
    writeln!(out, "classes: {}", spec.num_classes)?;
    writeln!(out, "baseline: {} ({:.2}M)", without.total, m(without.total))?;
    writeln!(out, "with strf: {} ({:.2}M)", with.total, m(with.total))?;
    writeln!(out, "delta: {}", with.total - without.total)?;
    writeln!(
        out,
        "sum of strf_param_count over {} units: {} (per unit: {})",
        units.len(),
        units.iter().sum::<usize>(),
        units.iter().collect::<BTreeSet<_>>().iter().map(|u| u.to_string()).collect::<Vec<_>>().join(", ")
    )?;
    writeln!(
        out,
        "note: published overhead figures disagree with each other and are not matched here: \
         ~0.15M per unit, +0.05M overall (25.48M -> 25.53M), and ~0.5M in the comparison \
         with non-local blocks. The counts above follow 4*c*(c/min(n,c)) per unit."
    )?;
    Ok(0)
}

fn train_identities(data: &[Tracklet]) -> usize {
    split_of(data, Split::Train).iter().map(|t| t.id).collect::<BTreeSet<_>>().len()
}

fn train_command(mut config: RunConfig, dir: &Path, steps: Option<usize>, mut out: impl Write) -> Result<i32> {
    if steps.is_some() {
        config.train.max_steps = steps;
    }
    let data = config.data.tracklets()?;
    config.model.classes = Some(config.model.classes.unwrap_or(train_identities(&data)));
    let spec = config.model.network_spec(DEFAULT_CLASSES)?;
    let mut net = Network::<f32>::build(&spec, config.train.seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    let log_path = dir.join("log.csv");
    let log = fs::File::create(&log_path).map_err(|e| Error::storage(&log_path, e))?;
    let summary = train(&mut net, &data, &config.train, std::io::BufWriter::new(log))?;
    net.save_checkpoint(dir.join("checkpoint"))?;
    let ini = dir.join("model.ini");
    fs::write(&ini, config.to_ini()).map_err(|e| Error::storage(&ini, e))?;
    match summary.last {
        Some(r) => writeln!(
            out,
            "{} steps; last ce {:.4} triplet {:.4} total {:.4}",
            summary.steps, r.ce, r.triplet, r.total
        )?,
        None => writeln!(out, "0 steps")?,
    }
    Ok(0)
}

fn load_network(config: &RunConfig, data: &[Tracklet], checkpoint: &Path) -> Result<Network<f32>> {
    let spec = config.model.network_spec(train_identities(data))?;
    let mut net = Network::<f32>::build(&spec, 0)?;
    net.load_checkpoint(checkpoint)?;
    Ok(net)
}

/// Write `<tracklet>_<stage>_<frame>.pgm` for every frame of `tracklet`;
/// `/` in the tracklet name becomes `-`. Returns the number of files.
pub fn export_attention(net: &Network<f32>, tracklet: &Tracklet, t: usize, stages: &[usize], dir: &Path) -> Result<usize> {
    if let Some(s) = stages.iter().find(|&&s| s > 4) {
        return Err(Error::Config(format!("stage {s} out of range 0..=4")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    let stem = tracklet.name.replace('/', "-");
    let mut written = 0;
    for (chunk, clip) in sample_clips(tracklet, t, 1, SampleMode::Test, 0)?.into_iter().enumerate() {
        let cap = net.capture(&Tensor::stack(&[clip])?)?;
        for &stage in stages {
            let maps = attention_export(&cap, 0, stage)?;
            for f in 0..t {
                let frame = chunk * t + f;
                if frame >= tracklet.len() {
                    break;
                }
                let path = dir.join(format!("{stem}_{stage}_{frame:03}.pgm"));
                write_pgm(path, &maps.index_axis0(f))?;
                written += 1;
            }
        }
    }
    Ok(written)
}
