// Drive the command-line front end in process: parse a config, then run
// `params` and `synth` as `strf` would from a shell.

use clap::Parser;
use strf::cli::{run, Cli};
use strf::config::RunConfig;

const CONFIG: &str = "
[model]
width_divisor = 16
blocks = 1,1,1,1

[data]
identities = 4
frames = 8
";

pub fn run_example() -> strf::Result<String> {
    let dir = tempfile::tempdir()?;
    let cfg = RunConfig::parse(CONFIG, "inline")?;
    println!("variant {} strf stages {:?} classes {:?}", cfg.model.variant, cfg.model.strf_stages, cfg.model.classes);
    let path = dir.path().join("toy.ini");
    std::fs::write(&path, cfg.to_ini())?;

    let mut out = Vec::new();
    let args = ["strf", "params", "--config", path.to_str().unwrap_or_default()];
    let code = run(Cli::parse_from(args), &mut out)?;
    let data = dir.path().join("data");
    let args = ["strf", "synth", "--config", path.to_str().unwrap_or_default(), "--out", data.to_str().unwrap_or_default()];
    run(Cli::parse_from(args), &mut out)?;
    let text = String::from_utf8_lossy(&out).into_owned();
    print!("{text}");
    println!("exit {code}");
    Ok(text)
}

fn main() {
    run_example().expect("command line example");
}
