// Compare tape gradients against central differences in double precision.
//
// Pass component names as arguments to check a subset, e.g.
// `cargo run --example gradient_check -- cross_entropy`.

use strf::checks::{component_names, run_component, ComponentCheck};

pub fn run_example_with(names: &[String]) -> strf::Result<Vec<ComponentCheck>> {
    let mut out = Vec::new();
    for name in names {
        let c = run_component(name)?;
        println!(
            "{:<34} rel err {:.2e}  margin {:.1e}  draw {}  {}",
            c.name,
            c.error,
            c.margin,
            c.seed,
            if c.passed() { "ok" } else { "FAIL" }
        );
        out.push(c);
    }
    Ok(out)
}

/// The unit in its default cascade plus both objectives.
pub fn run_example() -> strf::Result<Vec<ComponentCheck>> {
    let names: Vec<String> = component_names()
        .into_iter()
        .filter(|n| n.starts_with("strf_forward[temporal") || !n.contains('['))
        .collect();
    run_example_with(&names)
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let res = if args.is_empty() { run_example_with(&component_names()) } else { run_example_with(&args) };
    let all = res.expect("gradient check");
    if all.iter().any(|c| !c.passed()) {
        std::process::exit(1);
    }
}
