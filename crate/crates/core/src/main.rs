use clap::Parser;
use strf::cli::{run, Cli};

fn main() {
    match run(Cli::parse(), std::io::stdout().lock()) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
