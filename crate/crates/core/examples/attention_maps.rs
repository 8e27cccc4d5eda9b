// Capture stage activations of a toy network for one tracklet and write
// per-frame activation maps as PGM images.

use strf::backbone::{BlockVariant, Network, NetworkSpec};
use strf::cli::export_attention;
use strf::synth::{render, SynthSpec};

pub fn run_example() -> strf::Result<Vec<std::path::PathBuf>> {
    let data = render(&SynthSpec { frames: 8, ..SynthSpec::default() })?;
    let net = Network::<f32>::build(&NetworkSpec::toy(BlockVariant::P3DC, true, 8)?, 0)?;
    let dir = tempfile::tempdir()?;
    let n = export_attention(&net, &data[0], 4, &[0, 2, 3], dir.path())?;
    let mut files: Vec<_> = std::fs::read_dir(dir.path())?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    files.sort();
    println!("{n} maps for {}", data[0].name);
    for f in files.iter().take(3) {
        println!("  {}", f.file_name().unwrap_or_default().to_string_lossy());
    }
    Ok(files.iter().map(|f| f.file_name().unwrap_or_default().into()).collect())
}

fn main() {
    run_example().expect("attention export");
}
