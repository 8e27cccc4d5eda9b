// Save a network to a checkpoint directory and load it into a freshly
// built network of the same layout.

use strf::backbone::{BlockVariant, Network, NetworkSpec, MANIFEST};

pub fn run_example() -> strf::Result<bool> {
    let spec = NetworkSpec::toy(BlockVariant::P3DC, true, 8)?;
    let trained = Network::<f32>::build(&spec, 11)?;
    let dir = tempfile::tempdir()?;
    trained.save_checkpoint(dir.path())?;
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST))?;
    for line in manifest.lines().take(4) {
        println!("{line}");
    }
    let mut restored = Network::<f32>::build(&spec, 0)?;
    restored.load_checkpoint(dir.path())?;
    let same = trained.params().iter().zip(restored.params()).all(|(a, b)| a.value == b.value);
    println!("{} tensors restored, identical: {same}", restored.params().len());
    Ok(same)
}

fn main() {
    run_example().expect("checkpoint round trip");
}
