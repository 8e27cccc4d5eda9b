// Count learnable parameters of full-width ResNet-50 backbones with and
// without STRF in stages 2 and 3.

use strf::backbone::{count_params, BlockVariant, NetworkSpec};
use strf::strf::strf_param_count;

pub struct Accounting {
    pub c2d: usize,
    pub p3dc: usize,
    pub strf_p3dc: usize,
    pub unit_sum: usize,
}

pub fn run_example() -> strf::Result<Accounting> {
    let classes = 625;
    let c2d = count_params(&NetworkSpec::resnet50(BlockVariant::C2D, &[], &[], classes)?)?.total;
    let p3dc = count_params(&NetworkSpec::resnet50(BlockVariant::P3DC, &[2, 3], &[], classes)?)?.total;
    let spec = NetworkSpec::resnet50(BlockVariant::P3DC, &[2, 3], &[2, 3], classes)?;
    let table = count_params(&spec)?;
    let unit_sum: usize = spec
        .block_specs()
        .iter()
        .flatten()
        .filter_map(|b| b.strf.map(|s| strf_param_count(b.bottleneck(), s.reduction)))
        .sum();

    println!("c2d        {:>10}", c2d);
    println!("p3dc       {:>10}", p3dc);
    println!("strf-p3dc  {:>10}  (+{})", table.total, table.total - p3dc);
    println!("strf rows  {:>10}", table.strf_total());
    println!("units      {:>10}", unit_sum);
    Ok(Accounting {
        c2d,
        p3dc,
        strf_p3dc: table.total,
        unit_sum,
    })
}

fn main() {
    run_example().expect("parameter accounting");
}
