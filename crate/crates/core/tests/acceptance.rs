//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Built with `harness = false` so the lines always print.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strf::backbone::{count_params, BlockVariant, NetworkSpec};
use strf::checks::{run_suite, CHECK_DIMS, TOLERANCE};
use strf::cli::Cli;
use strf::kernels::{conv_channel_mix, pool3d, PoolMode};
use strf::objectives::{batch_hard_triplet, LabeledEmbeddings};
use strf::reid::{evaluate, Label};
use strf::strf::{
    fam_mask, ffm_apply, reduced_channels, strf_forward, AttentionMask, Branch, Dimension, FamConfig, Integration,
    Kind, StrfConfig, StrfParams,
};
use strf::synth::SynthSpec;
use strf::Tensor;

mod oracles;

macro_rules! example {
    ($name:ident) => {
        mod $name {
            #![allow(dead_code)]
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", stringify!($name), ".rs"));
        }
    };
}

example!(train_toy);
example!(appearance_twins);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    assert!(CHECK_DIMS.iter().zip([1, 16, 4, 6, 3]).all(|(&a, b)| a <= b));
    let checks = run_suite().map_err(|e| e.to_string())?;
    let worst = checks.iter().map(|c| c.error).fold(0.0, f64::max);
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let elapsed = start.elapsed();
    ensure(
        failed.is_empty() && worst <= TOLERANCE && elapsed <= Duration::from_secs(300),
        format!("{} components, max rel err {worst:.2e}, {elapsed:.1?}, failing {failed:?}", checks.len()),
    )
}

fn mask_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = StrfConfig::default();
    let (mut worst_row, mut worst_uniform, mut worst_parallel) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let dims = [16, rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=3)];
        let p = StrfParams::<f32>::init(16, 16, &mut rng);
        let f = Tensor::<f32>::from_fn(&dims, |_| rng.gen_range(-2.0..2.0));
        let c: f32 = rng.gen_range(-2.0..2.0);
        let k = Tensor::<f32>::full(&dims, c);
        let n = (dims[2] * dims[3]) as f32;
        for b in Branch::ALL {
            let m = fam_mask(&f, &cfg.fam(b), p.get(b)).map_err(|e| e.to_string())?;
            worst_row = worst_row.max(m.row_sum_error());
            let u = fam_mask(&k, &cfg.fam(b), p.get(b)).map_err(|e| e.to_string())?;
            let dev = u.values().data().iter().map(|&v| (v - 1.0 / n).abs()).fold(0.0f32, f32::max);
            worst_uniform = worst_uniform.max(dev as f64);
        }
        let par = StrfConfig { integration: Integration::Parallel, ..cfg };
        let out = strf_forward(&k, &par, &p).map_err(|e| e.to_string())?;
        worst_parallel = worst_parallel.max(out.max_abs_diff(&k.scale(4.0)) as f64);
    }
    ensure(
        worst_row <= 1e-5 && worst_uniform <= 1e-5 && worst_parallel <= 1e-5,
        format!("row sum {worst_row:.1e}, uniform {worst_uniform:.1e}, parallel vs 4x {worst_parallel:.1e}"),
    )
}

fn identity_cases() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for _ in 0..100 {
        let x = Tensor::<f32>::from_fn(&[16, 4, 6, 3], |_| rng.gen_range(-5.0..5.0));
        for mode in [PoolMode::Max, PoolMode::Avg] {
            let y = pool3d(&x, [1, 1, 1], mode).map_err(|e| e.to_string())?;
            if !y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
                return Err("pool3d with kernel (1,1,1) altered its input".into());
            }
        }
        let cfg = StrfConfig { r_dynamic: 1, r_static: 1, ..StrfConfig::default() };
        let p = StrfParams::<f32>::init(16, 16, &mut rng);
        for b in Branch::ALL {
            let fam = cfg.fam(b);
            let h = conv_channel_mix(&x, p.get(b)).map_err(|e| e.to_string())?;
            let g = pool3d(&h, fam.kernel(), fam.pool).map_err(|e| e.to_string())?;
            if g != h {
                return Err(format!("pooling with r = 1 is not the identity on branch {}", b.short()));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} branch poolings and 200 unit-kernel poolings bit-identical"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let small = |rng: &mut ChaCha8Rng| [rng.gen_range(1..=8), rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=2)];
    let (mut e_mask, mut e_apply, mut e_tri, mut e_eval) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let dims = small(&mut rng);
        let cfg = FamConfig {
            dimension: if rng.gen() { Dimension::Temporal } else { Dimension::Spatial },
            kind: if rng.gen() { Kind::Dynamic } else { Kind::Static },
            resolution: [1, 3, 5][rng.gen_range(0..3)],
            pool: if rng.gen() { PoolMode::Max } else { PoolMode::Avg },
            reduction: [1, 2, 4, 16][rng.gen_range(0..4)],
            temperature: 4.0,
        };
        let f = oracles::uniform(&dims, &mut rng);
        let w = oracles::uniform(&[reduced_channels(dims[0], cfg.reduction), dims[0]], &mut rng);
        let got = fam_mask(&f, &cfg, &w).map_err(|e| e.to_string())?;
        for (a, b) in got.values().data().iter().zip(oracles::mask(&f, &cfg, &w).iter().flatten()) {
            e_mask = e_mask.max((a - b).abs());
        }

        let n = dims[2] * dims[3];
        let m = oracles::stochastic(n, &mut rng);
        let mask = AttentionMask::new(Tensor::new(&[n, n], m.concat()).unwrap()).map_err(|e| e.to_string())?;
        let got = ffm_apply(&f, &mask).map_err(|e| e.to_string())?;
        for (a, b) in got.data().iter().zip(oracles::apply(&f, &m)) {
            e_apply = e_apply.max((a - b).abs());
        }

        let (x, labels) = oracles::labeled_batch(&mut rng, 8, 4);
        let margin = rng.gen_range(0.0..1.0);
        let emb = LabeledEmbeddings::new(oracles::rows_to_tensor(&x), labels.clone()).unwrap();
        let got = batch_hard_triplet(&emb, margin).map_err(|e| e.to_string())?;
        e_tri = e_tri.max((got - oracles::triplet(&x, &labels, margin)).abs());

        let (nq, ng) = (rng.gen_range(1..=20), rng.gen_range(1..=50));
        let (dist, query, gallery) = oracles::retrieval_instance(&mut rng, nq, ng);
        let r = evaluate(&oracles::rows_to_tensor(&dist), &query, &gallery).map_err(|e| e.to_string())?;
        let o = oracles::retrieval(&dist, &query, &gallery);
        if r.ap.len() != o.evaluated {
            return Err("evaluated query count differs from the oracle".into());
        }
        e_eval = e_eval.max((r.map - o.map).abs());
        for (a, b) in r.cmc.iter().zip(&o.cmc) {
            e_eval = e_eval.max((a - b).abs());
        }
    }
    let worst = e_mask.max(e_apply).max(e_tri).max(e_eval);
    ensure(
        worst <= 1e-6,
        format!("200 instances each; fam_mask {e_mask:.1e}, ffm_apply {e_apply:.1e}, triplet {e_tri:.1e}, evaluate {e_eval:.1e}"),
    )
}

fn parameter_accounting() -> Outcome {
    let count = |strf: &[usize]| -> usize {
        count_params(&NetworkSpec::resnet50(BlockVariant::P3DC, &[2, 3], strf, 625).unwrap())
            .unwrap()
            .total
    };
    let (base, with) = (count(&[]), count(&[2, 3]));
    let dev = |got: usize, published: f64| got as f64 / published - 1.0;
    let (db, dw) = (dev(base, 25.48e6), dev(with, 25.53e6));
    let units = 4 * 4 * 128 * 128 / 16 + 6 * 4 * 256 * 256 / 16;

    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/paper.ini");
    let mut out = Vec::new();
    strf::cli::run(Cli::parse_from(["strf", "-c", cfg, "params"]), &mut out).map_err(|e| e.to_string())?;
    let report = String::from_utf8(out).unwrap();
    let documented = ["0.15M", "0.05M", "0.5M"].iter().all(|s| report.contains(s));
    ensure(
        db.abs() <= 0.03 && dw.abs() <= 0.03 && with - base == units && units == 114_688 && documented,
        format!(
            "baseline {base} ({:+.2}%), with STRF {with} ({:+.2}%), delta {} = {units}, published figures noted: {documented}",
            100.0 * db,
            100.0 * dw,
            with - base
        ),
    )
}

fn overfit_sanity() -> Outcome {
    let start = Instant::now();
    let synth = SynthSpec {
        seed: 1,
        twins_per_palette: 1,
        ..SynthSpec::default()
    };
    let run = train_toy::run_toy(&synth, BlockVariant::P3DC, true, 0, 300, false).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let again = train_toy::run_toy(&synth, BlockVariant::P3DC, true, 0, 300, false).map_err(|e| e.to_string())?;
    let r1 = run.train_retrieval.rank(1);
    let last = *run.losses.last().unwrap();
    let deterministic = run.losses == again.losses && run.train_retrieval == again.train_retrieval;
    ensure(
        r1 == 1.0 && last < 0.1 && run.losses.len() <= 300 && elapsed <= Duration::from_secs(900) && deterministic,
        format!(
            "{} steps, train R@1 {r1:.3}, final loss {last:.4}, {elapsed:.1?} per run, repeat identical: {deterministic}",
            run.losses.len()
        ),
    )
}

fn twin_benchmark() -> Outcome {
    let res = appearance_twins::run_benchmark(300, 3).map_err(|e| e.to_string())?;
    let n = res.len() as f64;
    let strf = res.iter().map(|r| r.strf_p3dc).sum::<f64>() / n;
    let c2d = res.iter().map(|r| r.c2d).sum::<f64>() / n;
    ensure(
        res.len() == 3 && strf > c2d,
        format!("mean test R@1 STRF-P3DC {strf:.3} vs C2D {c2d:.3} over 3 seeds ({:+.3})", strf - c2d),
    )
}

fn metric_fixtures() -> Outcome {
    let l = |id, camera| Label { id, camera };
    let perfect = Tensor::new(&[3, 3], vec![0.1, 0.9, 0.8, 0.7, 0.2, 0.9, 0.9, 0.8, 0.3]).unwrap();
    let p = evaluate(&perfect, &[l(0, 0), l(1, 0), l(2, 0)], &[l(0, 1), l(1, 1), l(2, 1)]).map_err(|e| e.to_string())?;
    let second = Tensor::new(&[1, 2], vec![0.5, 0.1]).unwrap();
    let s = evaluate(&second, &[l(0, 0)], &[l(0, 1), l(1, 1)]).map_err(|e| e.to_string())?;
    let (dist, query, gallery) = oracles::camera_fixture();
    let c = evaluate(&dist, &query, &gallery).map_err(|e| e.to_string())?;
    let aps: Vec<f64> = c.ap.iter().map(|x| x.1).collect();
    ensure(
        p.map == 1.0 && p.rank(1) == 1.0 && s.ap[0].1 == 0.5 && aps == [1.0, 1.0, 1.0 / 3.0],
        format!(
            "perfect mAP {} R@1 {}; rank-2 AP {}; camera fixture APs {aps:.3?}",
            p.map,
            p.rank(1),
            s.ap[0].1
        ),
    )
}

fn ablation_matrix() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ablation.csv");
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.ini");
    let mut out = Vec::new();
    let code = strf::cli::run(
        Cli::parse_from(["strf", "-c", cfg, "ablate", "--out", csv.to_str().unwrap()]),
        &mut out,
    )
    .map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let settings = |axis: &str| -> Vec<&str> { rows.iter().filter(|r| r[0] == axis).map(|r| r[1]).collect() };
    let integrations = settings("integration");
    let pools = settings("pool").join(" ");
    let branches = settings("branches");
    let resolutions = settings("resolution");
    let finite = rows.iter().all(|r| r[2..].iter().all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)));
    let elapsed = start.elapsed();
    ensure(
        code == 0
            && integrations.len() == 3
            && pools.contains("max")
            && pools.contains("avg")
            && branches.len() == 4
            && resolutions == ["1/1", "1/3", "1/5", "3/5"]
            && finite
            && elapsed <= Duration::from_secs(3600),
        format!("{} rows ({integrations:?}; {branches:?}; {resolutions:?}), all finite: {finite}, {elapsed:.1?}", rows.len()),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("mask laws", mask_laws),
        ("identity cases", identity_cases),
        ("oracle equivalence", oracle_equivalence),
        ("parameter accounting", parameter_accounting),
        ("overfit sanity", overfit_sanity),
        ("appearance-twin benchmark", twin_benchmark),
        ("metric fixtures", metric_fixtures),
        ("ablation matrix", ablation_matrix),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS - {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n} ({name}): FAIL - {detail}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
