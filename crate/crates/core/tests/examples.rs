//! Every example under `examples/` compiled into the test suite and run.

macro_rules! example {
    ($name:ident) => {
        mod $name {
            #![allow(dead_code)]
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", stringify!($name), ".rs"));
        }
    };
}

example!(strf_unit);
example!(gradient_check);
example!(parameter_accounting);
example!(synthetic_dataset);
example!(train_toy);
example!(retrieval_eval);
example!(attention_maps);
example!(checkpoint);
example!(command_line);
example!(ablation);
example!(appearance_twins);

#[test]
fn strf_unit_example() {
    let s = strf_unit::run_example().unwrap();
    assert!(s.worst_row_sum_error <= 1e-5);
    assert_eq!(s.outputs.len(), 3);
    for (_, out) in &s.outputs {
        assert_eq!(out.dims(), s.dims.as_slice());
        assert!(out.all_finite());
    }
}

#[test]
fn gradient_check_example() {
    let checks = gradient_check::run_example().unwrap();
    assert_eq!(checks.len(), 3);
    assert!(checks.iter().all(|c| c.passed()), "{checks:?}");
}

#[test]
fn parameter_accounting_example() {
    let a = parameter_accounting::run_example().unwrap();
    assert_eq!(a.strf_p3dc - a.p3dc, a.unit_sum);
    assert_eq!(a.unit_sum, 114_688);
    assert!(a.c2d < a.p3dc);
}

#[test]
fn synthetic_dataset_example() {
    let s = synthetic_dataset::run_example().unwrap();
    assert_eq!(s.tracklets, 8 * (4 + 2));
    assert!(s.round_trip_exact);
    assert!((s.twins[0].0 - s.twins[1].0).abs() <= 1e-6);
    assert!(s.twins[0].1 > s.twins[1].1);
}

#[test]
fn train_toy_example() {
    let run = train_toy::run_example().unwrap();
    assert_eq!(run.losses.len(), 12);
    assert!(run.losses.iter().all(|l| l.is_finite()));
    assert!(run.losses[11] < run.losses[0]);
}

#[test]
fn retrieval_eval_example() {
    let r = retrieval_eval::run_example().unwrap();
    let aps: Vec<f64> = r.ap.iter().map(|(_, a)| *a).collect();
    assert_eq!(aps, [1.0, 1.0, 1.0 / 3.0]);
    assert!((r.map - 7.0 / 9.0).abs() < 1e-12);
    assert!(r.skipped.is_empty());
}

#[test]
fn attention_maps_example() {
    let files = attention_maps::run_example().unwrap();
    // 8 frames at 3 stages
    assert_eq!(files.len(), 24);
    assert!(files.iter().any(|f| f.to_string_lossy() == "train-0000-c0_t000_2_007.pgm"));
}

#[test]
fn checkpoint_example() {
    assert!(checkpoint::run_example().unwrap());
}

#[test]
fn command_line_example() {
    let text = command_line::run_example().unwrap();
    assert!(text.contains("delta: 96"), "{text}");
    assert!(text.contains("wrote 24 tracklets"), "{text}");
}

#[test]
fn ablation_example() {
    let rows = ablation::run_example().unwrap();
    assert_eq!(rows.len(), 15);
    let single: Vec<_> = rows.iter().filter(|r| r.axis == "branches").collect();
    let all = rows.iter().find(|r| r.axis == "integration").unwrap();
    for r in single {
        assert_eq!(r.strf_params * 4, all.strf_params);
        assert!(r.final_loss.is_finite());
    }
}

#[test]
fn appearance_twins_example() {
    let res = appearance_twins::run_example().unwrap();
    assert_eq!(res.len(), 1);
    assert!((0.0..=1.0).contains(&res[0].strf_p3dc) && (0.0..=1.0).contains(&res[0].c2d));
}
