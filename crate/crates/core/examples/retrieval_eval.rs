// Rank a gallery by distance and compute CMC and mAP, skipping gallery
// entries that share both identity and camera with the query.

use strf::reid::{evaluate, Label, RetrievalResult};
use strf::Tensor;

pub fn run_example() -> strf::Result<RetrievalResult> {
    let l = |id, camera| Label { id, camera };
    let query = [l(0, 0), l(1, 0), l(2, 1)];
    // gallery entry 0 shares id and camera with query 0 and is ignored for it
    let gallery = [l(0, 0), l(1, 1), l(0, 1), l(2, 0), l(3, 1)];
    let dist = Tensor::<f64>::from_rows(&[
        &[0.0, 0.5, 0.2, 0.9, 0.8],
        &[0.6, 0.1, 0.3, 0.4, 0.7],
        &[0.5, 0.2, 0.9, 0.3, 0.1],
    ])?;
    let r = evaluate(&dist, &query, &gallery)?;
    print!("{}", r.report(&[1, 2, 5]));
    for (q, ap) in &r.ap {
        println!("query {q}: AP {ap:.4}");
    }
    Ok(r)
}

fn main() {
    run_example().expect("retrieval example");
}
