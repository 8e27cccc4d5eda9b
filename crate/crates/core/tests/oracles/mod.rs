//! Explicit-loop reference implementations shared by the test targets.
#![allow(dead_code)]

use rand::{seq::SliceRandom, Rng};
use strf::kernels::PoolMode;
use strf::reid::Label;
use strf::strf::{Dimension, FamConfig};
use strf::Tensor;

pub fn uniform(dims: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// Mask computed with explicit loops: channel reduction, window pooling
/// over in-bounds neighbours, covariance, row softmax.
pub fn mask(f: &Tensor<f64>, cfg: &FamConfig, w: &Tensor<f64>) -> Vec<Vec<f64>> {
    let [c, t, h, wd] = [f.dims()[0], f.dims()[1], f.dims()[2], f.dims()[3]];
    let rows = w.dims()[0];
    let idx = |k: usize, ti: usize, y: usize, x: usize| ((k * t + ti) * h + y) * wd + x;
    let mut hf = vec![0.0; rows * t * h * wd];
    for k in 0..rows {
        for ti in 0..t {
            for y in 0..h {
                for x in 0..wd {
                    hf[idx(k, ti, y, x)] = (0..c).map(|ch| w.get(&[k, ch]) * f.get(&[ch, ti, y, x])).sum();
                }
            }
        }
    }
    let half = cfg.resolution as isize / 2;
    let (rt, rs) = match cfg.dimension {
        Dimension::Temporal => (half, 0),
        Dimension::Spatial => (0, half),
    };
    let mut g = vec![0.0; hf.len()];
    for k in 0..rows {
        for ti in 0..t {
            for y in 0..h {
                for x in 0..wd {
                    let mut vals = Vec::new();
                    for dt in -rt..=rt {
                        for dy in -rs..=rs {
                            for dx in -rs..=rs {
                                let (a, b, e) = (ti as isize + dt, y as isize + dy, x as isize + dx);
                                if (0..t as isize).contains(&a) && (0..h as isize).contains(&b) && (0..wd as isize).contains(&e) {
                                    vals.push(hf[idx(k, a as usize, b as usize, e as usize)]);
                                }
                            }
                        }
                    }
                    g[idx(k, ti, y, x)] = match cfg.pool {
                        PoolMode::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                        PoolMode::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
                    };
                }
            }
        }
    }
    let (m, n) = (rows * t, h * wd);
    let mut out = vec![vec![0.0; n]; n];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = cfg.temperature * (0..m).map(|r| g[r * n + i] * g[r * n + j]).sum::<f64>();
        }
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - mx).exp() / z);
    }
    out
}

/// `reshape(f) . m` with the (c t) x (h w) reshape written out.
pub fn apply(f: &Tensor<f64>, m: &[Vec<f64>]) -> Vec<f64> {
    let n = m.len();
    let rows = f.numel() / n;
    let mut out = vec![0.0; f.numel()];
    for r in 0..rows {
        for j in 0..n {
            out[r * n + j] = (0..n).map(|q| f.data()[r * n + q] * m[q][j]).sum();
        }
    }
    out
}

/// Random row-stochastic n x n matrix.
pub fn stochastic(n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    1.0 - dot / (nu * nv)
}

/// Enumerate every (anchor, positive, negative) triple; the batch-hard loss
/// is the per-anchor maximum of the hinge, averaged.
pub fn triplet(x: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                worst = worst.max(cosine(&x[a], &x[p]) - cosine(&x[a], &x[q]) + margin);
            }
        }
        total += worst.max(0.0);
    }
    total / n as f64
}

/// `n` embeddings of dimension `d` with every label used at least twice.
pub fn labeled_batch(rng: &mut impl Rng, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let ids = rng.gen_range(2..=n / 2);
    let mut labels: Vec<usize> = (0..n).map(|i| i % ids).collect();
    labels.shuffle(rng);
    let x = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    (x, labels)
}

pub fn rows_to_tensor(x: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(&[x.len(), x[0].len()], x.concat()).unwrap()
}

pub struct Retrieval {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub evaluated: usize,
}

/// Brute force without sorting: an entry's rank is the number of valid
/// entries strictly closer. Distances are continuous so ties do not occur.
pub fn retrieval(dist: &[Vec<f64>], query: &[Label], gallery: &[Label]) -> Retrieval {
    let g = gallery.len();
    let mut first_hits = Vec::new();
    let mut aps = Vec::new();
    for (q, row) in query.iter().zip(dist) {
        let valid = |j: usize| !(gallery[j].id == q.id && gallery[j].camera == q.camera);
        let relevant: Vec<usize> = (0..g).filter(|&j| valid(j) && gallery[j].id == q.id).collect();
        if relevant.is_empty() {
            continue;
        }
        let closer = |j: usize, pred: &dyn Fn(usize) -> bool| (0..g).filter(|&i| pred(i) && row[i] < row[j]).count();
        let ap: f64 = relevant
            .iter()
            .map(|&j| {
                let above_all = closer(j, &valid) + 1;
                let above_rel = closer(j, &|i| valid(i) && gallery[i].id == q.id) + 1;
                above_rel as f64 / above_all as f64
            })
            .sum::<f64>()
            / relevant.len() as f64;
        aps.push(ap);
        first_hits.push(relevant.iter().map(|&j| closer(j, &valid)).min().unwrap());
    }
    let n = aps.len();
    let cmc = (0..g).map(|k| first_hits.iter().filter(|&&r| r <= k).count() as f64 / n as f64).collect();
    Retrieval {
        cmc,
        map: aps.iter().sum::<f64>() / n as f64,
        evaluated: n,
    }
}

/// Random labels and distances; the first query always has a valid match.
pub fn retrieval_instance(rng: &mut impl Rng, nq: usize, ng: usize) -> (Vec<Vec<f64>>, Vec<Label>, Vec<Label>) {
    let ids = rng.gen_range(2..8);
    let label = |rng: &mut dyn rand::RngCore| Label {
        id: rng.gen_range(0..ids),
        camera: rng.gen_range(0..3),
    };
    let query: Vec<Label> = (0..nq).map(|_| label(rng)).collect();
    let mut gallery: Vec<Label> = (0..ng).map(|_| label(rng)).collect();
    gallery[0] = Label {
        id: query[0].id,
        camera: (query[0].camera + 1) % 3,
    };
    let dist = (0..nq).map(|_| (0..ng).map(|_| rng.gen_range(0.0..2.0)).collect()).collect();
    (dist, query, gallery)
}

/// Three queries whose nearest gallery entry is a same-id same-camera
/// duplicate; expected APs are 1, 1 and 1/3.
pub fn camera_fixture() -> (Tensor<f64>, Vec<Label>, Vec<Label>) {
    let l = |id, camera| Label { id, camera };
    let query = vec![l(0, 0), l(1, 0), l(2, 0)];
    let gallery = vec![l(0, 0), l(0, 1), l(1, 0), l(1, 2), l(2, 0), l(3, 1), l(2, 1)];
    let dist = Tensor::new(
        &[3, 7],
        vec![
            0.0, 0.2, 0.5, 0.6, 0.7, 0.8, 0.9, //
            0.5, 0.6, 0.0, 0.1, 0.7, 0.8, 0.9, //
            0.9, 0.8, 0.7, 0.6, 0.0, 0.1, 0.65,
        ],
    )
    .unwrap();
    (dist, query, gallery)
}
