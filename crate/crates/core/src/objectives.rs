//! Training objective: softmax cross-entropy plus a batch-hard triplet loss
//! on cosine distances, summed with equal weights.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MARGIN: f64 = 0.3;

/// Embeddings (n x d) with one identity label per row.
#[derive(Debug, Clone)]
pub struct LabeledEmbeddings<T: Scalar = f32> {
    pub embeddings: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledEmbeddings<T> {
    pub fn new(embeddings: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.dims()[0] != labels.len() {
            return Err(Error::shape("labeled embeddings", embeddings.dims(), &[labels.len()]));
        }
        Ok(Self { embeddings, labels })
    }

    /// Every label must occur at least twice and two labels must exist.
    pub fn validate_for_mining(&self) -> Result<()> {
        check_mining_labels(&self.labels)
    }
}

fn check_mining_labels(labels: &[usize]) -> Result<()> {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if let Some((label, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Contract(format!(
            "label {label} occurs once; batch-hard mining needs a positive for every anchor"
        )));
    }
    if counts.len() < 2 {
        return Err(Error::Contract(format!(
            "batch-hard mining needs two distinct labels, got {:?}",
            counts.keys().collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// `1 - <u, v> / (|u| |v|)`, in [0, 2].
pub fn cosine_distance<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_distance", &[u.len()], &[v.len()]));
    }
    let sq = |w: &[T]| w.iter().map(|&a| a * a).sum::<T>();
    let (nu2, nv2) = (sq(u), sq(v));
    if nu2 == T::zero() || nv2 == T::zero() {
        return Err(Error::Domain("cosine distance of a zero vector".into()));
    }
    let dot: T = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    // one rounded sqrt keeps d(u, u) exactly 0
    let d = T::one() - dot / (nu2 * nv2).sqrt();
    let two = T::one() + T::one();
    Ok(d.max(T::zero()).min(two))
}

fn norm<T: Scalar>(u: &[T]) -> T {
    u.iter().map(|&a| a * a).sum::<T>().sqrt()
}

/// Gradient of `cosine_distance(u, v)` with respect to `u`.
fn cosine_distance_grad<T: Scalar>(u: &[T], v: &[T], out: &mut [T], scale: T) {
    let (nu, nv) = (norm(u), norm(v));
    let dot: T = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    let inv = T::one() / (nu * nv);
    let coef = dot / (nu * nu * nu * nv);
    for i in 0..u.len() {
        out[i] += scale * (coef * u[i] - v[i] * inv);
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy of `logits` (n x k).
pub fn cross_entropy_var<T: Scalar>(tape: &Tape<T>, logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
    let d = logits.dims();
    if d.len() != 2 || d[0] != labels.len() {
        return Err(Error::shape("cross_entropy", d, &[labels.len()]));
    }
    let k = d[1];
    check_labels(labels, k)?;
    let n = T::from_usize(labels.len()).unwrap();
    let mut probs = logits.value().clone();
    let mut loss = T::zero();
    for (row, &label) in probs.data_mut().chunks_mut(k).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[label];
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    let labels = labels.to_vec();
    Ok(tape.custom(&[logits], Tensor::scalar(loss / n), move |g, _| {
        let mut dx = probs.clone();
        for (row, &label) in dx.data_mut().chunks_mut(k).zip(&labels) {
            row[label] -= T::one();
        }
        vec![Some(dx.scale(g.data()[0] / n))]
    }))
}

/// Indices (anchor, hardest positive, hardest negative) plus distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_pos: f64,
    pub d_neg: f64,
}

/// Batch-hard mining on cosine distances. Ties resolve to the lowest index.
pub fn mine_hard_triplets<T: Scalar>(emb: &Tensor<T>, labels: &[usize]) -> Result<Vec<HardTriplet>> {
    check_mining_labels(labels)?;
    let n = labels.len();
    let dim = emb.dims()[1];
    let rows: Vec<&[T]> = emb.data().chunks(dim).collect();
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = cosine_distance(rows[i], rows[j])?.as_f64();
        }
    }
    Ok((0..n)
        .map(|a| {
            let (mut p, mut dp) = (usize::MAX, f64::NEG_INFINITY);
            let (mut q, mut dq) = (usize::MAX, f64::INFINITY);
            for j in 0..n {
                let d = dist[a * n + j];
                if labels[j] == labels[a] {
                    if j != a && d > dp {
                        p = j;
                        dp = d;
                    }
                } else if d < dq {
                    q = j;
                    dq = d;
                }
            }
            HardTriplet {
                anchor: a,
                positive: p,
                negative: q,
                d_pos: dp,
                d_neg: dq,
            }
        })
        .collect())
}

/// Distance to the nearest switch of a hinge or of a hardest-example choice.
fn mining_margin<T: Scalar>(emb: &Tensor<T>, labels: &[usize], triplets: &[HardTriplet], margin: f64) -> Result<f64> {
    let dim = emb.dims()[1];
    let rows: Vec<&[T]> = emb.data().chunks(dim).collect();
    let mut out = f64::INFINITY;
    for t in triplets {
        out = out.min((t.d_pos - t.d_neg + margin).abs());
        for j in 0..labels.len() {
            if j == t.anchor || j == t.positive || j == t.negative {
                continue;
            }
            let d = cosine_distance(rows[t.anchor], rows[j])?.as_f64();
            out = out.min(if labels[j] == labels[t.anchor] {
                t.d_pos - d
            } else {
                d - t.d_neg
            });
        }
    }
    Ok(out)
}

/// Mean over anchors of `max(0, d(a, p*) - d(a, n*) + margin)`.
pub fn batch_hard_triplet_var<T: Scalar>(
    tape: &Tape<T>,
    emb: &Var<T>,
    labels: &[usize],
    margin: f64,
) -> Result<Var<T>> {
    let d = emb.dims();
    if d.len() != 2 || d[0] != labels.len() {
        return Err(Error::shape("batch_hard_triplet", d, &[labels.len()]));
    }
    let triplets = mine_hard_triplets(emb.value(), labels)?;
    if tape.auditing() {
        tape.note_margin(mining_margin(emb.value(), labels, &triplets, margin)?);
        tape.note_pattern(triplets.iter().flat_map(|t| {
            let active = t.d_pos - t.d_neg + margin > 0.0;
            [t.positive as u64, t.negative as u64, active as u64]
        }));
    }
    let n = labels.len();
    let m = T::from_f64_lossy(margin);
    let mut loss = T::zero();
    let mut active = Vec::new();
    let rows: Vec<&[T]> = emb.value().data().chunks(d[1]).collect();
    for t in &triplets {
        let dp = cosine_distance(rows[t.anchor], rows[t.positive])?;
        let dn = cosine_distance(rows[t.anchor], rows[t.negative])?;
        let h = dp - dn + m;
        if h > T::zero() {
            loss += h;
            active.push(*t);
        }
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let value = emb.value().clone();
    let dim = d[1];
    Ok(tape.custom(&[emb], Tensor::scalar(loss * inv_n), move |g, _| {
        let s = g.data()[0] * inv_n;
        let mut dx = Tensor::zeros(value.dims());
        let e = value.data();
        let row = |i: usize| &e[i * dim..(i + 1) * dim];
        let out = dx.data_mut();
        for t in &active {
            let (a, p, q) = (t.anchor, t.positive, t.negative);
            cosine_distance_grad(row(a), row(p), &mut out[a * dim..(a + 1) * dim], s);
            cosine_distance_grad(row(p), row(a), &mut out[p * dim..(p + 1) * dim], s);
            cosine_distance_grad(row(a), row(q), &mut out[a * dim..(a + 1) * dim], -s);
            cosine_distance_grad(row(q), row(a), &mut out[q * dim..(q + 1) * dim], -s);
        }
        vec![Some(dx)]
    }))
}

/// Unweighted sum of the two terms.
pub fn total_loss_var<T: Scalar>(
    tape: &Tape<T>,
    logits: &Var<T>,
    emb: &Var<T>,
    labels: &[usize],
    margin: f64,
) -> Result<LossTerms<T>> {
    let ce = cross_entropy_var(tape, logits, labels)?;
    let triplet = batch_hard_triplet_var(tape, emb, labels, margin)?;
    let total = tape.add(&ce, &triplet)?;
    Ok(LossTerms { ce, triplet, total })
}

pub struct LossTerms<T: Scalar> {
    pub ce: Var<T>,
    pub triplet: Var<T>,
    pub total: Var<T>,
}

pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let tape = Tape::new();
    Ok(cross_entropy_var(&tape, &tape.constant(logits.clone()), labels)?.value().data()[0])
}

pub fn batch_hard_triplet<T: Scalar>(emb: &LabeledEmbeddings<T>, margin: f64) -> Result<T> {
    let tape = Tape::new();
    let v = tape.constant(emb.embeddings.clone());
    Ok(batch_hard_triplet_var(&tape, &v, &emb.labels, margin)?.value().data()[0])
}

pub fn total_loss<T: Scalar>(logits: &Tensor<T>, emb: &Tensor<T>, labels: &[usize], margin: f64) -> Result<T> {
    let tape = Tape::new();
    let terms = total_loss_var(
        &tape,
        &tape.constant(logits.clone()),
        &tape.constant(emb.clone()),
        labels,
        margin,
    )?;
    Ok(terms.total.value().data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = Tensor::<f64>::zeros(&[3, 4]);
        assert!((cross_entropy(&uniform, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sat = Tensor::<f64>::new(&[1, 3], vec![0.0, 1e4, 0.0]).unwrap();
        assert!(cross_entropy(&sat, &[1]).unwrap().abs() < 1e-12);
        let two = Tensor::<f64>::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let want = (1.0 + (-1f64).exp()).ln();
        assert!((cross_entropy(&two, &[1]).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_label() {
        let l = Tensor::<f32>::zeros(&[1, 2]);
        assert!(matches!(cross_entropy(&l, &[2]), Err(Error::Contract(_))));
    }

    #[test]
    fn cosine_distance_cases() {
        assert_eq!(cosine_distance(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((cosine_distance(&[1.0f64, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0f64, -2.0], &[-1.0, 2.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(cosine_distance(&[0.0f64, 0.0], &[1.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn degenerate_and_satisfied_triplets() {
        let same = LabeledEmbeddings::new(Tensor::<f64>::ones(&[4, 3]), vec![0, 0, 1, 1]).unwrap();
        assert!((batch_hard_triplet(&same, 0.3).unwrap() - 0.3).abs() < 1e-12);
        let e = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 1.0], &[0.0, 5.0]]).unwrap();
        let sep = LabeledEmbeddings::new(e, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(batch_hard_triplet(&sep, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn mining_contract_names_label() {
        let e = LabeledEmbeddings::new(Tensor::<f32>::ones(&[3, 2]), vec![0, 0, 7]).unwrap();
        let err = batch_hard_triplet(&e, 0.3).unwrap_err().to_string();
        assert!(err.contains("label 7"), "{err}");
        let one = LabeledEmbeddings::new(Tensor::<f32>::ones(&[2, 2]), vec![4, 4]).unwrap();
        assert!(one.validate_for_mining().is_err());
    }

    #[test]
    fn total_is_sum_of_terms() {
        let logits = Tensor::<f64>::zeros(&[4, 5]);
        let e = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]).unwrap();
        let labels = [0, 0, 1, 1];
        let t = total_loss(&logits, &e, &labels, 0.3).unwrap();
        assert!((t - 5f64.ln()).abs() < 1e-12);
    }
}
