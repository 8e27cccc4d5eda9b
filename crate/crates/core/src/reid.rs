//! Clip sampling, tracklet features and retrieval metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Network;
use crate::error::{Error, Result};
use crate::objectives::cosine_distance;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// An ordered run of (3, h, w) frames of one identity seen by one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub frames: Vec<Tensor<f32>>,
    pub id: usize,
    pub camera: usize,
    pub split: Split,
    pub name: String,
}

impl Tracklet {
    pub fn new(frames: Vec<Tensor<f32>>, id: usize, camera: usize, split: Split, name: impl Into<String>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Contract("tracklet needs at least one frame".into()))?;
        if first.rank() != 3 || first.dims()[0] != 3 {
            return Err(Error::shape("tracklet", first.dims(), &[3, 0, 0]));
        }
        if let Some(bad) = frames.iter().find(|f| f.dims() != first.dims()) {
            return Err(Error::shape("tracklet", bad.dims(), first.dims()));
        }
        Ok(Self {
            frames,
            id,
            camera,
            split,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// (h, w) of every frame.
    pub fn frame_size(&self) -> [usize; 2] {
        let d = self.frames[0].dims();
        [d[1], d[2]]
    }

    /// Stack the given frames into a (3, t, h, w) clip.
    pub fn clip(&self, indices: &[usize]) -> Tensor<f32> {
        let [h, w] = self.frame_size();
        let plane = h * w;
        let t = indices.len();
        let mut out = vec![0.0f32; 3 * t * plane];
        for (k, &i) in indices.iter().enumerate() {
            let f = self.frames[i].data();
            for c in 0..3 {
                out[(c * t + k) * plane..(c * t + k + 1) * plane]
                    .copy_from_slice(&f[c * plane..(c + 1) * plane]);
            }
        }
        Tensor::new(&[3, t, h, w], out).expect("dims match by construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Test,
}

/// Frame indices of the clips drawn from a tracklet of `len` frames.
///
/// Train: one clip of `t` frames spaced by `stride` from a seeded random
/// start, wrapping around when the tracklet is too short. Test: consecutive
/// non-overlapping chunks, the last one padded with its final frame.
pub fn clip_indices(len: usize, t: usize, stride: usize, mode: SampleMode, seed: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 || t == 0 || stride == 0 {
        return Err(Error::Contract(format!(
            "clip sampling needs len, T and stride >= 1 (got {len}, {t}, {stride})"
        )));
    }
    match mode {
        SampleMode::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let span = (t - 1) * stride + 1;
            let start = if len >= span {
                rng.gen_range(0..=len - span)
            } else {
                rng.gen_range(0..len)
            };
            Ok(vec![(0..t).map(|i| (start + i * stride) % len).collect()])
        }
        SampleMode::Test => Ok((0..len.div_ceil(t))
            .map(|c| (0..t).map(|i| (c * t + i).min(len - 1)).collect())
            .collect()),
    }
}

/// Clips of dims (3, t, h, w) sampled from `tracklet`.
pub fn sample_clips(tracklet: &Tracklet, t: usize, stride: usize, mode: SampleMode, seed: u64) -> Result<Vec<Tensor<f32>>> {
    Ok(clip_indices(tracklet.len(), t, stride, mode, seed)?
        .iter()
        .map(|idx| tracklet.clip(idx))
        .collect())
}

/// Elementwise mean of clip features.
pub fn tracklet_feature<T: Scalar>(clips: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Contract("tracklet feature of zero clips".into()))?;
    let mut acc = first.clone();
    for c in &clips[1..] {
        acc.add_assign(c)?;
    }
    Ok(acc.scale(T::one() / T::from_usize(clips.len()).unwrap()))
}

/// Cosine distances between the rows of `q` (m, d) and `g` (n, d).
pub fn distance_matrix<T: Scalar>(q: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    if q.rank() != 2 || g.rank() != 2 || q.dims()[1] != g.dims()[1] {
        return Err(Error::shape("distance_matrix", q.dims(), g.dims()));
    }
    let d = q.dims()[1];
    let zero_row = |m: &Tensor<T>, which: &str| -> Result<()> {
        match m.data().chunks(d).position(|r| r.iter().all(|v| *v == T::zero())) {
            Some(i) => Err(Error::Domain(format!("{which} row {i} is the zero vector"))),
            None => Ok(()),
        }
    };
    zero_row(q, "query")?;
    zero_row(g, "gallery")?;
    let (m, n) = (q.dims()[0], g.dims()[0]);
    let mut out = Vec::with_capacity(m * n);
    for qi in q.data().chunks(d) {
        for gj in g.data().chunks(d) {
            out.push(cosine_distance(qi, gj)?);
        }
    }
    Tensor::new(&[m, n], out)
}

/// Identity and camera of one retrieval item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    pub id: usize,
    pub camera: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// `cmc[k]` is the fraction of evaluated queries matched within rank k+1.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// (query index, average precision) for every evaluated query.
    pub ap: Vec<(usize, f64)>,
    /// Queries without any valid gallery match.
    pub skipped: Vec<usize>,
}

impl RetrievalResult {
    /// CMC at 1-based `rank`, saturating at the gallery size.
    pub fn rank(&self, rank: usize) -> f64 {
        self.cmc[rank.clamp(1, self.cmc.len()) - 1]
    }

    pub fn report(&self, ranks: &[usize]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "queries evaluated: {}", self.ap.len());
        let _ = writeln!(s, "queries skipped: {}", self.skipped.len());
        let _ = writeln!(s, "mAP: {:.6}", self.map);
        for &r in ranks {
            let _ = writeln!(s, "R@{r}: {:.6}", self.rank(r));
        }
        s
    }

    /// Write `report.txt`, `cmc.csv` and `ap.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, ranks: &[usize]) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        let mut cmc = String::from("rank,cmc\n");
        for (k, v) in self.cmc.iter().enumerate() {
            let _ = writeln!(cmc, "{},{v:.6}", k + 1);
        }
        let mut ap = String::from("query_index,ap\n");
        for (q, v) in &self.ap {
            let _ = writeln!(ap, "{q},{v:.6}");
        }
        for (name, body) in [("report.txt", self.report(ranks)), ("cmc.csv", cmc), ("ap.csv", ap)] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::storage(path, e))?;
        }
        Ok(())
    }
}

/// Rank the gallery for every query and compute CMC and mAP.
///
/// Gallery entries sharing both identity and camera with the query are
/// ignored; ties in distance keep gallery order.
pub fn evaluate<T: Scalar>(dist: &Tensor<T>, query: &[Label], gallery: &[Label]) -> Result<RetrievalResult> {
    if dist.rank() != 2 || dist.dims() != [query.len(), gallery.len()] || gallery.is_empty() {
        return Err(Error::shape("evaluate", dist.dims(), &[query.len(), gallery.len()]));
    }
    let g = gallery.len();
    let mut hits = vec![0usize; g];
    let mut ap = Vec::new();
    let mut skipped = Vec::new();
    for (qi, q) in query.iter().enumerate() {
        let row = &dist.data()[qi * g..(qi + 1) * g];
        let mut order: Vec<usize> = (0..g)
            .filter(|&j| !(gallery[j].id == q.id && gallery[j].camera == q.camera))
            .collect();
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal));
        let relevant: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(_, &j)| gallery[j].id == q.id)
            .map(|(rank, _)| rank)
            .collect();
        let Some(&first) = relevant.first() else {
            skipped.push(qi);
            continue;
        };
        hits[first] += 1;
        let precision: f64 = relevant
            .iter()
            .enumerate()
            .map(|(i, &r)| (i + 1) as f64 / (r + 1) as f64)
            .sum();
        ap.push((qi, precision / relevant.len() as f64));
    }
    if ap.is_empty() {
        return Err(Error::Evaluation("no query has a valid gallery match".into()));
    }
    let n = ap.len() as f64;
    let mut acc = 0usize;
    let cmc = hits
        .iter()
        .map(|h| {
            acc += h;
            acc as f64 / n
        })
        .collect();
    let map = ap.iter().map(|(_, v)| v).sum::<f64>() / n;
    Ok(RetrievalResult { cmc, map, ap, skipped })
}

/// Tracklet embeddings (one row each) from test-mode clips, `batch` clips per
/// forward pass.
pub fn extract_features(net: &Network<f32>, tracklets: &[Tracklet], t: usize, batch: usize) -> Result<Tensor<f32>> {
    let mut rows = Vec::with_capacity(tracklets.len());
    for tr in tracklets {
        let clips = sample_clips(tr, t, 1, SampleMode::Test, 0)?;
        let mut feats = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(batch.max(1)) {
            let x = Tensor::stack(chunk)?;
            let f = net.forward_features(&x)?;
            feats.extend((0..chunk.len()).map(|i| f.index_axis0(i)));
        }
        rows.push(tracklet_feature(&feats)?);
    }
    Tensor::stack(&rows)
}

/// Labels of a tracklet list.
pub fn labels(tracklets: &[Tracklet]) -> Vec<Label> {
    tracklets
        .iter()
        .map(|t| Label {
            id: t.id,
            camera: t.camera,
        })
        .collect()
}

/// Extract features and evaluate `query` against `gallery`.
pub fn evaluate_network(
    net: &Network<f32>,
    query: &[Tracklet],
    gallery: &[Tracklet],
    t: usize,
) -> Result<RetrievalResult> {
    let q = extract_features(net, query, t, 8)?;
    let g = extract_features(net, gallery, t, 8)?;
    evaluate(&distance_matrix(&q, &g)?, &labels(query), &labels(gallery))
}
