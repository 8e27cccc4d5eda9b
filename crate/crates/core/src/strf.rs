//! Spatio-temporal representation factorization.
//!
//! A feature volume `f` of dims (c, t, h, w) is viewed as a (c·t) x (h·w)
//! matrix. Each of the four factorization branches builds an attention mask
//!
//! ```text
//! T = pool(channel_mix(f, W))           (c/n)·t x h·w after reshaping
//! M = softmax_rows(kappa · Tᵀ T)        h·w x h·w
//! ```
//!
//! and re-weights the volume as `f · M`. The temporal branches pool with
//! kernel (r, 1, 1) and the spatial ones with (1, r, r); the dynamic/fine
//! branch uses the smaller resolution and the static/coarse branch the
//! larger one. Branch outputs of one dimension are summed, and the two
//! dimension outputs are composed in cascade or added in parallel.
//!
//! All operations accept a single volume (rank 4) or a batch (rank 5).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::PoolMode;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dimension {
    Temporal,
    Spatial,
}

/// Which factor of a dimension a branch extracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    /// Dynamic (temporal) or fine (spatial): the small resolution.
    Dynamic,
    /// Static (temporal) or coarse (spatial): the large resolution.
    Static,
}

/// One of the four (dimension, kind) branches, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    TemporalDynamic,
    TemporalStatic,
    SpatialFine,
    SpatialCoarse,
}

impl Branch {
    pub const ALL: [Branch; 4] = [
        Branch::TemporalDynamic,
        Branch::TemporalStatic,
        Branch::SpatialFine,
        Branch::SpatialCoarse,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn dimension(self) -> Dimension {
        match self {
            Branch::TemporalDynamic | Branch::TemporalStatic => Dimension::Temporal,
            Branch::SpatialFine | Branch::SpatialCoarse => Dimension::Spatial,
        }
    }

    pub fn kind(self) -> Kind {
        match self {
            Branch::TemporalDynamic | Branch::SpatialFine => Kind::Dynamic,
            Branch::TemporalStatic | Branch::SpatialCoarse => Kind::Static,
        }
    }

    pub fn of(dimension: Dimension, kind: Kind) -> Self {
        match (dimension, kind) {
            (Dimension::Temporal, Kind::Dynamic) => Branch::TemporalDynamic,
            (Dimension::Temporal, Kind::Static) => Branch::TemporalStatic,
            (Dimension::Spatial, Kind::Dynamic) => Branch::SpatialFine,
            (Dimension::Spatial, Kind::Static) => Branch::SpatialCoarse,
        }
    }

    /// Short name used in configs and parameter tables.
    pub fn short(self) -> &'static str {
        match self {
            Branch::TemporalDynamic => "td",
            Branch::TemporalStatic => "ts",
            Branch::SpatialFine => "sf",
            Branch::SpatialCoarse => "sc",
        }
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Branch::ALL
            .into_iter()
            .find(|b| b.short() == s)
            .ok_or_else(|| Error::Config(format!("unknown branch `{s}` (expected td, ts, sf, sc)")))
    }
}

/// Subset of enabled branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BranchSet([bool; 4]);

impl BranchSet {
    pub const ALL: BranchSet = BranchSet([true; 4]);

    pub fn only(branches: &[Branch]) -> Self {
        let mut set = [false; 4];
        for b in branches {
            set[b.index()] = true;
        }
        BranchSet(set)
    }

    pub fn contains(&self, b: Branch) -> bool {
        self.0[b.index()]
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn iter(&self) -> impl Iterator<Item = Branch> + '_ {
        Branch::ALL.into_iter().filter(|b| self.contains(*b))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }
}

impl Default for BranchSet {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for BranchSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::ALL {
            return f.write_str("all");
        }
        let names: Vec<_> = self.iter().map(Branch::short).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for BranchSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(Self::ALL);
        }
        let branches = s
            .split(['+', ','])
            .map(|p| p.trim().parse())
            .collect::<Result<Vec<Branch>>>()?;
        let set = Self::only(&branches);
        if set.is_empty() {
            return Err(Error::Config("empty branch set".into()));
        }
        Ok(set)
    }
}

/// How the temporal and spatial factorization outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Integration {
    #[default]
    TemporalThenSpatial,
    SpatialThenTemporal,
    Parallel,
}

impl Integration {
    pub const ALL: [Integration; 3] = [
        Integration::TemporalThenSpatial,
        Integration::SpatialThenTemporal,
        Integration::Parallel,
    ];
}

impl fmt::Display for Integration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Integration::TemporalThenSpatial => "temporal-then-spatial",
            Integration::SpatialThenTemporal => "spatial-then-temporal",
            Integration::Parallel => "parallel",
        })
    }
}

impl FromStr for Integration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal-then-spatial" | "t->s" => Ok(Integration::TemporalThenSpatial),
            "spatial-then-temporal" | "s->t" => Ok(Integration::SpatialThenTemporal),
            "parallel" | "||" => Ok(Integration::Parallel),
            other => Err(Error::Config(format!("unknown integration `{other}`"))),
        }
    }
}

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_TEMPERATURE: f64 = 4.0;

/// Configuration of a single factorized attention mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamConfig {
    pub dimension: Dimension,
    pub kind: Kind,
    pub resolution: usize,
    pub pool: PoolMode,
    pub reduction: usize,
    pub temperature: f64,
}

impl FamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "resolution must be odd and positive, got {}",
                self.resolution
            )));
        }
        if self.reduction == 0 {
            return Err(Error::Config("reduction must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn kernel(&self) -> [usize; 3] {
        let r = self.resolution;
        match self.dimension {
            Dimension::Temporal => [r, 1, 1],
            Dimension::Spatial => [1, r, r],
        }
    }
}

/// Channels kept by the reduction layer for `c` input channels.
pub fn reduced_channels(c: usize, reduction: usize) -> usize {
    c / reduction.min(c).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrfConfig {
    /// Dynamic (temporal) and fine (spatial) resolution.
    pub r_dynamic: usize,
    /// Static (temporal) and coarse (spatial) resolution.
    pub r_static: usize,
    pub temporal_pool: PoolMode,
    pub spatial_pool: PoolMode,
    pub integration: Integration,
    pub reduction: usize,
    pub temperature: f64,
    pub branches: BranchSet,
}

impl Default for StrfConfig {
    fn default() -> Self {
        Self {
            r_dynamic: 1,
            r_static: 3,
            temporal_pool: PoolMode::Max,
            spatial_pool: PoolMode::Max,
            integration: Integration::default(),
            reduction: DEFAULT_REDUCTION,
            temperature: DEFAULT_TEMPERATURE,
            branches: BranchSet::ALL,
        }
    }
}

impl StrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_static < self.r_dynamic {
            return Err(Error::Config(format!(
                "static resolution {} must not be smaller than dynamic resolution {}",
                self.r_static, self.r_dynamic
            )));
        }
        if self.branches.is_empty() {
            return Err(Error::Config("at least one branch must be enabled".into()));
        }
        for b in Branch::ALL {
            self.fam(b).validate()?;
        }
        Ok(())
    }

    pub fn fam(&self, branch: Branch) -> FamConfig {
        let dimension = branch.dimension();
        let kind = branch.kind();
        FamConfig {
            dimension,
            kind,
            resolution: match kind {
                Kind::Dynamic => self.r_dynamic,
                Kind::Static => self.r_static,
            },
            pool: match dimension {
                Dimension::Temporal => self.temporal_pool,
                Dimension::Spatial => self.spatial_pool,
            },
            reduction: self.reduction,
            temperature: self.temperature,
        }
    }
}

/// Row-stochastic (h·w) x (h·w) attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask<T: Scalar = f32> {
    values: Tensor<T>,
}

impl<T: Scalar> AttentionMask<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 2 || values.dims()[0] != values.dims()[1] {
            return Err(Error::shape("attention_mask", values.dims(), &[0, 0]));
        }
        Ok(Self { values })
    }

    pub fn uniform(side: usize) -> Self {
        Self {
            values: Tensor::full(&[side, side], T::one() / T::from_usize(side).unwrap()),
        }
    }

    pub fn side(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    /// Largest deviation of a row sum from one.
    pub fn row_sum_error(&self) -> f64 {
        self.values
            .data()
            .chunks(self.side())
            .map(|r| (r.iter().copied().sum::<T>().as_f64() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Reduction weights of the four branches, stored in [`Branch::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct StrfParams<T: Scalar = f32> {
    pub weights: [Tensor<T>; 4],
}

impl<T: Scalar> StrfParams<T> {
    /// Uniform fan-in initialization in ±sqrt(1/c).
    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let rows = reduced_channels(channels, reduction);
        let bound = (1.0 / channels as f64).sqrt();
        let mut make = || {
            Tensor::from_fn(&[rows, channels], |_| {
                T::from_f64_lossy(rng.gen_range(-bound..bound))
            })
        };
        Self {
            weights: [make(), make(), make(), make()],
        }
    }

    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let dims = [reduced_channels(channels, reduction), channels];
        Self {
            weights: std::array::from_fn(|_| Tensor::zeros(&dims)),
        }
    }

    pub fn get(&self, b: Branch) -> &Tensor<T> {
        &self.weights[b.index()]
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }
}

/// Learnable scalars of one full STRF unit on `c` channels.
pub fn strf_param_count(c: usize, n: usize) -> usize {
    4 * c * reduced_channels(c, n)
}

/// View a (c, t, h, w) volume as its (c·t) x (h·w) matrix.
pub fn reshape_to_matrix<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let d = f.dims();
    if d.len() != 4 {
        return Err(Error::shape("reshape_to_matrix", d, &[0; 4]));
    }
    f.reshape(&[d[0] * d[1], d[2] * d[3]])
}

/// Inverse of [`reshape_to_matrix`].
pub fn matrix_to_volume<T: Scalar>(m: &Tensor<T>, dims: [usize; 4]) -> Result<Tensor<T>> {
    if m.dims() != [dims[0] * dims[1], dims[2] * dims[3]] {
        return Err(Error::shape("matrix_to_volume", m.dims(), &dims));
    }
    m.reshape(&dims)
}

fn volume_dims(d: &[usize]) -> Result<(Option<usize>, [usize; 4])> {
    match d.len() {
        4 => Ok((None, [d[0], d[1], d[2], d[3]])),
        5 => Ok((Some(d[0]), [d[1], d[2], d[3], d[4]])),
        _ => Err(Error::shape("feature volume", d, &[0; 4])),
    }
}

fn matrix_dims(batch: Option<usize>, rows: usize, cols: usize) -> Vec<usize> {
    let mut v: Vec<usize> = batch.into_iter().collect();
    v.extend([rows, cols]);
    v
}

/// Differentiable attention mask. Returns (h·w, h·w), or (n, h·w, h·w) for
/// a batch.
pub fn fam_mask_var<T: Scalar>(
    tape: &Tape<T>,
    f: &Var<T>,
    cfg: &FamConfig,
    w: &Var<T>,
) -> Result<Var<T>> {
    cfg.validate()?;
    let (batch, [c, t, h, wd]) = volume_dims(f.dims())?;
    let rows = reduced_channels(c, cfg.reduction);
    if w.dims() != [rows, c] {
        return Err(Error::shape("fam_mask weights", w.dims(), &[rows, c]));
    }
    let reduced = tape.channel_mix(f, w)?;
    let pooled = tape.pool3d(&reduced, cfg.kernel(), cfg.pool)?;
    let tm = tape.reshape(&pooled, &matrix_dims(batch, rows * t, h * wd))?;
    let cov = tape.matmul_t(&tm, &tm, true, false)?;
    let scaled = tape.scale(&cov, T::from_f64_lossy(cfg.temperature));
    Ok(tape.softmax_rows(&scaled))
}

/// Differentiable `reshape(f) · M`, reshaped back to the dims of `f`.
pub fn ffm_apply_var<T: Scalar>(tape: &Tape<T>, f: &Var<T>, mask: &Var<T>) -> Result<Var<T>> {
    let (batch, [c, t, h, w]) = volume_dims(f.dims())?;
    let side = h * w;
    let m = mask.dims();
    let ok = m.len() >= 2
        && m[m.len() - 1] == side
        && m[m.len() - 2] == side
        && (m.len() == 2 || (m.len() == 3 && Some(m[0]) == batch));
    if !ok {
        return Err(Error::shape("ffm_apply", f.dims(), m));
    }
    let fm = tape.reshape(f, &matrix_dims(batch, c * t, side))?;
    let out = tape.matmul(&fm, mask)?;
    tape.reshape(&out, f.dims())
}

/// Sum of the enabled branch outputs along one dimension, or `None` when no
/// branch of that dimension is enabled.
pub fn ffm_branch_var<T: Scalar>(
    tape: &Tape<T>,
    f: &Var<T>,
    dimension: Dimension,
    cfg: &StrfConfig,
    weights: &[Var<T>; 4],
) -> Result<Option<Var<T>>> {
    let mut acc: Option<Var<T>> = None;
    for kind in [Kind::Dynamic, Kind::Static] {
        let b = Branch::of(dimension, kind);
        if !cfg.branches.contains(b) {
            continue;
        }
        let mask = fam_mask_var(tape, f, &cfg.fam(b), &weights[b.index()])?;
        let out = ffm_apply_var(tape, f, &mask)?;
        acc = Some(match acc {
            Some(prev) => tape.add(&prev, &out)?,
            None => out,
        });
    }
    Ok(acc)
}

/// Differentiable STRF unit. Output dims equal input dims.
pub fn strf_forward_var<T: Scalar>(
    tape: &Tape<T>,
    f: &Var<T>,
    cfg: &StrfConfig,
    weights: &[Var<T>; 4],
) -> Result<Var<T>> {
    cfg.validate()?;
    let cascade = |first: Dimension, second: Dimension| -> Result<Var<T>> {
        let mid = ffm_branch_var(tape, f, first, cfg, weights)?.unwrap_or_else(|| f.clone());
        Ok(ffm_branch_var(tape, &mid, second, cfg, weights)?.unwrap_or(mid))
    };
    match cfg.integration {
        Integration::TemporalThenSpatial => cascade(Dimension::Temporal, Dimension::Spatial),
        Integration::SpatialThenTemporal => cascade(Dimension::Spatial, Dimension::Temporal),
        Integration::Parallel => {
            let t = ffm_branch_var(tape, f, Dimension::Temporal, cfg, weights)?;
            let s = ffm_branch_var(tape, f, Dimension::Spatial, cfg, weights)?;
            match (t, s) {
                (Some(t), Some(s)) => tape.add(&t, &s),
                (Some(x), None) | (None, Some(x)) => Ok(x),
                (None, None) => unreachable!("validated non-empty branch set"),
            }
        }
    }
}

fn constants<T: Scalar>(tape: &Tape<T>, params: &StrfParams<T>) -> [Var<T>; 4] {
    std::array::from_fn(|i| tape.constant(params.weights[i].clone()))
}

/// Attention mask of one branch for a single (c, t, h, w) volume.
pub fn fam_mask<T: Scalar>(f: &Tensor<T>, cfg: &FamConfig, w: &Tensor<T>) -> Result<AttentionMask<T>> {
    if f.rank() != 4 {
        return Err(Error::shape("fam_mask", f.dims(), &[0; 4]));
    }
    let tape = Tape::new();
    let m = fam_mask_var(&tape, &tape.constant(f.clone()), cfg, &tape.constant(w.clone()))?;
    AttentionMask::new(m.value().clone())
}

pub fn ffm_apply<T: Scalar>(f: &Tensor<T>, mask: &AttentionMask<T>) -> Result<Tensor<T>> {
    if f.rank() != 4 {
        return Err(Error::shape("ffm_apply", f.dims(), mask.values.dims()));
    }
    let tape = Tape::new();
    let out = ffm_apply_var(
        &tape,
        &tape.constant(f.clone()),
        &tape.constant(mask.values.clone()),
    )?;
    Ok(out.value().clone())
}

/// Two-branch factorization along one dimension:
/// `f·M(dynamic) + f·M(static)`.
pub fn ffm_branch<T: Scalar>(
    f: &Tensor<T>,
    dynamic: (&FamConfig, &Tensor<T>),
    stat: (&FamConfig, &Tensor<T>),
) -> Result<Tensor<T>> {
    let (cd, wd) = dynamic;
    let (cs, ws) = stat;
    if cd.dimension != cs.dimension {
        return Err(Error::Config(
            "ffm_branch pairs must share one dimension".into(),
        ));
    }
    if cd.kind != Kind::Dynamic || cs.kind != Kind::Static {
        return Err(Error::Config(
            "ffm_branch expects a dynamic and a static mask config".into(),
        ));
    }
    let a = ffm_apply(f, &fam_mask(f, cd, wd)?)?;
    let b = ffm_apply(f, &fam_mask(f, cs, ws)?)?;
    a.add(&b)
}

pub fn strf_forward<T: Scalar>(f: &Tensor<T>, cfg: &StrfConfig, params: &StrfParams<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let ws = constants(&tape, params);
    Ok(strf_forward_var(&tape, &tape.constant(f.clone()), cfg, &ws)?
        .value()
        .clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fam(dimension: Dimension, kind: Kind, r: usize) -> FamConfig {
        FamConfig {
            dimension,
            kind,
            resolution: r,
            pool: PoolMode::Max,
            reduction: 16,
            temperature: 4.0,
        }
    }

    #[test]
    fn reshape_index_arithmetic() {
        let f = Tensor::<f32>::from_fn(&[2, 3, 4, 5], |i| i as f32);
        let m = reshape_to_matrix(&f).unwrap();
        assert_eq!(m.dims(), &[6, 20]);
        assert_eq!(m.get(&[5, 3]), f.get(&[1, 2, 0, 3]));
        let back = matrix_to_volume(&m, [2, 3, 4, 5]).unwrap();
        assert_eq!(back, f);
        assert!(reshape_to_matrix(&m).is_err());
    }

    #[test]
    fn hand_computed_mask() {
        // channel 0 = (1, 2), channel 1 = (3, 4) over two spatial sites
        let f = Tensor::<f64>::new(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let mut cfg = fam(Dimension::Spatial, Kind::Dynamic, 1);
        cfg.reduction = 2;
        let m = fam_mask(&f, &cfg, &w).unwrap();
        // T = [4, 6], C = 4 * [[16, 24], [24, 36]]
        let c = [[64.0f64, 96.0], [96.0, 144.0]];
        for (i, row) in c.iter().enumerate() {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for (j, v) in row.iter().enumerate() {
                assert!((m.values().get(&[i, j]) - v.exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_input_gives_uniform_masks() {
        let f = Tensor::<f32>::full(&[8, 3, 4, 2], 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = StrfParams::<f32>::init(8, 16, &mut rng);
        for b in Branch::ALL {
            for pool in [PoolMode::Max, PoolMode::Avg] {
                let mut cfg = StrfConfig::default().fam(b);
                cfg.pool = pool;
                let m = fam_mask(&f, &cfg, w.get(b)).unwrap();
                for &v in m.values().data() {
                    assert!((v - 1.0 / 8.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn even_resolution_is_rejected() {
        let f = Tensor::<f32>::ones(&[4, 2, 2, 2]);
        let cfg = fam(Dimension::Temporal, Kind::Static, 4);
        let w = Tensor::ones(&[1, 4]);
        assert!(matches!(fam_mask(&f, &cfg, &w), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_mask_averages_each_slice() {
        let f = Tensor::<f64>::from_fn(&[2, 2, 2, 3], |i| (i * i) as f64);
        let out = ffm_apply(&f, &AttentionMask::uniform(6)).unwrap();
        let m = reshape_to_matrix(&f).unwrap();
        for r in 0..4 {
            let mean = (0..6).map(|c| m.get(&[r, c])).sum::<f64>() / 6.0;
            for c in 0..6 {
                assert!((reshape_to_matrix(&out).unwrap().get(&[r, c]) - mean).abs() < 1e-12);
            }
        }
        let zero = ffm_apply(&Tensor::<f64>::zeros(&[2, 2, 2, 3]), &AttentionMask::uniform(6)).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        assert!(ffm_apply(&f, &AttentionMask::uniform(5)).is_err());
    }

    #[test]
    fn ffm_branch_rejects_mixed_dimensions() {
        let f = Tensor::<f32>::ones(&[4, 2, 2, 2]);
        let w = Tensor::ones(&[1, 4]);
        let a = fam(Dimension::Temporal, Kind::Dynamic, 1);
        let b = fam(Dimension::Spatial, Kind::Static, 3);
        assert!(matches!(ffm_branch(&f, (&a, &w), (&b, &w)), Err(Error::Config(_))));
    }

    #[test]
    fn param_counts() {
        assert_eq!(strf_param_count(128, 16), 4096);
        assert_eq!(strf_param_count(16, 16), 64);
        assert_eq!(4 * strf_param_count(128, 16) + 6 * strf_param_count(256, 16), 114_688);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(StrfParams::<f32>::init(128, 16, &mut rng).param_count(), 4096);
        assert_eq!(reduced_channels(8, 16), 1);
    }

    #[test]
    fn config_parsing() {
        assert_eq!("td+sc".parse::<BranchSet>().unwrap(), BranchSet::only(&[Branch::TemporalDynamic, Branch::SpatialCoarse]));
        assert_eq!("all".parse::<BranchSet>().unwrap(), BranchSet::ALL);
        assert!("xx".parse::<BranchSet>().is_err());
        assert_eq!("parallel".parse::<Integration>().unwrap(), Integration::Parallel);
        let bad = StrfConfig { r_dynamic: 5, r_static: 3, ..StrfConfig::default() };
        assert!(bad.validate().is_err());
    }
}
