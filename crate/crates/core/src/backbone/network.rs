use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{BlockSpec, BlockVariant, NetworkSpec};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{Conv3dParams, Padding, PoolMode, Window};
use crate::strf::{reduced_channels, strf_forward_var, StrfConfig};
use crate::tensor::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight { fan_in: usize },
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
    StrfWeight { channels: usize },
    ClassifierWeight { fan_in: usize },
    ClassifierBias,
}

impl ParamRole {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub role: ParamRole,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    conv: usize,
    bn: [usize; 4],
    params: Conv3dParams,
}

#[derive(Debug, Clone)]
struct Block {
    spec: BlockSpec,
    conv1: ConvBn,
    /// 1x3x3 for C2D/P3D, 3x3x3 for I3D.
    spatial: ConvBn,
    /// 3x1x1, P3D variants only.
    temporal: Option<ConvBn>,
    strf: Option<[usize; 4]>,
    conv3: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Debug, Clone)]
struct Layout {
    params: Vec<ParamSpec>,
    stem: ConvBn,
    stages: Vec<Vec<Block>>,
    classifier: [usize; 2],
}

struct LayoutBuilder {
    params: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, dims: Vec<usize>, role: ParamRole) -> usize {
        self.params.push(ParamSpec { name, dims, role });
        self.params.len() - 1
    }

    fn conv_bn(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
    ) -> ConvBn {
        let fan_in = c_in * kernel.iter().product::<usize>();
        let conv = self.push(
            format!("{name}.weight"),
            vec![c_out, c_in, kernel[0], kernel[1], kernel[2]],
            ParamRole::ConvWeight { fan_in },
        );
        let bn = [
            self.push(format!("{name}.bn.scale"), vec![c_out], ParamRole::BnScale),
            self.push(format!("{name}.bn.shift"), vec![c_out], ParamRole::BnShift),
            self.push(format!("{name}.bn.running_mean"), vec![c_out], ParamRole::BnRunningMean),
            self.push(format!("{name}.bn.running_var"), vec![c_out], ParamRole::BnRunningVar),
        ];
        ConvBn {
            conv,
            bn,
            params: Conv3dParams {
                stride,
                padding: Padding::Same,
            },
        }
    }

    fn block(&mut self, name: &str, spec: &BlockSpec) -> Block {
        let b = spec.bottleneck();
        let s = spec.spatial_stride;
        let conv1 = self.conv_bn(&format!("{name}.conv1"), spec.in_width, b, [1, 1, 1], [1, 1, 1]);
        let spatial_kernel = if spec.variant == BlockVariant::I3D {
            [3, 3, 3]
        } else {
            [1, 3, 3]
        };
        let spatial = self.conv_bn(&format!("{name}.conv2"), b, b, spatial_kernel, [1, s, s]);
        let temporal = matches!(
            spec.variant,
            BlockVariant::P3DA | BlockVariant::P3DB | BlockVariant::P3DC
        )
        .then(|| {
            // the parallel branch of P3D-B reads the block input and must stride too
            let ts = if spec.variant == BlockVariant::P3DB { s } else { 1 };
            self.conv_bn(&format!("{name}.conv2t"), b, b, [3, 1, 1], [1, ts, ts])
        });
        let strf = spec.strf.as_ref().map(|cfg| {
            let rows = reduced_channels(b, cfg.reduction);
            std::array::from_fn(|i| {
                let branch = crate::strf::Branch::ALL[i];
                self.push(
                    format!("{name}.strf.{}", branch.short()),
                    vec![rows, b],
                    ParamRole::StrfWeight { channels: b },
                )
            })
        });
        let conv3 = self.conv_bn(&format!("{name}.conv3"), b, spec.out_width, [1, 1, 1], [1, 1, 1]);
        let shortcut = spec.needs_projection().then(|| {
            self.conv_bn(
                &format!("{name}.shortcut"),
                spec.in_width,
                spec.out_width,
                [1, 1, 1],
                [1, s, s],
            )
        });
        Block {
            spec: spec.clone(),
            conv1,
            spatial,
            temporal,
            strf,
            conv3,
            shortcut,
        }
    }
}

fn layout(spec: &NetworkSpec) -> Result<Layout> {
    spec.validate()?;
    let mut lb = LayoutBuilder { params: Vec::new() };
    let stem = lb.conv_bn("stem", 3, spec.stem_width, spec.stem_kernel, [1, 2, 2]);
    let stages = spec
        .block_specs()
        .iter()
        .enumerate()
        .map(|(si, blocks)| {
            blocks
                .iter()
                .enumerate()
                .map(|(bi, b)| lb.block(&format!("stage{}.block{}", si + 1, bi), b))
                .collect()
        })
        .collect();
    let d = spec.feature_dim();
    let classifier = [
        lb.push(
            "classifier.weight".into(),
            vec![spec.num_classes, d],
            ParamRole::ClassifierWeight { fan_in: d },
        ),
        lb.push("classifier.bias".into(), vec![spec.num_classes], ParamRole::ClassifierBias),
    ];
    Ok(Layout {
        params: lb.params,
        stem,
        stages,
        classifier,
    })
}

/// Ordered parameter specs of a network (learnable tensors and buffers).
pub fn param_specs(spec: &NetworkSpec) -> Result<Vec<ParamSpec>> {
    Ok(layout(spec)?.params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub name: String,
    pub dims: Vec<usize>,
    pub count: usize,
}

/// Learnable parameter counts per tensor, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
    pub total: usize,
}

impl ParamTable {
    /// Sum over rows whose name contains `needle`.
    pub fn sum_matching(&self, needle: &str) -> usize {
        self.rows
            .iter()
            .filter(|r| r.name.contains(needle))
            .map(|r| r.count)
            .sum()
    }

    /// Sum over STRF reduction weights.
    pub fn strf_total(&self) -> usize {
        self.sum_matching(".strf.")
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!("{:<40} {:>20} {:>12}\n", r.name, format!("{:?}", r.dims), r.count));
        }
        out.push_str(&format!("{:<40} {:>20} {:>12}\n", "total", "", self.total));
        out
    }
}

/// Count learnable scalars (running statistics excluded).
pub fn count_params(spec: &NetworkSpec) -> Result<ParamTable> {
    let rows: Vec<ParamRow> = param_specs(spec)?
        .into_iter()
        .filter(|p| p.role.learnable())
        .map(|p| ParamRow {
            count: p.numel(),
            name: p.name,
            dims: p.dims,
        })
        .collect();
    let total = rows.iter().map(|r| r.count).sum();
    Ok(ParamTable { rows, total })
}

/// A parameter tensor (or batch-norm buffer) owned by a network.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub spec: ParamSpec,
    pub value: Arc<Tensor<T>>,
}

/// Options for a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Record learnable parameters as differentiable leaves.
    pub track_params: bool,
    /// Keep the output activation of every stage.
    pub capture: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            track_params: false,
            capture: false,
        }
    }

    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            track_params: true,
            capture: false,
        }
    }
}

/// Pending running-statistics update from a train-mode pass.
#[derive(Debug, Clone)]
pub struct BnUpdate<T: Scalar> {
    bn: [usize; 4],
    mean: Tensor<T>,
    var: Tensor<T>,
}

pub struct ForwardOutput<T: Scalar> {
    /// (n, feature_dim) pooled clip embeddings.
    pub features: Var<T>,
    /// (n, num_classes) classifier scores.
    pub logits: Var<T>,
    /// One variable per network parameter, in parameter order.
    pub param_vars: Vec<Var<T>>,
    pub bn_updates: Vec<BnUpdate<T>>,
    /// Stage outputs (n, c, t, h, w) for stages 1..=4 when captured.
    pub captures: Option<Vec<Tensor<T>>>,
    /// Stem output when captured.
    pub stem_capture: Option<Tensor<T>>,
}

impl<T: Scalar> ForwardOutput<T> {
    /// Captured output of `stage` (1-based).
    pub fn stage_activation(&self, stage: usize) -> Result<&Tensor<T>> {
        let caps = self.captures.as_ref().ok_or_else(|| {
            Error::Contract("forward pass was run without activation capture".into())
        })?;
        stage
            .checked_sub(1)
            .and_then(|i| caps.get(i))
            .ok_or_else(|| Error::Contract(format!("no captured activation for stage {stage}")))
    }
}

/// Residual 3-D network with a pooled-feature head and linear classifier.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    spec: NetworkSpec,
    layout: Layout,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Network<T> {
    /// Deterministic initialization from `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let layout = layout(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .params
            .iter()
            .map(|p| Param {
                value: Arc::new(init_tensor(p, &mut rng)),
                spec: p.clone(),
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layout,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.spec.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_index(name).map(|i| self.params[i].value.as_ref())
    }

    /// Replace a parameter tensor; dims must match.
    pub fn set_param(&mut self, index: usize, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(index)
            .ok_or_else(|| Error::Contract(format!("no parameter #{index}")))?;
        if value.dims() != p.spec.dims.as_slice() {
            return Err(Error::shape("set_param", value.dims(), &p.spec.dims));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access for in-place optimizer updates.
    pub fn param_mut(&mut self, index: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[index].value)
    }

    pub fn count_params(&self) -> ParamTable {
        count_params(&self.spec).expect("spec validated at build time")
    }

    /// Indices of the STRF weight tensors, grouped per unit.
    pub fn strf_units(&self) -> Vec<[usize; 4]> {
        self.layout
            .stages
            .iter()
            .flatten()
            .filter_map(|b| b.strf)
            .collect()
    }

    /// Run the network on clips of dims (n, 3, t, h, w).
    pub fn forward(&self, tape: &Tape<T>, clips: &Var<T>, opts: ForwardOptions) -> Result<ForwardOutput<T>> {
        let d = clips.dims();
        if d.len() != 5 || d[1] != 3 {
            return Err(Error::shape("forward", d, &[0, 3, 0, 0, 0]));
        }
        let param_vars = self
            .params
            .iter()
            .map(|p| {
                let grad = opts.track_params && p.spec.role.learnable();
                tape.leaf(p.value.clone(), grad)
            })
            .collect();
        let mut ctx = Ctx {
            tape,
            vars: param_vars,
            mode: opts.mode,
            updates: Vec::new(),
        };
        let l = &self.layout;
        let x = ctx.conv_bn(clips, &l.stem, true)?;
        let win = Window::with_pad(
            [x.dims()[2], x.dims()[3], x.dims()[4]],
            [1, 3, 3],
            [1, 2, 2],
            [0, 1, 1],
        )?;
        let mut x = tape.pool(&x, win, PoolMode::Max);
        let stem_capture = opts.capture.then(|| x.value().clone());
        let mut captures = opts.capture.then(Vec::new);
        for stage in &l.stages {
            for block in stage {
                x = ctx.block(&x, block)?;
            }
            if let Some(c) = captures.as_mut() {
                c.push(x.value().clone());
            }
        }
        let features = tape.global_avg_pool(&x)?;
        let [w, b] = l.classifier;
        let logits = tape.linear(&features, &ctx.vars[w], &ctx.vars[b])?;
        Ok(ForwardOutput {
            features,
            logits,
            param_vars: ctx.vars,
            bn_updates: ctx.updates,
            captures,
            stem_capture,
        })
    }

    /// Fold train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for u in updates {
            for (slot, batch) in [(u.bn[2], &u.mean), (u.bn[3], &u.var)] {
                let run = self.param_mut(slot);
                run.data_mut()
                    .iter_mut()
                    .zip(batch.data())
                    .for_each(|(r, &v)| *r = (T::one() - m) * *r + m * v);
            }
        }
    }

    /// Eval-mode embeddings, one row per clip.
    pub fn forward_features(&self, clips: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let x = tape.constant(clips.clone());
        let out = self.forward(&tape, &x, ForwardOptions::eval())?;
        Ok(out.features.value().clone())
    }

    /// Eval-mode pass that keeps every stage output.
    pub fn capture(&self, clips: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let tape = Tape::new();
        let x = tape.constant(clips.clone());
        self.forward(
            &tape,
            &x,
            ForwardOptions {
                capture: true,
                ..ForwardOptions::eval()
            },
        )
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    spec: p.spec.clone(),
                    value: Arc::new(p.value.cast()),
                })
                .collect(),
        }
    }
}

/// A single residual block with its own parameters, for unit-level checks.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T: Scalar = f32> {
    block: Block,
    params: Vec<Param<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn build(spec: &BlockSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut lb = LayoutBuilder { params: Vec::new() };
        let block = lb.block("block", spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = lb
            .params
            .into_iter()
            .map(|p| Param {
                value: Arc::new(init_tensor(&p, &mut rng)),
                spec: p,
            })
            .collect();
        Ok(Self { block, params })
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.block.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    /// Forward with caller-provided variables, one per parameter in order.
    pub fn forward_with(&self, tape: &Tape<T>, x: &Var<T>, vars: Vec<Var<T>>, mode: Mode) -> Result<Var<T>> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "block takes {} parameter variables, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let d = x.dims();
        if d.len() != 5 || d[1] != self.block.spec.in_width {
            return Err(Error::shape("block", d, &[0, self.block.spec.in_width, 0, 0, 0]));
        }
        let mut ctx = Ctx {
            tape,
            vars,
            mode,
            updates: Vec::new(),
        };
        ctx.block(x, &self.block)
    }

    /// Forward with the block's own parameters as constants.
    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone(), false)).collect();
        self.forward_with(tape, x, vars, mode)
    }
}

fn init_tensor<T: Scalar>(p: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let uniform = |rng: &mut ChaCha8Rng, bound: f64| {
        Tensor::from_fn(&p.dims, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
    };
    match p.role {
        // He-uniform for rectified layers
        ParamRole::ConvWeight { fan_in } => uniform(rng, (6.0 / fan_in as f64).sqrt()),
        ParamRole::StrfWeight { channels } => uniform(rng, (1.0 / channels as f64).sqrt()),
        ParamRole::ClassifierWeight { fan_in } => uniform(rng, (1.0 / fan_in as f64).sqrt()),
        ParamRole::BnScale | ParamRole::BnRunningVar => Tensor::ones(&p.dims),
        ParamRole::BnShift | ParamRole::BnRunningMean | ParamRole::ClassifierBias => {
            Tensor::zeros(&p.dims)
        }
    }
}

struct Ctx<'a, T: Scalar> {
    tape: &'a Tape<T>,
    vars: Vec<Var<T>>,
    mode: Mode,
    updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn conv(&self, x: &Var<T>, cb: &ConvBn) -> Result<Var<T>> {
        self.tape.conv3d(x, &self.vars[cb.conv], cb.params)
    }

    fn bn(&mut self, x: &Var<T>, cb: &ConvBn, relu: bool) -> Result<Var<T>> {
        let v = &self.vars;
        let (y, stats) = batch_norm(
            self.tape,
            x,
            &v[cb.bn[0]],
            &v[cb.bn[1]],
            v[cb.bn[2]].value(),
            v[cb.bn[3]].value(),
            self.mode,
        )?;
        if let Some((mean, var)) = stats {
            self.updates.push(BnUpdate {
                bn: cb.bn,
                mean,
                var,
            });
        }
        Ok(if relu { self.tape.relu(&y) } else { y })
    }

    fn conv_bn(&mut self, x: &Var<T>, cb: &ConvBn, relu: bool) -> Result<Var<T>> {
        let y = self.conv(x, cb)?;
        self.bn(&y, cb, relu)
    }

    fn strf(&self, x: &Var<T>, cfg: &StrfConfig, idx: &[usize; 4]) -> Result<Var<T>> {
        let ws = std::array::from_fn(|i| self.vars[idx[i]].clone());
        strf_forward_var(self.tape, x, cfg, &ws)
    }

    /// Temporal convolution, optional STRF, then BN + ReLU.
    fn temporal_path(&mut self, x: &Var<T>, block: &Block, cb: &ConvBn) -> Result<Var<T>> {
        let mut t = self.conv(x, cb)?;
        if let (Some(idx), Some(cfg)) = (&block.strf, &block.spec.strf) {
            t = self.strf(&t, cfg, idx)?;
        }
        self.bn(&t, cb, true)
    }

    fn block(&mut self, x: &Var<T>, block: &Block) -> Result<Var<T>> {
        let h = self.conv_bn(x, &block.conv1, true)?;
        let mid = match block.spec.variant {
            BlockVariant::C2D => self.conv_bn(&h, &block.spatial, true)?,
            BlockVariant::I3D => self.temporal_path(&h, block, &block.spatial)?,
            BlockVariant::P3DA => {
                let s = self.conv_bn(&h, &block.spatial, true)?;
                self.temporal_path(&s, block, block.temporal.as_ref().unwrap())?
            }
            BlockVariant::P3DB => {
                let s = self.conv_bn(&h, &block.spatial, true)?;
                let t = self.temporal_path(&h, block, block.temporal.as_ref().unwrap())?;
                self.tape.add(&s, &t)?
            }
            BlockVariant::P3DC => {
                let s = self.conv_bn(&h, &block.spatial, true)?;
                let t = self.temporal_path(&s, block, block.temporal.as_ref().unwrap())?;
                self.tape.add(&s, &t)?
            }
        };
        let out = self.conv_bn(&mid, &block.conv3, false)?;
        let short = match &block.shortcut {
            Some(cb) => self.conv_bn(x, cb, false)?,
            None => x.clone(),
        };
        let sum = self.tape.add(&out, &short)?;
        Ok(self.tape.relu(&sum))
    }
}

/// Per-channel batch normalization over (n, t, h, w) of a (n, c, t, h, w)
/// input. Train mode normalizes with batch statistics and also returns them
/// (mean, unbiased variance) for the running estimates.
#[allow(clippy::type_complexity)]
pub fn batch_norm<T: Scalar>(
    tape: &Tape<T>,
    x: &Var<T>,
    scale: &Var<T>,
    shift: &Var<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: Mode,
) -> Result<(Var<T>, Option<(Tensor<T>, Tensor<T>)>)> {
    let d = x.dims().to_vec();
    if d.len() != 5 || scale.dims() != [d[1]] || shift.dims() != [d[1]] {
        return Err(Error::shape("batch_norm", &d, scale.dims()));
    }
    let (n, c, vol) = (d[0], d[1], d[2] * d[3] * d[4]);
    let count = n * vol;
    let eps = T::from_f64_lossy(BN_EPS);
    let xs = x.value().data();
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for b in 0..n {
                    let o = (b * c + ch) * vol;
                    s += xs[o..o + vol].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let m = s / count as f64;
                let mut q = 0.0f64;
                for b in 0..n {
                    let o = (b * c + ch) * vol;
                    q += xs[o..o + vol].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                }
                mean[ch] = T::from_f64_lossy(m);
                var[ch] = T::from_f64_lossy(q / count as f64);
            }
            (mean, var)
        }
        Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(&d);
    let mut y = Tensor::zeros(&d);
    let (g, bshift) = (scale.value().data(), shift.value().data());
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * vol;
            for (i, &v) in xs.iter().enumerate().skip(o).take(vol) {
                let h = (v - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g[ch] * h + bshift[ch];
            }
        }
    }
    let stats = (mode == Mode::Train).then(|| {
        let unbiased = if count > 1 {
            T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
        } else {
            T::one()
        };
        (
            Tensor::new(&[c], mean.clone()).unwrap(),
            Tensor::new(&[c], var.iter().map(|&v| v * unbiased).collect()).unwrap(),
        )
    });
    let gamma = scale.value().clone();
    let out = tape.custom(&[x, scale, shift], y, move |dy, need| {
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let gd = dy.data();
        let hd = xhat.data();
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * vol;
                for i in o..o + vol {
                    dgamma[ch] += gd[i] * hd[i];
                    dbeta[ch] += gd[i];
                }
            }
        }
        let dx = need[0].then(|| {
            let mut dx = Tensor::zeros(&d);
            let m = T::from_usize(count).unwrap();
            for b in 0..n {
                for ch in 0..c {
                    let o = (b * c + ch) * vol;
                    let k = gamma.data()[ch] * inv_std[ch];
                    for i in o..o + vol {
                        dx.data_mut()[i] = match mode {
                            Mode::Train => k * (gd[i] - dbeta[ch] / m - hd[i] * dgamma[ch] / m),
                            Mode::Eval => k * gd[i],
                        };
                    }
                }
            }
            dx
        });
        vec![
            dx,
            need[1].then(|| Tensor::new(&[c], dgamma.clone()).unwrap()),
            need[2].then(|| Tensor::new(&[c], dbeta.clone()).unwrap()),
        ]
    });
    Ok((out, stats))
}
