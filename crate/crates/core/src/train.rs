//! Deterministic training loop: identity-balanced batches, cross-entropy plus
//! batch-hard triplet loss, Adam with L2 weight decay and step decay.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::autodiff::Tape;
use crate::backbone::{ForwardOptions, Network};
use crate::error::{Error, Result};
use crate::objectives::total_loss_var;
use crate::reid::{Split, Tracklet};
use crate::synth::{augment, channel_mean, make_batch, EraseConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs between learning-rate decays.
    pub lr_decay_period: usize,
    /// Divisor applied at every decay.
    pub lr_decay_factor: f64,
    /// Identities per batch.
    pub p: usize,
    /// Clips per identity.
    pub k: usize,
    /// Frames per clip.
    pub t: usize,
    pub stride: usize,
    pub margin: f64,
    pub seed: u64,
    /// Stop after this many steps regardless of `epochs`.
    pub max_steps: Option<usize>,
    pub flip_probability: f64,
    pub erase_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 5e-4,
            epochs: 250,
            lr_decay_period: 50,
            lr_decay_factor: 10.0,
            p: 8,
            k: 4,
            t: 4,
            stride: 8,
            margin: 0.3,
            seed: 0,
            max_steps: None,
            flip_probability: 0.5,
            erase_probability: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, identities: usize) -> usize {
        identities.div_ceil(self.p.max(1)).max(1)
    }

    pub fn total_steps(&self, identities: usize) -> usize {
        let n = self.epochs * self.steps_per_epoch(identities);
        self.max_steps.map_or(n, |m| m.min(n))
    }

    /// Learning rate in effect at `step`.
    pub fn lr_at(&self, step: usize, identities: usize) -> f64 {
        let epoch = step / self.steps_per_epoch(identities);
        let decays = epoch / self.lr_decay_period.max(1);
        self.lr / self.lr_decay_factor.powi(decays as i32)
    }
}

/// Adam over the learnable parameters of a network, with the weight decay
/// added to the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Option<Tensor<f32>>>,
    v: Vec<Option<Tensor<f32>>>,
    t: i32,
}

impl Adam {
    pub fn new(params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![None; params],
            v: vec![None; params],
            t: 0,
        }
    }

    /// One update; `grads[i]` is `None` for buffers and frozen tensors.
    pub fn step(&mut self, net: &mut Network<f32>, grads: &[Option<Tensor<f32>>], lr: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let (eps, wd) = (self.eps as f32, weight_decay as f32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = net.param_mut(i);
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.dims()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.dims()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi + wd * *w;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub ce: f32,
    pub triplet: f32,
    pub total: f32,
}

/// Header of the training log.
pub const LOG_HEADER: &str = "step,ce,triplet,total";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.ce, self.triplet, self.total)
    }
}

/// Maps identity labels of the training split to classifier rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap(BTreeMap<usize, usize>);

impl ClassMap {
    pub fn new(tracklets: &[Tracklet]) -> Self {
        let mut ids: Vec<usize> = tracklets.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        ids.dedup();
        Self(ids.into_iter().enumerate().map(|(c, id)| (id, c)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn class(&self, id: usize) -> Option<usize> {
        self.0.get(&id).copied()
    }
}

/// Derive an independent seed for `stream` at `step`.
fn mix(seed: u64, stream: u64, step: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Optimization state that can run one step at a time.
pub struct Trainer {
    pub config: TrainConfig,
    train: Vec<Tracklet>,
    classes: ClassMap,
    optimizer: Adam,
    erase: EraseConfig,
    step: usize,
}

impl Trainer {
    /// Prepare training on the train-split tracklets of `data`.
    pub fn new(net: &Network<f32>, data: &[Tracklet], config: TrainConfig) -> Result<Self> {
        let train: Vec<Tracklet> = data.iter().filter(|t| t.split == Split::Train).cloned().collect();
        let classes = ClassMap::new(&train);
        if classes.len() != net.spec().num_classes {
            return Err(Error::Config(format!(
                "training split has {} identities, classifier has {} classes",
                classes.len(),
                net.spec().num_classes
            )));
        }
        if classes.len() < config.p {
            return Err(Error::Config(format!(
                "batch needs {} identities, training split has {}",
                config.p,
                classes.len()
            )));
        }
        let fill = channel_mean(&train);
        Ok(Self {
            optimizer: Adam::new(net.params().len()),
            erase: EraseConfig {
                probability: config.erase_probability,
                fill,
                ..EraseConfig::default()
            },
            config,
            train,
            classes,
            step: 0,
        })
    }

    pub fn identities(&self) -> usize {
        self.classes.len()
    }

    pub fn total_steps(&self) -> usize {
        self.config.total_steps(self.identities())
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn train_tracklets(&self) -> &[Tracklet] {
        &self.train
    }

    /// Run one optimization step.
    pub fn step(&mut self, net: &mut Network<f32>) -> Result<StepRecord> {
        let cfg = &self.config;
        let s = self.step as u64;
        let batch = make_batch(&self.train, cfg.p, cfg.k, cfg.t, cfg.stride, mix(cfg.seed, 1, s))?;
        let clips: Vec<Tensor<f32>> = (0..batch.labels.len())
            .map(|i| {
                augment(
                    &batch.clips.index_axis0(i),
                    cfg.flip_probability,
                    &self.erase,
                    mix(cfg.seed, 2, s * 4096 + i as u64),
                )
            })
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = batch
            .labels
            .iter()
            .map(|id| self.classes.class(*id).expect("batch drawn from the training split"))
            .collect();
        let tape = Tape::new();
        let x = tape.constant(Tensor::stack(&clips)?);
        let out = net.forward(&tape, &x, ForwardOptions::train())?;
        let terms = total_loss_var(&tape, &out.logits, &out.features, &labels, cfg.margin)?;
        let record = StepRecord {
            step: self.step,
            lr: cfg.lr_at(self.step, self.identities()),
            ce: terms.ce.value().data()[0],
            triplet: terms.triplet.value().data()[0],
            total: terms.total.value().data()[0],
        };
        if !record.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {} is {} (ce {}, triplet {})",
                record.step, record.total, record.ce, record.triplet
            )));
        }
        let grads = tape.backward(&terms.total)?;
        let g: Vec<Option<Tensor<f32>>> = out
            .param_vars
            .iter()
            .map(|v| v.tracked().then(|| grads.wrt(v)))
            .collect();
        if let Some(bad) = g.iter().flatten().position(|t| !t.all_finite()) {
            return Err(Error::NonFinite(format!("gradient #{bad} at step {} is not finite", record.step)));
        }
        self.optimizer.step(net, &g, record.lr, cfg.weight_decay);
        net.apply_bn_updates(&out.bn_updates);
        self.step += 1;
        Ok(record)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub last: Option<StepRecord>,
    pub log: String,
}

/// Train to completion, writing the CSV log to `log` as it goes.
pub fn train(net: &mut Network<f32>, data: &[Tracklet], config: &TrainConfig, mut log: impl Write) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(net, data, config.clone())?;
    let mut text = String::new();
    let _ = writeln!(text, "{LOG_HEADER}");
    writeln!(log, "{LOG_HEADER}")?;
    let mut last = None;
    for _ in 0..trainer.total_steps() {
        let r = trainer.step(net)?;
        writeln!(log, "{}", r.csv_line())?;
        let _ = writeln!(text, "{}", r.csv_line());
        last = Some(r);
    }
    Ok(TrainSummary {
        steps: trainer.steps_done(),
        last,
        log: text,
    })
}
