//! The double-precision gradient-check suite over every differentiable
//! component of the model.
//!
//! Each component is checked at a random point. Central differences are
//! meaningless across a ReLU kink, a max-pooling tie or a change of mined
//! triplet, so a point is redrawn when it lies closer than [`MARGIN_FLOOR`]
//! to one or when any +/- eps evaluation takes a different branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{BlockSpec, BlockVariant, Mode, ResidualBlock};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_smooth, margin_at, DEFAULT_EPS};
use crate::objectives::{batch_hard_triplet_var, cross_entropy_var, DEFAULT_MARGIN};
use crate::strf::{reduced_channels, strf_forward_var, Integration, StrfConfig};
use crate::tensor::Tensor;

/// Smallest accepted distance from a non-smooth point.
pub const MARGIN_FLOOR: f64 = 1e-5;
/// Required agreement between tape and finite-difference gradients.
pub const TOLERANCE: f64 = 1e-6;
const MAX_DRAWS: u64 = 64;

/// Feature dims (n, c, t, h, w) used for the unit and block checks.
pub const CHECK_DIMS: [usize; 5] = [1, 16, 4, 6, 3];

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCheck {
    pub name: String,
    pub error: f64,
    pub margin: f64,
    /// Draw that produced the checked point.
    pub seed: u64,
    pub coordinates: usize,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.error <= TOLERANCE
    }
}

type Loss = Box<dyn Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>>;

struct Instance {
    inputs: Vec<Tensor<f64>>,
    loss: Loss,
}

fn uniform(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// `mean(out^2)`.
fn readout(tape: &Tape<f64>, out: &Var<f64>) -> Var<f64> {
    tape.mean(&tape.square(out))
}

fn strf_instance(integration: Integration, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = CHECK_DIMS[1];
    let cfg = StrfConfig {
        integration,
        ..StrfConfig::default()
    };
    let rows = reduced_channels(c, cfg.reduction);
    let mut inputs = vec![uniform(&CHECK_DIMS, &mut rng)];
    // weights at their initialization scale
    let bound = (1.0 / c as f64).sqrt();
    inputs.extend((0..4).map(|_| uniform(&[rows, c], &mut rng).scale(bound)));
    Instance {
        inputs,
        loss: Box::new(move |tape, xs| {
            let w = [xs[1].clone(), xs[2].clone(), xs[3].clone(), xs[4].clone()];
            let out = strf_forward_var(tape, &xs[0], &cfg, &w)?;
            Ok(readout(tape, &out))
        }),
    }
}

fn block_instance(variant: BlockVariant, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = CHECK_DIMS[1];
    let spec = BlockSpec {
        variant,
        in_width: c,
        out_width: 4 * c,
        spatial_stride: 1,
        strf: Some(StrfConfig::default()),
    };
    let block = ResidualBlock::<f64>::build(&spec, rng.gen())?;
    let learnable: Vec<bool> = block.params().iter().map(|p| p.spec.role.learnable()).collect();
    let mut inputs = vec![uniform(&CHECK_DIMS, &mut rng)];
    inputs.extend(
        block
            .params()
            .iter()
            .filter(|p| p.spec.role.learnable())
            .map(|p| p.value.as_ref().clone()),
    );
    Ok(Instance {
        inputs,
        loss: Box::new(move |tape, xs| {
            let mut next = xs[1..].iter();
            let vars = block
                .params()
                .iter()
                .zip(&learnable)
                .map(|(p, &l)| {
                    if l {
                        next.next().expect("one input per learnable parameter").clone()
                    } else {
                        tape.leaf(p.value.clone(), false)
                    }
                })
                .collect();
            let out = block.forward_with(tape, &xs[0], vars, Mode::Train)?;
            Ok(readout(tape, &out))
        }),
    })
}

fn cross_entropy_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
    Instance {
        inputs: vec![uniform(&[6, 5], &mut rng).scale(3.0)],
        loss: Box::new(move |tape, xs| cross_entropy_var(tape, &xs[0], &labels)),
    }
}

fn triplet_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = vec![0, 0, 1, 1, 2, 2, 3, 3];
    Instance {
        inputs: vec![uniform(&[8, 4], &mut rng)],
        loss: Box::new(move |tape, xs| batch_hard_triplet_var(tape, &xs[0], &labels, DEFAULT_MARGIN)),
    }
}

/// Check one component, redrawing points that sit on a kink or tie.
fn check(name: &str, make: impl Fn(u64) -> Result<Instance>) -> Result<ComponentCheck> {
    for seed in 0..MAX_DRAWS {
        let inst = make(seed)?;
        if margin_at(&inst.loss, &inst.inputs)? < MARGIN_FLOOR {
            continue;
        }
        let Some(report) = grad_check_smooth(&inst.loss, &inst.inputs, DEFAULT_EPS)? else {
            continue;
        };
        return Ok(ComponentCheck {
            name: name.to_string(),
            error: report.error,
            margin: report.margin,
            seed,
            coordinates: report.coordinates,
        });
    }
    Err(Error::Contract(format!(
        "{name}: every one of {MAX_DRAWS} draws lies on or next to a non-smooth point"
    )))
}

/// Names of every component in suite order.
pub fn component_names() -> Vec<String> {
    let mut names: Vec<String> = Integration::ALL
        .iter()
        .map(|i| format!("strf_forward[{i}]"))
        .collect();
    names.extend(
        [BlockVariant::I3D, BlockVariant::P3DA, BlockVariant::P3DB, BlockVariant::P3DC]
            .iter()
            .map(|v| format!("block[{v}+strf]")),
    );
    names.push("cross_entropy".into());
    names.push("batch_hard_triplet".into());
    names
}

/// Run the check of the component called `name`.
pub fn run_component(name: &str) -> Result<ComponentCheck> {
    if let Some(i) = Integration::ALL.iter().find(|i| format!("strf_forward[{i}]") == name) {
        return check(name, |s| Ok(strf_instance(*i, s)));
    }
    if let Some(v) = BlockVariant::ALL.iter().find(|v| format!("block[{v}+strf]") == name) {
        return check(name, |s| block_instance(*v, s));
    }
    match name {
        "cross_entropy" => check(name, |s| Ok(cross_entropy_instance(s))),
        "batch_hard_triplet" => check(name, |s| Ok(triplet_instance(s))),
        _ => Err(Error::Config(format!("unknown gradient-check component `{name}`"))),
    }
}

/// Run the whole suite in order.
pub fn run_suite() -> Result<Vec<ComponentCheck>> {
    component_names().iter().map(|n| run_component(n)).collect()
}
