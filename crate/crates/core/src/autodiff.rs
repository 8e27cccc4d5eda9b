//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation whose inputs (transitively) depend on
//! a leaf created with `requires_grad`. Operations on untracked values are
//! evaluated eagerly and never recorded, so inference through the same code
//! path keeps no intermediate state alive.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv3dParams, PoolMode, Window};
use crate::tensor::{Scalar, Tensor};

/// Backward rule: given the output gradient and which inputs need a
/// gradient, return one (optional) gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    /// Node ids of the inputs; `None` for untracked inputs.
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    dims: Vec<usize>,
}

/// A value flowing through the tape.
#[derive(Clone)]
pub struct Var<T: Scalar> {
    value: Arc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("dims", &self.value.dims())
            .field("node", &self.node)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn dims(&self) -> &[usize] {
        self.value.dims()
    }

    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn id(&self) -> Option<usize> {
        self.node
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x100_0000_01b3;

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    audit: bool,
    margin: Cell<Option<f64>>,
    pattern: Cell<u64>,
}

/// Gradients of a scalar with respect to the tracked leaves of a tape.
pub struct Gradients<T: Scalar> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; `None` when `var` is untracked or unreachable.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.grads.get(&id))
    }

    /// Gradient for `var`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.dims()))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            audit: false,
            margin: Cell::new(None),
            pattern: Cell::new(FNV_OFFSET),
        }
    }

    /// A tape whose non-smooth operations (ReLU, max pooling, mined losses)
    /// record how close they are to a kink and which branch they took.
    pub fn audited() -> Self {
        Self {
            audit: true,
            ..Self::new()
        }
    }

    pub fn auditing(&self) -> bool {
        self.audit
    }

    /// Smallest distance of any audited operation from a kink or tie:
    /// |input| of a ReLU, the gap between the two largest values of a
    /// max-pooling window, and whatever losses report. Infinite when nothing
    /// was recorded.
    pub fn nonsmooth_margin(&self) -> f64 {
        self.margin.get().unwrap_or(f64::INFINITY)
    }

    /// Hash of every branch taken by audited operations. Two points with the
    /// same pattern lie on the same smooth piece of the function.
    pub fn nonsmooth_pattern(&self) -> u64 {
        self.pattern.get()
    }

    /// Record a distance from a kink or tie (audited tapes only).
    pub fn note_margin(&self, margin: f64) {
        if self.audit {
            let m = self.margin.get().map_or(margin, |old| old.min(margin));
            self.margin.set(Some(m));
        }
    }

    /// Fold branch decisions into the pattern hash (audited tapes only).
    pub fn note_pattern(&self, decisions: impl IntoIterator<Item = u64>) {
        if self.audit {
            let mut h = self.pattern.get();
            for d in decisions {
                for b in d.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
                }
            }
            self.pattern.set(h);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(Arc::new(value), true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(Arc::new(value), false)
    }

    pub fn leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<T> {
        let node = requires_grad.then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                inputs: Vec::new(),
                backward: None,
                dims: value.dims().to_vec(),
            });
            nodes.len() - 1
        });
        Var { value, node }
    }

    /// Record an operation. `backward` is only retained when some input is
    /// tracked.
    pub fn custom(
        &self,
        inputs: &[&Var<T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        let ids: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        let node = if ids.iter().any(Option::is_some) {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                inputs: ids,
                backward: Some(Box::new(backward)),
                dims: value.dims().to_vec(),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            value: Arc::new(value),
            node,
        }
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                loss.dims()
            )));
        }
        let Some(root) = loss.node else {
            return Ok(Gradients {
                grads: HashMap::new(),
            });
        };
        let nodes = self.nodes.borrow();
        let mut pending: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        pending[root] = Some(Tensor::ones(loss.dims()));
        let mut leaves = HashMap::new();
        for id in (0..=root).rev() {
            let Some(grad) = pending[id].take() else { continue };
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                leaves.insert(id, grad);
                continue;
            };
            let need: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let parts = rule(&grad, &need);
            debug_assert_eq!(parts.len(), node.inputs.len());
            for (input, part) in node.inputs.iter().zip(parts) {
                let (Some(pid), Some(part)) = (input, part) else { continue };
                debug_assert_eq!(part.dims(), nodes[*pid].dims.as_slice());
                match pending[*pid].as_mut() {
                    Some(acc) => acc.add_assign(&part)?,
                    None => pending[*pid] = Some(part),
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn check_same(op: &'static str, a: &Var<impl Scalar>, b: &Var<impl Scalar>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, a.dims(), b.dims()));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        check_same("add", a, b)?;
        let value = a.value.add(&b.value)?;
        Ok(self.custom(&[a, b], value, |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        }))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        check_same("mul", a, b)?;
        let value = a.value.zip_with(&b.value, |x, y| x * y)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.custom(&[a, b], value, move |g, need| {
            vec![
                need[0].then(|| g.zip_with(&bv, |x, y| x * y).unwrap()),
                need[1].then(|| g.zip_with(&av, |x, y| x * y).unwrap()),
            ]
        }))
    }

    pub fn scale(&self, a: &Var<T>, s: T) -> Var<T> {
        self.custom(&[a], a.value.scale(s), move |g, _| vec![Some(g.scale(s))])
    }

    pub fn square(&self, a: &Var<T>) -> Var<T> {
        let av = a.value.clone();
        let two = T::one() + T::one();
        self.custom(&[a], a.value.map(|v| v * v), move |g, _| {
            vec![Some(g.zip_with(&av, |x, y| two * x * y).unwrap())]
        })
    }

    pub fn relu(&self, a: &Var<T>) -> Var<T> {
        if self.audit {
            let m = a.value.data().iter().map(|v| v.as_f64().abs()).fold(f64::INFINITY, f64::min);
            self.note_margin(m);
            self.note_pattern(a.value.data().chunks(64).map(|c| {
                c.iter().enumerate().fold(0u64, |acc, (i, v)| acc | (u64::from(*v > T::zero()) << i))
            }));
        }
        let value = a.value.map(|v| if v > T::zero() { v } else { T::zero() });
        let av = a.value.clone();
        self.custom(&[a], value, move |g, _| {
            vec![Some(
                g.zip_with(&av, |x, y| if y > T::zero() { x } else { T::zero() })
                    .unwrap(),
            )]
        })
    }

    pub fn sum(&self, a: &Var<T>) -> Var<T> {
        let dims = a.dims().to_vec();
        self.custom(&[a], Tensor::scalar(a.value.sum()), move |g, _| {
            vec![Some(Tensor::full(&dims, g.data()[0]))]
        })
    }

    pub fn mean(&self, a: &Var<T>) -> Var<T> {
        let n = T::from_usize(a.value.numel()).unwrap();
        let s = self.sum(a);
        self.scale(&s, T::one() / n)
    }

    pub fn reshape(&self, a: &Var<T>, dims: &[usize]) -> Result<Var<T>> {
        let value = a.value.reshape(dims)?;
        let orig = a.dims().to_vec();
        Ok(self.custom(&[a], value, move |g, _| {
            vec![Some(g.reshape(&orig).unwrap())]
        }))
    }

    /// Batched product over the trailing two axes; see
    /// [`kernels::batched_matmul`].
    pub fn matmul_t(&self, a: &Var<T>, b: &Var<T>, trans_a: bool, trans_b: bool) -> Result<Var<T>> {
        let value = kernels::batched_matmul(&a.value, &b.value, trans_a, trans_b)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.custom(&[a, b], value, move |g, need| {
            let [da, db] =
                kernels::batched_matmul_backward(&av, &bv, trans_a, trans_b, g, [need[0], need[1]]);
            vec![da, db]
        }))
    }

    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.matmul_t(a, b, false, false)
    }

    pub fn softmax_rows(&self, a: &Var<T>) -> Var<T> {
        let s = Arc::new(kernels::softmax_rows(&a.value));
        let saved = s.clone();
        self.custom(&[a], (*s).clone(), move |g, _| {
            vec![Some(kernels::softmax_rows_backward(&saved, g))]
        })
    }

    /// Same-size stride-1 pooling over the trailing three axes.
    pub fn pool3d(&self, a: &Var<T>, kernel: [usize; 3], mode: PoolMode) -> Result<Var<T>> {
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "pooling kernel {kernel:?} must have odd extents"
            )));
        }
        let r = a.dims().len();
        if r < 3 {
            return Err(Error::shape("pool3d", a.dims(), &kernel));
        }
        let input = [a.dims()[r - 3], a.dims()[r - 2], a.dims()[r - 1]];
        let win = Window::new(input, kernel, [1, 1, 1], kernels::Padding::Same)?;
        Ok(self.pool(a, win, mode))
    }

    /// Pooling with an explicit window (used for the strided stem).
    pub fn pool(&self, a: &Var<T>, win: Window, mode: PoolMode) -> Var<T> {
        if self.audit && mode == PoolMode::Max {
            self.note_margin(kernels::pool_max_gap(&a.value, &win));
        }
        let (value, arg) = kernels::pool_forward(&a.value, &win, mode);
        if let Some(arg) = &arg {
            self.note_pattern(arg.iter().map(|&i| i as u64));
        }
        let in_dims = a.dims().to_vec();
        self.custom(&[a], value, move |g, _| {
            vec![Some(kernels::pool_backward(
                &in_dims,
                &win,
                mode,
                arg.as_deref(),
                g,
            ))]
        })
    }

    pub fn channel_mix(&self, x: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
        let value = kernels::conv_channel_mix(&x.value, &w.value)?;
        let (xv, wv) = (x.value.clone(), w.value.clone());
        Ok(self.custom(&[x, w], value, move |g, need| {
            let [dx, dw] = kernels::conv_channel_mix_backward(&xv, &wv, g, [need[1], need[0]]);
            vec![dx, dw]
        }))
    }

    pub fn conv3d(&self, x: &Var<T>, w: &Var<T>, p: Conv3dParams) -> Result<Var<T>> {
        let value = kernels::conv3d(&x.value, &w.value, p)?;
        let (xv, wv) = (x.value.clone(), w.value.clone());
        Ok(self.custom(&[x, w], value, move |g, need| {
            let [dx, dw] = kernels::conv3d_backward(&xv, &wv, p, g, [need[0], need[1]]);
            vec![dx, dw]
        }))
    }

    /// Mean over the trailing three axes: (n, c, t, h, w) -> (n, c).
    pub fn global_avg_pool(&self, x: &Var<T>) -> Result<Var<T>> {
        let d = x.dims().to_vec();
        if d.len() != 5 {
            return Err(Error::shape("global_avg_pool", &d, &[0; 5]));
        }
        let vol = d[2] * d[3] * d[4];
        let inv = T::one() / T::from_usize(vol).unwrap();
        let data = x
            .value
            .data()
            .chunks(vol)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[d[0], d[1]], data)?;
        Ok(self.custom(&[x], value, move |g, _| {
            let mut out = Tensor::zeros(&d);
            for (chunk, &gv) in out.data_mut().chunks_mut(vol).zip(g.data()) {
                chunk.fill(gv * inv);
            }
            vec![Some(out)]
        }))
    }

    /// `x w^T + b` for x (n, d), w (k, d), b (k).
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let k = w.dims()[0];
        if b.dims() != [k] {
            return Err(Error::shape("linear", w.dims(), b.dims()));
        }
        let xw = self.matmul_t(x, w, false, true)?;
        let mut value = xw.value.as_ref().clone();
        for row in value.data_mut().chunks_mut(k) {
            row.iter_mut().zip(b.value.data()).for_each(|(v, &bb)| *v += bb);
        }
        Ok(self.custom(&[&xw, b], value, move |g, need| {
            let db = need[1].then(|| {
                let mut acc = Tensor::zeros(&[k]);
                for row in g.data().chunks(k) {
                    acc.data_mut().iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                acc
            });
            vec![need[0].then(|| g.clone()), db]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let loss = tape.sum(&x);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn product_rule_for_scalars() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.param(Tensor::scalar(-2.5));
        let loss = tape.mul(&x, &y).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).data(), &[-2.5]);
        assert_eq!(g.wrt(&y).data(), &[3.0]);
    }

    #[test]
    fn unreachable_leaves_get_zero_gradients() {
        let tape = Tape::<f32>::new();
        let x = tape.param(Tensor::ones(&[3]));
        let unused = tape.param(Tensor::ones(&[2, 2]));
        let loss = tape.sum(&x);
        let g = tape.backward(&loss).unwrap();
        assert!(g.get(&unused).is_none());
        assert_eq!(g.wrt(&unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let tape = Tape::<f32>::new();
        let x = tape.param(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_are_not_recorded() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(&[4, 4]));
        let b = tape.matmul(&a, &a).unwrap();
        let _ = tape.softmax_rows(&b);
        assert!(tape.is_empty());
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[2], 2.0));
        let y = tape.add(&x, &x).unwrap();
        let z = tape.mul(&y, &x).unwrap(); // 2x^2
        let loss = tape.sum(&z);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).data(), &[8.0, 8.0]);
    }
}
