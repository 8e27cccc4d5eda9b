//! Central-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Conventional step for double precision checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Compare tape gradients of `f` against central differences at `x`.
///
/// Returns `max_i |g_analytic[i] - g_fd[i]| / max(1, |g_fd[i]|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    grad_check_many(|tape, xs| f(tape, &xs[0]), std::slice::from_ref(x), eps)
}

/// Like [`grad_check`] for a function of several tensors. The reported error
/// is the maximum over every coordinate of every input.
pub fn grad_check_many<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    Ok(grad_check_report(f, xs, eps)?.error)
}

/// Result of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// Maximum relative error over all coordinates.
    pub error: f64,
    /// Non-smooth margin at the checked point, see [`Tape::nonsmooth_margin`].
    pub margin: f64,
    /// Coordinates whose +/- eps evaluations left the smooth piece of the
    /// checked point (a ReLU, max-pooling or mining decision flipped).
    pub straddles: usize,
    /// Number of checked coordinates.
    pub coordinates: usize,
}

/// Like [`grad_check_many`], also reporting the non-smooth margin and the
/// coordinates where central differences straddle a kink.
pub fn grad_check_report<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<GradReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    run(f, xs, eps, false).map(|r| r.expect("runs to completion without early exit"))
}

/// Like [`grad_check_report`] but gives up with `None` at the first
/// coordinate that straddles a kink.
pub fn grad_check_smooth<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<Option<GradReport>>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    run(f, xs, eps, true)
}

fn run<F>(f: F, xs: &[Tensor<f64>], eps: f64, stop_on_straddle: bool) -> Result<Option<GradReport>>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let (analytic, margin, pattern) = {
        let tape = Tape::audited();
        let vars: Vec<_> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(&out)?;
        let g = vars.iter().map(|v| grads.wrt(v)).collect::<Vec<_>>();
        (g, tape.nonsmooth_margin(), tape.nonsmooth_pattern())
    };
    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let tape = Tape::audited();
        let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().numel() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        let v = out.value().data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("function value {v}")));
        }
        Ok((v, tape.nonsmooth_pattern()))
    };
    let mut worst = 0.0f64;
    let mut straddles = 0;
    let mut inputs = xs.to_vec();
    for (which, g) in analytic.iter().enumerate() {
        for i in 0..xs[which].numel() {
            let orig = xs[which].data()[i];
            inputs[which].data_mut()[i] = orig + eps;
            let (plus, p_plus) = eval(&inputs)?;
            inputs[which].data_mut()[i] = orig - eps;
            let (minus, p_minus) = eval(&inputs)?;
            inputs[which].data_mut()[i] = orig;
            if p_plus != pattern || p_minus != pattern {
                straddles += 1;
                if stop_on_straddle {
                    return Ok(None);
                }
            }
            let fd = (plus - minus) / (2.0 * eps);
            let err = (g.data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(Some(GradReport {
        error: worst,
        margin,
        straddles,
        coordinates: xs.iter().map(Tensor::numel).sum(),
    }))
}

/// Non-smooth margin of `f` at `xs` without differencing.
pub fn margin_at<F>(f: F, xs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::audited();
    let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    f(&tape, &vars)?;
    Ok(tape.nonsmooth_margin())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_function_is_exact() {
        let err = grad_check(|t, x| Ok(t.sum(x)), &random(&[3, 4], 1), 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let err = grad_check(|t, x| Ok(t.sum(&t.square(x))), &random(&[5, 2], 2), 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn mean_of_softmax_rows() {
        let x = random(&[3, 3], 3);
        let err = grad_check(|t, x| Ok(t.mean(&t.softmax_rows(x))), &x, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
        // a weighted readout makes the softmax gradient nontrivial
        let w = random(&[3, 3], 4);
        let err = grad_check(
            |t, x| {
                let s = t.softmax_rows(x);
                let wv = t.constant(w.clone());
                Ok(t.sum(&t.mul(&s, &wv)?))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn broken_gradient_is_detected() {
        let x = random(&[4], 5);
        let err = grad_check(
            |t, x| {
                // value of sum(x^2) with the gradient of sum(x)
                let v = x.value().map(|a| a * a).sum();
                Ok(t.custom(&[x], Tensor::scalar(v), |g, _| {
                    vec![Some(Tensor::full(&[4], g.data()[0]))]
                }))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn kink_straddles_are_counted() {
        let x = Tensor::new(&[3], vec![1e-6, 0.5, -0.5]).unwrap();
        let r = grad_check_report(|t, x| Ok(t.sum(&t.relu(&x[0]))), std::slice::from_ref(&x), 1e-5).unwrap();
        assert_eq!((r.straddles, r.coordinates), (1, 3));
        assert_eq!(r.margin, 1e-6);
        assert!(grad_check_smooth(|t, x| Ok(t.sum(&t.relu(&x[0]))), std::slice::from_ref(&x), 1e-5).unwrap().is_none());
    }

    #[test]
    fn non_finite_values_are_reported() {
        let x = Tensor::full(&[2], 1.0);
        let res = grad_check(|t, x| Ok(t.sum(&t.scale(x, f64::INFINITY))), &x, 1e-5);
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
