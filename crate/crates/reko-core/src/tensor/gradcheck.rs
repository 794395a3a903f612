//! Central-difference gradient checking.
//!
//! [`grad_check`] is the numerical oracle used by the gradient test suite:
//! it compares the analytic gradient of a scalar-valued builder against
//! symmetric finite differences, coordinate by coordinate.

use super::{Graph, TensorId};
use crate::{Error, Result};

/// Default perturbation for [`grad_check`].
pub const DEFAULT_STEP: f64 = 1e-3;

/// Builds a scalar loss from a single input tensor.
pub trait LossBuilder: Fn(&mut Graph, TensorId) -> Result<TensorId> {}
impl<F: Fn(&mut Graph, TensorId) -> Result<TensorId>> LossBuilder for F {}

/// Evaluates `f` once at `point` and returns the scalar loss value.
fn eval_at(f: &impl LossBuilder, point: &[f64], shape: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf(point.to_vec(), shape, false)?;
    let loss = f(&mut g, x)?;
    if g.data(loss).len() != 1 {
        return Err(Error::NonScalarLoss { numel: g.data(loss).len() });
    }
    Ok(g.value(loss))
}

/// Compares the analytic gradient of `f` at `point` against central finite
/// differences with step `h`, returning the worst relative error
/// `|analytic - numeric| / max(1, |numeric|)` over all coordinates.
pub fn grad_check(
    f: impl LossBuilder,
    point: &[f64],
    shape: &[usize],
    h: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf(point.to_vec(), shape, true)?;
    let loss = f(&mut g, x)?;
    g.backward(loss)?;
    let analytic = g
        .grad(x)
        .ok_or_else(|| Error::InvalidArg("grad_check: input did not receive a gradient".into()))?
        .to_vec();

    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval_at(&f, &probe, shape)?;
        probe[i] = orig - h;
        let fm = eval_at(&f, &probe, shape)?;
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
