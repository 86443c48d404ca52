use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar function that can be recorded on a graph of any precision.
///
/// [`grad_check`] evaluates the analytic gradient in the caller's precision
/// and the central differences in `f64`, so rounding of the function value in
/// `f32` does not pollute the reference derivative.
pub trait ScalarFn {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Checks the gradient of `f` at `point`.
///
/// The per-coordinate error is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`; the maximum is
/// reported.
pub fn grad_check<T: Scalar, F: ScalarFn>(f: &F, point: &Tensor<T>, epsilon: f64) -> Result<GradCheck> {
    let mut g = Graph::<T>::new();
    let x = g.param(point.clone());
    let y = f.apply(&mut g, x)?;
    if g.value(y).numel() != 1 {
        return Err(Error::shape("grad_check needs a scalar-valued function"));
    }
    g.backward(y)?;
    let analytic: Vec<f64> = g
        .grad(x)
        .map(|t| t.data().iter().map(|v| v.as_f64()).collect())
        .unwrap_or_else(|| vec![0.0; point.numel()]);
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite analytic gradient".into()));
    }

    let base: Tensor<f64> = point.cast();
    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(p);
        let y = f.apply(&mut g, x)?;
        let v = g.value(y).item();
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite function value in grad_check".into()));
        }
        Ok(v)
    };

    let mut numeric = Vec::with_capacity(point.numel());
    let mut worst = (0.0f64, 0usize);
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus.data_mut()[i] += epsilon;
        minus.data_mut()[i] -= epsilon;
        let n = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
        if rel > worst.0 {
            worst = (rel, i);
        }
        numeric.push(n);
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}
