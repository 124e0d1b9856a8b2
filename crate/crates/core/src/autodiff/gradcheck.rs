use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the reverse-mode gradient of a scalar function against central
/// differences with step `eps`.
///
/// Returns `max_i |a_i - n_i| / max(1e-12, |a_i| + |n_i|)`. The caller is
/// responsible for choosing a point away from kinks (ties, zeros of relu).
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf(point.clone());
        let y = f(&mut g, x)?;
        let grads = g.backward(y)?;
        grads
            .get(x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(point.shape()))
    };
    if !analytic.is_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = f(&mut g, x)?;
        Ok(g.value(y).data()[0])
    };
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
