use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences, in f64. Returns the max over elements of
/// |analytic - numeric| / max(1, |numeric|).
pub fn grad_check<Builder>(f: Builder, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    Builder: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let loss = f(&mut g, v)?;
        if g.data(loss).len() != 1 {
            return Err(Error::Shape("grad_check: function must be scalar-valued".into()));
        }
        let y = g.data(loss)[0];
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check: function output".into()));
        }
        Ok(y)
    };

    // analytic
    let mut g = Graph::new();
    let v = g.param(x);
    let loss = f(&mut g, v)?;
    if g.data(loss).len() != 1 {
        return Err(Error::Shape("grad_check: function must be scalar-valued".into()));
    }
    g.backward(loss)?;
    let analytic = g.grad(v).expect("param grad").to_vec();

    let mut max_err = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(Error::NonFinite("grad_check: numeric derivative".into()));
        }
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
