use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `scalar_fn` against central differences.
///
/// `scalar_fn` receives a fresh graph and one parameter leaf per entry of
/// `params`, and must return a scalar node. The result is the largest
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)` over all
/// parameter entries.
pub fn grad_check<F>(scalar_fn: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let root = scalar_fn(&mut g, &vars)?;
        let v = g.value(root).item()?;
        if !v.is_finite() {
            return Err(Error::NumericFailure(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = scalar_fn(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = params
        .iter()
        .zip(&vars)
        .map(|(p, v)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    if let Some(bad) = analytic.iter().find(|t| !t.is_finite()) {
        return Err(Error::NumericFailure(format!("non-finite analytic gradient {bad:?}")));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let orig = work[pi].values()[e];
            work[pi].values_mut()[e] = orig + step;
            let up = eval(&work)?;
            work[pi].values_mut()[e] = orig - step;
            let down = eval(&work)?;
            work[pi].values_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.values()[e];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
