//! Central finite-difference gradient checking, for tests.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with an absolute floor so near-zero gradients compare on
/// an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Checks `d f / d inputs` for a scalar function built on a fresh f64 graph.
///
/// `f` receives the graph and one leaf per input tensor and must return the
/// scalar loss. Every input element is perturbed by `+-step`.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars = vals.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&g, &vars)?;
        Ok(g.item(out))
    };

    let g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut res = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[k].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[k].data()[j];
            res.max_rel_err = res.max_rel_err.max(rel_err(a, numeric));
            res.max_abs_err = res.max_abs_err.max((a - numeric).abs());
            res.checked += 1;
        }
    }
    Ok(res)
}
