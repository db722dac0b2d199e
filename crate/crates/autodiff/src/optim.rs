use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment estimates, aligned with a [`ParamStore`]'s order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            step: 0,
            m: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Checkpoint entries: `adam.step`, `adam.m.<name>`, `adam.v.<name>`.
    /// The step counter is stored as a scalar and is exact below 2^24 in f32.
    pub fn to_entries(&self, params: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("adam.step".to_string(), Tensor::scalar(T::from_f64(self.step as f64)))];
        for (name, (m, v)) in params.names().iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("adam.m.{name}"), m.clone()));
            out.push((format!("adam.v.{name}"), v.clone()));
        }
        out
    }

    pub fn from_entries(params: &ParamStore<T>, entries: &[(String, Tensor<T>)]) -> Result<Self> {
        let find = |key: &str| {
            entries
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| AutodiffError::Format(format!("missing tensor {key}")))
        };
        let step = find("adam.step")?.item().as_f64() as u64;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in params.names() {
            m.push(find(&format!("adam.m.{name}"))?);
            v.push(find(&format!("adam.v.{name}"))?);
        }
        Ok(Self { step, m, v })
    }
}

/// One Adam update with bias correction, applied in place.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(AutodiffError::Contract(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(AutodiffError::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * gv;
            v[j] = b2 * v[j] + (T::one() - b2) * gv * gv;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
