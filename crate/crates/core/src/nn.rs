//! Transformer building blocks on top of the autodiff graph.
//!
//! Parameters are created in a [`ParamStore`] under dotted names and looked
//! up again through a [`Bound`] view when a forward pass is recorded.

use pathscan_autodiff::{Bound, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Glorot-uniform `[fan_in, fan_out]` weights.
pub fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::from_f64(rng.random_range(-a..a))).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

pub fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(std * z)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub fn add_linear<T: Scalar>(p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) {
    p.insert(format!("{name}.w"), glorot(rng, d_in, d_out));
    p.insert(format!("{name}.b"), Tensor::zeros(&[d_out]));
}

/// `x[n, d_in] @ W + b`
pub fn linear<T: Scalar>(g: &Graph<T>, b: &Bound<T>, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, b.get(&format!("{name}.w")))?;
    Ok(g.add(y, b.get(&format!("{name}.b")))?)
}

pub fn add_layernorm<T: Scalar>(p: &mut ParamStore<T>, name: &str, d: usize) {
    p.insert(format!("{name}.g"), Tensor::full(&[d], T::one()));
    p.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

pub fn layernorm<T: Scalar>(g: &Graph<T>, b: &Bound<T>, name: &str, x: Var) -> Result<Var> {
    Ok(g.layernorm(x, b.get(&format!("{name}.g")), b.get(&format!("{name}.b")), LN_EPS)?)
}

pub fn add_attention<T: Scalar>(p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d: usize) {
    for part in ["q", "k", "v", "o"] {
        add_linear(p, rng, &format!("{name}.{part}"), d, d);
    }
}

/// Multi-head scaled dot-product attention of `q_in[nq, d]` over
/// `kv_in[nk, d]`; returns `[nq, d]`.
pub fn attention<T: Scalar>(
    g: &Graph<T>,
    b: &Bound<T>,
    name: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
) -> Result<Var> {
    let d = *g.shape(q_in).last().unwrap_or(&0);
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::InvalidConfig(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = linear(g, b, &format!("{name}.q"), q_in)?;
    let k = linear(g, b, &format!("{name}.k"), kv_in)?;
    let v = linear(g, b, &format!("{name}.v"), kv_in)?;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice(q, 1, lo, hi)?, g.slice(k, 1, lo, hi)?, g.slice(v, 1, lo, hi)?)
        };
        let scores = g.scale(g.matmul_nt(qh, kh)?, scale)?;
        let w = g.softmax(scores)?;
        outs.push(g.matmul(w, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    linear(g, b, &format!("{name}.o"), cat)
}

pub fn add_ffn<T: Scalar>(p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d: usize, hidden: usize) {
    add_linear(p, rng, &format!("{name}.1"), d, hidden);
    add_linear(p, rng, &format!("{name}.2"), hidden, d);
}

pub fn ffn<T: Scalar>(g: &Graph<T>, b: &Bound<T>, name: &str, x: Var) -> Result<Var> {
    let h = g.gelu(linear(g, b, &format!("{name}.1"), x)?)?;
    linear(g, b, &format!("{name}.2"), h)
}

/// Pre-norm self-attention encoder layer.
pub fn add_encoder_layer<T: Scalar>(p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d: usize, hidden: usize) {
    add_layernorm(p, &format!("{name}.ln1"), d);
    add_attention(p, rng, &format!("{name}.attn"), d);
    add_layernorm(p, &format!("{name}.ln2"), d);
    add_ffn(p, rng, &format!("{name}.ffn"), d, hidden);
}

pub fn encoder_layer<T: Scalar>(g: &Graph<T>, b: &Bound<T>, name: &str, x: Var, heads: usize) -> Result<Var> {
    let h = layernorm(g, b, &format!("{name}.ln1"), x)?;
    let x = g.add(x, attention(g, b, &format!("{name}.attn"), h, h, heads)?)?;
    let h = layernorm(g, b, &format!("{name}.ln2"), x)?;
    Ok(g.add(x, ffn(g, b, &format!("{name}.ffn"), h)?)?)
}

/// Pre-norm cross-attention layer for a query block attending to a memory;
/// there is no self-attention among queries.
pub fn add_cross_layer<T: Scalar>(p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d: usize, hidden: usize) {
    add_layernorm(p, &format!("{name}.lnq"), d);
    add_attention(p, rng, &format!("{name}.xattn"), d);
    add_layernorm(p, &format!("{name}.ln2"), d);
    add_ffn(p, rng, &format!("{name}.ffn"), d, hidden);
}

pub fn cross_layer<T: Scalar>(g: &Graph<T>, b: &Bound<T>, name: &str, q: Var, mem: Var, heads: usize) -> Result<Var> {
    let h = layernorm(g, b, &format!("{name}.lnq"), q)?;
    let q = g.add(q, attention(g, b, &format!("{name}.xattn"), h, mem, heads)?)?;
    let h = layernorm(g, b, &format!("{name}.ln2"), q)?;
    Ok(g.add(q, ffn(g, b, &format!("{name}.ffn"), h)?)?)
}

/// Fixed 2D sinusoidal code of normalized coordinates in `[0, 1]`: the
/// first half of the channels encode `x`, the second half `y`.
pub fn sincos_2d(x: f64, y: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for (axis, v) in [x, y].into_iter().enumerate() {
        let base = axis * half;
        let pairs = half / 2;
        for i in 0..pairs {
            let freq = std::f64::consts::PI * 2f64.powi(i as i32);
            out[base + 2 * i] = (v * freq).sin();
            out[base + 2 * i + 1] = (v * freq).cos();
        }
    }
    out
}
