//! Deterministic numeric substrate: tensors, a counter-based RNG, the kernels
//! the model needs, reverse-mode gradients and a finite-difference checker.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod real;
mod rng;
mod tensor;

pub use gradcheck::{
    check_param_grads, check_param_grads_with, compare_with_numeric, finite_diff_check, relative_error, GradCheck, Stencil,
};
pub use graph::{Graph, Var};
pub use params::{Param, ParamBuilder, ParamGroup, ParamId, ParamStore};
pub use real::Real;
pub use rng::Rng;
pub use tensor::{numel, Tensor};

use crate::error::{Error, Result};

/// Standalone softmax over `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.leaf(x)?;
    let y = g.softmax_axis(v, axis)?;
    Ok(g.tensor(y))
}

/// Mean of `-log softmax(logits[i])[targets[i]]` over the rows of `logits`.
pub fn cross_entropy_from_logits<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let k = *logits
        .shape()
        .last()
        .ok_or_else(|| Error::Invalid("cross_entropy: scalar logits".into()))?;
    let rows = logits.len() / k.max(1);
    if targets.len() != rows {
        return Err(Error::Invalid(format!(
            "cross_entropy: {} targets for {rows} rows",
            targets.len()
        )));
    }
    let mut g = Graph::new();
    let l = g.leaf(logits)?;
    let idx: Vec<usize> = (0..rows).collect();
    let loss = g.cross_entropy(l, &idx, targets)?;
    g.item(loss)
}

/// Reverse-mode gradient of a scalar function at `x`.
pub fn reverse_grad<T, F>(x: &Tensor<T>, f: F) -> Result<Tensor<T>>
where
    T: Real,
    F: FnOnce(&mut Graph<'static, T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let input = g.leaf(&x.clone().with_requires_grad(true))?;
    let out = f(&mut g, input)?;
    g.backward(out)?;
    let grad = g
        .grad(input)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![T::zero(); x.len()]);
    Tensor::new(x.shape().to_vec(), grad)
}

/// Fixed 1-D sinusoid table `[len, dim]` (sin on even, cos on odd columns).
pub fn sinusoid_table(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
