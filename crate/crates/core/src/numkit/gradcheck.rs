//! Central finite-difference checks of reverse-mode gradients.

use super::{Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic against numeric derivatives.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares a supplied analytic gradient against central differences of `f`
/// around `x`.
pub fn compare_with_numeric<F>(analytic: &[f64], mut f: F, x: &[f64], step: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let fp = f(&probe)?;
        probe[i] = x[i] - step;
        let fm = f(&probe)?;
        probe[i] = x[i];
        numeric.push((fp - fm) / (2.0 * step));
    }
    Ok(summarize(analytic.to_vec(), numeric))
}

fn summarize(analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheck {
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, n);
        if e > max_rel_err {
            max_rel_err = e;
            worst_index = i;
        }
    }
    GradCheck {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    }
}

/// Checks `d f(x) / d x` for a scalar-valued graph function of one input.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'static, f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let input = g.leaf(&x.clone().with_requires_grad(true))?;
    let out = f(&mut g, input)?;
    g.backward(out)?;
    let analytic = g
        .grad(input)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let shape = x.shape().to_vec();
    compare_with_numeric(
        &analytic,
        |probe| {
            let mut g = Graph::new();
            let t = Tensor::new(shape.clone(), probe.to_vec())?;
            let input = g.leaf(&t)?;
            let out = f(&mut g, input)?;
            g.item(out)
        },
        x.data(),
        step,
    )
}

/// Central difference formula used by [`check_param_grads_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error O(h²).
    Central2,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, error O(h⁴).
    Central4,
}

/// Checks parameter gradients of a scalar loss over a random subset of
/// coordinates (`per_param` per parameter tensor, all if smaller).
pub fn check_param_grads<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    per_param: usize,
    rng: &mut Rng,
    step: f64,
    loss: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    check_param_grads_with(store, ids, per_param, rng, step, Stencil::Central2, loss)
}

pub fn check_param_grads_with<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    per_param: usize,
    rng: &mut Rng,
    step: f64,
    stencil: Stencil,
    loss: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let out = loss(&mut g)?;
        g.backward(out)?;
        g.into_param_grads()
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &id in ids {
        let n = store.tensor(id).len();
        let grad = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords = if n <= per_param {
            (0..n).collect()
        } else {
            rng.sample_distinct(n, per_param)
        };
        for c in coords {
            let orig = store.tensor(id).data()[c];
            let mut at = |delta: f64| -> Result<f64> {
                store.tensor_mut(id).data_mut()[c] = orig + delta;
                let v = eval(store, &loss);
                store.tensor_mut(id).data_mut()[c] = orig;
                v
            };
            let d1 = at(step)? - at(-step)?;
            let estimate = match stencil {
                Stencil::Central2 => d1 / (2.0 * step),
                Stencil::Central4 => {
                    let d2 = at(2.0 * step)? - at(-2.0 * step)?;
                    (8.0 * d1 - d2) / (12.0 * step)
                }
            };
            analytic.push(grad[c]);
            numeric.push(estimate);
        }
    }
    Ok(summarize(analytic, numeric))
}

fn eval<F>(store: &ParamStore<f64>, loss: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let out = loss(&mut g)?;
    g.item(out)
}
