//! Pretraining losses: masked-unit cross-entropy, pairwise cross-modality
//! contrastive losses with learnable temperatures, the weighted total, and the
//! two-pass gradient cache for large contrastive batches.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::encoders::Modality;
use crate::error::{invalid, shape_err, Result};
use crate::numkit::{Graph, ParamBuilder, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};

/// Upper bound on every temperature.
pub const MAX_TEMPERATURE: f64 = 100.0;

/// Mean `-log p(target)` over the masked rows of `logits[.., K]`.
pub fn masked_unit_loss<T: Real>(g: &mut Graph<'_, T>, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
    if rows.is_empty() {
        return invalid("masked_unit_loss: no masked positions");
    }
    g.cross_entropy(logits, rows, targets)
}

/// Mean over the valid positions of `x[B, N, H]`, then unit-normalized.
pub fn pooled_unit_rep<T: Real>(g: &mut Graph<'_, T>, x: Var, valid: Option<&[bool]>) -> Result<Var> {
    let pooled = g.mean_pool(x, valid)?;
    g.l2_normalize(pooled)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pair {
    VL,
    VS,
    LS,
}

impl Pair {
    pub const ALL: [Pair; 3] = [Pair::VL, Pair::VS, Pair::LS];

    pub fn modalities(self) -> (Modality, Modality) {
        match self {
            Pair::VL => (Modality::Vision, Modality::Language),
            Pair::VS => (Modality::Vision, Modality::Speech),
            Pair::LS => (Modality::Language, Modality::Speech),
        }
    }

    /// Pairs fully contained in a modality set.
    pub fn within(present: &[Modality]) -> Vec<Pair> {
        Pair::ALL
            .into_iter()
            .filter(|p| {
                let (a, b) = p.modalities();
                present.contains(&a) && present.contains(&b)
            })
            .collect()
    }
}

/// One learnable log-temperature per modality pair; `τ = exp(s)`.
#[derive(Clone, Debug)]
pub struct Temperatures {
    pub log_tau: [ParamId; 3],
}

impl Temperatures {
    /// All three start at `init` (clamped into `(0, MAX_TEMPERATURE]`).
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, init: f64) -> Result<Self> {
        if !(init > 0.0 && init.is_finite()) {
            return invalid(format!("initial temperature must be positive, got {init}"));
        }
        let s = init.min(MAX_TEMPERATURE).ln();
        pb.scope("temperature", Some(ParamGroup::Fusion), |pb| {
            Ok(Self {
                log_tau: [
                    pb.constant("vl", vec![], s)?,
                    pb.constant("vs", vec![], s)?,
                    pb.constant("ls", vec![], s)?,
                ],
            })
        })
    }

    pub fn id(&self, pair: Pair) -> ParamId {
        self.log_tau[pair as usize]
    }

    pub fn tau<T: Real>(&self, g: &mut Graph<'_, T>, pair: Pair) -> Result<Var> {
        let s = g.param(self.id(pair))?;
        g.exp(s)
    }

    pub fn value<T: Real>(&self, store: &ParamStore<T>, pair: Pair) -> f64 {
        store.tensor(self.id(pair)).data()[0].as_f64().exp()
    }

    /// Keeps every `τ` in `(0, MAX_TEMPERATURE]`.
    pub fn clamp<T: Real>(&self, store: &mut ParamStore<T>) {
        let cap = T::of(MAX_TEMPERATURE.ln());
        for id in self.log_tau {
            let v = &mut store.tensor_mut(id).data_mut()[0];
            if *v > cap {
                *v = cap;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    /// `-log` of the softmax ratio (standard InfoNCE).
    #[default]
    InfoNce,
    /// The softmax ratio itself, negated, without the logarithm.
    Literal,
}

/// Symmetric contrastive loss between aligned unit rows `u_a[B, H]` and
/// `u_b[B, H]`: `L = L_a2b + L_b2a`, diagonal pairs positive, logits scaled
/// by the scalar `tau`.
pub fn pair_contrastive_loss<T: Real>(
    g: &mut Graph<'_, T>,
    ua: Var,
    ub: Var,
    tau: Var,
    form: ContrastiveForm,
) -> Result<Var> {
    let (sa, sb) = (g.shape(ua).to_vec(), g.shape(ub).to_vec());
    if sa.len() != 2 || sa != sb || sa[0] == 0 {
        return shape_err("pair_contrastive_loss", format!("{sa:?} vs {sb:?}"));
    }
    if !g.shape(tau).is_empty() {
        return shape_err("pair_contrastive_loss", "temperature must be a scalar");
    }
    for v in [ua, ub] {
        for row in g.value(v).chunks(sa[1]) {
            let n = row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-4 {
                return invalid(format!("pair_contrastive_loss: row norm {n} is not unit"));
            }
        }
    }
    let b = sa[0];
    let ubt = g.transpose(ub)?;
    let sim = g.matmul(ua, ubt)?;
    let logits = g.scale_by(sim, tau)?;
    let logits_t = g.transpose(logits)?;
    let diag: Vec<usize> = (0..b).collect();
    let (l_ab, l_ba) = match form {
        ContrastiveForm::InfoNce => (
            g.cross_entropy(logits, &diag, &diag)?,
            g.cross_entropy(logits_t, &diag, &diag)?,
        ),
        ContrastiveForm::Literal => (literal_term(g, logits, b)?, literal_term(g, logits_t, b)?),
    };
    g.add(l_ab, l_ba)
}

/// `-mean_i softmax(logits[i])[i]`
fn literal_term<T: Real>(g: &mut Graph<'_, T>, logits: Var, b: usize) -> Result<Var> {
    let p = g.softmax(logits)?;
    let mut eye = Tensor::zeros(vec![b, b]);
    for i in 0..b {
        eye.data_mut()[i * b + i] = T::of(-1.0 / b as f64);
    }
    let eye = g.constant(eye)?;
    let d = g.mul(p, eye)?;
    g.sum(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.6,
            gamma: 1.0,
            lambda: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.lambda];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return invalid(format!("loss weights must be finite and non-negative, got {w:?}"));
        }
        Ok(())
    }
}

/// Per-objective losses; `None` where the batch lacks the modality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mlm: Option<f64>,
    pub mvm: Option<f64>,
    pub msm: Option<f64>,
    pub vl: Option<f64>,
    pub vs: Option<f64>,
    pub ls: Option<f64>,
}

impl LossParts {
    pub fn pair(&self, p: Pair) -> Option<f64> {
        match p {
            Pair::VL => self.vl,
            Pair::VS => self.vs,
            Pair::LS => self.ls,
        }
    }

    pub fn set_pair(&mut self, p: Pair, v: f64) {
        match p {
            Pair::VL => self.vl = Some(v),
            Pair::VS => self.vs = Some(v),
            Pair::LS => self.ls = Some(v),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub parts: LossParts,
    pub weights: LossWeights,
    pub total: f64,
}

/// `α·mlm + β·mvm + γ·msm + λ·(vl + vs + ls)`, absent terms counting as 0.
pub fn total_pretrain_loss(parts: LossParts, weights: LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let z = |v: Option<f64>| v.unwrap_or(0.0);
    let total = weights.alpha * z(parts.mlm)
        + weights.beta * z(parts.mvm)
        + weights.gamma * z(parts.msm)
        + weights.lambda * (z(parts.vl) + z(parts.vs) + z(parts.ls));
    Ok(LossReport { parts, weights, total })
}

/// Accumulated parameter gradients, sorted by parameter.
pub type ParamGrads<T> = Vec<(ParamId, Vec<T>)>;

fn merge_grads<T: Real>(acc: &mut ParamGrads<T>, add: ParamGrads<T>) {
    for (id, g) in add {
        match acc.binary_search_by_key(&id, |(p, _)| *p) {
            Ok(i) => {
                for (a, b) in acc[i].1.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            Err(i) => acc.insert(i, (id, g)),
        }
    }
}

/// Gradient of a contrastive loss over a large batch computed in chunks.
///
/// `reps(g, range)` builds the representations of examples `range`, one
/// `[len, H]` node per modality. `loss(g, reps)` maps full-batch
/// representations to a scalar and may read parameters (temperatures).
///
/// Pass 1 evaluates every chunk without keeping its graph; the loss and its
/// gradient with respect to the representations are then computed once on
/// the full batch; pass 2 rebuilds each chunk and back-propagates the cached
/// representation gradients. With `chunk >= batch` this is the plain
/// full-batch computation.
pub fn grad_cache_step<T, R, L>(
    store: &ParamStore<T>,
    batch: usize,
    chunk: usize,
    reps: R,
    loss: L,
) -> Result<(T, ParamGrads<T>)>
where
    T: Real,
    R: Fn(&mut Graph<'_, T>, Range<usize>) -> Result<Vec<Var>>,
    L: Fn(&mut Graph<'_, T>, &[Var]) -> Result<Var>,
{
    if chunk == 0 {
        return invalid("grad_cache_step: chunk size must be at least 1");
    }
    if batch == 0 {
        return invalid("grad_cache_step: empty batch");
    }
    if chunk >= batch {
        let mut g = Graph::with_params(store);
        let r = reps(&mut g, 0..batch)?;
        let out = loss(&mut g, &r)?;
        let value = g.item(out)?;
        g.backward(out)?;
        return Ok((value, g.into_param_grads()));
    }

    let ranges: Vec<Range<usize>> = (0..batch).step_by(chunk).map(|s| s..(s + chunk).min(batch)).collect();

    // pass 1: representations only
    let mut cached: Vec<(Vec<usize>, Vec<T>)> = Vec::new();
    for r in &ranges {
        let mut g = Graph::with_params(store);
        let out = reps(&mut g, r.clone())?;
        if cached.is_empty() {
            cached = out.iter().map(|&v| (g.shape(v)[1..].to_vec(), Vec::new())).collect();
        }
        if out.len() != cached.len() {
            return shape_err("grad_cache_step", "chunks produced different numbers of representations");
        }
        for (slot, &v) in cached.iter_mut().zip(&out) {
            slot.1.extend_from_slice(g.value(v));
        }
    }

    // loss and representation gradients on the full batch
    let mut g = Graph::with_params(store);
    let mut leaves = Vec::with_capacity(cached.len());
    for (shape, data) in &cached {
        let mut s = vec![batch];
        s.extend_from_slice(shape);
        leaves.push(g.leaf_owned(Tensor::new(s, data.clone())?.with_requires_grad(true))?);
    }
    let out = loss(&mut g, &leaves)?;
    let value = g.item(out)?;
    g.backward(out)?;
    let rep_grads: Vec<Vec<T>> = leaves
        .iter()
        .zip(&cached)
        .map(|(&v, (_, data))| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![T::zero(); data.len()]))
        .collect();
    let mut grads = g.into_param_grads();

    // pass 2: re-run each chunk and inject the cached gradients
    for r in &ranges {
        let mut g = Graph::with_params(store);
        let out = reps(&mut g, r.clone())?;
        for (i, &v) in out.iter().enumerate() {
            let width: usize = cached[i].0.iter().product();
            let seed = &rep_grads[i][r.start * width..r.end * width];
            g.backward_seeded(v, seed)?;
        }
        merge_grads(&mut grads, g.into_param_grads());
    }
    Ok((value, grads))
}
