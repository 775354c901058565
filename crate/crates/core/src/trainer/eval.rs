//! Held-out evaluation: cross-modal retrieval and masked-language accuracy.

use serde::{Deserialize, Serialize};

use crate::encoders::Modality;
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::numkit::Graph;
use crate::synthdata::{make_batch, StreamKind, SynthConfig};

/// Mixed into the training seed so evaluation never sees training samples.
const HELDOUT_SALT: u64 = 0x4E1D_0E7A_55AA_0F0F;

/// Seed of the held-out split for a run seeded with `seed`.
pub fn heldout_seed(seed: u64) -> u64 {
    seed ^ HELDOUT_SALT
}

/// Fraction of rows of the `n×n` score matrix whose diagonal entry ranks
/// within the top `k` of its row. Ties count against the positive.
pub fn recall_at_k(scores: &[f64], n: usize, k: usize) -> Result<f64> {
    if n == 0 || scores.len() != n * n {
        return invalid(format!("recall_at_k: {} scores for n = {n}", scores.len()));
    }
    let hits = (0..n)
        .filter(|&i| {
            let row = &scores[i * n..(i + 1) * n];
            let better = row.iter().enumerate().filter(|&(j, &s)| j != i && s >= row[i]).count();
            better < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Inner products `a[i]·b[j]` of two `[n, d]` row sets.
pub fn similarity(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let d = a.len() / n;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(a[i * d..(i + 1) * d].iter().zip(&b[j * d..(j + 1) * d]).map(|(x, y)| x * y).sum());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub kind: StreamKind,
    pub n: usize,
    /// Queries from the first modality of the pair, candidates from the second.
    pub r1_ab: f64,
    pub r5_ab: f64,
    pub r1_ba: f64,
    pub r5_ba: f64,
}

/// Recall@1/5 in both directions from paired unit representations.
pub fn retrieval_from_reps(kind: StreamKind, a: &[f64], b: &[f64], n: usize) -> Result<RetrievalReport> {
    if n < 2 {
        return invalid("retrieval needs at least 2 pairs");
    }
    let ab = similarity(a, b, n);
    let ba = similarity(b, a, n);
    Ok(RetrievalReport {
        kind,
        n,
        r1_ab: recall_at_k(&ab, n, 1)?,
        r5_ab: recall_at_k(&ab, n, 5)?,
        r1_ba: recall_at_k(&ba, n, 1)?,
        r5_ba: recall_at_k(&ba, n, 5)?,
    })
}

const EVAL_CHUNK: usize = 32;

/// Pooled unit representations of both modalities of `n` held-out pairs of
/// `kind`, row-major `[n, H]` each.
pub fn paired_reps(
    model: &Model<f32>,
    kind: StreamKind,
    n: usize,
    seed: u64,
    synth: &SynthConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mods = kind.modalities();
    if kind == StreamKind::Video || mods.len() != 2 {
        return invalid(format!("retrieval is defined for VL, VS and LS, not {}", kind.name()));
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let mut start = 0;
    while start < n {
        let count = EVAL_CHUNK.min(n - start);
        let batch = make_batch(kind, start as u64, count, seed, synth)?;
        for (m, out) in [(mods[0], &mut a), (mods[1], &mut b)] {
            let mut g = Graph::with_params(&model.store);
            let r = model.arch.unit_rep(&mut g, &batch, m)?;
            out.extend(g.value(r).iter().map(|&v| v as f64));
        }
        start += count;
    }
    Ok((a, b))
}

/// Retrieval over `n` held-out pairs drawn with `heldout_seed(seed)`.
pub fn eval_retrieval(
    model: &Model<f32>,
    kind: StreamKind,
    n: usize,
    seed: u64,
    synth: &SynthConfig,
) -> Result<RetrievalReport> {
    if n < 2 {
        return invalid("retrieval needs at least 2 pairs");
    }
    let (a, b) = paired_reps(model, kind, n, heldout_seed(seed), synth)?;
    retrieval_from_reps(kind, &a, &b, n)
}

/// Top-1 accuracy of the masked-language head on `batches` held-out VL
/// batches of `size` examples.
pub fn mlm_accuracy(model: &Model<f32>, batches: usize, size: usize, seed: u64, synth: &SynthConfig) -> Result<f64> {
    let arch = &model.arch;
    let seed = heldout_seed(seed);
    let h = arch.config.fusion.hidden;
    let vocab = arch.config.encoders.vocab;
    let (mut hits, mut total) = (0usize, 0usize);
    for i in 0..batches {
        let batch = make_batch(StreamKind::VL, (i * size) as u64, size, seed, synth)?;
        let masks = arch.plan_masks(&batch, seed, i as u64)?;
        let mut g = Graph::with_params(&model.store);
        let fused = arch.fuse(&mut g, &batch, &batch.modalities(), Some(&masks))?;
        let f = fused.get(Modality::Language).expect("VL batch has language");
        let n = masks.mlm_rows.len();
        let rows = g.gather_rows(f.flat, masks.mlm_rows.clone(), vec![n, h])?;
        let logits = arch.mlm_head.forward(&mut g, rows)?;
        let lv = g.value(logits);
        for (r, &t) in masks.mlm_targets.iter().enumerate() {
            let row = &lv[r * vocab..(r + 1) * vocab];
            let best = (0..vocab).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hits += (best == t) as usize;
        }
        total += n;
    }
    if total == 0 {
        return invalid("mlm_accuracy: no masked tokens");
    }
    Ok(hits as f64 / total as f64)
}
