//! Token corruption for text, 3-D tube masking for vision patch grids and
//! span masking for speech frames.
//!
//! Every procedure is a pure function of its inputs and the supplied [`Rng`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::numkit::{Real, Rng, Tensor};

/// What happened to a selected text position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskAction {
    MaskToken,
    Random,
    Keep,
}

/// Masked positions over a unit grid, the targets at those positions and,
/// for text, the corruption applied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskPlan {
    pub positions: Vec<bool>,
    /// Per masked position, in index order (text only).
    pub actions: Vec<MaskAction>,
    /// Ground-truth unit per masked position, in index order.
    pub targets: Vec<usize>,
}

impl MaskPlan {
    pub fn masked_indices(&self) -> Vec<usize> {
        self.positions
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn num_masked(&self) -> usize {
        self.positions.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.positions.is_empty() {
            0.0
        } else {
            self.num_masked() as f64 / self.positions.len() as f64
        }
    }

    /// Fills `targets` from a full grid of units.
    pub fn with_targets(mut self, units: &[usize]) -> Result<Self> {
        if units.len() != self.positions.len() {
            return shape_err("mask_targets", format!("{} units for {} positions", units.len(), self.positions.len()));
        }
        self.targets = self.masked_indices().into_iter().map(|i| units[i]).collect();
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub text_ratio: f64,
    pub tube_ratio: f64,
    /// Tube length range as fractions of the patch-temporal extent T'.
    pub tube_len_lo: f64,
    pub tube_len_hi: f64,
    pub span_p: f64,
    pub span_len: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            text_ratio: 0.30,
            tube_ratio: 0.50,
            tube_len_lo: 0.5,
            tube_len_hi: 1.0,
            span_p: 0.08,
            span_len: 10,
        }
    }
}

/// Corrupts one text sequence. `round(ratio · n)` non-pad positions (at
/// least one) are selected; each becomes `mask_id` with probability 0.8, a
/// uniformly random vocabulary id with probability 0.1, and stays unchanged
/// otherwise.
pub fn mask_language(
    tokens: &[usize],
    pad: &[bool],
    rng: &mut Rng,
    ratio: f64,
    vocab: usize,
    mask_id: usize,
) -> Result<(Vec<usize>, MaskPlan)> {
    if pad.len() != tokens.len() {
        return shape_err("mask_language", format!("{} pad flags for {} tokens", pad.len(), tokens.len()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return invalid(format!("mask_language: ratio {ratio} outside [0, 1]"));
    }
    let candidates: Vec<usize> = (0..tokens.len()).filter(|&i| !pad[i]).collect();
    if candidates.is_empty() {
        return invalid("mask_language: no non-pad tokens");
    }
    let n = ((ratio * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
    let mut chosen: Vec<usize> = rng
        .sample_distinct(candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.sort_unstable();

    let mut corrupted = tokens.to_vec();
    let mut positions = vec![false; tokens.len()];
    let mut actions = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for &i in &chosen {
        positions[i] = true;
        targets.push(tokens[i]);
        let u = rng.uniform();
        let action = if u < 0.8 {
            corrupted[i] = mask_id;
            MaskAction::MaskToken
        } else if u < 0.9 {
            corrupted[i] = rng.below(vocab);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        actions.push(action);
    }
    Ok((
        corrupted,
        MaskPlan {
            positions,
            actions,
            targets,
        },
    ))
}

/// Tube mask over a `[W', H', T']` cell grid: `round(ratio · W'H')` spatial
/// cells are chosen once and masked in every step of one contiguous temporal
/// run of length `ℓ' ∈ [ceil(lo · T'), floor(hi · T')]`.
pub fn tube_mask_plan(w: usize, h: usize, t: usize, rng: &mut Rng, cfg: &MaskingConfig) -> Result<MaskPlan> {
    if w * h < 2 || t == 0 {
        return invalid(format!("tube_mask: grid {w}x{h}x{t} is too small"));
    }
    let cells = ((cfg.tube_ratio * (w * h) as f64).round() as usize).min(w * h);
    let lo = ((cfg.tube_len_lo * t as f64).ceil() as usize).clamp(1, t);
    let hi = ((cfg.tube_len_hi * t as f64).floor() as usize).clamp(lo, t);
    let len = rng.int_inclusive(lo, hi);
    let start = rng.int_inclusive(0, t - len);
    let mut positions = vec![false; w * h * t];
    for cell in rng.sample_distinct(w * h, cells) {
        for k in start..start + len {
            positions[cell * t + k] = true;
        }
    }
    Ok(MaskPlan {
        positions,
        ..MaskPlan::default()
    })
}

/// Tube-masks one patch grid `[W', H', T', C]`, writing `mask_embedding`
/// into the masked cells.
pub fn tube_mask<T: Real>(grid: &Tensor<T>, rng: &mut Rng, cfg: &MaskingConfig, mask_embedding: &[T]) -> Result<(Tensor<T>, MaskPlan)> {
    let s = grid.shape();
    if s.len() != 4 || s.iter().any(|&d| d == 0) {
        return shape_err("tube_mask", format!("expected a non-empty [W', H', T', C] grid, got {s:?}"));
    }
    let plan = tube_mask_plan(s[0], s[1], s[2], rng, cfg)?;
    let out = fill_rows(grid, &plan.positions, mask_embedding)?;
    Ok((out, plan))
}

/// Span mask over `F` steps: `round(p · F)` distinct starts, each masking
/// `[s, s + l)` clipped at `F`; overlapping spans merge.
pub fn span_mask_plan(steps: usize, rng: &mut Rng, p: f64, len: usize) -> Result<MaskPlan> {
    if steps == 0 {
        return invalid("span_mask: no steps");
    }
    let starts = ((p * steps as f64).round() as usize).min(steps);
    let mut positions = vec![false; steps];
    for s in rng.sample_distinct(steps, starts) {
        for m in positions.iter_mut().skip(s).take(len) {
            *m = true;
        }
    }
    Ok(MaskPlan {
        positions,
        ..MaskPlan::default()
    })
}

/// Span-masks one feature sequence `[F, D]`.
pub fn span_mask<T: Real>(
    features: &Tensor<T>,
    rng: &mut Rng,
    p: f64,
    len: usize,
    mask_embedding: &[T],
) -> Result<(Tensor<T>, MaskPlan)> {
    let s = features.shape();
    if s.len() != 2 {
        return shape_err("span_mask", format!("expected [F, D], got {s:?}"));
    }
    let plan = span_mask_plan(s[0], rng, p, len)?;
    let out = fill_rows(features, &plan.positions, mask_embedding)?;
    Ok((out, plan))
}

fn fill_rows<T: Real>(x: &Tensor<T>, mask: &[bool], fill: &[T]) -> Result<Tensor<T>> {
    let d = *x.shape().last().unwrap();
    if fill.len() != d {
        return shape_err("mask_fill", format!("mask embedding of {} for width {d}", fill.len()));
    }
    let mut data = x.data().to_vec();
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        data[r * d..(r + 1) * d].copy_from_slice(fill);
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Pulls a patch-grid mask `[W', H', T']` back to a finer-or-coarser target
/// grid `[Wt, Ht, Tt]`: a target cell counts as masked when at least half of
/// the patch cells it overlaps are masked.
pub fn pullback_mask(patch: &[bool], pw: usize, ph: usize, pt: usize, tw: usize, th: usize, tt: usize) -> Result<Vec<bool>> {
    if patch.len() != pw * ph * pt || tw == 0 || th == 0 || tt == 0 {
        return shape_err("pullback_mask", format!("{} flags for {pw}x{ph}x{pt}", patch.len()));
    }
    // overlapping index range along one axis when mapping n_t cells onto n_p
    let span = |i: usize, n_t: usize, n_p: usize| -> (usize, usize) {
        let lo = i * n_p / n_t;
        let hi = ((i + 1) * n_p).div_ceil(n_t).max(lo + 1);
        (lo, hi)
    };
    let mut out = Vec::with_capacity(tw * th * tt);
    for i in 0..tw {
        let (wl, wh) = span(i, tw, pw);
        for j in 0..th {
            let (hl, hh) = span(j, th, ph);
            for k in 0..tt {
                let (tl, th_) = span(k, tt, pt);
                let (mut total, mut hit) = (0usize, 0usize);
                for a in wl..wh {
                    for b in hl..hh {
                        for c in tl..th_ {
                            total += 1;
                            hit += patch[(a * ph + b) * pt + c] as usize;
                        }
                    }
                }
                out.push(2 * hit >= total);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn language_counts() {
        let mut rng = Rng::new(3);
        let toks: Vec<usize> = (10..20).collect();
        let (_, plan) = mask_language(&toks, &[false; 10], &mut rng, 0.3, 256, 1).unwrap();
        assert_eq!(plan.num_masked(), 3);
        let (_, plan) = mask_language(&[42], &[false], &mut rng, 0.3, 256, 1).unwrap();
        assert_eq!(plan.num_masked(), 1);
        assert_eq!(plan.targets, vec![42]);
        assert!(mask_language(&[5, 6], &[true, true], &mut rng, 0.3, 256, 1).is_err());
    }

    #[test]
    fn tube_examples() {
        let cfg = MaskingConfig::default();
        let mut rng = Rng::new(1);
        let plan = tube_mask_plan(8, 8, 2, &mut rng, &cfg).unwrap();
        let n = plan.num_masked();
        assert!(n == 32 || n == 64, "{n}");
        let plan = tube_mask_plan(2, 2, 1, &mut rng, &cfg).unwrap();
        assert_eq!(plan.num_masked(), 2);
        assert!(tube_mask_plan(1, 1, 4, &mut rng, &cfg).is_err());
    }

    #[test]
    fn span_examples() {
        let mut rng = Rng::new(9);
        let plan = span_mask_plan(100, &mut rng, 0.0, 10).unwrap();
        assert_eq!(plan.num_masked(), 0);
        let feats = Tensor::new(vec![4, 2], vec![1.0f32; 8]).unwrap();
        let (out, _) = span_mask(&feats, &mut rng, 0.0, 10, &[0.0, 0.0]).unwrap();
        assert_eq!(out, feats);
    }

    #[test]
    fn pullback_majority() {
        // 4x4x1 patch cells onto a 2x2x1 target grid
        let mut patch = vec![false; 16];
        for b in 0..2 {
            patch[b] = true; // row a=0, b in {0,1}: 2 of the 4 cells under target (0,0)
        }
        let out = pullback_mask(&patch, 4, 4, 1, 2, 2, 1).unwrap();
        assert_eq!(out, vec![true, false, false, false]);
        // coarse patch time axis onto a finer target time axis
        let out = pullback_mask(&[true, false], 1, 1, 2, 1, 1, 4).unwrap();
        assert_eq!(out, vec![true, true, false, false]);
    }
}
