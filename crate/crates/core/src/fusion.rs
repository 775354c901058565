//! Multimodal fusion network over any non-empty subset of {V, L, S}.
//!
//! *Merge* mode flattens every modality to a sequence, concatenates them and
//! runs shared post-norm encoder layers. *Co* mode keeps one stream per
//! modality: modality-specific self-attention, then cross-attention whose keys
//! and values are the other modalities' self outputs, then a modality-specific
//! FFN. Neither mode adds positional information.

use serde::{Deserialize, Serialize};

use crate::encoders::{FusionMode, Modality};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{Attention, EncoderLayer, FeedForward, LayerNorm};
use crate::numkit::{Graph, ParamBuilder, ParamGroup, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::desk(FusionMode::Merge)
    }
}

impl FusionConfig {
    pub fn desk(mode: FusionMode) -> Self {
        Self {
            mode,
            layers: if mode == FusionMode::Merge { 3 } else { 2 },
            hidden: 64,
            heads: 4,
            ffn: 256,
        }
    }

    pub fn paper(mode: FusionMode) -> Self {
        Self {
            mode,
            layers: if mode == FusionMode::Merge { 6 } else { 3 },
            hidden: 768,
            heads: 12,
            ffn: 3072,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return invalid("fusion layers, hidden, heads and ffn must be positive");
        }
        if self.hidden % self.heads != 0 {
            return invalid(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        Ok(())
    }

    /// Scalar parameter count of the fusion layers (projections excluded).
    pub fn num_params(&self) -> usize {
        let h = self.hidden;
        let attn = 4 * (h * h + h);
        let ffn = h * self.ffn + self.ffn + self.ffn * h + h;
        let norm = 2 * h;
        match self.mode {
            FusionMode::Merge => self.layers * (attn + ffn + 2 * norm),
            FusionMode::Co => self.layers * 3 * (2 * attn + ffn + 3 * norm),
        }
    }
}

/// One modality's projected features entering the fusion network.
#[derive(Clone, Debug)]
pub struct FusionInput {
    pub modality: Modality,
    /// `[B, .., H]`; all axes between batch and width are flattened.
    pub x: Var,
    /// Valid (non-pad) flags over the flattened `[B, N]` positions.
    pub valid: Option<Vec<bool>>,
}

/// Where one modality sits in the flattened merge sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub modality: Modality,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct FusedOutput {
    pub modality: Modality,
    /// Same shape as the corresponding input.
    pub x: Var,
    /// `[B, N, H]` view used for pooling.
    pub flat: Var,
    pub valid: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct FusedBatch {
    pub outputs: Vec<FusedOutput>,
    pub segments: Vec<Segment>,
}

impl FusedBatch {
    pub fn get(&self, m: Modality) -> Option<&FusedOutput> {
        self.outputs.iter().find(|o| o.modality == m)
    }
}

#[derive(Clone, Debug)]
pub struct CoBlock {
    pub self_attn: Attention,
    pub self_norm: LayerNorm,
    pub cross_attn: Attention,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl CoBlock {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, m: Modality, cfg: &FusionConfig) -> Result<Self> {
        pb.scope(&m.letter().to_string(), None, |pb| {
            Ok(Self {
                self_attn: Attention::new(pb, "self_attn", cfg.hidden, cfg.heads)?,
                self_norm: LayerNorm::new(pb, "self_norm", cfg.hidden)?,
                cross_attn: Attention::new(pb, "cross_attn", cfg.hidden, cfg.heads)?,
                cross_norm: LayerNorm::new(pb, "cross_norm", cfg.hidden)?,
                ffn: FeedForward::new(pb, "ffn", cfg.hidden, cfg.ffn)?,
                ffn_norm: LayerNorm::new(pb, "ffn_norm", cfg.hidden)?,
            })
        })
    }
}

#[derive(Clone, Debug)]
pub enum FusionLayers {
    Merge(Vec<EncoderLayer>),
    /// `[layer][modality index]`
    Co(Vec<[CoBlock; 3]>),
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    pub layers: FusionLayers,
}

struct Flat {
    modality: Modality,
    shape: Vec<usize>,
    x: Var,
    valid: Option<Vec<bool>>,
}

impl Fusion {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &FusionConfig) -> Result<Self> {
        cfg.validate()?;
        pb.scope("fusion", Some(ParamGroup::Fusion), |pb| {
            let layers = match cfg.mode {
                FusionMode::Merge => FusionLayers::Merge(
                    (0..cfg.layers)
                        .map(|i| EncoderLayer::new(pb, &format!("layer{i}"), cfg.hidden, cfg.heads, cfg.ffn))
                        .collect::<Result<_>>()?,
                ),
                FusionMode::Co => FusionLayers::Co(
                    (0..cfg.layers)
                        .map(|i| {
                            pb.scope(&format!("layer{i}"), None, |pb| {
                                Ok([
                                    CoBlock::new(pb, Modality::Vision, cfg)?,
                                    CoBlock::new(pb, Modality::Language, cfg)?,
                                    CoBlock::new(pb, Modality::Speech, cfg)?,
                                ])
                            })
                        })
                        .collect::<Result<_>>()?,
                ),
            };
            Ok(Self {
                config: cfg.clone(),
                layers,
            })
        })
    }

    fn flatten<T: Real>(&self, g: &mut Graph<'_, T>, inputs: &[FusionInput]) -> Result<Vec<Flat>> {
        if inputs.is_empty() {
            return invalid("fuse: empty modality set");
        }
        let mut seen = Vec::new();
        let mut batch = None;
        let mut flats = Vec::with_capacity(inputs.len());
        for inp in inputs {
            if seen.contains(&inp.modality) {
                return invalid(format!("fuse: {:?} given twice", inp.modality));
            }
            seen.push(inp.modality);
            let shape = g.shape(inp.x).to_vec();
            if shape.len() < 3 || *shape.last().unwrap() != self.config.hidden {
                return shape_err("fuse", format!("{:?} input {shape:?}, hidden {}", inp.modality, self.config.hidden));
            }
            let b = shape[0];
            if *batch.get_or_insert(b) != b {
                return shape_err("fuse", "modalities disagree on batch size");
            }
            let n = shape[1..shape.len() - 1].iter().product::<usize>();
            if let Some(v) = &inp.valid {
                if v.len() != b * n {
                    return shape_err("fuse", format!("{:?} mask of {} for {b}x{n}", inp.modality, v.len()));
                }
            }
            let x = g.reshape(inp.x, vec![b, n, self.config.hidden])?;
            flats.push(Flat {
                modality: inp.modality,
                shape,
                x,
                valid: inp.valid.clone(),
            });
        }
        Ok(flats)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, inputs: &[FusionInput]) -> Result<FusedBatch> {
        let flats = self.flatten(g, inputs)?;
        let mut segments = Vec::with_capacity(flats.len());
        let mut start = 0;
        for f in &flats {
            segments.push(Segment {
                modality: f.modality,
                start,
                len: f.shape[1..f.shape.len() - 1].iter().product(),
            });
            start += segments.last().unwrap().len;
        }
        let outs = match &self.layers {
            FusionLayers::Merge(layers) => self.merge_forward(g, &flats, &segments, layers)?,
            FusionLayers::Co(layers) => self.co_forward(g, &flats, layers)?,
        };
        let mut outputs = Vec::with_capacity(flats.len());
        for (f, flat) in flats.iter().zip(outs) {
            let x = g.reshape(flat, f.shape.clone())?;
            outputs.push(FusedOutput {
                modality: f.modality,
                x,
                flat,
                valid: f.valid.clone(),
            });
        }
        Ok(FusedBatch { outputs, segments })
    }

    fn merge_forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        flats: &[Flat],
        segments: &[Segment],
        layers: &[EncoderLayer],
    ) -> Result<Vec<Var>> {
        let parts: Vec<Var> = flats.iter().map(|f| f.x).collect();
        let mut x = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
        let refs: Vec<&Flat> = flats.iter().collect();
        let valid = concat_masks(flats[0].shape[0], &refs);
        for layer in layers {
            x = layer.forward(g, x, valid.as_deref())?;
        }
        segments
            .iter()
            .map(|s| if flats.len() == 1 { Ok(x) } else { g.slice(x, 1, s.start, s.len) })
            .collect()
    }

    fn co_forward<T: Real>(&self, g: &mut Graph<'_, T>, flats: &[Flat], layers: &[[CoBlock; 3]]) -> Result<Vec<Var>> {
        let mut xs: Vec<Var> = flats.iter().map(|f| f.x).collect();
        for blocks in layers {
            let mut selfs = Vec::with_capacity(xs.len());
            for (f, &x) in flats.iter().zip(&xs) {
                let blk = &blocks[f.modality.index()];
                let a = blk.self_attn.forward(g, x, x, f.valid.as_deref())?;
                let h = g.add(x, a)?;
                selfs.push(blk.self_norm.forward(g, h)?);
            }
            let mut next = Vec::with_capacity(xs.len());
            for (i, f) in flats.iter().enumerate() {
                let blk = &blocks[f.modality.index()];
                let h = if flats.len() > 1 {
                    let others: Vec<usize> = (0..flats.len()).filter(|&j| j != i).collect();
                    let ctx_parts: Vec<Var> = others.iter().map(|&j| selfs[j]).collect();
                    let ctx = if ctx_parts.len() == 1 { ctx_parts[0] } else { g.concat(&ctx_parts, 1)? };
                    let ctx_flats: Vec<&Flat> = others.iter().map(|&j| &flats[j]).collect();
                    let mask = concat_masks(g.shape(ctx)[0], &ctx_flats);
                    let c = blk.cross_attn.forward(g, selfs[i], ctx, mask.as_deref())?;
                    g.add(selfs[i], c)?
                } else {
                    // no other modality to attend to: the cross term is absent
                    selfs[i]
                };
                let h = blk.cross_norm.forward(g, h)?;
                let ff = blk.ffn.forward(g, h)?;
                let y = g.add(h, ff)?;
                next.push(blk.ffn_norm.forward(g, y)?);
            }
            xs = next;
        }
        Ok(xs)
    }
}

/// Per-example concatenation of the modalities' valid flags, or `None` when
/// every position is valid.
fn concat_masks(batch: usize, flats: &[&Flat]) -> Option<Vec<bool>> {
    if flats.iter().all(|f| f.valid.is_none()) {
        return None;
    }
    let mut out = Vec::new();
    for b in 0..batch {
        for f in flats {
            let n = f.shape[1..f.shape.len() - 1].iter().product::<usize>();
            match &f.valid {
                Some(v) => out.extend_from_slice(&v[b * n..(b + 1) * n]),
                None => out.extend(std::iter::repeat(true).take(n)),
            }
        }
    }
    Some(out)
}
