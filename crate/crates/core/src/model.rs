//! The full model: encoders, projections, fusion, prediction heads and
//! contrastive temperatures over one parameter store.

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, Encoders, FusionMode, Modality};
use crate::error::{invalid, Result};
use crate::fusion::{FusedBatch, Fusion, FusionConfig, FusionInput};
use crate::masking::{mask_language, pullback_mask, span_mask_plan, tube_mask_plan, MaskingConfig};
use crate::nn::Linear;
use crate::numkit::{Graph, ParamBuilder, ParamGroup, ParamStore, Real, Rng, Var};
use crate::objectives::{masked_unit_loss, pair_contrastive_loss, pooled_unit_rep, ContrastiveForm, Pair, Temperatures};
use crate::synthdata::{Batch, MASK};
use crate::vq::{MvmHead, SpeechTokenizer, VisionTokenizer, TARGET_BLOCK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoders: EncoderConfig,
    pub fusion: FusionConfig,
    pub masking: MaskingConfig,
    pub vision_codes: usize,
    pub speech_codes: usize,
    pub code_dim: usize,
    pub codebook_seed: u64,
    pub contrastive_form: ContrastiveForm,
    /// Starting value of every learnable temperature.
    pub init_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoders: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            masking: MaskingConfig::default(),
            vision_codes: 512,
            speech_codes: 320,
            code_dim: 16,
            codebook_seed: 7,
            contrastive_form: ContrastiveForm::InfoNce,
            init_temperature: 1.0 / 0.07,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoders.validate()?;
        self.fusion.validate()?;
        Ok(())
    }
}

/// Parameter layout of the model (ids into a [`ParamStore`]).
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub encoders: Encoders,
    pub fusion: Fusion,
    pub mlm_head: Linear,
    pub mvm_head: MvmHead,
    pub msm_head: Linear,
    pub temperatures: Temperatures,
    pub vision_tokenizer: VisionTokenizer,
    pub speech_tokenizer: SpeechTokenizer,
}

pub struct Model<T: Real> {
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::keyed(seed, &[0x1A17]);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Encoder);
        let encoders = Encoders::new(&mut pb, &config.encoders, config.fusion.hidden)?;
        let fusion = Fusion::new(&mut pb, &config.fusion)?;
        let h = config.fusion.hidden;
        let (mlm_head, mvm_head, msm_head) = pb.scope("heads", Some(ParamGroup::Fusion), |pb| -> Result<_> {
            Ok((
                Linear::new(pb, "mlm", h, config.encoders.vocab)?,
                MvmHead::new(pb, h, config.vision_codes)?,
                Linear::new(pb, "msm", h, config.speech_codes)?,
            ))
        })?;
        let temperatures = Temperatures::new(&mut pb, config.init_temperature)?;
        let vision_tokenizer = VisionTokenizer::new(config.vision_codes, config.code_dim, config.codebook_seed)?;
        let speech_tokenizer = SpeechTokenizer::new(
            config.speech_codes,
            config.encoders.stride_product(),
            16000.0,
            config.codebook_seed,
        )?;
        Ok(Self {
            arch: Architecture {
                config: config.clone(),
                encoders,
                fusion,
                mlm_head,
                mvm_head,
                msm_head,
                temperatures,
                vision_tokenizer,
                speech_tokenizer,
            },
            store,
        })
    }

    pub fn mode(&self) -> FusionMode {
        self.arch.config.fusion.mode
    }
}

/// Masks and targets for one batch.
#[derive(Clone, Debug, Default)]
pub struct MaskedInputs {
    pub tokens: Option<Vec<usize>>,
    pub mlm_rows: Vec<usize>,
    pub mlm_targets: Vec<usize>,
    /// Flags over the `[B, W/4, H/4, T/2]` patch grid.
    pub patch_mask: Option<Vec<bool>>,
    /// Rows of the `[B, W/16, H/16, T]` head grid and their code targets.
    pub mvm_rows: Vec<usize>,
    pub mvm_targets: Vec<usize>,
    /// Flags over the `[B, F]` speech frames.
    pub frame_mask: Option<Vec<bool>>,
    pub msm_rows: Vec<usize>,
    pub msm_targets: Vec<usize>,
}

const TAG_TEXT: u64 = 1;
const TAG_TUBE: u64 = 2;
const TAG_SPAN: u64 = 3;

impl Architecture {
    /// Draws every mask for `batch`; example `i` uses the substream
    /// `(seed, step, i, modality)`.
    pub fn plan_masks(&self, batch: &Batch, seed: u64, step: u64) -> Result<MaskedInputs> {
        let cfg = &self.config.masking;
        let b = batch.size();
        let mut out = MaskedInputs::default();
        if let (Some(tokens), Some(pad)) = (&batch.tokens, &batch.pad) {
            let l = batch.text_len;
            let mut corrupted = Vec::with_capacity(tokens.len());
            for i in 0..b {
                let mut rng = Rng::keyed(seed, &[step, i as u64, TAG_TEXT]);
                let (c, plan) = mask_language(
                    &tokens[i * l..(i + 1) * l],
                    &pad[i * l..(i + 1) * l],
                    &mut rng,
                    cfg.text_ratio,
                    self.config.encoders.vocab,
                    MASK,
                )?;
                corrupted.extend(c);
                for (j, t) in plan.masked_indices().into_iter().zip(plan.targets) {
                    out.mlm_rows.push(i * l + j);
                    out.mlm_targets.push(t);
                }
            }
            out.tokens = Some(corrupted);
        }
        if let Some(frames) = &batch.frames {
            let s = frames.shape();
            let (pw, ph, pt) = (s[1] / 4, s[2] / 4, s[3] / 2);
            let (tw, th, tt) = (s[1] / TARGET_BLOCK, s[2] / TARGET_BLOCK, s[3]);
            let targets = self.vision_tokenizer.targets(frames)?;
            let mut mask = Vec::with_capacity(b * pw * ph * pt);
            let cells = tw * th * tt;
            for i in 0..b {
                let mut rng = Rng::keyed(seed, &[step, i as u64, TAG_TUBE]);
                let plan = tube_mask_plan(pw, ph, pt, &mut rng, cfg)?;
                let head = pullback_mask(&plan.positions, pw, ph, pt, tw, th, tt)?;
                for (j, _) in head.iter().enumerate().filter(|(_, &m)| m) {
                    out.mvm_rows.push(i * cells + j);
                    out.mvm_targets.push(targets[i * cells + j]);
                }
                mask.extend(plan.positions);
            }
            out.patch_mask = Some(mask);
        }
        if let Some(wave) = &batch.wave {
            let frames = self.encoders.speech.num_frames(wave.shape()[1]);
            let targets = self.speech_tokenizer.targets(wave)?;
            let mut mask = Vec::with_capacity(b * frames);
            for i in 0..b {
                let mut rng = Rng::keyed(seed, &[step, i as u64, TAG_SPAN]);
                let plan = span_mask_plan(frames, &mut rng, cfg.span_p, cfg.span_len)?;
                for (j, _) in plan.positions.iter().enumerate().filter(|(_, &m)| m) {
                    out.msm_rows.push(i * frames + j);
                    out.msm_targets.push(targets[i * frames + j]);
                }
                mask.extend(plan.positions);
            }
            out.frame_mask = Some(mask);
        }
        Ok(out)
    }

    /// Encoder output of one modality, before projection.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch,
        m: Modality,
        masks: Option<&MaskedInputs>,
    ) -> Result<(Var, Option<Vec<bool>>)> {
        let missing = || crate::Error::Invalid(format!("batch has no {m:?} input"));
        match m {
            Modality::Language => {
                let tokens = masks
                    .and_then(|mk| mk.tokens.as_ref())
                    .or(batch.tokens.as_ref())
                    .ok_or_else(missing)?;
                let pad = batch.pad.as_ref().ok_or_else(missing)?;
                let x = self.encoders.language.forward(g, tokens, batch.size(), pad)?;
                Ok((x, Some(pad.iter().map(|&p| !p).collect())))
            }
            Modality::Vision => {
                let frames = batch.frames.as_ref().ok_or_else(missing)?.cast::<T>();
                let mask = masks.and_then(|mk| mk.patch_mask.as_deref());
                Ok((self.encoders.vision.forward(g, &frames, mask)?, None))
            }
            Modality::Speech => {
                let wave = batch.wave.as_ref().ok_or_else(missing)?.cast::<T>();
                let mask = masks.and_then(|mk| mk.frame_mask.as_deref());
                Ok((self.encoders.speech.forward(g, &wave, mask)?, None))
            }
        }
    }

    /// Encodes, projects and fuses the given modalities of `batch`.
    pub fn fuse<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch,
        modalities: &[Modality],
        masks: Option<&MaskedInputs>,
    ) -> Result<FusedBatch> {
        let mode = self.config.fusion.mode;
        let mut inputs = Vec::with_capacity(modalities.len());
        for &m in modalities {
            let (x, valid) = self.encode(g, batch, m, masks)?;
            let x = self.encoders.projection(m).forward(g, x, mode)?;
            inputs.push(FusionInput { modality: m, x, valid });
        }
        self.fusion.forward(g, &inputs)
    }

    /// Masked-unit losses of one joint pass: `(mlm, mvm, msm)`, each present
    /// when the batch has that modality and at least one masked unit.
    pub fn masked_losses<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch,
        masks: &MaskedInputs,
    ) -> Result<[Option<Var>; 3]> {
        let mods = batch.modalities();
        let fused = self.fuse(g, batch, &mods, Some(masks))?;
        let h = self.config.fusion.hidden;
        let mut out = [None, None, None];
        if let Some(f) = fused.get(Modality::Language) {
            if !masks.mlm_rows.is_empty() {
                let rows = g.gather_rows(f.flat, masks.mlm_rows.clone(), vec![masks.mlm_rows.len(), h])?;
                let logits = self.mlm_head.forward(g, rows)?;
                let idx: Vec<usize> = (0..masks.mlm_rows.len()).collect();
                out[0] = Some(masked_unit_loss(g, logits, &idx, &masks.mlm_targets)?);
            }
        }
        if let Some(f) = fused.get(Modality::Vision) {
            if !masks.mvm_rows.is_empty() {
                let logits = self.mvm_head.masked_logits(g, f.x, &masks.mvm_rows)?;
                let idx: Vec<usize> = (0..masks.mvm_rows.len()).collect();
                out[1] = Some(masked_unit_loss(g, logits, &idx, &masks.mvm_targets)?);
            }
        }
        if let Some(f) = fused.get(Modality::Speech) {
            if !masks.msm_rows.is_empty() {
                let rows = g.gather_rows(f.flat, masks.msm_rows.clone(), vec![masks.msm_rows.len(), h])?;
                let logits = self.msm_head.forward(g, rows)?;
                let idx: Vec<usize> = (0..masks.msm_rows.len()).collect();
                out[2] = Some(masked_unit_loss(g, logits, &idx, &masks.msm_targets)?);
            }
        }
        Ok(out)
    }

    /// Pooled unit representation `[B, H]` of one modality passed through
    /// the fusion network on its own.
    pub fn unit_rep<T: Real>(&self, g: &mut Graph<'_, T>, batch: &Batch, m: Modality) -> Result<Var> {
        let fused = self.fuse(g, batch, &[m], None)?;
        let f = fused.get(m).expect("fused modality");
        pooled_unit_rep(g, f.flat, f.valid.as_deref())
    }

    /// Mean of the fused outputs over all positions of all given modalities
    /// (pads excluded): `[B, H]`, not normalized.
    pub fn joint_rep<T: Real>(&self, g: &mut Graph<'_, T>, batch: &Batch, modalities: &[Modality]) -> Result<Var> {
        let fused = self.fuse(g, batch, modalities, None)?;
        let parts: Vec<Var> = fused.outputs.iter().map(|o| o.flat).collect();
        let b = batch.size();
        let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
        let any_mask = fused.outputs.iter().any(|o| o.valid.is_some());
        let valid = any_mask.then(|| {
            let mut v = Vec::new();
            for bi in 0..b {
                for o in &fused.outputs {
                    let n = g.shape(o.flat)[1];
                    match &o.valid {
                        Some(m) => v.extend_from_slice(&m[bi * n..(bi + 1) * n]),
                        None => v.extend(std::iter::repeat(true).take(n)),
                    }
                }
            }
            v
        });
        g.mean_pool(x, valid.as_deref())
    }

    /// Sum of the pairwise contrastive losses over `reps` (one per entry of
    /// `modalities`), with the individual values.
    pub fn contrastive_sum<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        modalities: &[Modality],
        reps: &[Var],
    ) -> Result<(Var, Vec<(Pair, Var)>)> {
        let pairs = Pair::within(modalities);
        if pairs.is_empty() {
            return invalid("contrastive loss needs two modalities");
        }
        let find = |m: Modality| modalities.iter().position(|&x| x == m).unwrap();
        let mut terms = Vec::with_capacity(pairs.len());
        for p in pairs {
            let (a, b) = p.modalities();
            let tau = self.temperatures.tau(g, p)?;
            let l = pair_contrastive_loss(g, reps[find(a)], reps[find(b)], tau, self.config.contrastive_form)?;
            terms.push((p, l));
        }
        let mut total = terms[0].1;
        for &(_, l) in &terms[1..] {
            total = g.add(total, l)?;
        }
        Ok((total, terms))
    }
}
