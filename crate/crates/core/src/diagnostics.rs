//! Finite-difference gradient checks of every trainable component, run on a
//! tiny 64-bit model. Shared by the `grad-check` command and the test suite.

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, FusionMode, Modality};
use crate::error::{invalid, Result};
use crate::fusion::FusionConfig;
use crate::masking::MaskingConfig;
use crate::model::{MaskedInputs, Model, ModelConfig};
use crate::numkit::{check_param_grads_with, GradCheck, Graph, ParamId, Rng, Stencil, Tensor, Var};
use crate::objectives::{ContrastiveForm, Pair};
use crate::synthdata::{make_batch, Batch, StreamKind, SynthConfig};

/// Whole-model losses sum thousands of rounded terms, so the fourth-order
/// central stencil is used with a step large enough to keep their rounding
/// noise small against the smallest gradients.
pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

/// Names accepted by [`grad_check_module`].
pub const MODULES: [&str; 11] = [
    "language",
    "vision",
    "speech",
    "fusion-merge",
    "fusion-co",
    "deconv",
    "mlm",
    "mvm",
    "msm",
    "contrastive",
    "temperature",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub module: String,
    pub seeds: usize,
    /// Coordinates compared over all seeds.
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub passed: bool,
}

/// Model and data small enough for coordinate-wise differencing: 32x32x2
/// frames, 960 audio samples (3 speech frames), width 8.
pub fn tiny_setup(mode: FusionMode) -> (ModelConfig, SynthConfig) {
    let model = ModelConfig {
        encoders: EncoderConfig {
            h_l: 8,
            h_v: 8,
            h_s: 8,
            depth: 1,
            heads: 2,
            patch_channels: 6,
            speech_channels: vec![4, 4, 4],
            ..EncoderConfig::default()
        },
        fusion: FusionConfig {
            mode,
            layers: if mode == FusionMode::Merge { 2 } else { 1 },
            hidden: 8,
            heads: 2,
            ffn: 12,
        },
        masking: MaskingConfig {
            span_p: 0.4,
            span_len: 2,
            ..MaskingConfig::default()
        },
        vision_codes: 12,
        speech_codes: 10,
        code_dim: 4,
        codebook_seed: 3,
        contrastive_form: ContrastiveForm::InfoNce,
        init_temperature: 2.0,
    };
    let synth = SynthConfig {
        width: 32,
        height: 32,
        pair_frames: 2,
        clip_frames: 2,
        samples: 960,
        ..SynthConfig::default()
    };
    (model, synth)
}

/// `Σ y ⊙ W` with a fixed random `W`, so every output coordinate matters.
pub fn random_projection(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n = shape.iter().product();
    let mut rng = Rng::keyed(seed, &[0x9207]);
    let w = g.constant(Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())?)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Attention key biases add the same constant to every score of a query row,
/// which the softmax cancels: their gradient is exactly zero, so a relative
/// error against central differences is pure rounding noise. They are covered
/// by [`key_bias_gradients`] instead.
pub fn is_shift_invariant(name: &str) -> bool {
    name.ends_with("key.bias")
}

struct Case {
    model: Model<f64>,
    batch: Batch,
    masks: MaskedInputs,
}

fn case(mode: FusionMode, seed: u64) -> Result<Case> {
    let (cfg, synth) = tiny_setup(mode);
    let model = Model::<f64>::new(&cfg, seed)?;
    let batch = make_batch(StreamKind::Video, 0, 3, seed, &synth)?;
    let masks = model.arch.plan_masks(&batch, seed, 0)?;
    Ok(Case { model, batch, masks })
}

fn one_seed(module: &str, seed: u64) -> Result<GradCheck> {
    let mode = if module == "fusion-co" {
        FusionMode::Co
    } else {
        FusionMode::Merge
    };
    let Case {
        mut model,
        batch,
        masks,
    } = case(mode, seed)?;
    let arch = model.arch.clone();
    let mut rng = Rng::keyed(seed, &[0xFDC4]);
    let per_param = 3;
    let encoder = |m: Modality| {
        let arch = arch.clone();
        let batch = batch.clone();
        let masks = masks.clone();
        move |g: &mut Graph<'_, f64>| -> Result<Var> {
            let (x, _) = arch.encode(g, &batch, m, Some(&masks))?;
            random_projection(g, x, seed)
        }
    };
    let masked = |which: usize| {
        let arch = arch.clone();
        let batch = batch.clone();
        let masks = masks.clone();
        move |g: &mut Graph<'_, f64>| -> Result<Var> {
            let losses = arch.masked_losses(g, &batch, &masks)?;
            losses[which].ok_or_else(|| crate::Error::Invalid("tiny case has no masked units".into()))
        }
    };
    let fused = {
        let arch = arch.clone();
        let batch = batch.clone();
        let masks = masks.clone();
        move |g: &mut Graph<'_, f64>| -> Result<Var> {
            let f = arch.fuse(g, &batch, &Modality::ALL, Some(&masks))?;
            let mut total: Option<Var> = None;
            for (i, o) in f.outputs.iter().enumerate() {
                let t = random_projection(g, o.flat, seed + i as u64)?;
                total = Some(match total {
                    Some(acc) => g.add(acc, t)?,
                    None => t,
                });
            }
            Ok(total.expect("three modalities"))
        }
    };
    let contrastive = {
        let arch = arch.clone();
        let batch = batch.clone();
        move |g: &mut Graph<'_, f64>| -> Result<Var> {
            let reps: Vec<Var> = Modality::ALL
                .iter()
                .map(|&m| arch.unit_rep(g, &batch, m))
                .collect::<Result<_>>()?;
            Ok(arch.contrastive_sum(g, &Modality::ALL, &reps)?.0)
        }
    };
    let names: Vec<(ParamId, String)> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    let pick = |pred: &dyn Fn(&str) -> bool| -> Vec<ParamId> {
        names
            .iter()
            .filter(|(_, n)| pred(n) && !is_shift_invariant(n))
            .map(|(id, _)| *id)
            .collect()
    };
    let store = &mut model.store;
    match module {
        "language" => {
            let ids = pick(&|n| n.starts_with("lang_enc"));
            check_param_grads_with(store, &ids, per_param, &mut rng, FD_STEP, Stencil::Central4, encoder(Modality::Language))
        }
        "vision" => {
            let ids = pick(&|n| n.starts_with("vis_enc"));
            check_param_grads_with(store, &ids, per_param, &mut rng, FD_STEP, Stencil::Central4, encoder(Modality::Vision))
        }
        "speech" => {
            let ids = pick(&|n| n.starts_with("speech_enc"));
            check_param_grads_with(store, &ids, per_param, &mut rng, FD_STEP, Stencil::Central4, encoder(Modality::Speech))
        }
        "fusion-merge" | "fusion-co" => {
            let ids = pick(&|n| n.starts_with("fusion") || n.starts_with("proj"));
            check_param_grads_with(store, &ids, per_param, &mut rng, FD_STEP, Stencil::Central4, fused)
        }
        "deconv" => {
            let ids = pick(&|n| n.starts_with("heads.mvm_head"));
            check_param_grads_with(store, &ids, per_param, &mut rng, FD_STEP, Stencil::Central4, masked(1))
        }
        "mlm" | "mvm" | "msm" => {
            let which = ["mlm", "mvm", "msm"].iter().position(|&m| m == module).unwrap();
            let ids = pick(&|_| true);
            check_param_grads_with(store, &ids, 1, &mut rng, FD_STEP, Stencil::Central4, masked(which))
        }
        "contrastive" => {
            let ids = pick(&|n| !n.starts_with("heads"));
            check_param_grads_with(store, &ids, 1, &mut rng, FD_STEP, Stencil::Central4, contrastive)
        }
        "temperature" => {
            let ids: Vec<ParamId> = [Pair::VL, Pair::VS, Pair::LS].iter().map(|&p| arch.temperatures.id(p)).collect();
            check_param_grads_with(store, &ids, 1, &mut rng, FD_STEP, Stencil::Central4, contrastive)
        }
        other => invalid(format!("unknown grad-check module '{other}' (known: {})", MODULES.join(", "))),
    }
}

/// Largest analytic and numeric derivative magnitudes over every attention
/// key bias of the fused objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyBiasReport {
    pub params: usize,
    pub coords: usize,
    pub max_analytic: f64,
    pub max_numeric: f64,
}

/// Checks that the key biases of every attention block in `mode` get zero
/// gradient, both analytically and by differencing.
pub fn key_bias_gradients(mode: FusionMode, seed: u64) -> Result<KeyBiasReport> {
    let Case {
        mut model,
        batch,
        masks,
    } = case(mode, seed)?;
    let arch = model.arch.clone();
    let ids: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| is_shift_invariant(&p.name))
        .map(|(id, _)| id)
        .collect();
    let loss = move |g: &mut Graph<'_, f64>| -> Result<Var> {
        let f = arch.fuse(g, &batch, &Modality::ALL, Some(&masks))?;
        let mut total: Option<Var> = None;
        for (i, o) in f.outputs.iter().enumerate() {
            let t = random_projection(g, o.flat, seed + i as u64)?;
            total = Some(match total {
                Some(acc) => g.add(acc, t)?,
                None => t,
            });
        }
        Ok(total.expect("three modalities"))
    };
    let mut rng = Rng::keyed(seed, &[0xB1A5]);
    let c = check_param_grads_with(&mut model.store, &ids, 2, &mut rng, FD_STEP, Stencil::Central4, loss)?;
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(KeyBiasReport {
        params: ids.len(),
        coords: c.analytic.len(),
        max_analytic: max_abs(&c.analytic),
        max_numeric: max_abs(&c.numeric),
    })
}

/// Runs one module's check over seeds `0..seeds`.
pub fn grad_check_module(module: &str, seeds: usize) -> Result<GradCheckReport> {
    if !MODULES.contains(&module) {
        return invalid(format!("unknown grad-check module '{module}' (known: {})", MODULES.join(", ")));
    }
    let mut report = GradCheckReport {
        module: module.to_string(),
        seeds,
        coords: 0,
        max_rel_err: 0.0,
        worst_seed: 0,
        worst_pair: (0.0, 0.0),
        passed: true,
    };
    for seed in 0..seeds as u64 {
        let c = one_seed(module, seed)?;
        report.coords += c.analytic.len();
        if c.max_rel_err > report.max_rel_err {
            report.max_rel_err = c.max_rel_err;
            report.worst_seed = seed;
            report.worst_pair = (c.analytic[c.worst_index], c.numeric[c.worst_index]);
        }
    }
    report.passed = report.max_rel_err < FD_TOL;
    Ok(report)
}

/// All modules, or only `filter`.
pub fn grad_check_suite(filter: Option<&str>, seeds: usize) -> Result<Vec<GradCheckReport>> {
    match filter {
        Some(m) => Ok(vec![grad_check_module(m, seeds)?]),
        None => MODULES.iter().map(|m| grad_check_module(m, seeds)).collect(),
    }
}
