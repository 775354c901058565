//! The pretraining step and loop.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::optim::{clip_global_norm, warmup_lr, AdamW};
use crate::error::{Error, Result};
use crate::model::{Architecture, MaskedInputs, Model};
use crate::numkit::{Graph, ParamStore, Real};
use crate::objectives::{grad_cache_step, total_pretrain_loss, LossParts, LossReport, LossWeights, Pair, ParamGrads};
use crate::synthdata::{mix_stream, Batch, StreamKind};

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub kind: StreamKind,
    pub lr_fusion: f64,
    pub lr_enc: f64,
    pub mlm: Option<f64>,
    pub mvm: Option<f64>,
    pub msm: Option<f64>,
    pub vl: Option<f64>,
    pub vs: Option<f64>,
    pub ls: Option<f64>,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub tau_vl: f64,
    pub tau_vs: f64,
    pub tau_ls: f64,
    pub grad_norm: f64,
}

impl MetricsRecord {
    pub fn parts(&self) -> LossParts {
        LossParts {
            mlm: self.mlm,
            mvm: self.mvm,
            msm: self.msm,
            vl: self.vl,
            vs: self.vs,
            ls: self.ls,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
        }
    }
}

fn densify<T: Real>(store: &ParamStore<T>, sparse: ParamGrads<T>, scale: T, dense: &mut [Vec<T>]) {
    for (id, g) in sparse {
        for (d, v) in dense[id.index()].iter_mut().zip(g) {
            *d += scale * v;
        }
    }
    debug_assert_eq!(dense.len(), store.len());
}

/// Losses and dense parameter gradients (store order) of one batch: the
/// weighted masked-unit losses from one joint pass plus `λ` times the
/// contrastive losses from single-modality passes through the gradient cache.
pub fn step_gradients<T: Real>(
    arch: &Architecture,
    store: &ParamStore<T>,
    batch: &Batch,
    masks: &MaskedInputs,
    weights: &LossWeights,
    chunk: usize,
) -> Result<(LossReport, Vec<Vec<T>>)> {
    let mut dense: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.tensor.len()]).collect();
    let mut parts = LossParts::default();

    // masked-unit losses
    {
        let mut g = Graph::with_params(store);
        let [mlm, mvm, msm] = arch.masked_losses(&mut g, batch, masks)?;
        let mut total = None;
        for (loss, w, slot) in [
            (mlm, weights.alpha, &mut parts.mlm),
            (mvm, weights.beta, &mut parts.mvm),
            (msm, weights.gamma, &mut parts.msm),
        ] {
            if let Some(l) = loss {
                *slot = Some(g.item(l)?.as_f64());
                let term = g.scale(l, T::of(w))?;
                total = Some(match total {
                    Some(t) => g.add(t, term)?,
                    None => term,
                });
            }
        }
        if let Some(t) = total {
            g.backward(t)?;
            densify(store, g.into_param_grads(), T::one(), &mut dense);
        }
    }

    // contrastive losses
    let mods = batch.modalities();
    if Pair::within(&mods).len() > 0 {
        let values = RefCell::new(Vec::new());
        let (_, grads) = grad_cache_step(
            store,
            batch.size(),
            chunk,
            |g, range| {
                let part = batch.slice(range)?;
                mods.iter().map(|&m| arch.unit_rep(g, &part, m)).collect()
            },
            |g, reps| {
                let (sum, terms) = arch.contrastive_sum(g, &mods, reps)?;
                let mut v = values.borrow_mut();
                v.clear();
                for (p, l) in terms {
                    v.push((p, g.item(l)?.as_f64()));
                }
                Ok(sum)
            },
        )?;
        for (p, v) in values.into_inner() {
            parts.set_pair(p, v);
        }
        densify(store, grads, T::of(weights.lambda), &mut dense);
    }

    Ok((total_pretrain_loss(parts, *weights)?, dense))
}

/// Owns the model and optimizer state of a pretraining run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    /// Completed steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.seed)?;
        let optimizer = AdamW::new(&model.store, config.adam);
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
        })
    }

    pub fn lrs(&self, step: u64) -> (f64, f64) {
        (
            warmup_lr(self.config.lr_fusion, step, self.config.warmup),
            warmup_lr(self.config.lr_encoders, step, self.config.warmup),
        )
    }

    /// Runs one step and returns its record.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let step = self.step + 1;
        let cfg = &self.config;
        let batch = mix_stream(&cfg.stream, &cfg.synth, cfg.seed, self.step)?;
        let masks = self.model.arch.plan_masks(&batch, cfg.seed, self.step)?;
        let (report, mut grads) = step_gradients(
            &self.model.arch,
            &self.model.store,
            &batch,
            &masks,
            &cfg.weights,
            cfg.chunk,
        )
        .map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("total loss {}", report.total),
            });
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite gradient norm".into(),
            });
        }
        let (lr_fusion, lr_enc) = self.lrs(step);
        self.optimizer.update(&mut self.model.store, &grads, lr_fusion, lr_enc);
        self.model.arch.temperatures.clamp(&mut self.model.store);
        self.step = step;
        let temps = &self.model.arch.temperatures;
        let w = report.weights;
        Ok(MetricsRecord {
            step,
            kind: batch.kind,
            lr_fusion,
            lr_enc,
            mlm: report.parts.mlm,
            mvm: report.parts.mvm,
            msm: report.parts.msm,
            vl: report.parts.vl,
            vs: report.parts.vs,
            ls: report.parts.ls,
            total: report.total,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            lambda: w.lambda,
            tau_vl: temps.value(&self.model.store, Pair::VL),
            tau_vs: temps.value(&self.model.store, Pair::VS),
            tau_ls: temps.value(&self.model.store, Pair::LS),
            grad_norm,
        })
    }

    /// Trains until `config.steps`, handing every `log_every`-th record to
    /// `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let rec = self.train_step()?;
            if rec.step % self.config.log_every == 0 || rec.step == self.config.steps {
                sink(&rec)?;
            }
        }
        Ok(())
    }
}

/// Written to `diverged.json` when a run aborts on a non-finite value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub step: u64,
    pub detail: String,
    /// Last record logged before the failure.
    pub last: Option<MetricsRecord>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DIVERGED_FILE: &str = "diverged.json";

pub struct PretrainOutcome {
    pub trainer: Trainer,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Full pretraining run into `out_dir`: the metrics stream, then the final
/// checkpoint. Divergence leaves a diagnostic record and returns the error.
pub fn pretrain(config: TrainConfig, out_dir: &Path) -> Result<PretrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let mut trainer = Trainer::new(config)?;
    let mut out = BufWriter::new(File::create(&metrics_path)?);
    let mut last = None;
    let result = trainer.run(|rec| {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
        last = Some(rec.clone());
        Ok(())
    });
    out.flush()?;
    if let Err(e) = result {
        if let Error::Diverged { step, detail } = &e {
            let rec = DivergenceRecord {
                step: *step,
                detail: detail.clone(),
                last,
            };
            std::fs::write(out_dir.join(DIVERGED_FILE), serde_json::to_vec_pretty(&rec)?)?;
        }
        return Err(e);
    }
    Checkpoint::capture(&trainer).save(&checkpoint_path)?;
    Ok(PretrainOutcome {
        trainer,
        metrics_path,
        checkpoint_path,
    })
}

/// Parses a metrics stream written by [`pretrain`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
