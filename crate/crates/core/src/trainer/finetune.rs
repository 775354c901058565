//! Downstream tasks: a linear head on the frozen joint representation (mean
//! of the fused outputs over every position of the chosen modalities).

use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, AdamW};
use crate::encoders::Modality;
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::nn::Linear;
use crate::numkit::{Graph, ParamBuilder, ParamGroup, ParamStore, Rng, Tensor};
use crate::synthdata::{make_batch, Latent, StreamKind, SynthConfig, ATTRS};

const FINETUNE_SALT: u64 = 0xF1E7_07E5_0000_0001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Predict the class `k` of a clip.
    Cls16,
    /// Predict attribute `a`, scaled to `[0, 1]`.
    Regress,
}

impl std::str::FromStr for Task {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls16" => Ok(Task::Cls16),
            "regress" => Ok(Task::Regress),
            other => invalid(format!("unknown task '{other}' (expected cls16 or regress)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub train: usize,
    pub test: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: 512,
            test: 256,
            epochs: 30,
            batch: 64,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy for classification, mean absolute error for regression.
    pub test_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub task: Task,
    pub modalities: String,
    pub epochs: Vec<EpochRecord>,
}

impl FinetuneReport {
    pub fn final_metric(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.test_metric)
    }
}

/// Joint representations `[n, H]` of clips `first..first + n`.
pub fn joint_features(
    model: &Model<f32>,
    modalities: &[Modality],
    first: u64,
    n: usize,
    seed: u64,
    synth: &SynthConfig,
) -> Result<(Vec<f64>, Vec<Latent>)> {
    let mut feats = Vec::new();
    let mut latents = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let count = 16.min(n - start);
        let batch = make_batch(StreamKind::Video, first + start as u64, count, seed, synth)?;
        let mut g = Graph::with_params(&model.store);
        let r = model.arch.joint_rep(&mut g, &batch, modalities)?;
        feats.extend(g.value(r).iter().map(|&v| v as f64));
        latents.extend(batch.latents);
        start += count;
    }
    Ok((feats, latents))
}

fn standardize(train: &mut [f64], test: &mut [f64], d: usize) {
    let n = train.len() / d;
    for j in 0..d {
        let mean = (0..n).map(|i| train[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (train[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = 1.0 / (var.sqrt() + 1e-6);
        for x in train.iter_mut().skip(j).step_by(d).chain(test.iter_mut().skip(j).step_by(d)) {
            *x = (*x - mean) * scale;
        }
    }
}

fn target(task: Task, lat: &Latent) -> f64 {
    match task {
        Task::Cls16 => lat.k as f64,
        Task::Regress => lat.a as f64 / (ATTRS - 1) as f64,
    }
}

/// Loss of the head on rows `rows` of `x`.
fn head_loss(
    g: &mut Graph<'_, f64>,
    head: &Linear,
    task: Task,
    x: &[f64],
    y: &[f64],
    d: usize,
    rows: &[usize],
) -> Result<crate::numkit::Var> {
    let mut xs = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        xs.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    let input = g.constant(Tensor::new(vec![rows.len(), d], xs)?)?;
    let out = head.forward(g, input)?;
    match task {
        Task::Cls16 => {
            let idx: Vec<usize> = (0..rows.len()).collect();
            let t: Vec<usize> = rows.iter().map(|&r| y[r] as usize).collect();
            g.cross_entropy(out, &idx, &t)
        }
        Task::Regress => {
            let t = g.constant(Tensor::new(vec![rows.len(), 1], rows.iter().map(|&r| y[r]).collect())?)?;
            let diff = g.sub(out, t)?;
            let sq = g.mul(diff, diff)?;
            g.mean(sq)
        }
    }
}

fn test_metric(head: &Linear, store: &ParamStore<f64>, task: Task, x: &[f64], y: &[f64], d: usize) -> Result<f64> {
    let n = y.len();
    let mut g = Graph::with_params(store);
    let input = g.constant(Tensor::new(vec![n, d], x.to_vec())?)?;
    let out = head.forward(&mut g, input)?;
    let v = g.value(out);
    Ok(match task {
        Task::Cls16 => {
            let k = v.len() / n;
            let hits = (0..n)
                .filter(|&i| {
                    let row = &v[i * k..(i + 1) * k];
                    let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                    best == y[i] as usize
                })
                .count();
            hits as f64 / n as f64
        }
        Task::Regress => v.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / n as f64,
    })
}

/// Trains a fresh linear head for `task` on features of `cfg.train` clips and
/// reports the test metric after each epoch.
pub fn finetune(
    model: &Model<f32>,
    task: Task,
    modalities: &[Modality],
    cfg: &FinetuneConfig,
    synth: &SynthConfig,
) -> Result<FinetuneReport> {
    if modalities.is_empty() {
        return invalid("finetune needs at least one modality");
    }
    if cfg.train == 0 || cfg.test == 0 || cfg.batch == 0 {
        return invalid("finetune: train, test and batch sizes must be positive");
    }
    let data_seed = cfg.seed ^ FINETUNE_SALT;
    let d = model.arch.config.fusion.hidden;
    let (mut xtr, ltr) = joint_features(model, modalities, 0, cfg.train, data_seed, synth)?;
    let (mut xte, lte) = joint_features(model, modalities, cfg.train as u64, cfg.test, data_seed, synth)?;
    standardize(&mut xtr, &mut xte, d);
    let ytr: Vec<f64> = ltr.iter().map(|l| target(task, l)).collect();
    let yte: Vec<f64> = lte.iter().map(|l| target(task, l)).collect();

    let outputs = match task {
        Task::Cls16 => synth.classes,
        Task::Regress => 1,
    };
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::keyed(cfg.seed, &[0x4EAD]);
    let head = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Fusion);
        Linear::new(&mut pb, "head", d, outputs)?
    };
    let mut opt = AdamW::new(&store, AdamConfig::default());
    let mut order: Vec<usize> = (0..cfg.train).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for rows in order.chunks(cfg.batch) {
            let mut g = Graph::with_params(&store);
            let loss = head_loss(&mut g, &head, task, &xtr, &ytr, d, rows)?;
            loss_sum += g.item(loss)? * rows.len() as f64;
            g.backward(loss)?;
            let mut dense: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
            for (id, grad) in g.into_param_grads() {
                dense[id.index()] = grad;
            }
            opt.update(&mut store, &dense, cfg.lr, cfg.lr);
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / cfg.train as f64,
            test_metric: test_metric(&head, &store, task, &xte, &yte, d)?,
        });
    }
    Ok(FinetuneReport {
        task,
        modalities: modalities.iter().map(|m| m.letter()).collect(),
        epochs,
    })
}
