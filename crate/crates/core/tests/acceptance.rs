//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (uncaptured) and then asserts the same condition.

use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use icode::diagnostics::{grad_check_suite, key_bias_gradients, tiny_setup, FD_TOL, MODULES};
use icode::encoders::{patchify, FusionMode, Modality};
use icode::masking::{mask_language, span_mask_plan, tube_mask_plan, MaskAction, MaskingConfig};
use icode::model::{Model, ModelConfig};
use icode::numkit::{Graph, ParamId, Rng, Tensor};
use icode::objectives::{grad_cache_step, pair_contrastive_loss, ContrastiveForm, Pair};
use icode::synthdata::{make_batch, Batch, StreamKind, SynthConfig};
use icode::trainer::{
    eval_retrieval, finetune, mlm_accuracy, pretrain, read_metrics, FinetuneConfig, Preset, Task, TrainConfig,
};

/// Criteria run one at a time so the timed ones are not slowed by the
/// others sharing the CPU.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: &str, ok: bool, detail: String) {
    let line = format!("[{}] criterion {id}: {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(ok, "{line}");
}

fn subsets() -> Vec<Vec<Modality>> {
    (1..8u8)
        .map(|bits| {
            Modality::ALL
                .iter()
                .enumerate()
                .filter(|(i, _)| bits & (1 << i) != 0)
                .map(|(_, &m)| m)
                .collect()
        })
        .collect()
}

#[test]
fn criterion_1_gradient_soundness() {
    let _guard = serial();
    let t = Instant::now();
    let reports = grad_check_suite(None, 20).unwrap();
    let elapsed = t.elapsed();
    let mut worst = (0.0f64, "");
    for r in &reports {
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, MODULES.iter().find(|m| **m == r.module).unwrap());
        }
    }
    let coords: usize = reports.iter().map(|r| r.coords).sum();
    let biases: Vec<_> = [FusionMode::Merge, FusionMode::Co]
        .iter()
        .map(|&m| key_bias_gradients(m, 0).unwrap())
        .collect();
    let bias_ok = biases.iter().all(|b| b.max_analytic < 1e-12 && b.max_numeric < 1e-9);
    let ok = reports.len() == MODULES.len()
        && reports.iter().all(|r| r.passed && r.seeds >= 20)
        && elapsed < Duration::from_secs(300)
        && bias_ok;
    report(
        "1",
        ok,
        format!(
            "{} modules x 20 seeds, {coords} coords, worst rel err {:.2e} ({}) < {FD_TOL:e}, key biases zero: {bias_ok}, {:.1}s < 300s",
            reports.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    );
}

fn cached_grads(model: &Model<f64>, batch: &Batch, chunk: usize) -> Vec<(ParamId, Vec<f64>)> {
    let arch = &model.arch;
    let mods = Modality::ALL;
    grad_cache_step(
        &model.store,
        batch.size(),
        chunk,
        |g, range| {
            let part = batch.slice(range)?;
            mods.iter().map(|&m| arch.unit_rep(g, &part, m)).collect()
        },
        |g, reps| Ok(arch.contrastive_sum(g, &mods, reps)?.0),
    )
    .unwrap()
    .1
}

#[test]
fn criterion_2_grad_cache_equivalence() {
    let _guard = serial();
    let mut worst = 0.0f64;
    for mode in [FusionMode::Merge, FusionMode::Co] {
        let (cfg, synth) = tiny_setup(mode);
        let mut model = Model::<f64>::new(&cfg, 21).unwrap();
        for p in [Pair::VL, Pair::VS, Pair::LS] {
            let id = model.arch.temperatures.id(p);
            model.store.tensor_mut(id).data_mut()[0] = 1.7;
        }
        let batch = make_batch(StreamKind::Video, 0, 16, 8, &synth).unwrap();
        let full = cached_grads(&model, &batch, 16);
        for chunk in [1, 2, 4, 8, 16] {
            let got = cached_grads(&model, &batch, chunk);
            assert_eq!(got.len(), full.len());
            for ((_, a), (_, b)) in got.iter().zip(&full) {
                for (x, y) in a.iter().zip(b) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    report(
        "2",
        worst < 1e-6,
        format!("batch 16, chunks {{1,2,4,8,16}}, both modes: max |diff| {worst:.2e} < 1e-6"),
    );
}

fn unit_rows(rng: &mut Rng, b: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(b * h);
    for _ in 0..b {
        let row: Vec<f64> = (0..h).map(|_| rng.normal()).collect();
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.extend(row.iter().map(|v| v / n));
    }
    out
}

fn contrastive(a: &[f64], b: &[f64], rows: usize, tau: f64) -> f64 {
    let h = a.len() / rows;
    let mut g = Graph::<f64>::new();
    let ua = g.constant(Tensor::new(vec![rows, h], a.to_vec()).unwrap()).unwrap();
    let ub = g.constant(Tensor::new(vec![rows, h], b.to_vec()).unwrap()).unwrap();
    let t = g.constant(Tensor::scalar(tau)).unwrap();
    let l = pair_contrastive_loss(&mut g, ua, ub, t, ContrastiveForm::InfoNce).unwrap();
    g.item(l).unwrap()
}

fn double_loop(a: &[f64], b: &[f64], rows: usize, tau: f64) -> f64 {
    let h = a.len() / rows;
    let dot = |i: usize, j: usize| -> f64 { (0..h).map(|d| a[i * h + d] * b[j * h + d]).sum() };
    let mut total = 0.0;
    for transpose in [false, true] {
        let s = |i: usize, j: usize| tau * if transpose { dot(j, i) } else { dot(i, j) };
        let mut dir = 0.0;
        for i in 0..rows {
            let denom: f64 = (0..rows).map(|j| s(i, j).exp()).sum();
            dir -= (s(i, i).exp() / denom).ln();
        }
        total += dir / rows as f64;
    }
    total
}

#[test]
fn criterion_3_contrastive_identities() {
    let _guard = serial();
    let mut rng = Rng::new(31);
    let single = {
        let (a, b) = (unit_rows(&mut rng, 1, 8), unit_rows(&mut rng, 1, 8));
        contrastive(&a, &b, 1, 5.0)
    };
    let mut zero_tau_err = 0.0f64;
    for b in [2usize, 4, 16, 64] {
        let (ua, ub) = (unit_rows(&mut rng, b, 8), unit_rows(&mut rng, b, 8));
        let want = 2.0 * (b as f64).ln();
        zero_tau_err = zero_tau_err.max((contrastive(&ua, &ub, b, 0.0) - want).abs() / want);
    }
    let mut eye = vec![0.0; 256];
    for i in 0..16 {
        eye[i * 16 + i] = 1.0;
    }
    let saturated = contrastive(&eye, &eye, 16, 100.0);
    let mut oracle_err = 0.0f64;
    for case in 0..50 {
        let mut r = Rng::keyed(32, &[case]);
        let b = 2 + r.below(15);
        let h = 1 + r.below(12);
        let tau = r.uniform_range(0.0, 20.0);
        let (ua, ub) = (unit_rows(&mut r, b, h), unit_rows(&mut r, b, h));
        oracle_err = oracle_err.max((contrastive(&ua, &ub, b, tau) - double_loop(&ua, &ub, b, tau)).abs());
    }
    let ok = single == 0.0 && zero_tau_err <= 4.0 * f64::EPSILON && saturated < 1e-8 && oracle_err < 1e-12;
    report(
        "3",
        ok,
        format!(
            "B=1 loss {single}, tau=0 rel err vs 2 ln B {zero_tau_err:.1e}, saturated {saturated:.1e} < 1e-8, oracle max |diff| {oracle_err:.1e} < 1e-12"
        ),
    );
}

#[test]
fn criterion_4_masking_statistics() {
    let _guard = serial();
    let tokens: Vec<usize> = (100..110).collect();
    let pad = [false; 10];
    let mut counts = [0usize; 3];
    let mut total = 0;
    let mut call = 0u64;
    while total < 100_000 {
        let mut rng = Rng::keyed(41, &[call]);
        let (_, plan) = mask_language(&tokens, &pad, &mut rng, 0.3, 256, 1).unwrap();
        for a in plan.actions {
            counts[match a {
                MaskAction::MaskToken => 0,
                MaskAction::Random => 1,
                MaskAction::Keep => 2,
            }] += 1;
            total += 1;
        }
        call += 1;
    }
    let split: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let split_ok = split.iter().zip([0.8, 0.1, 0.1]).all(|(f, w)| (f - w).abs() <= 0.005);

    let cfg = MaskingConfig::default();
    let want = (0.5f64 * 256.0).round() as usize;
    let tube_ok = (0..200).all(|seed| {
        let mut rng = Rng::keyed(42, &[seed]);
        let plan = tube_mask_plan(16, 16, 4, &mut rng, &cfg).unwrap();
        let frame = |k: usize| -> Vec<bool> { (0..256).map(|c| plan.positions[c * 4 + k]).collect() };
        let active: Vec<usize> = (0..4).filter(|&k| frame(k).iter().any(|&m| m)).collect();
        let pattern = frame(active[0]);
        pattern.iter().filter(|&&m| m).count() == want
            && active.windows(2).all(|w| w[1] == w[0] + 1)
            && active.iter().all(|&k| frame(k) == pattern)
    });

    const REFERENCE: f64 = 0.5608324636236144;
    let draws = 20_000;
    let coverage = (0..draws)
        .map(|i| {
            let mut rng = Rng::keyed(43, &[i]);
            span_mask_plan(100, &mut rng, 0.08, 10).unwrap().num_masked() as f64 / 100.0
        })
        .sum::<f64>()
        / draws as f64;
    let span_ok = (coverage - REFERENCE).abs() <= 0.003;
    report(
        "4",
        split_ok && tube_ok && span_ok,
        format!(
            "MLM split {:.4}/{:.4}/{:.4} over {total} draws, tube count {want} with one pattern per frame: {tube_ok}, span coverage (F = 100) {coverage:.4} vs {REFERENCE:.4}",
            split[0], split[1], split[2]
        ),
    );
}

#[test]
fn criterion_5_geometry() {
    let _guard = serial();
    let model = Model::<f32>::new(&ModelConfig::default(), 0).unwrap();
    let batch = make_batch(StreamKind::Video, 0, 1, 0, &SynthConfig::default()).unwrap();
    let frames = batch.frames.clone().unwrap();
    let arch = &model.arch;
    let mut g = Graph::with_params(&model.store);
    let input = frames.shape().to_vec();
    let patches = patchify(&frames).unwrap().shape()[1..4].to_vec();
    let grid = arch.encoders.vision.patch_grid(&mut g, &frames).unwrap();
    let grid_shape = g.shape(grid)[1..4].to_vec();
    let enc = arch.encoders.vision.encode_grid(&mut g, grid).unwrap();
    let enc_shape = g.shape(enc)[1..4].to_vec();
    let fused = arch.fuse(&mut g, &batch, &[Modality::Vision], None).unwrap();
    let up = arch.mvm_head.deconv.forward(&mut g, fused.get(Modality::Vision).unwrap().x).unwrap();
    let up_shape = g.shape(up)[1..4].to_vec();
    let targets = arch.vision_tokenizer.targets(&frames).unwrap().len();
    let ok = input == [1, 64, 64, 8, 3]
        && patches == [16, 16, 4]
        && grid_shape == [16, 16, 4]
        && enc_shape == [2, 2, 4]
        && up_shape == [4, 4, 8]
        && targets == 4 * 4 * 8;
    report(
        "5",
        ok,
        format!(
            "input {input:?}: patch grid {grid_shape:?}, encoder {enc_shape:?}, deconv {up_shape:?}, targets {targets} = 4x4x8"
        ),
    );
}

fn outputs(model: &Model<f64>, batch: &Batch, mods: &[Modality]) -> Vec<Vec<f64>> {
    let mut g = Graph::with_params(&model.store);
    let fused = model.arch.fuse(&mut g, batch, mods, None).unwrap();
    fused.outputs.iter().map(|o| g.value(o.x).to_vec()).collect()
}

#[test]
fn criterion_6_modality_flexibility() {
    let _guard = serial();
    let synth = SynthConfig::default();
    let batch = make_batch(StreamKind::Video, 0, 2, 1, &synth).unwrap();
    let mut fused_ok = 0;
    for mode in [FusionMode::Merge, FusionMode::Co] {
        let mut cfg = ModelConfig::default();
        cfg.fusion.mode = mode;
        let h = cfg.fusion.hidden;
        let model = Model::<f32>::new(&cfg, 0).unwrap();
        for mods in subsets() {
            let mut g = Graph::with_params(&model.store);
            let fused = model.arch.fuse(&mut g, &batch, &mods, None).unwrap();
            let shapes_ok = mods.iter().all(|&m| {
                let want: &[usize] = match m {
                    Modality::Vision => &[2, 2, 2, 4, h],
                    Modality::Language => &[2, 24, h],
                    Modality::Speech => &[2, 50, h],
                };
                g.shape(fused.get(m).unwrap().x) == want
            });
            let joint = model.arch.joint_rep(&mut g, &batch, &mods).unwrap();
            if shapes_ok && fused.outputs.len() == mods.len() && g.shape(joint) == [2, h] {
                fused_ok += 1;
            }
        }
    }

    let (cfg, tiny) = tiny_setup(FusionMode::Co);
    let small = make_batch(StreamKind::Video, 0, 2, 5, &tiny).unwrap();
    let base = Model::<f64>::new(&cfg, 3).unwrap();
    let mut ablated = Model::<f64>::new(&cfg, 3).unwrap();
    let cross: Vec<ParamId> = ablated
        .store
        .iter()
        .filter(|(_, p)| p.name.contains("cross_attn"))
        .map(|(id, _)| id)
        .collect();
    for &id in &cross {
        ablated.store.tensor_mut(id).data_mut().fill(0.0);
    }
    let skips = Modality::ALL
        .iter()
        .all(|&m| outputs(&base, &small, &[m]) == outputs(&ablated, &small, &[m]));
    let pair = [Modality::Vision, Modality::Language];
    let used_with_partner = outputs(&base, &small, &pair) != outputs(&ablated, &small, &pair);
    report(
        "6",
        fused_ok == 14 && !cross.is_empty() && skips && used_with_partner,
        format!(
            "{fused_ok}/14 subset x mode fusions shaped correctly; zeroing {} cross-attention tensors leaves single-modality co outputs identical: {skips} (and changes paired outputs: {used_with_partner})",
            cross.len()
        ),
    );
}

#[test]
fn criterion_7_loss_composition() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let (model, synth) = tiny_setup(FusionMode::Merge);
    let mut cfg = TrainConfig::preset(Preset::Desk);
    cfg.model = model;
    cfg.synth = synth;
    cfg.steps = 24;
    cfg.warmup = 4;
    cfg.stream.batch = 4;
    cfg.chunk = 2;
    let run = pretrain(cfg, dir.path()).unwrap();
    let recs = read_metrics(&run.metrics_path).unwrap();
    let mut worst = 0.0f64;
    let mut applicable = true;
    for r in &recs {
        let z = |v: Option<f64>| v.unwrap_or(0.0);
        let total = 0.5 * z(r.mlm) + 0.6 * z(r.mvm) + z(r.msm) + z(r.vl) + z(r.vs) + z(r.ls);
        worst = worst.max((total - r.total).abs());
        let mods = r.kind.modalities();
        let has = |m: Modality| mods.contains(&m);
        let (v, l, s) = (has(Modality::Vision), has(Modality::Language), has(Modality::Speech));
        applicable &= (r.alpha, r.beta, r.gamma, r.lambda) == (0.5, 0.6, 1.0, 1.0)
            && r.mlm.is_some() == l
            && r.mvm.is_some() == v
            && r.msm.is_some() == s
            && r.vl.is_some() == (v && l)
            && r.vs.is_some() == (v && s)
            && r.ls.is_some() == (l && s);
    }
    report(
        "7",
        worst < 1e-6 && applicable,
        format!(
            "{} logged steps recompose with (0.5, 0.6, 1, 1) to within {worst:.1e}; only applicable terms present: {applicable}",
            recs.len()
        ),
    );
}

#[test]
fn criterion_8_end_to_end_training() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::preset(Preset::Desk);
    let t = Instant::now();
    let run = pretrain(cfg.clone(), dir.path()).unwrap();
    let elapsed = t.elapsed();
    let recs = read_metrics(&run.metrics_path).unwrap();
    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = it.collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let first = mean(&mut recs.iter().take(50).map(|r| r.total));
    let last = mean(&mut recs.iter().rev().take(50).map(|r| r.total));
    let model = &run.trainer.model;

    let chance = 1.0 / cfg.model.encoders.vocab as f64;
    let mlm = mlm_accuracy(model, 8, 32, cfg.seed, &cfg.synth).unwrap();
    let vl = eval_retrieval(model, StreamKind::VL, 256, cfg.seed, &cfg.synth).unwrap();

    let scratch = Model::<f32>::new(&cfg.model, cfg.seed).unwrap();
    let fc = FinetuneConfig::default();
    let mods = Modality::ALL.to_vec();
    let pre = finetune(model, Task::Cls16, &mods, &fc, &cfg.synth).unwrap().final_metric();
    let raw = finetune(&scratch, Task::Cls16, &mods, &fc, &cfg.synth).unwrap().final_metric();

    let checks = [
        ("time", elapsed < Duration::from_secs(30 * 60)),
        ("a", recs.len() == 2000 && last < first),
        ("b", mlm >= 5.0 * chance),
        ("c", vl.r1_ab > 0.8 && vl.r1_ba > 0.8),
        ("d", pre > raw),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        "8",
        failed.is_empty(),
        format!(
            "pretrain {:.0}s < 1800s; (a) loss {first:.3} -> {last:.3} (first/last 50 means); (b) MLM acc {mlm:.3} >= {:.4}; (c) VL R@1 {:.3}/{:.3} > 0.8 (R@5 {:.3}/{:.3}); (d) cls16 pretrained {pre:.3} vs scratch {raw:.3}{}",
            elapsed.as_secs_f64(),
            5.0 * chance,
            vl.r1_ab,
            vl.r1_ba,
            vl.r5_ab,
            vl.r5_ba,
            if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let _guard = serial();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = TrainConfig::preset(Preset::Desk);
    cfg.steps = 12;
    cfg.warmup = 4;
    let ra = pretrain(cfg.clone(), a.path()).unwrap();
    let rb = pretrain(cfg, b.path()).unwrap();
    let same_metrics = std::fs::read(&ra.metrics_path).unwrap() == std::fs::read(&rb.metrics_path).unwrap();
    let ca = std::fs::read(&ra.checkpoint_path).unwrap();
    let cb = std::fs::read(&rb.checkpoint_path).unwrap();
    let same_ckpt = ca == cb;
    report(
        "9",
        same_metrics && same_ckpt,
        format!(
            "two 12-step desk runs: metrics identical {same_metrics}, checkpoints ({} bytes) identical {same_ckpt}",
            ca.len()
        ),
    );
}
