//! Synthetic generator: determinism, cross-modal alignment, learnability by a
//! linear probe, and the mixing schedule.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;

use icode::synthdata::{
    decode_frames, decode_speech, decode_text, gen_clip, gen_pair, gen_sample, gen_sample_with_class, make_batch, mix_stream, write_manifest,
    ManifestRecord, Sample, Schedule, StreamConfig, StreamKind, SynthConfig, CLASS_BASE,
};
use proptest::prelude::*;

fn cfg() -> SynthConfig {
    SynthConfig::default()
}

#[test]
fn pairs_and_clips_are_deterministic() {
    let c = cfg();
    for kind in [StreamKind::VL, StreamKind::VS, StreamKind::LS] {
        assert_eq!(gen_pair(kind, 0, 42, &c).unwrap(), gen_pair(kind, 0, 42, &c).unwrap());
        assert_ne!(gen_pair(kind, 0, 42, &c).unwrap(), gen_pair(kind, 1, 42, &c).unwrap());
    }
    assert_eq!(gen_clip(3, 42, &c), gen_clip(3, 42, &c));
    assert!(gen_pair(StreamKind::Video, 0, 0, &c).is_err());
}

#[test]
fn clip_extents_and_ranges() {
    let c = cfg();
    let s = gen_clip(0, 1, &c);
    assert_eq!(s.frames.as_ref().unwrap().shape(), &[64, 64, 8, 3]);
    let wave = s.wave.as_ref().unwrap();
    assert_eq!(wave.len(), 16000);
    assert!(wave.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(s.frames.as_ref().unwrap().data().iter().all(|v| (0.0..=1.0).contains(v)));
    let (caption, transcript) = (s.caption.clone().unwrap(), s.text.clone().unwrap());
    assert_ne!(caption, transcript);
    let class = CLASS_BASE + s.latent.k;
    assert!(caption.contains(&class) && transcript.contains(&class));
}

fn assert_aligned(s: &Sample, c: &SynthConfig) {
    let want = (s.latent.k, s.latent.a, s.latent.b);
    if let Some(f) = &s.frames {
        assert_eq!(decode_frames(f), want, "{:?} {} frames", s.kind, s.index);
    }
    if let Some(w) = &s.wave {
        assert_eq!(decode_speech(w, c), want, "{:?} {} speech", s.kind, s.index);
    }
    if let Some(t) = &s.text {
        assert_eq!(decode_text(t), Some(want), "{:?} {} text", s.kind, s.index);
    }
    if let Some(t) = &s.caption {
        assert_eq!(decode_text(t), Some(want), "{:?} {} caption", s.kind, s.index);
    }
}

#[test]
fn every_rendering_decodes_to_its_latent() {
    let c = cfg();
    for kind in StreamKind::ALL {
        for i in 0..40 {
            assert_aligned(&gen_sample(kind, i, 5, &c).unwrap(), &c);
        }
    }
}

#[test]
fn paired_class_tokens_always_agree() {
    let c = cfg();
    for i in 0..500 {
        let s = gen_pair(StreamKind::VL, i, 8, &c).unwrap();
        let (k, _, _) = decode_frames(s.frames.as_ref().unwrap());
        assert!(s.text.as_ref().unwrap().contains(&(CLASS_BASE + k)));
    }
}

#[test]
fn same_class_samples_differ() {
    let c = cfg();
    let mut by_class: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for i in 0..200 {
        let s = gen_pair(StreamKind::VS, i, 2, &c).unwrap();
        by_class.entry(s.latent.k).or_default().push(s);
    }
    for group in by_class.values().filter(|g| g.len() > 1) {
        assert_ne!(group[0].frames, group[1].frames);
        assert_ne!(group[0].wave, group[1].wave);
    }
}

#[test]
fn misalignment_knob_swaps_some_transcripts() {
    let c = SynthConfig {
        misalign_prob: 0.5,
        ..cfg()
    };
    let swapped = (0..200)
        .filter(|&i| {
            let s = gen_clip(i, 0, &c);
            decode_text(s.text.as_ref().unwrap()) != Some((s.latent.k, s.latent.a, s.latent.b))
        })
        .count();
    assert!((60..=140).contains(&swapped), "{swapped}");
}

// ----- linear probe ------------------------------------------------------------

/// Mean colour of each quadrant of the first frame (a linear map of pixels).
fn vision_features(s: &Sample) -> Vec<f64> {
    let f = s.frames.as_ref().unwrap();
    let sh = f.shape();
    let (w, h, t) = (sh[0], sh[1], sh[2]);
    let mut out = vec![0.0; 12];
    for x in 0..w {
        for y in 0..h {
            let q = (y >= h / 2) as usize * 2 + (x >= w / 2) as usize;
            for c in 0..3 {
                out[q * 3 + c] += f.data()[((x * h + y) * t) * 3 + c] as f64;
            }
        }
    }
    let area = (w * h / 4) as f64;
    out.iter().map(|v| v / area).collect()
}

/// Log spectral power at every candidate class frequency.
fn speech_features(s: &Sample, c: &SynthConfig) -> Vec<f64> {
    let wave = s.wave.as_ref().unwrap();
    let sr = c.sample_rate as f64;
    (0..c.classes)
        .map(|k| {
            let w = 2.0 * PI * c.tone_hz(0, k) / sr;
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in wave.iter().enumerate() {
                re += x as f64 * (w * n as f64).cos();
                im += x as f64 * (w * n as f64).sin();
            }
            (1.0 + re * re + im * im).ln()
        })
        .collect()
}

/// Token counts.
fn text_features(s: &Sample, c: &SynthConfig) -> Vec<f64> {
    let mut out = vec![0.0; c.vocab];
    for &t in s.text.as_ref().unwrap() {
        out[t] += 1.0;
    }
    out
}

/// Linear discriminant probe: class means under a shared, lightly shrunk
/// within-class covariance Σ, scoring `w_k·x − ½ w_k·μ_k` with `Σ w_k = μ_k`.
struct Probe {
    weights: Vec<Vec<f64>>,
    offsets: Vec<f64>,
}

/// Solves `a x = b` for symmetric positive definite `a` by Gaussian
/// elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

impl Probe {
    fn fit(xs: &[Vec<f64>], ys: &[usize], classes: usize) -> Self {
        let d = xs[0].len();
        let mut means = vec![vec![0.0; d]; classes];
        let mut counts = vec![0usize; classes];
        for (x, &y) in xs.iter().zip(ys) {
            counts[y] += 1;
            for (m, v) in means[y].iter_mut().zip(x) {
                *m += v;
            }
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        }
        let mut cov = vec![vec![0.0; d]; d];
        for (x, &y) in xs.iter().zip(ys) {
            let r: Vec<f64> = x.iter().zip(&means[y]).map(|(a, m)| a - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += r[i] * r[j] / xs.len() as f64;
                }
            }
        }
        let ridge = 1e-3 * (0..d).map(|i| cov[i][i]).sum::<f64>() / d as f64 + 1e-9;
        for (i, row) in cov.iter_mut().enumerate() {
            row[i] += ridge;
        }
        let weights: Vec<Vec<f64>> = means.iter().map(|m| solve(cov.clone(), m.clone())).collect();
        let offsets = weights
            .iter()
            .zip(&means)
            .map(|(w, m)| -0.5 * w.iter().zip(m).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Self { weights, offsets }
    }

    fn predict(&self, x: &[f64]) -> usize {
        let score = |k: usize| self.weights[k].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.offsets[k];
        (0..self.weights.len()).max_by(|&i, &j| score(i).total_cmp(&score(j))).unwrap()
    }
}

fn probe_accuracy(kind: StreamKind, feat: impl Fn(&Sample) -> Vec<f64>) -> f64 {
    let c = cfg();
    let (train, test) = (256u64, 256u64);
    let samples: Vec<Sample> = (0..train + test).map(|i| gen_pair(kind, i, 31, &c).unwrap()).collect();
    let xs: Vec<Vec<f64>> = samples.iter().map(&feat).collect();
    let ys: Vec<usize> = samples.iter().map(|s| s.latent.k).collect();
    let n = train as usize;
    let probe = Probe::fit(&xs[..n], &ys[..n], c.classes);
    let hits = (n..xs.len()).filter(|&i| probe.predict(&xs[i]) == ys[i]).count();
    hits as f64 / test as f64
}

#[test]
fn linear_probe_recovers_class_from_each_modality() {
    let c = cfg();
    let v = probe_accuracy(StreamKind::VL, vision_features);
    let l = probe_accuracy(StreamKind::VL, |s| text_features(s, &c));
    let s = probe_accuracy(StreamKind::VS, |s| speech_features(s, &c));
    eprintln!("probe accuracy: vision {v}, language {l}, speech {s}");
    assert!(v > 0.95 && l > 0.95 && s > 0.95, "vision {v}, language {l}, speech {s}");
}

// ----- schedule and batches ------------------------------------------------------

fn stream(mix: &[(StreamKind, f64)]) -> StreamConfig {
    StreamConfig {
        mix: mix.iter().copied().collect(),
        batch: 4,
        class_run: 1,
    }
}

#[test]
fn equal_thirds_over_3000_steps() {
    let cfg = stream(&[(StreamKind::VL, 1.0 / 3.0), (StreamKind::LS, 1.0 / 3.0), (StreamKind::VS, 1.0 / 3.0)]);
    let mut s = Schedule::new(&cfg).unwrap();
    let mut counts: BTreeMap<StreamKind, usize> = BTreeMap::new();
    for _ in 0..3000 {
        *counts.entry(s.next_kind()).or_default() += 1;
    }
    assert_eq!(counts.len(), 3);
    for (k, n) in counts {
        assert!(n.abs_diff(1000) <= 1, "{k:?}: {n}");
    }
}

#[test]
fn single_kind_mix_and_invalid_mixes() {
    let only_vl = stream(&[(StreamKind::VL, 1.0)]);
    for step in 0..20 {
        assert_eq!(mix_stream(&only_vl, &cfg(), 0, step).unwrap().kind, StreamKind::VL);
    }
    assert!(Schedule::new(&stream(&[(StreamKind::VL, 0.5), (StreamKind::LS, 0.4)])).is_err());
    assert!(Schedule::new(&stream(&[(StreamKind::VL, 1.5), (StreamKind::LS, -0.5)])).is_err());
}

#[test]
fn batches_are_addressable_by_step() {
    let s = StreamConfig::default();
    let c = cfg();
    let a = mix_stream(&s, &c, 9, 17).unwrap();
    let b = mix_stream(&s, &c, 9, 17).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.kind, Schedule::kind_at(&s, 17).unwrap());
    let independent = StreamConfig { class_run: 1, ..s.clone() };
    let direct = make_batch(a.kind, 17 * s.batch as u64, s.batch, 9, &c).unwrap();
    assert_eq!(mix_stream(&independent, &c, 9, 17).unwrap(), direct);
    assert!(mix_stream(&StreamConfig { class_run: 0, ..s }, &c, 9, 17).is_err());
}

#[test]
fn class_runs_share_class_but_not_attributes() {
    let s = StreamConfig {
        mix: [(StreamKind::VL, 1.0)].into_iter().collect(),
        batch: 16,
        class_run: 4,
    };
    let c = cfg();
    for step in 0..8u64 {
        let batch = mix_stream(&s, &c, 2, step).unwrap();
        let tokens = batch.tokens.as_ref().unwrap();
        let len = tokens.len() / 16;
        let lats: Vec<(usize, usize, usize)> =
            (0..16).map(|i| decode_text(&tokens[i * len..(i + 1) * len]).unwrap()).collect();
        for run in lats.chunks(4) {
            assert!(run.iter().all(|l| l.0 == run[0].0), "step {step}: {run:?}");
        }
        // attributes stay those of the independent draw
        let first = step * 16;
        for (i, l) in lats.iter().enumerate() {
            let own = gen_pair(StreamKind::VL, first + i as u64, 2, &c).unwrap().latent;
            assert_eq!((l.1, l.2), (own.a, own.b));
            let again = gen_sample_with_class(StreamKind::VL, first + i as u64, 2, l.0, &c).unwrap();
            assert_eq!(decode_text(again.text.as_ref().unwrap()).unwrap(), *l);
        }
    }
    assert!(gen_sample_with_class(StreamKind::VL, 0, 0, c.classes, &c).is_err());
}

#[test]
fn batch_slices_match_smaller_batches() {
    let c = cfg();
    let full = make_batch(StreamKind::Video, 10, 6, 3, &c).unwrap();
    let part = full.slice(2..5).unwrap();
    assert_eq!(part, make_batch(StreamKind::Video, 12, 3, 3, &c).unwrap());
}

#[test]
fn manifest_round_trips() {
    let c = cfg();
    let records: Vec<ManifestRecord> = (0..5).map(|i| (&gen_pair(StreamKind::LS, i, 1, &c).unwrap()).into()).collect();
    let mut buf = Vec::new();
    write_manifest(&mut buf, &records).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let back: Vec<ManifestRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, records);
    for r in &back {
        assert_eq!(gen_sample_with_class(r.kind, r.index, r.seed, r.k, &c).unwrap(), gen_pair(r.kind, r.index, r.seed, &c).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_tracks_proportions(w in proptest::collection::vec(0.0f64..1.0, 4), steps in 1usize..2000) {
        let total: f64 = w.iter().sum();
        prop_assume!(total > 0.1);
        let mix: Vec<(StreamKind, f64)> = StreamKind::ALL.iter().zip(&w).map(|(&k, &p)| (k, p / total)).collect();
        let cfg = StreamConfig { mix: mix.iter().copied().collect(), batch: 1, class_run: 1 };
        prop_assume!(cfg.validate().is_ok());
        let mut s = Schedule::new(&cfg).unwrap();
        let mut counts: BTreeMap<StreamKind, usize> = BTreeMap::new();
        for _ in 0..steps {
            *counts.entry(s.next_kind()).or_default() += 1;
        }
        for &(k, p) in &mix {
            let n = *counts.get(&k).unwrap_or(&0) as f64;
            prop_assert!((n - p * steps as f64).abs() <= 1.0 + 1e-9, "{:?}: {} vs {}", k, n, p * steps as f64);
        }
    }

    #[test]
    fn distinct_indices_give_distinct_styles(seed in any::<u64>(), i in 0u64..1000) {
        let c = cfg();
        let a = gen_pair(StreamKind::LS, i, seed, &c).unwrap();
        let b = gen_pair(StreamKind::LS, i + 1, seed, &c).unwrap();
        prop_assert_ne!(a.latent.style, b.latent.style);
        let styles: HashSet<u64> = [a.latent.style, b.latent.style].into_iter().collect();
        prop_assert_eq!(styles.len(), 2);
    }
}
