//! Deterministic synthetic aligned data.
//!
//! Every sample is driven by a latent `(k, a, b)`: a class `k` and two
//! attributes, each in `0..16`. Vision paints the four frame quadrants with
//! palette colours (`k` twice, `a`, `b`); speech mixes three tones whose
//! frequencies encode `k`, `a` and `b`; text is a templated token sequence
//! naming all three. A per-sample style seed varies noise, phases, jitter and
//! filler words so that no two samples render identically.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::encoders::Modality;
use crate::error::{invalid, Result};
use crate::numkit::{Rng, Tensor};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const CLASS_BASE: usize = 16;
pub const ATTR_A_BASE: usize = 32;
pub const ATTR_B_BASE: usize = 48;
pub const CLASS_WORD_BASE: usize = 64;
pub const CLASS_WORDS: usize = 8;
pub const STOP_BASE: usize = 192;
pub const STOP_WORDS: usize = 64;
/// Values each attribute takes.
pub const ATTRS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StreamKind {
    VL,
    LS,
    VS,
    #[serde(rename = "VIDEO")]
    Video,
}

impl StreamKind {
    pub const ALL: [StreamKind; 4] = [StreamKind::VL, StreamKind::LS, StreamKind::VS, StreamKind::Video];

    pub fn modalities(self) -> Vec<Modality> {
        use Modality::*;
        match self {
            StreamKind::VL => vec![Vision, Language],
            StreamKind::LS => vec![Language, Speech],
            StreamKind::VS => vec![Vision, Speech],
            StreamKind::Video => vec![Vision, Language, Speech],
        }
    }

    fn key(self) -> u64 {
        self as u64 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::VL => "VL",
            StreamKind::LS => "LS",
            StreamKind::VS => "VS",
            StreamKind::Video => "VIDEO",
        }
    }
}

impl std::str::FromStr for StreamKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        StreamKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| crate::Error::Invalid(format!("unknown stream kind '{s}' (expected VL, LS, VS or VIDEO)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub vocab: usize,
    pub width: usize,
    pub height: usize,
    /// Frames of a dual-modality (image) sample.
    pub pair_frames: usize,
    /// Frames of a video clip.
    pub clip_frames: usize,
    pub sample_rate: usize,
    pub samples: usize,
    /// Padded length of one text sequence; video text is twice this.
    pub text_len: usize,
    pub pixel_noise: f64,
    pub audio_noise: f64,
    /// Probability that a clip's transcript comes from another sample.
    pub misalign_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 16,
            vocab: 256,
            width: 64,
            height: 64,
            pair_frames: 2,
            clip_frames: 8,
            sample_rate: 16000,
            samples: 16000,
            text_len: 12,
            pixel_noise: 0.04,
            audio_noise: 0.05,
            misalign_prob: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > 16 {
            return invalid("synthetic classes must be in 1..=16");
        }
        if self.vocab < STOP_BASE + STOP_WORDS {
            return invalid(format!("vocab must be at least {}", STOP_BASE + STOP_WORDS));
        }
        if self.text_len < 12 {
            return invalid("text_len must be at least 12");
        }
        if self.width % 32 != 0 || self.height % 32 != 0 || self.width == 0 || self.height == 0 {
            return invalid("frame width and height must be positive multiples of 32");
        }
        if self.pair_frames % 2 != 0 || self.clip_frames % 2 != 0 || self.pair_frames == 0 || self.clip_frames == 0 {
            return invalid("frame counts must be positive and even");
        }
        if !(0.0..=1.0).contains(&self.misalign_prob) {
            return invalid("misalign_prob must be in [0, 1]");
        }
        Ok(())
    }

    pub fn tone_hz(&self, which: usize, value: usize) -> f64 {
        match which {
            0 => 250.0 + 40.0 * value as f64,
            1 => 1000.0 + 60.0 * value as f64,
            _ => 2100.0 + 60.0 * value as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Latent {
    pub k: usize,
    pub a: usize,
    pub b: usize,
    pub style: u64,
}

impl Latent {
    pub fn sample(rng: &mut Rng, classes: usize) -> Self {
        Self {
            k: rng.below(classes),
            a: rng.below(ATTRS),
            b: rng.below(ATTRS),
            style: rand::RngCore::next_u64(rng),
        }
    }
}

/// Palette colour `i` in `0..16`.
pub fn palette(i: usize) -> [f64; 3] {
    const LEVELS: [f64; 4] = [0.1, 0.37, 0.63, 0.9];
    [LEVELS[i % 4], LEVELS[(i / 4) % 4], LEVELS[(i + i / 4) % 4]]
}

/// Frames `[W, H, T, 3]` in `[0, 1]`.
pub fn render_frames(lat: &Latent, frames: usize, cfg: &SynthConfig) -> Tensor<f32> {
    let mut rng = Rng::keyed(lat.style, &[0xF4A3]);
    let (w, h) = (cfg.width, cfg.height);
    let quad = [palette(lat.k), palette(lat.a), palette(lat.b), palette(lat.k)];
    let jitter: Vec<[f64; 3]> = (0..4)
        .map(|_| [0.0; 3].map(|_: f64| 0.04 * (rng.uniform() - 0.5)))
        .collect();
    let drift: [f64; 3] = [0.0; 3].map(|_: f64| 0.01 * (rng.uniform() - 0.5));
    let mut data = Vec::with_capacity(w * h * frames * 3);
    for x in 0..w {
        for y in 0..h {
            // quadrants: 0 = top-left, 1 = top-right, 2 = bottom-left, 3 = bottom-right
            let q = (y >= h / 2) as usize * 2 + (x >= w / 2) as usize;
            for t in 0..frames {
                for c in 0..3 {
                    let v = quad[q][c] + jitter[q][c] + drift[c] * t as f64 + cfg.pixel_noise * rng.normal();
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Tensor::new(vec![w, h, frames, 3], data).expect("consistent frame shape")
}

/// Waveform of `cfg.samples` values in `[-1, 1]`.
pub fn render_speech(lat: &Latent, cfg: &SynthConfig) -> Vec<f32> {
    let mut rng = Rng::keyed(lat.style, &[0x5EEC]);
    let sr = cfg.sample_rate as f64;
    let tones: Vec<(f64, f64, f64)> = [lat.k, lat.a, lat.b]
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let amp = [0.35, 0.22, 0.22][i] * (0.9 + 0.2 * rng.uniform());
            (2.0 * PI * cfg.tone_hz(i, v) / sr, 2.0 * PI * rng.uniform(), amp)
        })
        .collect();
    (0..cfg.samples)
        .map(|n| {
            let s: f64 = tones.iter().map(|&(w, phi, amp)| amp * (w * n as f64 + phi).sin()).sum();
            (s + cfg.audio_noise * rng.normal()).clamp(-1.0, 1.0) as f32
        })
        .collect()
}

/// Templated sentence naming `k`, `a` and `b`, 10 to 12 tokens long.
pub fn render_text(lat: &Latent, variant: u64) -> Vec<usize> {
    let mut rng = Rng::keyed(lat.style, &[0x7E47, variant]);
    let stop = |rng: &mut Rng| STOP_BASE + rng.below(STOP_WORDS);
    let word = |rng: &mut Rng| CLASS_WORD_BASE + lat.k * CLASS_WORDS + rng.below(CLASS_WORDS);
    let class = CLASS_BASE + lat.k;
    let (a, b) = (ATTR_A_BASE + lat.a, ATTR_B_BASE + lat.b);
    let mut out = vec![CLS];
    match rng.below(3) {
        0 => out.extend([stop(&mut rng), word(&mut rng), class, stop(&mut rng), a, b, word(&mut rng)]),
        1 => out.extend([word(&mut rng), stop(&mut rng), a, stop(&mut rng), class, b, stop(&mut rng)]),
        _ => out.extend([a, stop(&mut rng), b, word(&mut rng), stop(&mut rng), class, word(&mut rng)]),
    }
    let extra = rng.below(3);
    for _ in 0..extra {
        let pos = 1 + rng.below(out.len());
        let tok = if rng.below(2) == 0 { stop(&mut rng) } else { word(&mut rng) };
        out.insert(pos, tok);
    }
    out.push(stop(&mut rng));
    out.push(SEP);
    out
}

/// One generated sample. Missing modalities are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub kind: StreamKind,
    pub index: u64,
    pub seed: u64,
    pub latent: Latent,
    pub frames: Option<Tensor<f32>>,
    pub wave: Option<Vec<f32>>,
    /// Text (pairs) or transcript (clips).
    pub text: Option<Vec<usize>>,
    pub caption: Option<Vec<usize>>,
}

impl Sample {
    /// The language input: the text, or caption followed by transcript.
    pub fn language(&self) -> Option<Vec<usize>> {
        match (&self.caption, &self.text) {
            (Some(c), Some(t)) => {
                let mut out = c.clone();
                out.extend_from_slice(&t[1..]);
                Some(out)
            }
            (None, Some(t)) => Some(t.clone()),
            _ => None,
        }
    }
}

fn latent_for(kind: StreamKind, index: u64, seed: u64, classes: usize) -> Latent {
    let mut rng = Rng::keyed(seed, &[kind.key(), index]);
    Latent::sample(&mut rng, classes)
}

/// Aligned two-modality sample, fully determined by `(kind, index, seed)`.
pub fn gen_pair(kind: StreamKind, index: u64, seed: u64, cfg: &SynthConfig) -> Result<Sample> {
    if kind == StreamKind::Video {
        return invalid("gen_pair: use gen_clip for video samples");
    }
    Ok(render_pair(kind, index, seed, latent_for(kind, index, seed, cfg.classes), cfg))
}

fn render_pair(kind: StreamKind, index: u64, seed: u64, lat: Latent, cfg: &SynthConfig) -> Sample {
    let mods = kind.modalities();
    Sample {
        kind,
        index,
        seed,
        latent: lat,
        frames: mods.contains(&Modality::Vision).then(|| render_frames(&lat, cfg.pair_frames, cfg)),
        wave: mods.contains(&Modality::Speech).then(|| render_speech(&lat, cfg)),
        text: mods.contains(&Modality::Language).then(|| render_text(&lat, 0)),
        caption: None,
    }
}

/// Video clip: frames, waveform, transcript and caption sharing one latent.
pub fn gen_clip(index: u64, seed: u64, cfg: &SynthConfig) -> Sample {
    render_clip(index, seed, latent_for(StreamKind::Video, index, seed, cfg.classes), cfg)
}

fn render_clip(index: u64, seed: u64, lat: Latent, cfg: &SynthConfig) -> Sample {
    let mut rng = Rng::keyed(seed, &[0xC11F, index]);
    let transcript_lat = if cfg.misalign_prob > 0.0 && rng.uniform() < cfg.misalign_prob {
        latent_for(StreamKind::Video, index ^ 0x9E37_79B9, seed, cfg.classes)
    } else {
        lat
    };
    Sample {
        kind: StreamKind::Video,
        index,
        seed,
        latent: lat,
        frames: Some(render_frames(&lat, cfg.clip_frames, cfg)),
        wave: Some(render_speech(&lat, cfg)),
        text: Some(render_text(&transcript_lat, 1)),
        caption: Some(render_text(&lat, 2)),
    }
}

pub fn gen_sample(kind: StreamKind, index: u64, seed: u64, cfg: &SynthConfig) -> Result<Sample> {
    match kind {
        StreamKind::Video => Ok(gen_clip(index, seed, cfg)),
        _ => gen_pair(kind, index, seed, cfg),
    }
}

/// [`gen_sample`] with the class forced to `class`; attributes and style are
/// unchanged. A manifest record regenerates its sample this way.
pub fn gen_sample_with_class(kind: StreamKind, index: u64, seed: u64, class: usize, cfg: &SynthConfig) -> Result<Sample> {
    if class >= cfg.classes {
        return invalid(format!("class {class} out of range for {} classes", cfg.classes));
    }
    let lat = Latent {
        k: class,
        ..latent_for(kind, index, seed, cfg.classes)
    };
    Ok(match kind {
        StreamKind::Video => render_clip(index, seed, lat, cfg),
        _ => render_pair(kind, index, seed, lat, cfg),
    })
}

// ----- inverse maps ----------------------------------------------------------

fn nearest_palette(rgb: [f64; 3]) -> usize {
    (0..16)
        .min_by(|&i, &j| {
            let d = |p: [f64; 3]| (0..3).map(|c| (p[c] - rgb[c]).powi(2)).sum::<f64>();
            d(palette(i)).total_cmp(&d(palette(j)))
        })
        .unwrap()
}

/// Recovers `(k, a, b)` from frames `[W, H, T, 3]`.
pub fn decode_frames(frames: &Tensor<f32>) -> (usize, usize, usize) {
    let s = frames.shape();
    let (w, h, t) = (s[0], s[1], s[2]);
    let mut sums = [[0.0f64; 3]; 4];
    let mut counts = [0usize; 4];
    for x in 0..w {
        for y in 0..h {
            let q = (y >= h / 2) as usize * 2 + (x >= w / 2) as usize;
            for f in 0..t {
                let base = ((x * h + y) * t + f) * 3;
                for c in 0..3 {
                    sums[q][c] += frames.data()[base + c] as f64;
                }
                counts[q] += 1;
            }
        }
    }
    let mean = |q: usize| sums[q].map(|v| v / counts[q] as f64);
    let k_rgb = [0, 1, 2].map(|c| 0.5 * (mean(0)[c] + mean(3)[c]));
    (nearest_palette(k_rgb), nearest_palette(mean(1)), nearest_palette(mean(2)))
}

fn tone_power(wave: &[f32], hz: f64, sr: f64) -> f64 {
    let w = 2.0 * PI * hz / sr;
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &x) in wave.iter().enumerate() {
        re += x as f64 * (w * n as f64).cos();
        im += x as f64 * (w * n as f64).sin();
    }
    re * re + im * im
}

/// Recovers `(k, a, b)` from a waveform by probing every candidate tone.
pub fn decode_speech(wave: &[f32], cfg: &SynthConfig) -> (usize, usize, usize) {
    let sr = cfg.sample_rate as f64;
    let best = |which: usize, n: usize| {
        (0..n)
            .max_by(|&i, &j| {
                tone_power(wave, cfg.tone_hz(which, i), sr).total_cmp(&tone_power(wave, cfg.tone_hz(which, j), sr))
            })
            .unwrap()
    };
    (best(0, cfg.classes), best(1, ATTRS), best(2, ATTRS))
}

/// Recovers `(k, a, b)` from the first class and attribute tokens.
pub fn decode_text(tokens: &[usize]) -> Option<(usize, usize, usize)> {
    let find = |base: usize| tokens.iter().find(|&&t| (base..base + 16).contains(&t)).map(|t| t - base);
    Some((find(CLASS_BASE)?, find(ATTR_A_BASE)?, find(ATTR_B_BASE)?))
}

// ----- batches and the mixing schedule ---------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub mix: BTreeMap<StreamKind, f64>,
    pub batch: usize,
    /// Runs of this many consecutive training examples share one class, so
    /// every batch holds negatives that differ only in their attributes.
    /// 1 draws every latent independently.
    pub class_run: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            mix: [
                (StreamKind::VL, 0.5),
                (StreamKind::VS, 0.1),
                (StreamKind::LS, 0.1),
                (StreamKind::Video, 0.3),
            ]
            .into_iter()
            .collect(),
            batch: 24,
            class_run: 4,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return invalid("stream batch must be positive");
        }
        if self.class_run == 0 {
            return invalid("stream class_run must be positive");
        }
        if self.mix.values().any(|p| !p.is_finite() || *p < 0.0) {
            return invalid("stream proportions must be non-negative");
        }
        let total: f64 = self.mix.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("stream proportions sum to {total}, not 1"));
        }
        Ok(())
    }
}

/// Smooth weighted round-robin over kinds: every step each kind earns its
/// proportion as credit and the richest kind is served and pays 1. After `n`
/// steps each kind has been served within one of `n · p`.
#[derive(Clone, Debug)]
pub struct Schedule {
    kinds: Vec<(StreamKind, f64)>,
    credit: Vec<f64>,
}

impl Schedule {
    pub fn new(cfg: &StreamConfig) -> Result<Self> {
        cfg.validate()?;
        let kinds: Vec<(StreamKind, f64)> = cfg.mix.iter().filter(|(_, &p)| p > 0.0).map(|(&k, &p)| (k, p)).collect();
        Ok(Self {
            credit: vec![0.0; kinds.len()],
            kinds,
        })
    }

    pub fn next_kind(&mut self) -> StreamKind {
        for (c, (_, p)) in self.credit.iter_mut().zip(&self.kinds) {
            *c += p;
        }
        let mut best = 0;
        for i in 1..self.credit.len() {
            if self.credit[i] > self.credit[best] + 1e-12 {
                best = i;
            }
        }
        self.credit[best] -= 1.0;
        self.kinds[best].0
    }

    /// Kind served at `step` (0-based).
    pub fn kind_at(cfg: &StreamConfig, step: u64) -> Result<StreamKind> {
        let mut s = Self::new(cfg)?;
        let mut k = s.next_kind();
        for _ in 0..step {
            k = s.next_kind();
        }
        Ok(k)
    }
}

/// A batch of one kind, ready for the encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub kind: StreamKind,
    pub latents: Vec<Latent>,
    /// `[B, W, H, T, 3]`
    pub frames: Option<Tensor<f32>>,
    /// `[B, S]`
    pub wave: Option<Tensor<f32>>,
    /// `[B, L]` ids, row-major.
    pub tokens: Option<Vec<usize>>,
    pub pad: Option<Vec<bool>>,
    pub text_len: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.latents.len()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.kind.modalities()
    }

    pub fn from_samples(kind: StreamKind, samples: &[Sample], cfg: &SynthConfig) -> Result<Self> {
        if samples.is_empty() {
            return invalid("empty batch");
        }
        let b = samples.len();
        let frames = if samples[0].frames.is_some() {
            let shape = samples[0].frames.as_ref().unwrap().shape().to_vec();
            let mut data = Vec::with_capacity(b * shape.iter().product::<usize>());
            for s in samples {
                data.extend_from_slice(s.frames.as_ref().ok_or_else(|| crate::Error::Invalid("mixed batch".into()))?.data());
            }
            let mut full = vec![b];
            full.extend(shape);
            Some(Tensor::new(full, data)?)
        } else {
            None
        };
        let wave = if samples[0].wave.is_some() {
            let mut data = Vec::with_capacity(b * cfg.samples);
            for s in samples {
                data.extend_from_slice(s.wave.as_ref().ok_or_else(|| crate::Error::Invalid("mixed batch".into()))?);
            }
            Some(Tensor::new(vec![b, cfg.samples], data)?)
        } else {
            None
        };
        let text_len = if kind == StreamKind::Video { 2 * cfg.text_len } else { cfg.text_len };
        let (tokens, pad) = if samples[0].text.is_some() {
            let mut tokens = Vec::with_capacity(b * text_len);
            let mut pad = Vec::with_capacity(b * text_len);
            for s in samples {
                let mut seq = s.language().ok_or_else(|| crate::Error::Invalid("mixed batch".into()))?;
                seq.truncate(text_len);
                let n = seq.len();
                tokens.extend(seq);
                tokens.extend(std::iter::repeat(PAD).take(text_len - n));
                pad.extend(std::iter::repeat(false).take(n));
                pad.extend(std::iter::repeat(true).take(text_len - n));
            }
            (Some(tokens), Some(pad))
        } else {
            (None, None)
        };
        Ok(Self {
            kind,
            latents: samples.iter().map(|s| s.latent).collect(),
            frames,
            wave,
            tokens,
            pad,
            text_len,
        })
    }

    /// Examples `range` as a smaller batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let n = range.len();
        let cut = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
            let per = t.len() / self.size();
            let mut shape = t.shape().to_vec();
            shape[0] = n;
            Tensor::new(shape, t.data()[range.start * per..range.end * per].to_vec())
        };
        let l = self.text_len;
        Ok(Self {
            kind: self.kind,
            latents: self.latents[range.clone()].to_vec(),
            frames: self.frames.as_ref().map(cut).transpose()?,
            wave: self.wave.as_ref().map(cut).transpose()?,
            tokens: self.tokens.as_ref().map(|t| t[range.start * l..range.end * l].to_vec()),
            pad: self.pad.as_ref().map(|p| p[range.start * l..range.end * l].to_vec()),
            text_len: l,
        })
    }
}

/// Batch `count` consecutive samples of one kind starting at `first`.
pub fn make_batch(kind: StreamKind, first: u64, count: usize, seed: u64, cfg: &SynthConfig) -> Result<Batch> {
    let samples = (0..count as u64)
        .map(|i| gen_sample(kind, first + i, seed, cfg))
        .collect::<Result<Vec<_>>>()?;
    Batch::from_samples(kind, &samples, cfg)
}

/// Training batch for `step`: kind from the schedule, examples
/// `step·B .. (step+1)·B` of that kind, each taking the class of the first
/// example of its run of `class_run`.
pub fn mix_stream(stream: &StreamConfig, synth: &SynthConfig, seed: u64, step: u64) -> Result<Batch> {
    stream.validate()?;
    let kind = Schedule::kind_at(stream, step)?;
    let run = stream.class_run as u64;
    let first = step * stream.batch as u64;
    let samples = (first..first + stream.batch as u64)
        .map(|i| {
            let class = latent_for(kind, i - i % run, seed, synth.classes).k;
            gen_sample_with_class(kind, i, seed, class, synth)
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::from_samples(kind, &samples, synth)
}

/// One manifest record; raw tensors are regenerated from it, never stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub kind: StreamKind,
    pub index: u64,
    pub seed: u64,
    pub k: usize,
}

impl From<&Sample> for ManifestRecord {
    fn from(s: &Sample) -> Self {
        Self {
            kind: s.kind,
            index: s.index,
            seed: s.seed,
            k: s.latent.k,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_manifest<W: Write>(mut out: W, records: &[ManifestRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_templates_are_well_formed() {
        for i in 0..200 {
            let lat = latent_for(StreamKind::VL, i, 3, 16);
            let t = render_text(&lat, 0);
            assert!((10..=12).contains(&t.len()), "{}", t.len());
            assert_eq!(t[0], CLS);
            assert_eq!(*t.last().unwrap(), SEP);
            assert_eq!(decode_text(&t), Some((lat.k, lat.a, lat.b)));
        }
    }

    #[test]
    fn palette_is_distinct() {
        for i in 0..16 {
            for j in 0..i {
                assert_ne!(palette(i), palette(j));
            }
            assert_eq!(nearest_palette(palette(i)), i);
        }
    }
}
