//! Frozen codebooks that turn vision patches and speech frames into discrete
//! targets, and the vision prediction head (transposed 3-D convolution
//! followed by a softmax over codes).

use std::f64::consts::PI;

use crate::error::{invalid, shape_err, Result};
use crate::nn::Linear;
use crate::numkit::{Graph, ParamBuilder, ParamId, Real, Rng, Tensor, Var};

/// `V_c` unit-norm code vectors of width `D`. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub size: usize,
    pub dim: usize,
    pub codes: Vec<f64>,
}

impl Codebook {
    pub fn code(&self, i: usize) -> &[f64] {
        &self.codes[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn build_codebook(size: usize, dim: usize, seed: u64) -> Result<Codebook> {
    if size < 2 {
        return invalid(format!("codebook needs at least 2 codes, got {size}"));
    }
    if dim == 0 {
        return invalid("codebook dimension must be positive");
    }
    let mut rng = Rng::keyed(seed, &[size as u64, dim as u64]);
    let mut codes = Vec::with_capacity(size * dim);
    for _ in 0..size {
        let row: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        codes.extend(row.iter().map(|v| v / norm));
    }
    Ok(Codebook { size, dim, codes })
}

/// Nearest code by squared L2 distance; ties go to the lowest index.
pub fn quantize(vectors: &[f64], cb: &Codebook) -> Result<Vec<usize>> {
    if vectors.len() % cb.dim != 0 {
        return shape_err("quantize", format!("{} values for code width {}", vectors.len(), cb.dim));
    }
    Ok(vectors
        .chunks(cb.dim)
        .map(|v| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for i in 0..cb.size {
                let d: f64 = v.iter().zip(cb.code(i)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Block size of the vision target descriptors (16x16 pixels, 1 frame).
pub const TARGET_BLOCK: usize = 16;

/// Vision targets: mean RGB of each 16x16x1 block, centred and lifted to the
/// code width by a fixed seeded matrix, then quantized.
#[derive(Clone, Debug)]
pub struct VisionTokenizer {
    pub lift: Vec<f64>,
    pub codebook: Codebook,
}

impl VisionTokenizer {
    pub fn new(size: usize, dim: usize, seed: u64) -> Result<Self> {
        let codebook = build_codebook(size, dim, seed)?;
        let mut rng = Rng::keyed(seed, &[0x11f7]);
        let lift = (0..3 * dim).map(|_| 2.0 * rng.normal()).collect();
        Ok(Self { lift, codebook })
    }

    /// Target grid `[B, W/16, H/16, T]`, row-major.
    pub fn targets<T: Real>(&self, frames: &Tensor<T>) -> Result<Vec<usize>> {
        let s = frames.shape();
        if s.len() != 5 || s[4] != 3 || s[1] % TARGET_BLOCK != 0 || s[2] % TARGET_BLOCK != 0 {
            return shape_err("vision_targets", format!("frames {s:?}"));
        }
        let (b, w, h, t) = (s[0], s[1], s[2], s[3]);
        let (gw, gh) = (w / TARGET_BLOCK, h / TARGET_BLOCK);
        let dim = self.codebook.dim;
        let x = frames.data();
        let area = (TARGET_BLOCK * TARGET_BLOCK) as f64;
        let mut desc = Vec::with_capacity(b * gw * gh * t * dim);
        for bi in 0..b {
            for i in 0..gw {
                for j in 0..gh {
                    for k in 0..t {
                        let mut rgb = [0.0f64; 3];
                        for dx in 0..TARGET_BLOCK {
                            for dy in 0..TARGET_BLOCK {
                                let base = (((bi * w + i * TARGET_BLOCK + dx) * h + j * TARGET_BLOCK + dy) * t + k) * 3;
                                for (c, acc) in rgb.iter_mut().enumerate() {
                                    *acc += x[base + c].as_f64();
                                }
                            }
                        }
                        for d in 0..dim {
                            let v: f64 = (0..3).map(|c| (rgb[c] / area - 0.5) * self.lift[c * dim + d]).sum();
                            desc.push(v);
                        }
                    }
                }
            }
        }
        quantize(&desc, &self.codebook)
    }
}

/// Speech targets: per frame, log band magnitudes at fixed frequencies,
/// centred and scaled to unit norm, then quantized.
#[derive(Clone, Debug)]
pub struct SpeechTokenizer {
    pub frame: usize,
    pub sample_rate: f64,
    pub bands: Vec<f64>,
    pub codebook: Codebook,
    /// `(cos, sin)` of each band at each sample offset in a frame.
    basis: Vec<(f64, f64)>,
}

impl SpeechTokenizer {
    pub fn new(size: usize, frame: usize, sample_rate: f64, seed: u64) -> Result<Self> {
        let n_bands = 16;
        // log-spaced from 200 Hz to 3.2 kHz
        let bands = (0..n_bands)
            .map(|i| 200.0 * 16f64.powf(i as f64 / (n_bands - 1) as f64))
            .collect::<Vec<f64>>();
        let basis = bands
            .iter()
            .flat_map(|&f| {
                let w = 2.0 * PI * f / sample_rate;
                (0..frame).map(move |n| ((w * n as f64).cos(), (w * n as f64).sin()))
            })
            .collect();
        Ok(Self {
            frame,
            sample_rate,
            bands,
            codebook: build_codebook(size, n_bands, seed ^ 0x5bee)?,
            basis,
        })
    }

    /// Band descriptor of one frame.
    pub fn descriptor(&self, frame: &[f64]) -> Vec<f64> {
        let mut d: Vec<f64> = self
            .basis
            .chunks(self.frame)
            .map(|basis| {
                let (mut re, mut im) = (0.0, 0.0);
                for (&x, &(c, s)) in frame.iter().zip(basis) {
                    re += x * c;
                    im += x * s;
                }
                (1.0 + (re * re + im * im).sqrt()).ln()
            })
            .collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        d.iter_mut().for_each(|v| *v -= mean);
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            d.iter_mut().for_each(|v| *v /= norm);
        }
        d
    }

    /// Targets `[B, floor(S / frame)]`.
    pub fn targets<T: Real>(&self, wave: &Tensor<T>) -> Result<Vec<usize>> {
        let s = wave.shape();
        if s.len() != 2 {
            return shape_err("speech_targets", format!("waveform {s:?}"));
        }
        let (b, len) = (s[0], s[1]);
        let frames = len / self.frame;
        let mut desc = Vec::with_capacity(b * frames * self.bands.len());
        let mut buf = vec![0.0; self.frame];
        for bi in 0..b {
            for f in 0..frames {
                let start = bi * len + f * self.frame;
                for (o, x) in buf.iter_mut().zip(&wave.data()[start..start + self.frame]) {
                    *o = x.as_f64();
                }
                desc.extend(self.descriptor(&buf));
            }
        }
        quantize(&desc, &self.codebook)
    }
}

/// Transposed 3-D convolution with kernel = stride = 2, as a linear map to
/// eight sub-cells followed by a pixel shuffle and a shared bias.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub linear: Linear,
    pub bias: ParamId,
    pub width: usize,
}

impl Deconv {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, width: usize) -> Result<Self> {
        pb.scope(name, None, |pb| {
            Ok(Self {
                linear: Linear::no_bias(pb, "kernel", width, 8 * width)?,
                bias: pb.constant("bias", vec![width], 0.0)?,
                width,
            })
        })
    }

    /// `[B, w, h, t, H]` -> `[B, 2w, 2h, 2t, H]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 5 || s[4] != self.width {
            return shape_err("deconv_upsample", format!("input {s:?}, width {}", self.width));
        }
        let (b, w, h, t, d) = (s[0], s[1], s[2], s[3], s[4]);
        let y = self.linear.forward(g, x)?;
        let y = g.reshape(y, vec![b * w * h * t * 8, d])?;
        let mut rows = Vec::with_capacity(b * w * h * t * 8);
        for bi in 0..b {
            for oi in 0..2 * w {
                for oj in 0..2 * h {
                    for ok in 0..2 * t {
                        let cell = ((bi * w + oi / 2) * h + oj / 2) * t + ok / 2;
                        let sub = ((oi % 2) * 2 + oj % 2) * 2 + ok % 2;
                        rows.push(cell * 8 + sub);
                    }
                }
            }
        }
        let up = g.gather_rows(y, rows, vec![b, 2 * w, 2 * h, 2 * t, d])?;
        let bias = g.param(self.bias)?;
        g.add(up, bias)
    }
}

/// Masked-vision-modeling head: deconv then an affine map to code logits.
#[derive(Clone, Debug)]
pub struct MvmHead {
    pub deconv: Deconv,
    pub out: Linear,
}

impl MvmHead {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, width: usize, codes: usize) -> Result<Self> {
        pb.scope("mvm_head", None, |pb| {
            Ok(Self {
                deconv: Deconv::new(pb, "deconv", width)?,
                out: Linear::new(pb, "out", width, codes)?,
            })
        })
    }

    /// Code probabilities over the upsampled grid.
    pub fn probabilities<T: Real>(&self, g: &mut Graph<'_, T>, fused: Var) -> Result<Var> {
        let up = self.deconv.forward(g, fused)?;
        mvm_logits(g, up, &self.out)
    }

    /// Logits for the selected rows of the upsampled grid only.
    pub fn masked_logits<T: Real>(&self, g: &mut Graph<'_, T>, fused: Var, rows: &[usize]) -> Result<Var> {
        let up = self.deconv.forward(g, fused)?;
        let d = *g.shape(up).last().unwrap();
        let picked = g.gather_rows(up, rows.to_vec(), vec![rows.len(), d])?;
        self.out.forward(g, picked)
    }
}

/// Affine map then softmax over codes.
pub fn mvm_logits<T: Real>(g: &mut Graph<'_, T>, upsampled: Var, out: &Linear) -> Result<Var> {
    let logits = out.forward(g, upsampled)?;
    g.softmax(logits)
}
