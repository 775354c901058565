//! Toy single-modality encoders with the I/O geometry of the full-size
//! encoders, plus the projection into the fusion width.
//!
//! * language: `[B, L]` ids -> `[B, L, H_l]`
//! * vision: `[B, W, H, T, 3]` frames -> `[B, W/32, H/32, T/2, H_v]`, through a
//!   `[B, W/4, H/4, T/2, C]` patch grid
//! * speech: `[B, S]` waveform -> `[B, floor(S/320), H_s]`

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{EncoderLayer, LayerNorm, Linear};
use crate::numkit::{sinusoid_table, Graph, ParamBuilder, ParamGroup, ParamId, Real, Tensor, Var};

/// Spatial patch size of the vision patch embedding.
pub const PATCH: usize = 4;
/// Temporal patch size of the vision patch embedding.
pub const PATCH_T: usize = 2;
/// Raw values per patch: 4x4 pixels, 2 frames, RGB.
pub const PATCH_DIM: usize = PATCH * PATCH * PATCH_T * 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "V")]
    Vision,
    #[serde(rename = "L")]
    Language,
    #[serde(rename = "S")]
    Speech,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Vision, Modality::Language, Modality::Speech];

    pub fn letter(self) -> char {
        match self {
            Modality::Vision => 'V',
            Modality::Language => 'L',
            Modality::Speech => 'S',
        }
    }

    pub fn from_letter(c: char) -> Result<Self> {
        match c.to_ascii_uppercase() {
            'V' => Ok(Modality::Vision),
            'L' => Ok(Modality::Language),
            'S' => Ok(Modality::Speech),
            other => invalid(format!("unknown modality '{other}'")),
        }
    }

    /// Parses a subset such as `"VL"` or `"LS"`; order and case are ignored.
    pub fn parse_set(s: &str) -> Result<Vec<Modality>> {
        let mut out = Vec::new();
        for c in s.chars() {
            let m = Modality::from_letter(c)?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return invalid("empty modality set");
        }
        out.sort();
        Ok(out)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub h_l: usize,
    pub h_v: usize,
    pub h_s: usize,
    /// Self-attention layers in the language and speech encoders.
    pub depth: usize,
    pub heads: usize,
    /// Width of the vision patch features.
    pub patch_channels: usize,
    /// Strides of the non-overlapping speech convolutions.
    pub speech_strides: Vec<usize>,
    /// Channels after each speech convolution but the last (which emits `h_s`).
    pub speech_channels: Vec<usize>,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            h_l: 64,
            h_v: 64,
            h_s: 64,
            depth: 1,
            heads: 4,
            patch_channels: 48,
            speech_strides: vec![5, 4, 4, 4],
            speech_channels: vec![16, 32, 64],
            max_len: 512,
        }
    }
}

impl EncoderConfig {
    pub fn stride_product(&self) -> usize {
        self.speech_strides.iter().product()
    }

    pub fn width(&self, m: Modality) -> usize {
        match m {
            Modality::Vision => self.h_v,
            Modality::Language => self.h_l,
            Modality::Speech => self.h_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.vocab, self.h_l, self.h_v, self.h_s, self.patch_channels, self.heads];
        if widths.iter().any(|&w| w == 0) {
            return invalid("encoder widths must be positive");
        }
        if self.h_l % self.heads != 0 || self.h_s % self.heads != 0 {
            return invalid("encoder widths must be divisible by heads");
        }
        if self.patch_channels % 6 != 0 {
            return invalid("patch_channels must be divisible by 6 (three sinusoid axes)");
        }
        if self.speech_strides.is_empty() || self.speech_strides.contains(&0) {
            return invalid("speech strides must be non-empty and positive");
        }
        if self.speech_channels.len() + 1 != self.speech_strides.len() {
            return invalid("need one speech channel width per stride except the last");
        }
        Ok(())
    }
}

fn add_positions<T: Real>(g: &mut Graph<'_, T>, x: Var, table: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
    let pos = g.constant(Tensor::from_f64(shape, &table)?)?;
    g.add(x, pos)
}

// ----- language --------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LanguageEncoder {
    pub embed: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub vocab: usize,
    pub width: usize,
}

impl LanguageEncoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        pb.scope("lang_enc", None, |pb| {
            let embed = pb.normal("embed", vec![cfg.vocab, cfg.h_l], 0.02 * (cfg.h_l as f64).sqrt(), false)?;
            let layers = (0..cfg.depth)
                .map(|i| EncoderLayer::new(pb, &format!("layer{i}"), cfg.h_l, cfg.heads, 4 * cfg.h_l))
                .collect::<Result<_>>()?;
            Ok(Self {
                embed,
                layers,
                vocab: cfg.vocab,
                width: cfg.h_l,
            })
        })
    }

    /// `ids[B·L]` with `pad[B·L]` (true = padding) -> `[B, L, H_l]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize], batch: usize, pad: &[bool]) -> Result<Var> {
        if batch == 0 || ids.len() % batch != 0 || pad.len() != ids.len() {
            return shape_err("encode_language", format!("{} ids, {} pad flags, batch {batch}", ids.len(), pad.len()));
        }
        let len = ids.len() / batch;
        for b in 0..batch {
            if pad[b * len..(b + 1) * len].iter().all(|&p| p) {
                return invalid(format!("encode_language: example {b} is all padding"));
            }
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::Index {
                op: "encode_language",
                index: bad,
                bound: self.vocab,
            });
        }
        let table = g.param(self.embed)?;
        let x = g.embedding(table, ids, &[batch, len])?;
        let x = add_positions(g, x, sinusoid_table(len, self.width), vec![len, self.width])?;
        let valid: Vec<bool> = pad.iter().map(|&p| !p).collect();
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, h, Some(&valid))?;
        }
        Ok(h)
    }
}

// ----- vision ----------------------------------------------------------------

/// Rearranges frames `[B, W, H, T, 3]` into raw patch vectors
/// `[B, W/4, H/4, T/2, 96]` (pixel order: dw, dh, dt, rgb).
pub fn patchify<T: Real>(frames: &Tensor<T>) -> Result<Tensor<T>> {
    let s = frames.shape();
    if s.len() != 5 || s[4] != 3 {
        return shape_err("patchify", format!("expected [B, W, H, T, 3], got {s:?}"));
    }
    let (b, w, h, t) = (s[0], s[1], s[2], s[3]);
    if w % 32 != 0 || h % 32 != 0 || t % 2 != 0 || w == 0 || h == 0 || t == 0 {
        return shape_err("patchify", format!("W, H must be multiples of 32 and T of 2, got {w}x{h}x{t}"));
    }
    let (pw, ph, pt) = (w / PATCH, h / PATCH, t / PATCH_T);
    let src = frames.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for i in 0..pw {
            for j in 0..ph {
                for k in 0..pt {
                    for dw in 0..PATCH {
                        for dh in 0..PATCH {
                            for dt in 0..PATCH_T {
                                let (x, y, z) = (i * PATCH + dw, j * PATCH + dh, k * PATCH_T + dt);
                                let base = (((bi * w + x) * h + y) * t + z) * 3;
                                out.extend_from_slice(&src[base..base + 3]);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, pw, ph, pt, PATCH_DIM], out)
}

/// Sinusoid code over the three grid axes, `dim / 3` columns per axis.
pub fn grid_positions(w: usize, h: usize, t: usize, dim: usize) -> Vec<f64> {
    let per = dim / 3;
    let (tw, th, tt) = (sinusoid_table(w, per), sinusoid_table(h, per), sinusoid_table(t, per));
    let mut out = Vec::with_capacity(w * h * t * dim);
    for i in 0..w {
        for j in 0..h {
            for k in 0..t {
                out.extend_from_slice(&tw[i * per..(i + 1) * per]);
                out.extend_from_slice(&th[j * per..(j + 1) * per]);
                out.extend_from_slice(&tt[k * per..(k + 1) * per]);
                out.extend(std::iter::repeat(0.0).take(dim - 3 * per));
            }
        }
    }
    out
}

/// Row indices that gather 2x2 spatial neighbourhoods of a `[B, W, H, T, c]`
/// grid so that a reshape to `[B, W/2, H/2, T, 4c]` merges them.
fn merge_rows(b: usize, w: usize, h: usize, t: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(b * w * h * t);
    for bi in 0..b {
        for i in 0..w / 2 {
            for j in 0..h / 2 {
                for k in 0..t {
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        rows.push(((bi * w + 2 * i + di) * h + 2 * j + dj) * t + k);
                    }
                }
            }
        }
    }
    rows
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub patch_embed: Linear,
    pub mask_embed: ParamId,
    pub merges: Vec<Linear>,
    pub norm: LayerNorm,
    pub channels: usize,
    pub width: usize,
}

impl VisionEncoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        pb.scope("vis_enc", None, |pb| {
            let c = cfg.patch_channels;
            let patch_embed = Linear::new(pb, "patch_embed", PATCH_DIM, c)?;
            let mask_embed = pb.normal("mask_embed", vec![c], 0.02, true)?;
            let widths = [c, 2 * c, 4 * c, cfg.h_v];
            let merges = (0..3)
                .map(|i| Linear::new(pb, &format!("merge{i}"), 4 * widths[i], widths[i + 1]))
                .collect::<Result<_>>()?;
            let norm = LayerNorm::new(pb, "norm", cfg.h_v)?;
            Ok(Self {
                patch_embed,
                mask_embed,
                merges,
                norm,
                channels: c,
                width: cfg.h_v,
            })
        })
    }

    /// Patch stage: frames -> patch grid `[B, W/4, H/4, T/2, C]`.
    pub fn patch_grid<T: Real>(&self, g: &mut Graph<'_, T>, frames: &Tensor<T>) -> Result<Var> {
        let raw = g.constant(patchify(frames)?)?;
        self.patch_embed.forward(g, raw)
    }

    /// Replaces the flagged patch cells (row-major over `[B, W', H', T']`)
    /// with the learned mask embedding.
    pub fn mask_grid<T: Real>(&self, g: &mut Graph<'_, T>, grid: Var, mask: &[bool]) -> Result<Var> {
        let fill = g.param(self.mask_embed)?;
        g.replace_rows(grid, fill, mask)
    }

    /// Patch grid (possibly masked) -> `[B, W/32, H/32, T/2, H_v]`.
    pub fn encode_grid<T: Real>(&self, g: &mut Graph<'_, T>, grid: Var) -> Result<Var> {
        let s = g.shape(grid).to_vec();
        if s.len() != 5 || s[4] != self.channels {
            return shape_err("encode_vision", format!("patch grid {s:?}, channels {}", self.channels));
        }
        let (b, mut w, mut h, t) = (s[0], s[1], s[2], s[3]);
        if w % 8 != 0 || h % 8 != 0 {
            return shape_err("encode_vision", format!("patch grid {w}x{h} not divisible by 8"));
        }
        let mut x = add_positions(g, grid, grid_positions(w, h, t, self.channels), vec![w, h, t, self.channels])?;
        for (i, merge) in self.merges.iter().enumerate() {
            let c = *g.shape(x).last().unwrap();
            let rows = merge_rows(b, w, h, t);
            w /= 2;
            h /= 2;
            x = g.gather_rows(x, rows, vec![b, w, h, t, 4 * c])?;
            x = merge.forward(g, x)?;
            if i + 1 < self.merges.len() {
                x = g.gelu(x)?;
            }
        }
        self.norm.forward(g, x)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, frames: &Tensor<T>, mask: Option<&[bool]>) -> Result<Var> {
        let mut grid = self.patch_grid(g, frames)?;
        if let Some(m) = mask {
            grid = self.mask_grid(g, grid, m)?;
        }
        self.encode_grid(g, grid)
    }
}

// ----- speech ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub convs: Vec<Linear>,
    pub strides: Vec<usize>,
    pub norm: LayerNorm,
    pub mask_embed: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub width: usize,
}

impl SpeechEncoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        pb.scope("speech_enc", None, |pb| {
            let mut convs = Vec::new();
            let mut c_in = 1;
            for (i, &stride) in cfg.speech_strides.iter().enumerate() {
                let c_out = cfg.speech_channels.get(i).copied().unwrap_or(cfg.h_s);
                convs.push(Linear::new(pb, &format!("conv{i}"), stride * c_in, c_out)?);
                c_in = c_out;
            }
            let norm = LayerNorm::new(pb, "norm", cfg.h_s)?;
            let mask_embed = pb.normal("mask_embed", vec![cfg.h_s], 0.02, true)?;
            let layers = (0..cfg.depth)
                .map(|i| EncoderLayer::new(pb, &format!("layer{i}"), cfg.h_s, cfg.heads, 4 * cfg.h_s))
                .collect::<Result<_>>()?;
            Ok(Self {
                convs,
                strides: cfg.speech_strides.clone(),
                norm,
                mask_embed,
                layers,
                width: cfg.h_s,
            })
        })
    }

    pub fn stride_product(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn num_frames(&self, samples: usize) -> usize {
        samples / self.stride_product()
    }

    /// Convolutional featurizer: `[B, S]` -> `[B, F, H_s]`; trailing samples
    /// that do not fill a frame are dropped.
    pub fn featurize<T: Real>(&self, g: &mut Graph<'_, T>, wave: &Tensor<T>) -> Result<Var> {
        let s = wave.shape();
        if s.len() != 2 {
            return shape_err("encode_speech", format!("expected [B, S], got {s:?}"));
        }
        let (b, len) = (s[0], s[1]);
        let stride = self.stride_product();
        let frames = len / stride;
        if frames == 0 {
            return invalid(format!("encode_speech: {len} samples is shorter than one {stride}-sample frame"));
        }
        let used = frames * stride;
        let mut data = Vec::with_capacity(b * used);
        for bi in 0..b {
            data.extend_from_slice(&wave.data()[bi * len..bi * len + used]);
        }
        let mut x = g.constant(Tensor::new(vec![b, used], data)?)?;
        let mut steps = used;
        let mut c = 1;
        for (i, conv) in self.convs.iter().enumerate() {
            steps /= self.strides[i];
            x = g.reshape(x, vec![b, steps, self.strides[i] * c])?;
            x = conv.forward(g, x)?;
            c = conv.fan_out;
            if i + 1 < self.convs.len() {
                x = g.gelu(x)?;
            }
        }
        self.norm.forward(g, x)
    }

    /// Featurizer output (optionally span-masked) through the attention stack.
    pub fn encode_frames<T: Real>(&self, g: &mut Graph<'_, T>, feats: Var, mask: Option<&[bool]>) -> Result<Var> {
        let s = g.shape(feats).to_vec();
        let mut x = feats;
        if let Some(m) = mask {
            let fill = g.param(self.mask_embed)?;
            x = g.replace_rows(x, fill, m)?;
        }
        x = add_positions(g, x, sinusoid_table(s[1], self.width), vec![s[1], self.width])?;
        for layer in &self.layers {
            x = layer.forward(g, x, None)?;
        }
        Ok(x)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, wave: &Tensor<T>, mask: Option<&[bool]>) -> Result<Var> {
        let feats = self.featurize(g, wave)?;
        self.encode_frames(g, feats, mask)
    }
}

// ----- projection ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Merge,
    Co,
}

/// One-layer linear map into the fusion width plus a modality ID embedding.
#[derive(Clone, Debug)]
pub struct Projection {
    pub linear: Linear,
    pub id_embed: ParamId,
    pub modality: Modality,
}

impl Projection {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, modality: Modality, width: usize, hidden: usize) -> Result<Self> {
        pb.scope(&format!("proj_{}", modality.letter()), Some(ParamGroup::Fusion), |pb| {
            Ok(Self {
                linear: Linear::new(pb, "linear", width, hidden)?,
                id_embed: pb.normal("id_embed", vec![hidden], 0.02, true)?,
                modality,
            })
        })
    }

    /// Linear map to `[.., H]`; merge mode adds the ID embedding at every
    /// position. No positional information is added here.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, features: Var, mode: FusionMode) -> Result<Var> {
        let w = *g.shape(features).last().unwrap_or(&0);
        if w != self.linear.fan_in {
            return shape_err(
                "project_and_tag",
                format!("{:?} features of width {w}, expected {}", self.modality, self.linear.fan_in),
            );
        }
        let y = self.linear.forward(g, features)?;
        match mode {
            FusionMode::Merge => {
                let e = g.param(self.id_embed)?;
                g.add(y, e)
            }
            FusionMode::Co => Ok(y),
        }
    }
}

/// All three encoders with their projections.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub language: LanguageEncoder,
    pub vision: VisionEncoder,
    pub speech: SpeechEncoder,
    pub projections: [Projection; 3],
}

impl Encoders {
    /// `hidden` is the fusion width the projections map into.
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig, hidden: usize) -> Result<Self> {
        cfg.validate()?;
        let (language, vision, speech) = pb.scope("", Some(ParamGroup::Encoder), |pb| -> Result<_> {
            Ok((
                LanguageEncoder::new(pb, cfg)?,
                VisionEncoder::new(pb, cfg)?,
                SpeechEncoder::new(pb, cfg)?,
            ))
        })?;
        let projections = [
            Projection::new(pb, Modality::Vision, cfg.h_v, hidden)?,
            Projection::new(pb, Modality::Language, cfg.h_l, hidden)?,
            Projection::new(pb, Modality::Speech, cfg.h_s, hidden)?,
        ];
        Ok(Self {
            config: cfg.clone(),
            language,
            vision,
            speech,
            projections,
        })
    }

    pub fn projection(&self, m: Modality) -> &Projection {
        &self.projections[m.index()]
    }
}
