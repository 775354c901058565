//! Parameterized building blocks shared by the encoders, the fusion network
//! and the heads.

use crate::error::Result;
use crate::numkit::{Graph, ParamBuilder, ParamId, Real, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::build(pb, name, fan_in, fan_out, true)
    }

    pub fn no_bias<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::build(pb, name, fan_in, fan_out, false)
    }

    fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        pb.scope(name, None, |pb| {
            let weight = pb.xavier("weight", fan_in, fan_out)?;
            let bias = if bias {
                Some(pb.constant("bias", vec![fan_out], 0.0)?)
            } else {
                None
            };
            Ok(Self {
                weight,
                bias,
                fan_in,
                fan_out,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + if self.bias.is_some() { self.fan_out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        pb.scope(name, None, |pb| {
            Ok(Self {
                gain: pb.constant("gain", vec![dim], 1.0)?,
                bias: pb.constant("bias", vec![dim], 0.0)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain)?;
        let bias = g.param(self.bias)?;
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        pb.scope(name, None, |pb| {
            Ok(Self {
                query: Linear::new(pb, "query", dim, dim)?,
                key: Linear::new(pb, "key", dim, dim)?,
                value: Linear::new(pb, "value", dim, dim)?,
                out: Linear::new(pb, "out", dim, dim)?,
                heads,
            })
        })
    }

    /// `queries[B, Nq, D]` attend over `context[B, Nk, D]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        context: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, context)?;
        let v = self.value.forward(g, context)?;
        let a = g.attention(q, k, v, self.heads, key_mask)?;
        self.out.forward(g, a)
    }

    pub fn num_params(&self) -> usize {
        self.query.num_params() + self.key.num_params() + self.value.num_params() + self.out.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        pb.scope(name, None, |pb| {
            Ok(Self {
                up: Linear::new(pb, "up", dim, hidden)?,
                down: Linear::new(pb, "down", hidden, dim)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }

    pub fn num_params(&self) -> usize {
        self.up.num_params() + self.down.num_params()
    }
}

/// Post-norm transformer encoder layer: attention, add, norm, FFN, add, norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        pb.scope(name, None, |pb| {
            Ok(Self {
                attn: Attention::new(pb, "attn", dim, heads)?,
                norm1: LayerNorm::new(pb, "norm1", dim)?,
                ffn: FeedForward::new(pb, "ffn", dim, ffn)?,
                norm2: LayerNorm::new(pb, "norm2", dim)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, pad_mask: Option<&[bool]>) -> Result<Var> {
        let a = self.attn.forward(g, x, x, pad_mask)?;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, h)?;
        let f = self.ffn.forward(g, h)?;
        let y = g.add(h, f)?;
        self.norm2.forward(g, y)
    }

    pub fn num_params(&self) -> usize {
        let dim = self.attn.query.fan_in;
        self.attn.num_params() + self.ffn.num_params() + 4 * dim
    }
}
