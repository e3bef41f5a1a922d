//! Parameterized building blocks. Each layer owns only [`ParamId`]s; values
//! live in the shared [`ParamStore`] so the same layer runs on any graph.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::param::{ParamId, ParamStore};
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add_glorot(&format!("{name}.w"), d_in, d_out, rng)?;
        let b = store.add_filled(&format!("{name}.b"), &[d_out], 0.0)?;
        Ok(Self { w, b, d_in, d_out })
    }

    /// `y = x W + b`
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        if g.cols(x) != self.d_in {
            return Err(dim_err("dense", format!("input dim {} vs {}", g.cols(x), self.d_in)));
        }
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add_filled(&format!("{name}.gain"), &[dim], 1.0)?;
        let bias = store.add_filled(&format!("{name}.bias"), &[dim], 0.0)?;
        Ok(Self { gain, bias })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerEncoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl TransformerEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("transformer needs at least one layer".into()));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::HeadDivision { dim: self.model_dim, heads: self.heads });
        }
        Ok(())
    }
}

/// Pre-norm self-attention + feed-forward block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln2: LayerNorm,
    ff1: Dense,
    ff2: Dense,
    heads: usize,
    causal: bool,
    dropout: f64,
    dim: usize,
}

impl TransformerBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &TransformerEncoderConfig,
        causal: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            q: Dense::new(store, &format!("{name}.attn.q"), d, d, rng)?,
            k: Dense::new(store, &format!("{name}.attn.k"), d, d, rng)?,
            v: Dense::new(store, &format!("{name}.attn.v"), d, d, rng)?,
            o: Dense::new(store, &format!("{name}.attn.o"), d, d, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ff1: Dense::new(store, &format!("{name}.ff1"), d, cfg.ff_dim, rng)?,
            ff2: Dense::new(store, &format!("{name}.ff2"), cfg.ff_dim, d, rng)?,
            heads: cfg.heads,
            causal,
            dropout: cfg.dropout,
            dim: d,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        if g.cols(x) != self.dim {
            return Err(dim_err("transformer block", format!("input dim {} vs {}", g.cols(x), self.dim)));
        }
        let h = self.ln1.forward(g, x)?;
        let q = self.q.forward(g, h)?;
        let k = self.k.forward(g, h)?;
        let v = self.v.forward(g, h)?;
        let a = g.attention(q, k, v, self.heads, self.causal)?;
        let a = self.o.forward(g, a)?;
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.ff1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.ff2.forward(g, h)?;
        let h = g.dropout(h, self.dropout);
        g.add(x, h)
    }
}

/// Learned absolute positions at entry, `layers` pre-norm blocks, final
/// layer norm.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    final_ln: LayerNorm,
    max_len: usize,
    dim: usize,
}

impl TransformerStack {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &TransformerEncoderConfig,
        max_len: usize,
        causal: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let pos = store.add_normal(&format!("{name}.pos"), &[max_len, cfg.model_dim], 0.02, rng)?;
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), cfg, causal, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(store, &format!("{name}.final_ln"), cfg.model_dim)?;
        Ok(Self { pos, blocks, final_ln, max_len, dim: cfg.model_dim })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let t = g.rows(x);
        if t > self.max_len {
            return Err(Error::ContextLength { len: t, max: self.max_len });
        }
        if g.cols(x) != self.dim {
            return Err(dim_err("transformer stack", format!("input dim {} vs {}", g.cols(x), self.dim)));
        }
        let pos = g.param(self.pos);
        let p = g.slice_rows(pos, 0, t)?;
        let mut h = g.add(x, p)?;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        self.final_ln.forward(g, h)
    }
}

/// Strided 1-D convolution over the time axis, expressed as an unfold
/// followed by a dense map.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    proj: Dense,
}

impl Conv1d {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let proj = Dense::new(store, name, kernel * c_in, c_out, rng)?;
        Ok(Self { kernel, stride, pad, c_in, proj })
    }

    pub fn out_len(&self, t: usize) -> usize {
        if t + 2 * self.pad < self.kernel {
            0
        } else {
            (t + 2 * self.pad - self.kernel) / self.stride + 1
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let t = g.rows(x);
        if g.cols(x) != self.c_in {
            return Err(dim_err("conv1d", format!("channels {} vs {}", g.cols(x), self.c_in)));
        }
        if t < self.kernel {
            return Err(Error::Length { op: "conv1d", got: t, need: self.kernel });
        }
        let t_out = self.out_len(t);
        let cols = g.im2col(x, self.kernel, self.stride, self.pad, t_out)?;
        self.proj.forward(g, cols)
    }
}

/// Stride-2 downsampling convolution with symmetric padding: output length
/// is `ceil(T / 2)`.
pub fn downsample_conv<F: Real>(
    store: &mut ParamStore<F>,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    rng: &mut impl Rng,
) -> Result<Conv1d> {
    if kernel % 2 == 0 {
        return Err(Error::Config(format!("downsampling kernel must be odd, got {kernel}")));
    }
    Conv1d::new(store, name, c_in, c_out, kernel, 2, kernel / 2, rng)
}
