//! Neural building blocks: affine maps, layer norm, feed-forward, unmasked
//! multi-head attention, pre-norm Transformer layers, and convolution blocks.
//!
//! Every layer owns only [`ParamId`]s; values live in a [`ParamStore`] so a
//! model can be checkpointed and optimised as one flat table.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.xavier(
            format!("{name}.weight"),
            &[in_dim, out_dim],
            in_dim,
            out_dim,
            rng,
        );
        let bias = store.zeros(format!("{name}.bias"), &[out_dim]);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x[..., in] -> [..., out]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Layer normalisation over the last dimension with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, LAYER_NORM_EPS);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.silu(h);
        self.down.forward(g, store, h)
    }
}

/// Width, head count and depth of a Transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(NnError::Shape(format!(
                "attention width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Result of an attention call; `weights` is `[batch * heads, Tq, Tk]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

/// Scaled dot-product multi-head attention. No mask is ever applied: every
/// query position attends to every key position.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub width: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        AttentionConfig {
            width,
            heads,
            layers: 1,
        }
        .validate()?;
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, rng),
            key: Linear::new(store, &format!("{name}.k"), width, width, rng),
            value: Linear::new(store, &format!("{name}.v"), width, width, rng),
            output: Linear::new(store, &format!("{name}.o"), width, width, rng),
            width,
            heads,
        })
    }

    fn split_heads(&self, g: &mut Graph, x: Var, batch: usize, len: usize) -> Var {
        let dh = self.width / self.heads;
        let x = g.reshape(x, &[batch, len, self.heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[batch * self.heads, len, dh])
    }

    /// `queries[B, Tq, d]`, `keys`/`values` `[B, Tk, d]` -> `[B, Tq, d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<AttentionOutput> {
        let (qs, ks, vs) = (
            g.shape(queries).to_vec(),
            g.shape(keys).to_vec(),
            g.shape(values).to_vec(),
        );
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
            return Err(NnError::Shape(format!(
                "attention expects [B, T, d] operands, got {qs:?}, {ks:?}, {vs:?}"
            )));
        }
        if qs[2] != self.width || ks[2] != self.width || vs[2] != self.width {
            return Err(NnError::Shape(format!(
                "attention width {} vs operands {qs:?}, {ks:?}, {vs:?}",
                self.width
            )));
        }
        if qs[0] != ks[0] || ks != vs {
            return Err(NnError::Shape(format!(
                "attention batch/length mismatch: {qs:?}, {ks:?}, {vs:?}"
            )));
        }
        let (batch, tq, tk) = (qs[0], qs[1], ks[1]);
        let dh = self.width / self.heads;

        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, keys);
        let v = self.value.forward(g, store, values);
        let q = self.split_heads(g, q, batch, tq);
        let k = self.split_heads(g, k, batch, tk);
        let v = self.split_heads(g, v, batch, tk);

        let scores = g.bmm(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax(scores);
        let ctx = g.bmm(weights, v, false, false);
        let ctx = g.reshape(ctx, &[batch, self.heads, tq, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[batch, tq, self.width]);
        let output = self.output.forward(g, store, ctx);
        Ok(AttentionOutput { output, weights })
    }
}

/// Pre-norm encoder layer: self-attention then feed-forward, both residual.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), cfg.width),
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                cfg.width,
                cfg.heads,
                rng,
            )?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), cfg.width),
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg.width, ff_hidden, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm_attn.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h, h)?.output;
        let x = g.add(x, a);
        let h = self.norm_ff.forward(g, store, x);
        let f = self.ff.forward(g, store, h);
        Ok(g.add(x, f))
    }
}

/// Pre-norm decoder layer: self-attention over the query sequence,
/// cross-attention into a memory sequence, then feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), cfg.width),
            self_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.self_attn"),
                cfg.width,
                cfg.heads,
                rng,
            )?,
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), cfg.width),
            cross_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.cross_attn"),
                cfg.width,
                cfg.heads,
                rng,
            )?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), cfg.width),
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg.width, ff_hidden, rng),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        memory: Var,
    ) -> Result<Var> {
        let h = self.norm_self.forward(g, store, x);
        let a = self.self_attn.forward(g, store, h, h, h)?.output;
        let x = g.add(x, a);
        let h = self.norm_cross.forward(g, store, x);
        let c = self.cross_attn.forward(g, store, h, memory, memory)?.output;
        let x = g.add(x, c);
        let h = self.norm_ff.forward(g, store, x);
        let f = self.ff.forward(g, store, h);
        Ok(g.add(x, f))
    }
}

/// 3x3 convolution, per-sample normalisation, SiLU, and an identity skip
/// whenever input and output shapes agree. `upsample` applies nearest 2x
/// upsampling before the convolution.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub upsample: bool,
}

impl ConvBlock {
    pub const KERNEL: usize = 3;

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        upsample: bool,
        rng: &mut R,
    ) -> Self {
        let k = Self::KERNEL;
        let fan_in = in_channels * k * k;
        let fan_out = out_channels * k * k;
        let weight = store.xavier(
            format!("{name}.weight"),
            &[out_channels, in_channels, k, k],
            fan_in,
            fan_out,
            rng,
        );
        let bias = store.zeros(format!("{name}.bias"), &[out_channels]);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            stride,
            upsample,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(NnError::Shape(format!(
                "conv block expects [N, {}, H, W], got {s:?}",
                self.in_channels
            )));
        }
        let input = if self.upsample { g.upsample2x(x) } else { x };
        let w = g.param(store, self.weight);
        let y = g.conv2d(input, w, self.stride, Self::KERNEL / 2);
        let ys = g.shape(y).to_vec();
        let flat = g.reshape(y, &[ys[0], ys[1] * ys[2] * ys[3]]);
        let normed = g.layer_norm(flat, LAYER_NORM_EPS);
        let normed = g.reshape(normed, &ys);
        let b = g.param(store, self.bias);
        let normed = g.add_channel(normed, b);
        let act = g.silu(normed);
        if ys == s {
            Ok(g.add(x, act))
        } else {
            Ok(act)
        }
    }
}

/// Plain convolution with bias and no normalisation or activation, used as
/// an output projection.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.xavier(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
            out_channels * kernel * kernel,
            rng,
        );
        let bias = store.zeros(format!("{name}.bias"), &[out_channels]);
        Self {
            weight,
            bias,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, self.stride, self.pad);
        g.add_channel(y, b)
    }
}
