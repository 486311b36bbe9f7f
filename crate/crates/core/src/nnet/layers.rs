//! Conformer building blocks expressed as tape operations.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, uniform, ParamId, ParamStore};
use crate::tensor::{Mat, Scalar};

use super::ForwardCtx;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros(1, fan_out)));
        Linear { weight, bias }
    }

    pub fn identity<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Mat::identity(dim));
        let bias = Some(store.add(format!("{name}.bias"), Mat::zeros(1, dim)));
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Mat::filled(1, dim, T::one())),
            beta: store.add(format!("{name}.beta"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Swish,
    Relu,
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
    ) -> Self {
        FeedForward {
            w1: Linear::new(store, rng, &format!("{name}.w1"), dim, hidden, true),
            w2: Linear::new(store, rng, &format!("{name}.w2"), hidden, dim, true),
            act,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx) -> Var {
        let h = self.w1.forward(tape, x);
        let h = match self.act {
            Activation::Swish => tape.swish(h),
            Activation::Relu => tape.relu(h),
        };
        let h = ctx.dropout(tape, h);
        self.w2.forward(tape, h)
    }
}

/// Sinusoidal table of relative offsets `T-1, T-2, ..., -(T-1)` (row `r` is offset `T-1-r`).
pub fn relative_positions<T: Scalar>(frames: usize, dim: usize) -> Mat<T> {
    let rows = 2 * frames - 1;
    Mat::from_fn(rows, dim, |r, c| {
        let pos = frames as f64 - 1.0 - r as f64;
        sinusoid(pos, c, dim)
    })
}

pub fn absolute_positions<T: Scalar>(len: usize, dim: usize) -> Mat<T> {
    Mat::from_fn(len, dim, |r, c| sinusoid(r as f64, c, dim))
}

fn sinusoid<T: Scalar>(pos: f64, c: usize, dim: usize) -> T {
    let i = (c / 2) as f64;
    let angle = pos * (-(2.0 * i) * 10000f64.ln() / dim as f64).exp();
    T::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() })
}

/// Multi-head self-attention with Transformer-XL style relative positions.
#[derive(Clone, Debug)]
pub struct RelPosSelfAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub pos: Linear,
    pub pos_bias_u: ParamId,
    pub pos_bias_v: ParamId,
    pub out: Linear,
}

impl RelPosSelfAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        RelPosSelfAttention {
            heads,
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true),
            pos: Linear::new(store, rng, &format!("{name}.pos"), dim, dim, false),
            pos_bias_u: store.add(format!("{name}.pos_bias_u"), uniform(rng, 1, dim, 0.1)),
            pos_bias_v: store.add(format!("{name}.pos_bias_v"), uniform(rng, 1, dim, 0.1)),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim, true),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx) -> Var {
        let (frames, dim) = tape.value(x).shape();
        let dk = dim / self.heads;
        let scale = T::lit(1.0 / (dk as f64).sqrt());
        let q = self.q.forward(tape, x);
        let k = self.k.forward(tape, x);
        let v = self.v.forward(tape, x);
        let table = tape.constant(relative_positions(frames, dim));
        let p = self.pos.forward(tape, table);
        let bu = tape.param(self.pos_bias_u);
        let bv = tape.param(self.pos_bias_v);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * dk;
            let qh = tape.slice_cols(q, off, dk);
            let kh = tape.slice_cols(k, off, dk);
            let vh = tape.slice_cols(v, off, dk);
            let ph = tape.slice_cols(p, off, dk);
            let buh = tape.slice_cols(bu, off, dk);
            let bvh = tape.slice_cols(bv, off, dk);
            let qu = tape.add_row(qh, buh);
            let qv = tape.add_row(qh, bvh);
            let content = tape.matmul_nt(qu, kh);
            let position = tape.matmul_nt(qv, ph);
            let position = tape.rel_shift(position);
            let scores = tape.add(content, position);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, false);
            let attn = ctx.dropout(tape, attn);
            heads.push(tape.matmul(attn, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        self.out.forward(tape, cat)
    }
}

/// Standard scaled dot-product multi-head attention (decoder self and cross attention).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            heads,
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim, true),
        }
    }

    /// Returns the output and the per-head attention weight matrices.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        query: Var,
        memory: Var,
        causal: bool,
        ctx: &mut ForwardCtx,
    ) -> (Var, Vec<Var>) {
        let dim = tape.value(query).cols();
        let dk = dim / self.heads;
        let scale = T::lit(1.0 / (dk as f64).sqrt());
        let q = self.q.forward(tape, query);
        let k = self.k.forward(tape, memory);
        let v = self.v.forward(tape, memory);
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * dk;
            let qh = tape.slice_cols(q, off, dk);
            let kh = tape.slice_cols(k, off, dk);
            let vh = tape.slice_cols(v, off, dk);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, causal);
            weights.push(attn);
            let attn = ctx.dropout(tape, attn);
            heads.push(tape.matmul(attn, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        (self.out.forward(tape, cat), weights)
    }
}

/// Pointwise conv + GLU, depthwise conv, norm, swish, pointwise conv.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub pointwise_in: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub norm: LayerNorm,
    pub pointwise_out: Linear,
}

impl ConvModule {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, dim: usize, kernel: usize) -> Self {
        ConvModule {
            pointwise_in: Linear::new(store, rng, &format!("{name}.pointwise_in"), dim, 2 * dim, true),
            depthwise: store.add(
                format!("{name}.depthwise.weight"),
                uniform(rng, kernel, dim, 1.0 / (kernel as f64).sqrt()),
            ),
            depthwise_bias: store.add(format!("{name}.depthwise.bias"), Mat::zeros(1, dim)),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            pointwise_out: Linear::new(store, rng, &format!("{name}.pointwise_out"), dim, dim, true),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx) -> Var {
        let h = self.pointwise_in.forward(tape, x);
        let h = tape.glu(h);
        let w = tape.param(self.depthwise);
        let h = tape.depthwise_conv(h, w);
        let b = tape.param(self.depthwise_bias);
        let h = tape.add_row(h, b);
        let h = self.norm.forward(tape, h);
        let h = tape.swish(h);
        let h = self.pointwise_out.forward(tape, h);
        ctx.dropout(tape, h)
    }
}

#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ff1_norm: LayerNorm,
    pub ff1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: RelPosSelfAttention,
    pub conv_norm: LayerNorm,
    pub conv: ConvModule,
    pub ff2_norm: LayerNorm,
    pub ff2: FeedForward,
    pub final_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        ff_units: usize,
        heads: usize,
        kernel: usize,
    ) -> Self {
        ConformerBlock {
            ff1_norm: LayerNorm::new(store, &format!("{name}.ff1_norm"), dim),
            ff1: FeedForward::new(store, rng, &format!("{name}.ff1"), dim, ff_units, Activation::Swish),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim),
            attn: RelPosSelfAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            conv_norm: LayerNorm::new(store, &format!("{name}.conv_norm"), dim),
            conv: ConvModule::new(store, rng, &format!("{name}.conv"), dim, kernel),
            ff2_norm: LayerNorm::new(store, &format!("{name}.ff2_norm"), dim),
            ff2: FeedForward::new(store, rng, &format!("{name}.ff2"), dim, ff_units, Activation::Swish),
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), dim),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx) -> Var {
        let half = T::lit(0.5);
        let h = self.ff1_norm.forward(tape, x);
        let h = self.ff1.forward(tape, h, ctx);
        let h = ctx.dropout(tape, h);
        let h = tape.scale(h, half);
        let x = tape.add(x, h);

        let h = self.attn_norm.forward(tape, x);
        let h = self.attn.forward(tape, h, ctx);
        let h = ctx.dropout(tape, h);
        let x = tape.add(x, h);

        let h = self.conv_norm.forward(tape, x);
        let h = self.conv.forward(tape, h, ctx);
        let x = tape.add(x, h);

        let h = self.ff2_norm.forward(tape, x);
        let h = self.ff2.forward(tape, h, ctx);
        let h = ctx.dropout(tape, h);
        let h = tape.scale(h, half);
        let x = tape.add(x, h);

        self.final_norm.forward(tape, x)
    }
}

/// Two stride-2, kernel-3 convolutions over time (no padding) followed by a projection.
#[derive(Clone, Debug)]
pub struct Subsampling {
    pub conv1: Linear,
    pub conv2: Linear,
    pub out: Linear,
}

pub const SUBSAMPLING_KERNEL: usize = 3;
pub const SUBSAMPLING_STRIDE: usize = 2;
pub const MIN_INPUT_FRAMES: usize = 7;

/// Output length of the subsampling stem, or `None` when the input is too short.
pub fn subsampled_len(frames: usize) -> Option<usize> {
    let stage = |t: usize| (t >= SUBSAMPLING_KERNEL).then(|| (t - SUBSAMPLING_KERNEL) / SUBSAMPLING_STRIDE + 1);
    stage(frames).and_then(|t1| stage(t1))
}

impl Subsampling {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, input_dim: usize, dim: usize) -> Self {
        Subsampling {
            conv1: Linear::new(store, rng, &format!("{name}.conv1"), SUBSAMPLING_KERNEL * input_dim, dim, true),
            conv2: Linear::new(store, rng, &format!("{name}.conv2"), SUBSAMPLING_KERNEL * dim, dim, true),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim, true),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let frames = tape.value(x).rows();
        if subsampled_len(frames).is_none() {
            return Err(Error::invalid(format!(
                "{frames} frames is too short for subsampling (need at least {MIN_INPUT_FRAMES})"
            )));
        }
        let h = tape.unfold(x, SUBSAMPLING_KERNEL, SUBSAMPLING_STRIDE);
        let h = self.conv1.forward(tape, h);
        let h = tape.relu(h);
        let h = tape.unfold(h, SUBSAMPLING_KERNEL, SUBSAMPLING_STRIDE);
        let h = self.conv2.forward(tape, h);
        let h = tape.relu(h);
        let h = self.out.forward(tape, h);
        Ok(ctx.dropout(tape, h))
    }
}

/// An encoder stack: optional subsampling stem plus Conformer blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: Option<Subsampling>,
    pub layers: Vec<ConformerBlock>,
}

impl Encoder {
    /// Runs the stem and the first `upto` blocks, returning every block output.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        upto: usize,
        ctx: &mut ForwardCtx,
        label: &str,
    ) -> Result<Vec<Var>> {
        let mut h = match &self.stem {
            Some(stem) => stem.forward(tape, x, ctx)?,
            None => x,
        };
        let mut outs = Vec::with_capacity(upto);
        for (i, layer) in self.layers.iter().take(upto).enumerate() {
            h = layer.forward(tape, h, ctx);
            if !tape.value(h).all_finite() {
                return Err(Error::numerical(
                    format!("{label}.layer{:02}", i + 1),
                    "non-finite layer output",
                ));
            }
            outs.push(h);
        }
        Ok(outs)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub src_norm: LayerNorm,
    pub src_attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub output: Linear,
    pub dim: usize,
    pub vocab: usize,
}

pub struct DecoderOutput {
    pub logits: Var,
    /// `[layer][head]` cross-attention weights, `prefix_len x frames` each.
    pub cross_attention: Vec<Vec<Var>>,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        ff_units: usize,
        heads: usize,
        layers: usize,
        vocab: usize,
    ) -> Self {
        let embed = store.add(format!("{name}.embed"), uniform(rng, vocab, dim, (3.0 / dim as f64).sqrt()));
        let layers = (1..=layers)
            .map(|i| {
                let n = format!("{name}.layer{i:02}");
                DecoderLayer {
                    self_norm: LayerNorm::new(store, &format!("{n}.self_norm"), dim),
                    self_attn: MultiHeadAttention::new(store, rng, &format!("{n}.self_attn"), dim, heads),
                    src_norm: LayerNorm::new(store, &format!("{n}.src_norm"), dim),
                    src_attn: MultiHeadAttention::new(store, rng, &format!("{n}.src_attn"), dim, heads),
                    ff_norm: LayerNorm::new(store, &format!("{n}.ff_norm"), dim),
                    ff: FeedForward::new(store, rng, &format!("{n}.ff"), dim, ff_units, Activation::Relu),
                }
            })
            .collect();
        Decoder {
            embed,
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), dim),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, vocab, true),
            dim,
            vocab,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        memory: Var,
        prefix: &[usize],
        ctx: &mut ForwardCtx,
    ) -> Result<DecoderOutput> {
        if prefix.is_empty() {
            return Err(Error::invalid("decoder prefix is empty"));
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", self.vocab)));
        }
        let table = tape.param(self.embed);
        let e = tape.gather_rows(table, prefix);
        let e = tape.scale(e, T::lit((self.dim as f64).sqrt()));
        let pe = tape.constant(absolute_positions(prefix.len(), self.dim));
        let e = tape.add(e, pe);
        let mut x = ctx.dropout(tape, e);
        let mut cross = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.self_norm.forward(tape, x);
            let (h, _) = layer.self_attn.forward(tape, h, h, true, ctx);
            let h = ctx.dropout(tape, h);
            x = tape.add(x, h);
            let h = layer.src_norm.forward(tape, x);
            let (h, w) = layer.src_attn.forward(tape, h, memory, false, ctx);
            cross.push(w);
            let h = ctx.dropout(tape, h);
            x = tape.add(x, h);
            let h = layer.ff_norm.forward(tape, x);
            let h = layer.ff.forward(tape, h, ctx);
            let h = ctx.dropout(tape, h);
            x = tape.add(x, h);
        }
        let x = self.final_norm.forward(tape, x);
        let logits = self.output.forward(tape, x);
        Ok(DecoderOutput {
            logits,
            cross_attention: cross,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsampling_arithmetic() {
        assert_eq!(subsampled_len(98), Some(23));
        assert_eq!(subsampled_len(7), Some(1));
        assert_eq!(subsampled_len(6), None);
        assert_eq!(subsampled_len(0), None);
    }

    #[test]
    fn relative_table_is_centered() {
        let t = relative_positions::<f64>(4, 8);
        assert_eq!(t.rows(), 7);
        // offset zero sits in the middle row: sin(0) = 0, cos(0) = 1
        assert_eq!(t.get(3, 0), 0.0);
        assert_eq!(t.get(3, 1), 1.0);
    }
}
