//! Differentiable Conformer encoder/decoder with per-layer output exposure.

pub mod checkpoint;
pub mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::tokenizer::{EOS, SOS};
use crate::error::{Error, Result};
use crate::params::{ManifestEntry, ParamStore};
use crate::tensor::{Mat, Scalar};

pub use layers::{subsampled_len, ConformerBlock, Decoder, Encoder, Linear, Subsampling};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformerConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub num_encoder_layers: usize,
    pub encoder_ff_units: usize,
    pub num_decoder_layers: usize,
    pub decoder_ff_units: usize,
    pub attention_heads: usize,
    pub conv_kernel: usize,
    pub vocab_size: usize,
    pub ctc_weight: f64,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl Default for ConformerConfig {
    /// Desk-scale shrink of the large configuration (same ratios, 64-wide).
    fn default() -> Self {
        ConformerConfig {
            input_dim: 80,
            d_model: 64,
            num_encoder_layers: 6,
            encoder_ff_units: 256,
            num_decoder_layers: 2,
            decoder_ff_units: 256,
            attention_heads: 4,
            conv_kernel: 7,
            vocab_size: 32,
            ctc_weight: 0.3,
            dropout: 0.1,
            label_smoothing: 0.0,
        }
    }
}

impl ConformerConfig {
    /// The well-trained source model configuration: 512-wide, 12 + 6 layers,
    /// 2048 feed-forward units, 8 heads, kernel 31, 5000 output units.
    pub fn full_scale() -> Self {
        ConformerConfig {
            input_dim: 83,
            d_model: 512,
            num_encoder_layers: 12,
            encoder_ff_units: 2048,
            num_decoder_layers: 6,
            decoder_ff_units: 2048,
            attention_heads: 8,
            conv_kernel: 31,
            vocab_size: 5000,
            ctc_weight: 0.3,
            dropout: 0.1,
            label_smoothing: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.attention_heads == 0 || self.d_model % self.attention_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of attention_heads {}",
                self.d_model, self.attention_heads
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return bad(format!("ctc_weight {} outside [0, 1]", self.ctc_weight));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.input_dim == 0 || self.num_encoder_layers == 0 || self.vocab_size < 5 {
            return bad("input_dim, num_encoder_layers must be positive and vocab_size >= 5".into());
        }
        Ok(())
    }

    /// Closed-form parameter count of [`ConformerModel`].
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let ln = 2 * d;
        let lin = |i: usize, o: usize| i * o + o;
        let stem = lin(3 * self.input_dim, d) + lin(3 * d, d) + lin(d, d);
        let ff = |units: usize| lin(d, units) + lin(units, d);
        let block = ln + ff(self.encoder_ff_units)
            + ln + 4 * lin(d, d) + d * d + 2 * d
            + ln + lin(d, 2 * d) + self.conv_kernel * d + d + ln + lin(d, d)
            + ln + ff(self.encoder_ff_units)
            + ln;
        let v = self.vocab_size;
        let dec_layer = 3 * ln + 8 * lin(d, d) + ff(self.decoder_ff_units);
        let decoder = v * d + self.num_decoder_layers * dec_layer + ln + lin(d, v);
        stem + self.num_encoder_layers * block + decoder + lin(d, v)
    }
}

/// Train/eval switch plus the randomness a forward pass may consume.
pub struct ForwardCtx {
    train: bool,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64, dropout: f64) -> Self {
        ForwardCtx {
            train: true,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }

    /// Inverted dropout; identity in eval mode.
    pub fn dropout<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Var {
        if !self.train || self.dropout <= 0.0 {
            return x;
        }
        let (r, c) = tape.value(x).shape();
        let keep = T::lit(1.0 / (1.0 - self.dropout));
        let p = self.dropout;
        let rng = &mut self.rng;
        let mask = Mat::from_fn(r, c, |_, _| if rng.random::<f64>() < p { T::zero() } else { keep });
        tape.mask_mul(x, mask)
    }

    /// Same randomness stream, dropout switched off (frozen feature extractors).
    pub fn without_dropout<R>(&mut self, f: impl FnOnce(&mut ForwardCtx) -> R) -> R {
        let (train, p) = (self.train, self.dropout);
        self.train = false;
        self.dropout = 0.0;
        let out = f(self);
        self.train = train;
        self.dropout = p;
        out
    }
}

/// Outputs of every encoder block for one utterance, `frames' x d_model` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerEmbeddings<T> {
    pub per_layer: Vec<Mat<T>>,
}

impl<T: Scalar> LayerEmbeddings<T> {
    /// 1-indexed layer access.
    pub fn layer(&self, k: usize) -> Option<&Mat<T>> {
        k.checked_sub(1).and_then(|i| self.per_layer.get(i))
    }
}

/// Anything that maps features to an encoder sequence and decodes with CTC + attention.
pub trait AsrModel<T: Scalar>: Sync {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// Final encoder sequence (`frames' x d_model`).
    fn encode(&self, tape: &mut Tape<T>, feats: &Mat<T>, ctx: &mut ForwardCtx) -> Result<Var>;
    fn decoder(&self) -> &Decoder;
    fn ctc_head(&self) -> &Linear;
    /// Decoder/output configuration (vocabulary, CTC weight, dropout).
    fn output_config(&self) -> &ConformerConfig;

    fn vocab_size(&self) -> usize {
        self.output_config().vocab_size
    }
}

pub struct JointTerms {
    pub loss: Var,
    pub ctc: f64,
    pub att: f64,
}

/// CTC log-posteriors over the encoder sequence.
pub fn ctc_log_probs<T: Scalar, M: AsrModel<T> + ?Sized>(model: &M, tape: &mut Tape<T>, enc: Var) -> Var {
    let logits = model.ctc_head().forward(tape, enc);
    tape.log_softmax(logits)
}

/// Builds `weight * ctc + (1 - weight) * attention_ce` on the tape for one utterance.
pub fn joint_objective<T: Scalar, M: AsrModel<T> + ?Sized>(
    model: &M,
    tape: &mut Tape<T>,
    feats: &Mat<T>,
    tokens: &[usize],
    weight: f64,
    ctx: &mut ForwardCtx,
) -> Result<JointTerms> {
    let enc = model.encode(tape, feats, ctx)?;
    let lp = ctc_log_probs(model, tape, enc);
    let ctc = tape.ctc_loss(lp, tokens);
    let mut prefix = Vec::with_capacity(tokens.len() + 1);
    prefix.push(SOS);
    prefix.extend_from_slice(tokens);
    let mut targets = tokens.to_vec();
    targets.push(EOS);
    let dec = model.decoder().forward(tape, enc, &prefix, ctx)?;
    let dlp = tape.log_softmax(dec.logits);
    let att = tape.cross_entropy(dlp, &targets, model.output_config().label_smoothing);
    let (ctc_v, att_v) = (tape.scalar(ctc).to_f64_lossy(), tape.scalar(att).to_f64_lossy());
    let a = tape.scale(ctc, T::lit(weight));
    let b = tape.scale(att, T::lit(1.0 - weight));
    let loss = tape.add(a, b);
    Ok(JointTerms {
        loss,
        ctc: ctc_v,
        att: att_v,
    })
}

/// Source/baseline Conformer: subsampling stem, encoder blocks, CTC head, attention decoder.
#[derive(Clone, Debug)]
pub struct ConformerModel<T> {
    pub config: ConformerConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub ctc: Linear,
}

pub fn build_encoder<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    prefix: &str,
    config: &ConformerConfig,
    input_dim: Option<usize>,
    layers: usize,
) -> Encoder {
    let stem = input_dim.map(|dim| Subsampling::new(store, rng, &format!("{prefix}.embed"), dim, config.d_model));
    let layers = (1..=layers)
        .map(|i| {
            ConformerBlock::new(
                store,
                rng,
                &format!("{prefix}.layer{i:02}"),
                config.d_model,
                config.encoder_ff_units,
                config.attention_heads,
                config.conv_kernel,
            )
        })
        .collect();
    Encoder { stem, layers }
}

pub fn build_decoder<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    prefix: &str,
    config: &ConformerConfig,
) -> Decoder {
    Decoder::new(
        store,
        rng,
        prefix,
        config.d_model,
        config.decoder_ff_units,
        config.attention_heads,
        config.num_decoder_layers,
        config.vocab_size,
    )
}

impl<T: Scalar> ConformerModel<T> {
    pub fn new(config: ConformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = build_encoder(
            &mut params,
            &mut rng,
            "encoder",
            &config,
            Some(config.input_dim),
            config.num_encoder_layers,
        );
        let ctc = Linear::new(&mut params, &mut rng, "ctc", config.d_model, config.vocab_size, true);
        let decoder = build_decoder(&mut params, &mut rng, "decoder", &config);
        Ok(ConformerModel {
            config,
            params,
            encoder,
            decoder,
            ctc,
        })
    }

    /// Rebuilds a plain Conformer from a checkpoint (values and trainable flags).
    pub fn from_checkpoint(ckpt: &checkpoint::Checkpoint<T>) -> Result<Self> {
        let checkpoint::ModelSpec::Conformer { config } = &ckpt.model else {
            return Err(Error::Checkpoint("expected a plain Conformer checkpoint, found a tapped model".into()));
        };
        let mut model = Self::new(config.clone(), 0)?;
        model.params.restore(&ckpt.params)?;
        Ok(model)
    }

    fn check_input(&self, feats: &Mat<T>) -> Result<()> {
        if feats.cols() != self.config.input_dim {
            return Err(Error::invalid(format!(
                "feature dim {} does not match model input_dim {}",
                feats.cols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// All encoder block outputs for `feats`. In train mode, dropout draws from `seed`.
    pub fn encoder_forward(&self, feats: &Mat<T>, train: bool, seed: u64) -> Result<LayerEmbeddings<T>> {
        self.check_input(feats)?;
        let mut tape = Tape::new(&self.params, false);
        let mut ctx = if train {
            ForwardCtx::train(seed, self.config.dropout)
        } else {
            ForwardCtx::eval()
        };
        let x = tape.constant(feats.clone());
        let outs = self
            .encoder
            .forward(&mut tape, x, self.config.num_encoder_layers, &mut ctx, "encoder")?;
        Ok(LayerEmbeddings {
            per_layer: outs.into_iter().map(|v| tape.value(v).clone()).collect(),
        })
    }

    /// Eval-mode decoder logits for every prefix position.
    pub fn decoder_forward(&self, encoder_out: &Mat<T>, prefix: &[usize]) -> Result<Mat<T>> {
        Ok(self.decoder_forward_with_attention(encoder_out, prefix)?.0)
    }

    /// Logits plus `[layer][head]` cross-attention weights.
    pub fn decoder_forward_with_attention(
        &self,
        encoder_out: &Mat<T>,
        prefix: &[usize],
    ) -> Result<(Mat<T>, Vec<Vec<Mat<T>>>)> {
        if prefix.first() != Some(&SOS) {
            return Err(Error::invalid("decoder prefix must begin with the start symbol"));
        }
        let mut tape = Tape::new(&self.params, false);
        let mut ctx = ForwardCtx::eval();
        let mem = tape.constant(encoder_out.clone());
        let out = self.decoder.forward(&mut tape, mem, prefix, &mut ctx)?;
        let weights = out
            .cross_attention
            .iter()
            .map(|layer| layer.iter().map(|&w| tape.value(w).clone()).collect())
            .collect();
        Ok((tape.value(out.logits).clone(), weights))
    }

    pub fn parameter_manifest(&self) -> Vec<ManifestEntry> {
        self.params.manifest()
    }
}

impl<T: Scalar> AsrModel<T> for ConformerModel<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn encode(&self, tape: &mut Tape<T>, feats: &Mat<T>, ctx: &mut ForwardCtx) -> Result<Var> {
        self.check_input(feats)?;
        let x = tape.constant(feats.clone());
        let outs = self
            .encoder
            .forward(tape, x, self.config.num_encoder_layers, ctx, "encoder")?;
        Ok(*outs.last().expect("at least one encoder layer"))
    }

    fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    fn ctc_head(&self) -> &Linear {
        &self.ctc
    }

    fn output_config(&self) -> &ConformerConfig {
        &self.config
    }
}
