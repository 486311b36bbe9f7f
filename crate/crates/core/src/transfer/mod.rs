//! Transfer topologies built from a trained source model: whole-model weight
//! copy (vanilla), tapped-prefix composition, and direct decoding.
//!
//! A [`TransferModel`] keeps every parameter in one store under three prefixes:
//! `extractor.` (source stem and bottom `K` blocks), `bridge.` and `target.`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::frontend::{keep_mask, SpecAugPolicy};
use crate::nnet::checkpoint::{Checkpoint, ModelSpec};
use crate::nnet::layers::{Decoder, Encoder, Linear};
use crate::nnet::{build_decoder, build_encoder, AsrModel, ConformerConfig, ConformerModel, ForwardCtx};
use crate::params::ParamStore;
use crate::tensor::{Mat, Scalar};

pub const EXTRACTOR_PREFIX: &str = "extractor.";
pub const BRIDGE_PREFIX: &str = "bridge.";
pub const TARGET_PREFIX: &str = "target.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Number of source encoder blocks tapped (1-indexed depth).
    pub tap_layer_k: usize,
    pub freeze_prefix: bool,
    /// Masking of the tapped embeddings during training.
    pub embed_specaug: Option<SpecAugPolicy>,
    /// Target encoder blocks, decoder and vocabulary; `input_dim` is unused.
    pub target_config: ConformerConfig,
    /// Insert a learned projection when source and target widths differ.
    pub project_if_mismatch: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            tap_layer_k: 6,
            freeze_prefix: true,
            embed_specaug: None,
            target_config: ConformerConfig {
                num_encoder_layers: 4,
                ..ConformerConfig::default()
            },
            project_if_mismatch: false,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self, source: &ConformerConfig) -> Result<()> {
        check_k(self.tap_layer_k, source.num_encoder_layers)?;
        let t = &self.target_config;
        if t.num_encoder_layers == 0 {
            return Err(Error::Config("target model needs at least one encoder block".into()));
        }
        // input_dim has no meaning for the stemless target encoder
        ConformerConfig {
            input_dim: t.d_model,
            ..t.clone()
        }
        .validate()?;
        if source.d_model != t.d_model && !self.project_if_mismatch {
            return Err(Error::IncompatibleArchitecture {
                names: vec![format!(
                    "bridge: source width {} != target width {} (enable project_if_mismatch)",
                    source.d_model, t.d_model
                )],
            });
        }
        Ok(())
    }
}

fn check_k(k: usize, depth: usize) -> Result<()> {
    if k == 0 || k > depth {
        return Err(Error::invalid(format!("tap layer K={k} outside [1, {depth}]")));
    }
    Ok(())
}

/// Source stem plus the bottom `K` encoder blocks, with the source parameter names.
#[derive(Clone, Debug)]
pub struct Extractor<T> {
    pub source_config: ConformerConfig,
    pub k: usize,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
}

impl<T: Scalar> Extractor<T> {
    pub fn from_model(source: &ConformerModel<T>, k: usize) -> Result<Self> {
        let cfg = &source.config;
        check_k(k, cfg.num_encoder_layers)?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let encoder = build_encoder(&mut params, &mut rng, "encoder", cfg, Some(cfg.input_dim), k);
        params.assign_from(&source.params, |n| Some(n.to_string()))?;
        Ok(Extractor {
            source_config: cfg.clone(),
            k,
            params,
            encoder,
        })
    }

    pub fn depth(&self) -> usize {
        self.k
    }

    /// Eval-mode layer-`K` embeddings, `frames' x d_model`.
    pub fn forward(&self, feats: &Mat<T>) -> Result<Mat<T>> {
        if feats.cols() != self.source_config.input_dim {
            return Err(Error::invalid(format!(
                "feature dim {} does not match extractor input_dim {}",
                feats.cols(),
                self.source_config.input_dim
            )));
        }
        let mut tape = Tape::new(&self.params, false);
        let x = tape.constant(feats.clone());
        let outs = self.encoder.forward(&mut tape, x, self.k, &mut ForwardCtx::eval(), "extractor")?;
        Ok(tape.value(*outs.last().expect("K >= 1")).clone())
    }
}

/// Feature extractor made of the bottom `k` blocks of a source checkpoint.
pub fn tap_prefix<T: Scalar>(source: &Checkpoint<T>, k: usize) -> Result<Extractor<T>> {
    Extractor::from_model(&ConformerModel::from_checkpoint(source)?, k)
}

/// Extractor, bridge and fresh target encoder/decoder in one parameter store.
#[derive(Clone, Debug)]
pub struct TransferModel<T> {
    pub source_config: ConformerConfig,
    pub config: TransferConfig,
    pub params: ParamStore<T>,
    pub extractor: Encoder,
    pub bridge: Linear,
    pub target: Encoder,
    pub decoder: Decoder,
    pub ctc: Linear,
}

impl<T: Scalar> TransferModel<T> {
    /// Layout with random values everywhere. Target weights depend only on
    /// `seed` and the target config, never on `K`.
    pub fn build(source: &ConformerConfig, config: &TransferConfig, seed: u64) -> Result<Self> {
        source.validate()?;
        config.validate(source)?;
        let mut params = ParamStore::new();
        let mut src_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE7_7AC7);
        let extractor = build_encoder(
            &mut params,
            &mut src_rng,
            "extractor.encoder",
            source,
            Some(source.input_dim),
            config.tap_layer_k,
        );
        let tc = &config.target_config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bridge = if source.d_model == tc.d_model {
            Linear::identity(&mut params, "bridge", tc.d_model)
        } else {
            Linear::new(&mut params, &mut rng, "bridge", source.d_model, tc.d_model, true)
        };
        let target = build_encoder(&mut params, &mut rng, "target.encoder", tc, None, tc.num_encoder_layers);
        let ctc = Linear::new(&mut params, &mut rng, "target.ctc", tc.d_model, tc.vocab_size, true);
        let decoder = build_decoder(&mut params, &mut rng, "target.decoder", tc);
        params.set_trainable_prefix(EXTRACTOR_PREFIX, !config.freeze_prefix);
        Ok(TransferModel {
            source_config: source.clone(),
            config: config.clone(),
            params,
            extractor,
            bridge,
            target,
            decoder,
            ctc,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let ModelSpec::Tapped { source, transfer } = &ckpt.model else {
            return Err(Error::Checkpoint("expected a tapped model checkpoint, found a plain Conformer".into()));
        };
        let mut model = Self::build(source, transfer, 0)?;
        model.params.restore(&ckpt.params)?;
        Ok(model)
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec::Tapped {
            source: self.source_config.clone(),
            transfer: self.config.clone(),
        }
    }

    pub fn extractor_checksum(&self) -> String {
        self.params.checksum_prefix(EXTRACTOR_PREFIX)
    }

    fn embed_mask(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx) -> Var {
        let Some(policy) = self.config.embed_specaug.as_ref().filter(|p| !p.is_identity()) else {
            return x;
        };
        if !ctx.is_train() {
            return x;
        }
        let (frames, dims) = tape.value(x).shape();
        let keep = keep_mask::<T>(frames, dims, policy, ctx.next_seed());
        let fill = T::lit(policy.mask_value);
        let masked = tape.mask_mul(x, keep.clone());
        if fill == T::zero() {
            return masked;
        }
        let offset = tape.constant(keep.map(|k| (T::one() - k) * fill));
        tape.add(masked, offset)
    }
}

/// Source model with stem and the bottom `k` blocks copied, frozen or not.
pub fn compose<T: Scalar>(extractor: &Extractor<T>, cfg: &TransferConfig, seed: u64) -> Result<TransferModel<T>> {
    if extractor.k != cfg.tap_layer_k {
        return Err(Error::invalid(format!(
            "extractor depth {} does not match tap_layer_k {}",
            extractor.k, cfg.tap_layer_k
        )));
    }
    let mut model = TransferModel::build(&extractor.source_config, cfg, seed)?;
    model
        .params
        .assign_from(&extractor.params, |n| n.strip_prefix(EXTRACTOR_PREFIX).map(str::to_string))?;
    Ok(model)
}

impl<T: Scalar> AsrModel<T> for TransferModel<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn encode(&self, tape: &mut Tape<T>, feats: &Mat<T>, ctx: &mut ForwardCtx) -> Result<Var> {
        if feats.cols() != self.source_config.input_dim {
            return Err(Error::invalid(format!(
                "feature dim {} does not match extractor input_dim {}",
                feats.cols(),
                self.source_config.input_dim
            )));
        }
        let x = tape.constant(feats.clone());
        let k = self.config.tap_layer_k;
        let tapped = if self.config.freeze_prefix {
            ctx.without_dropout(|c| self.extractor.forward(tape, x, k, c, "extractor"))?
        } else {
            self.extractor.forward(tape, x, k, ctx, "extractor")?
        };
        let h = *tapped.last().expect("K >= 1");
        let h = self.embed_mask(tape, h, ctx);
        let h = self.bridge.forward(tape, h);
        let n = self.config.target_config.num_encoder_layers;
        let outs = self.target.forward(tape, h, n, ctx, "target.encoder")?;
        Ok(*outs.last().expect("target has blocks"))
    }

    fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    fn ctc_head(&self) -> &Linear {
        &self.ctc
    }

    fn output_config(&self) -> &ConformerConfig {
        &self.config.target_config
    }
}

/// Copies every source weight into `target`; both must share one architecture.
pub fn vanilla_init<T: Scalar>(source: &Checkpoint<T>, target: &mut ConformerModel<T>) -> Result<()> {
    let extra: Vec<String> = source
        .params
        .ids()
        .map(|id| source.params.name(id))
        .filter(|n| target.params.id(n).is_none())
        .map(|n| format!("{n} (absent from target)"))
        .collect();
    if !extra.is_empty() {
        return Err(Error::IncompatibleArchitecture { names: extra });
    }
    target.params.assign_from(&source.params, |n| Some(n.to_string()))?;
    target.params.set_all_trainable(true);
    Ok(())
}

/// The unmodified source model, fully frozen, for decoding target data.
pub fn direct_decode_model<T: Scalar>(source: &Checkpoint<T>) -> Result<ConformerModel<T>> {
    let mut model = ConformerModel::from_checkpoint(source)?;
    model.params.set_all_trainable(false);
    Ok(model)
}
