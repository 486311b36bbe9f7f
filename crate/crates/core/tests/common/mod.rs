#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tapasr::data::Tokenizer;
use tapasr::nnet::checkpoint::{Checkpoint, ModelSpec};
use tapasr::nnet::{ConformerConfig, ConformerModel};
use tapasr::tensor::{Mat, Scalar};
use tapasr::transfer::{compose, tap_prefix, TransferConfig, TransferModel};

pub const TINY_INPUT_DIM: usize = 10;

/// d_model 8, one encoder and one decoder block, vocabulary of 5.
pub fn tiny_config() -> ConformerConfig {
    ConformerConfig {
        input_dim: TINY_INPUT_DIM,
        d_model: 8,
        num_encoder_layers: 1,
        encoder_ff_units: 16,
        num_decoder_layers: 1,
        decoder_ff_units: 16,
        attention_heads: 2,
        conv_kernel: 3,
        vocab_size: 5,
        ..ConformerConfig::default()
    }
}

/// 12 frames of smooth pseudo-features.
pub fn tiny_input<T: Scalar>() -> Mat<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    Mat::from_fn(12, TINY_INPUT_DIM, |_, _| T::lit(rng.random_range(-1.0..1.0)))
}

pub fn checkpoint_of<T: Scalar>(model: &ConformerModel<T>) -> Checkpoint<T> {
    Checkpoint {
        model: ModelSpec::Conformer {
            config: model.config.clone(),
        },
        tokenizer: Tokenizer::build(&["a"]),
        step: 0,
        params: model.params.clone(),
        optimizer: None,
    }
}

pub fn tiny_transfer(freeze: bool) -> TransferModel<f64> {
    let source = ConformerModel::<f64>::new(tiny_config(), 5).unwrap();
    let cfg = TransferConfig {
        tap_layer_k: 1,
        freeze_prefix: freeze,
        embed_specaug: None,
        target_config: tiny_config(),
        project_if_mismatch: false,
    };
    let extractor = tap_prefix(&checkpoint_of(&source), 1).unwrap();
    let mut m = compose(&extractor, &cfg, 9).unwrap();
    // move the bridge off the identity so its gradient is generic
    let w = m.bridge.weight;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for v in m.params.value_mut(w).data_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    m
}

pub fn random_log_probs(rng: &mut impl Rng, frames: usize, cols: usize) -> Mat<f64> {
    let logits = Mat::from_fn(frames, cols, |_, _| rng.random_range(-2.0..2.0));
    tapasr::autograd::log_softmax_rows(&logits)
}
