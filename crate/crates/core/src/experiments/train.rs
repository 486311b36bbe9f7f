use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode, OptimizerConfig};
use super::optim::{noam_lr, Adam};
use crate::autograd::{Gradients, Tape};
use crate::data::{Tokenizer, Utterance};
use crate::error::{Error, Result};
use crate::frontend::{apply_specaug, extract, FrontendConfig, SpecAugPolicy};
use crate::nnet::checkpoint::{Checkpoint, ModelSpec};
use crate::nnet::{joint_objective, subsampled_len, AsrModel, ConformerConfig, ConformerModel, ForwardCtx};
use crate::objective::ctc::min_frames;
use crate::params::ParamStore;
use crate::tensor::{Mat, Scalar};
use crate::transfer::{compose, direct_decode_model, tap_prefix, vanilla_init, TransferModel};

/// Features and token ids of one utterance, ready for training or decoding.
#[derive(Clone, Debug)]
pub struct Example {
    pub utt_id: String,
    pub transcript: String,
    pub feats: Mat<f32>,
    pub tokens: Vec<usize>,
}

/// Extracts features and encodes transcripts. Symbols outside `tokenizer` are an error.
pub fn prepare(utts: &[Utterance], frontend: &FrontendConfig, tokenizer: &Tokenizer) -> Result<Vec<Example>> {
    utts.iter()
        .map(|u| {
            let enc = tokenizer.encode(&u.transcript);
            if enc.unknown > 0 {
                return Err(Error::invalid(format!(
                    "transcript of {} has {} symbol(s) outside the model vocabulary",
                    u.utt_id, enc.unknown
                )));
            }
            Ok(Example {
                utt_id: u.utt_id.clone(),
                transcript: u.transcript.clone(),
                feats: extract(&u.samples()?, frontend)?.values,
                tokens: enc.ids,
            })
        })
        .collect()
}

/// A plain Conformer or a tapped transfer model.
#[derive(Clone, Debug)]
pub enum AnyModel<T> {
    Plain(ConformerModel<T>),
    Tapped(TransferModel<T>),
}

impl<T: Scalar> AnyModel<T> {
    pub fn asr(&self) -> &dyn AsrModel<T> {
        match self {
            AnyModel::Plain(m) => m,
            AnyModel::Tapped(m) => m,
        }
    }

    pub fn asr_mut(&mut self) -> &mut dyn AsrModel<T> {
        match self {
            AnyModel::Plain(m) => m,
            AnyModel::Tapped(m) => m,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.asr().params()
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            AnyModel::Plain(m) => ModelSpec::Conformer {
                config: m.config.clone(),
            },
            AnyModel::Tapped(m) => m.spec(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        Ok(match ckpt.model {
            ModelSpec::Conformer { .. } => AnyModel::Plain(ConformerModel::from_checkpoint(ckpt)?),
            ModelSpec::Tapped { .. } => AnyModel::Tapped(TransferModel::from_checkpoint(ckpt)?),
        })
    }

    pub fn to_checkpoint(&self, tokenizer: &Tokenizer, step: u64, adam: Option<&Adam<T>>) -> Checkpoint<T> {
        Checkpoint {
            model: self.spec(),
            tokenizer: tokenizer.clone(),
            step,
            params: self.params().clone(),
            optimizer: adam.map(|a| a.state.clone()),
        }
    }
}

/// Checksum over every parameter currently marked non-trainable.
pub fn frozen_checksum<T: Scalar>(params: &ParamStore<T>) -> String {
    params.checksum_where(|n| params.id(n).is_some_and(|id| !params.is_trainable(id)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub ctc: f64,
    pub att: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub optimizer: OptimizerConfig,
    pub input_specaug: Option<SpecAugPolicy>,
}

/// Deterministic 64-bit mixing of a seed with run coordinates.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Length-sorted batches; their order is reshuffled every epoch from the run seed.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    batches: Vec<Vec<usize>>,
    seed: u64,
}

impl BatchPlan {
    pub fn new(examples: &[Example], batch_size: usize, seed: u64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("no training examples"));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.sort_by_key(|&i| (examples[i].feats.rows(), i));
        Ok(BatchPlan {
            batches: order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect(),
            seed,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    /// Example indices used at 0-indexed `step`; a pure function of (seed, step).
    pub fn batch(&self, step: u64) -> &[usize] {
        let n = self.batches.len() as u64;
        let epoch = step / n;
        let mut perm: Vec<usize> = (0..self.batches.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, epoch])));
        &self.batches[perm[(step % n) as usize]]
    }
}

/// True when the CTC branch can align the transcript to the subsampled frames.
pub fn ctc_feasible(ex: &Example) -> bool {
    subsampled_len(ex.feats.rows()).is_some_and(|t| t >= min_frames(&ex.tokens))
}

/// One optimizer update over `batch` at 0-indexed `step`.
pub fn train_step(
    model: &mut dyn AsrModel<f32>,
    adam: &mut Adam<f32>,
    batch: &[&Example],
    step: u64,
    opts: &TrainOptions,
) -> Result<StepMetrics> {
    let oc = &opts.optimizer;
    let lr = noam_lr(oc.peak_lr, oc.warmup_steps, step + 1);
    let (weight, dropout) = (model.output_config().ctc_weight, model.output_config().dropout);
    let mut grads = Gradients::default();
    let (mut loss, mut ctc, mut att) = (0.0, 0.0, 0.0);
    for (i, ex) in batch.iter().enumerate() {
        let seed = derive_seed(&[oc.seed, step, i as u64]);
        let feats = match &opts.input_specaug {
            Some(p) => apply_specaug(&ex.feats, p, derive_seed(&[seed, 1])),
            None => ex.feats.clone(),
        };
        let mut ctx = ForwardCtx::train(seed, dropout);
        let mut tape = Tape::new(model.params(), true);
        let terms = joint_objective(&*model, &mut tape, &feats, &ex.tokens, weight, &mut ctx)?;
        let l = tape.scalar(terms.loss).to_f64_lossy();
        if !l.is_finite() {
            return Err(Error::numerical(
                format!("training step {}", step + 1),
                format!("non-finite loss {l} on utterance {}", ex.utt_id),
            ));
        }
        grads.accumulate(tape.backward(terms.loss)?);
        loss += l;
        ctc += terms.ctc;
        att += terms.att;
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n as f32);
    let frozen = grads.frozen_sq_norm(model.params());
    if frozen != 0.0 {
        return Err(Error::FrozenGradient(format!("squared norm {frozen} at step {}", step + 1)));
    }
    let norm = grads.global_norm() as f64;
    if !norm.is_finite() {
        return Err(Error::numerical(format!("training step {}", step + 1), "non-finite gradient norm"));
    }
    if oc.grad_clip > 0.0 && norm > oc.grad_clip {
        grads.scale((oc.grad_clip / norm) as f32);
    }
    adam.step(model.params_mut(), &grads, lr);
    Ok(StepMetrics {
        step: step + 1,
        loss: loss / n,
        ctc: ctc / n,
        att: att / n,
        lr,
        grad_norm: norm,
    })
}

/// Runs steps `[start, end)`. Parameters that are frozen at the start must be
/// bit-identical after every step; any change aborts the run.
pub fn fit(
    model: &mut dyn AsrModel<f32>,
    adam: &mut Adam<f32>,
    examples: &[Example],
    opts: &TrainOptions,
    start: u64,
    end: u64,
    mut on_step: impl FnMut(&StepMetrics, &dyn AsrModel<f32>, &Adam<f32>) -> Result<()>,
) -> Result<()> {
    let plan = BatchPlan::new(examples, opts.optimizer.batch_size, opts.optimizer.seed)?;
    let has_frozen = model.params().ids().any(|id| !model.params().is_trainable(id));
    let frozen_before = has_frozen.then(|| frozen_checksum(model.params()));
    for step in start..end {
        let batch: Vec<&Example> = plan.batch(step).iter().map(|&i| &examples[i]).collect();
        let m = train_step(model, adam, &batch, step, opts)?;
        if let Some(before) = &frozen_before {
            if &frozen_checksum(model.params()) != before {
                return Err(Error::FrozenGradient(format!("frozen parameters changed at step {}", step + 1)));
            }
        }
        on_step(&m, &*model, adam)?;
    }
    Ok(())
}

/// Outcome of [`run_train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    pub metrics: Vec<StepMetrics>,
    pub skipped_utterances: usize,
}

/// Model, tokenizer and frontend for a training run, built per mode.
pub fn build_model(cfg: &ExperimentConfig, train: &[Utterance]) -> Result<(AnyModel<f32>, Tokenizer)> {
    let seed = cfg.optimizer.seed;
    let load_source = || -> Result<Checkpoint<f32>> {
        let path = cfg.source_checkpoint.as_ref().expect("validated");
        Checkpoint::load(path)
    };
    let check_frontend = |source: &ConformerConfig| {
        if cfg.frontend.feature_dim() != source.input_dim {
            return Err(Error::Config(format!(
                "frontend yields {} dims but the source model expects {}",
                cfg.frontend.feature_dim(),
                source.input_dim
            )));
        }
        Ok(())
    };
    Ok(match cfg.mode {
        Mode::Baseline => {
            let tok = Tokenizer::build(&train.iter().map(|u| u.transcript.as_str()).collect::<Vec<_>>());
            let config = ConformerConfig {
                input_dim: cfg.frontend.feature_dim(),
                vocab_size: tok.vocab_size(),
                ..cfg.model.clone()
            };
            (AnyModel::Plain(ConformerModel::new(config, seed)?), tok)
        }
        Mode::Vanilla => {
            let src = load_source()?;
            let ModelSpec::Conformer { config } = &src.model else {
                return Err(Error::Config("vanilla transfer needs a plain Conformer source".into()));
            };
            check_frontend(config)?;
            let mut model = ConformerModel::new(config.clone(), seed)?;
            vanilla_init(&src, &mut model)?;
            (AnyModel::Plain(model), src.tokenizer.clone())
        }
        Mode::Tap => {
            let src = load_source()?;
            let source_model = ConformerModel::from_checkpoint(&src)?;
            check_frontend(&source_model.config)?;
            let tok = Tokenizer::build(&train.iter().map(|u| u.transcript.as_str()).collect::<Vec<_>>());
            let mut tcfg = cfg.transfer.clone().expect("validated");
            tcfg.target_config.vocab_size = tok.vocab_size();
            tcfg.target_config.input_dim = tcfg.target_config.d_model;
            let extractor = tap_prefix(&src, tcfg.tap_layer_k)?;
            (AnyModel::Tapped(compose(&extractor, &tcfg, seed)?), tok)
        }
        Mode::Direct => {
            let src = load_source()?;
            let model = direct_decode_model(&src)?;
            check_frontend(&model.config)?;
            (AnyModel::Plain(model), src.tokenizer.clone())
        }
    })
}

pub const METRICS_HEADER: &str = "step,loss,ctc,att,lr";

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn final_checkpoint_path(out: &Path) -> PathBuf {
    out.join("final.ckpt")
}

/// Most recent periodic checkpoint in `out`, if any.
pub fn latest_checkpoint(out: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(checkpoint_dir(out))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    found.sort();
    found.pop()
}

fn write_metrics(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{METRICS_HEADER}")?;
    for m in rows {
        writeln!(f, "{},{:.6},{:.6},{:.6},{:.8}", m.step, m.loss, m.ctc, m.att, m.lr)?;
    }
    Ok(())
}

fn read_metrics(path: &Path, upto: u64) -> Result<Vec<StepMetrics>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "malformed metrics row".into(),
        };
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let step: u64 = f[0].parse().map_err(|_| bad())?;
        if step <= upto {
            out.push(StepMetrics {
                step,
                loss: num(f[1])?,
                ctc: num(f[2])?,
                att: num(f[3])?,
                lr: num(f[4])?,
                grad_norm: f64::NAN,
            });
        }
    }
    Ok(out)
}

/// Trains per `cfg`, writing `metrics.csv`, periodic checkpoints and
/// `final.ckpt` under `output_dir`. With `resume`, continues from the latest
/// periodic checkpoint; the remaining steps reproduce an uninterrupted run.
pub fn run_train(cfg: &ExperimentConfig, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.yaml"), cfg.to_yaml()?)?;
    let utts = cfg.data.train.load()?;
    let (mut model, tok) = build_model(cfg, &utts)?;
    let all = prepare(&utts, &cfg.frontend, &tok)?;
    let total = all.len();
    let examples: Vec<Example> = all.into_iter().filter(ctc_feasible).collect();
    let skipped = total - examples.len();
    if skipped > 0 {
        eprintln!("warning: skipping {skipped} utterance(s) too short for their transcripts");
    }
    let end = if cfg.mode == Mode::Direct { 0 } else { cfg.optimizer.total_steps };
    let mut adam = Adam::new(model.params());
    let mut start = 0;
    if resume {
        if let Some(path) = latest_checkpoint(out) {
            let ckpt = Checkpoint::<f32>::load(&path)?;
            model.asr_mut().params_mut().restore(&ckpt.params)?;
            adam = Adam::from_state(
                ckpt.optimizer
                    .ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state", path.display())))?,
            );
            start = ckpt.step;
        }
    }
    let metrics_path = out.join("metrics.csv");
    let mut metrics = read_metrics(&metrics_path, start)?;
    if !resume || start == 0 {
        metrics.clear();
    }
    write_metrics(&metrics_path, &metrics)?;
    let opts = TrainOptions {
        optimizer: cfg.optimizer.clone(),
        input_specaug: cfg.input_specaug.clone(),
    };
    let every = cfg.optimizer.checkpoint_every;
    let log_every = cfg.optimizer.log_every.max(1);
    let spec = model.spec();
    let mut log = fs::OpenOptions::new().append(true).open(&metrics_path)?;
    fit(
        model.asr_mut(),
        &mut adam,
        &examples,
        &opts,
        start,
        end,
        |m, model, adam| {
            if m.step % log_every == 0 || m.step == end {
                writeln!(log, "{},{:.6},{:.6},{:.6},{:.8}", m.step, m.loss, m.ctc, m.att, m.lr)?;
            }
            metrics.push(m.clone());
            if every > 0 && m.step % every == 0 && m.step < end {
                let ckpt = Checkpoint {
                    model: spec.clone(),
                    tokenizer: tok.clone(),
                    step: m.step,
                    params: model.params().clone(),
                    optimizer: Some(adam.state.clone()),
                };
                ckpt.save(&checkpoint_dir(out).join(format!("step_{:08}.ckpt", m.step)))?;
            }
            Ok(())
        },
    )?;
    let final_path = final_checkpoint_path(out);
    model.to_checkpoint(&tok, end, Some(&adam)).save(&final_path)?;
    Ok(TrainSummary {
        final_checkpoint: final_path,
        steps: end,
        metrics,
        skipped_utterances: skipped,
    })
}
