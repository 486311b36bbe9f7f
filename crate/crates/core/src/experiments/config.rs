use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_manifest, synth_generate, DomainSpec, Utterance};
use crate::error::{Error, Result};
use crate::frontend::{FrontendConfig, SpecAugPolicy};
use crate::nnet::ConformerConfig;
use crate::objective::BeamOptions;
use crate::scoring::Unit;
use crate::transfer::TransferConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fresh model trained from scratch (also how the source model is built).
    Baseline,
    /// Whole-model copy of the source checkpoint, then fine-tuning.
    Vanilla,
    /// Source prefix tapped as a feature extractor for a fresh target model.
    Tap,
    /// Source model evaluated as-is.
    Direct,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Vanilla => "vanilla",
            Mode::Tap => "tap",
            Mode::Direct => "direct",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fixture {
    Source,
    Target,
}

impl Fixture {
    pub fn spec(self) -> DomainSpec {
        match self {
            Fixture::Source => DomainSpec::source(),
            Fixture::Target => DomainSpec::target(),
        }
    }
}

/// A manifest file or a generated synthetic split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Manifest {
        manifest: PathBuf,
    },
    Fixture {
        fixture: Fixture,
        num_utts: usize,
        seed: u64,
    },
}

impl DataSource {
    pub fn fixture(fixture: Fixture, num_utts: usize, seed: u64) -> Self {
        DataSource::Fixture {
            fixture,
            num_utts,
            seed,
        }
    }

    pub fn load(&self) -> Result<Vec<Utterance>> {
        match self {
            DataSource::Manifest { manifest } => load_manifest(manifest),
            DataSource::Fixture {
                fixture,
                num_utts,
                seed,
            } => synth_generate(&fixture.spec(), *num_utts, *seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    pub dev: Option<DataSource>,
    pub test: Option<DataSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub log_every: u64,
    /// Periodic checkpoint interval; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            peak_lr: 1e-3,
            warmup_steps: 800,
            total_steps: 2000,
            batch_size: 8,
            seed: 1,
            grad_clip: 5.0,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub data: DataConfig,
    #[serde(default)]
    pub frontend: FrontendConfig,
    /// Architecture for baseline runs. `input_dim` and `vocab_size` are
    /// filled in from the frontend and the training transcripts.
    #[serde(default)]
    pub model: ConformerConfig,
    /// Required for `tap`; `target_config.vocab_size` is filled in likewise.
    #[serde(default)]
    pub transfer: Option<TransferConfig>,
    /// Required for `vanilla`, `tap` and `direct`.
    #[serde(default)]
    pub source_checkpoint: Option<PathBuf>,
    /// SpecAug on input features during training.
    #[serde(default = "default_input_specaug")]
    pub input_specaug: Option<SpecAugPolicy>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub decode: BeamOptions,
    #[serde(default = "default_unit")]
    pub unit: Unit,
    pub output_dir: PathBuf,
}

fn default_input_specaug() -> Option<SpecAugPolicy> {
    Some(SpecAugPolicy::new(10, 5))
}

fn default_unit() -> Unit {
    Unit::Char
}

impl ExperimentConfig {
    pub fn from_yaml(text: &str) -> Result<Self> {
        let cfg: Self = serde_yaml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_yaml(&self) -> Result<String> {
        Ok(serde_yaml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let need = |what: &str| Err(Error::Config(format!("mode {} requires {what}", self.mode.as_str())));
        match self.mode {
            Mode::Tap if self.transfer.is_none() => return need("a transfer section"),
            Mode::Vanilla | Mode::Tap | Mode::Direct if self.source_checkpoint.is_none() => {
                return need("source_checkpoint")
            }
            _ => {}
        }
        if self.optimizer.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.optimizer.peak_lr < 0.0 || !self.optimizer.peak_lr.is_finite() {
            return Err(Error::Config("peak_lr must be finite and non-negative".into()));
        }
        if self.decode.beam_size == 0 {
            return Err(Error::Config("decode.beam_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TAP: &str = "
mode: tap
data:
  train: {fixture: target, num_utts: 20, seed: 1}
  test: {manifest: /data/test.tsv}
source_checkpoint: runs/source/final.ckpt
transfer:
  tap_layer_k: 4
  freeze_prefix: false
  embed_specaug: {freq_mask_width: 20, time_mask_width: 10}
optimizer:
  total_steps: 50
output_dir: runs/tap
";

    #[test]
    fn parses_nested_yaml() {
        let c = ExperimentConfig::from_yaml(TAP).unwrap();
        assert_eq!(c.mode, Mode::Tap);
        let t = c.transfer.unwrap();
        assert_eq!(t.tap_layer_k, 4);
        assert_eq!(t.embed_specaug.unwrap().time_mask_width, 10);
        assert_eq!(c.optimizer.total_steps, 50);
        assert_eq!(c.optimizer.warmup_steps, 800);
        assert_eq!(
            c.data.test,
            Some(DataSource::Manifest {
                manifest: "/data/test.tsv".into()
            })
        );
    }

    #[test]
    fn mode_requirements() {
        let no_transfer = TAP.replace("transfer:", "unused:");
        assert!(ExperimentConfig::from_yaml(&no_transfer).is_err());
        let no_source = TAP.replace("source_checkpoint: runs/source/final.ckpt\n", "");
        let e = ExperimentConfig::from_yaml(&no_source).unwrap_err().to_string();
        assert!(e.contains("source_checkpoint"), "{e}");
    }
}
