//! Training, evaluation, the (K, freeze, SpecAug) ablation grid and reports.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod optim;
pub mod train;

pub use ablate::{ablate, relative_improvement, report, AblationConfig, AblationGrid, ResultRow};
pub use config::{DataConfig, DataSource, ExperimentConfig, Fixture, Mode, OptimizerConfig};
pub use eval::{decode_examples, evaluate_model, run_evaluate, score_decoded, Decoded};
pub use optim::{noam_lr, Adam};
pub use train::{fit, prepare, run_train, train_step, AnyModel, Example, TrainOptions};
