//! Synthetic data, training, ablation and fine-tuning.

pub mod ablate;
pub mod config;
pub mod finetune;
pub mod gradsuite;
pub mod model;
pub mod report;
pub mod synth;
pub mod train;

pub use ablate::{ablate, gate_utilization, AblationResult, AblationRow, Utilization};
pub use config::HarnessConfig;
pub use finetune::{finetune, frozen_diff, FinetuneReport, FrozenDiff};
pub use gradsuite::{gradient_suite, GradCase};
pub use model::{Model, Prepared, Split, Variant, WindowRule};
pub use synth::{generate_synth, SynthData, SynthSpec};
pub use train::{evaluate, train, EvalOutput, History, TrainOutcome};
