//! Few-shot adversarial domain adaptation for text-strip recognition.
//!
//! The crate trains an attention encoder-decoder to read short rendered
//! character strips, then adapts it from a labeled source domain to a
//! sparsely labeled target domain by pitting the recognizer against a
//! four-way domain discriminator over character-level attention features.
//!
//! Layering, bottom up:
//! - [`scalar`], [`tensor`], [`conv`]: reverse-mode autodiff over dense
//!   tensors, generic in f32/f64.
//! - [`rng`], [`params`], [`optim`]: seeded randomness, named parameter
//!   sets, SGD/Adam/AdaDelta and a finite-difference gradient checker.
//! - [`data`]: synthetic strip rendering, dataset generation, PGM + TSV
//!   on-disk format.
//! - [`encoder`], [`decoder`]: convolutional column encoder and attention
//!   LSTM decoder with inclusive attention reweighting.
//! - [`pairs`], [`mcd`]: character-feature pair sampling across domains and
//!   the four-way discriminator with its confusion loss.
//! - [`eval`]: sequence and character accuracy metrics and reports.
//! - [`trainer`]: pretraining, adversarial adaptation, finetuning,
//!   checkpoints and loss logs.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod mcd;
pub mod optim;
pub mod pairs;
pub mod params;
pub mod rng;
pub mod rnn;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use config::{CharFeature, Config, ModelConfig, Precision, TrainConfig};
pub use params::ParamSet;
pub use scalar::Scalar;
pub use tensor::{backward, Tensor, TensorError};
pub use trainer::{FinetuneMode, MetricsLog, TrainError, Trainer};
