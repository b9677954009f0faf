//! Causal U-Net waveform denoiser: tensors and reverse-mode differentiation,
//! STFT analysis, the model and its losses, synthetic data and augmentation,
//! training, streaming inference and evaluation.

pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod io;
pub mod kv;
pub mod loss;
pub mod model;
pub mod numeric;
pub mod stream;
pub mod train;

pub use data::{AudioClip, PairDataset};
pub use error::{Error, Result};
pub use eval::MetricReport;
pub use loss::{LossMode, MstftConfig};
pub use model::{Model, ModelConfig};
pub use numeric::{Gradients, Graph, Parameter, Real, Tensor, Var};
pub use stream::{latency_samples, new_stream, Stream};
pub use train::{TrainConfig, Trainer};
