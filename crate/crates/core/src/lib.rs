//! Spectral prompt tuning and spectral-guided decoding for generalized
//! zero-shot semantic segmentation, built on a small reverse-mode autodiff
//! core.
//!
//! The crate covers the full pipeline at toy scale: a frozen vision
//! transformer with deep visual prompts and learnable frequency-domain
//! prompts, a HiLo-attention decoder with frequency-guided token selection,
//! focal + SSIM training, GZLSS metrics, a synthetic shapes dataset and a
//! checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod verify;

pub use config::Config;
pub use error::{Error, Result, TensorError};
pub use graph::{Graph, Var};
pub use metrics::{hiou, ConfusionMatrix, LabelMap, SegMetrics};
pub use params::{Binder, ParamStore};
pub use tensor::{ComplexTensor, Tensor};
