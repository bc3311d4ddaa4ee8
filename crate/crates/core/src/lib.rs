//! Frequency-aware document shadow removal.
//!
//! Images are split by a Laplacian pyramid; the low-frequency base is
//! deshaded by an attention network while high-frequency bands are gated by a
//! learned contour. The crate also provides training, evaluation metrics and
//! shadow synthesis for paired datasets.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod highfreq;
pub mod image;
pub mod infer;
pub mod loss;
pub mod lowfreq;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pyramid;
pub mod resample;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::FsenetConfig;
pub use data::{DatasetIndex, SampleSource, SampleTriplet, Split};
pub use error::{Error, Result};
pub use image::{Image, PadSpec};
pub use metrics::{Colorspace, MetricReport, MetricRow};
pub use model::Fsenet;
pub use pyramid::LaplacianStack;
pub use tensor::Tensor;
pub use train::{TrainOptions, TrainSummary, Trainer};
