//! Cross-modal selective state-space fusion for paired-image pixel
//! classification, with a small reverse-mode tape, the scan kernels, training,
//! evaluation and the tensor container used on disk.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cross;
pub mod encoder;
pub mod error;
pub mod fd;
pub mod gradcheck;
pub mod kernel_bench;
pub mod layers;
pub mod metrics;
pub mod mmtf;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scan;
pub mod scene;
pub mod ss2d;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use config::RunConfig;
pub use cross::AvgMode;
pub use error::{Error, Result};
pub use metrics::{compute_metrics, ConfusionMatrix, Metrics};
pub use model::{Model, ModelConfig, ModelParams};
pub use params::ParamTree;
pub use rng::Rng;
pub use tensor::Tensor;
