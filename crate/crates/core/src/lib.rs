//! Deep stacked relighting network (DSRN) toolkit.
//!
//! A three-level pyramid encoder/decoder network cascaded twice, the losses
//! and metrics used to train and score it, a VIDIT-style dataset loader, a
//! Phong-diffuse synthetic scene generator, two-stage training and an
//! inference latency benchmark.

pub mod error;
pub mod graph;
pub mod imaging;
pub mod kernels;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use imaging::{ImageTensor, Pyramid};
pub use network::{ArchConfig, ModelParams};
pub use tensor::{Real, Shape, Tensor};
