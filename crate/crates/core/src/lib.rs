//! Exemplar-based video colorization: frames are processed in blocks that
//! share a reference image, and a linkage memory carries information from
//! block to block.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*32`/`*64` aliases below pick one.

pub mod backbone;
pub mod checkpoint;
pub mod colorizer;
pub mod colorspace;
pub mod config;
pub mod correspondence;
pub mod ctblock;
pub mod data;
pub mod error;
pub mod flowlab;
pub mod linkage;
pub mod losses;
pub mod metrics;
pub mod pipeline;

pub use chromalink_autograd as autograd;
pub use chromalink_autograd::{Scalar, Tensor};

pub use checkpoint::Checkpoint;
pub use colorspace::LabFrame;
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use flowlab::{FlowDirection, FlowField, OcclusionMask};
pub use linkage::LinkageState;
pub use losses::LossWeights;
pub use pipeline::{colorize_video, ColorizationModel, Trainer, Variant, VideoColorizer};

pub type LabFrame32 = LabFrame<f32>;
pub type LabFrame64 = LabFrame<f64>;
pub type Model32 = ColorizationModel<f32>;
pub type Model64 = ColorizationModel<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type LinkageState32 = LinkageState<f32>;
