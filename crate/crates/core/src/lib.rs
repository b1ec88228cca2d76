//! Toy-scale motion transfer with space-time feature guidance.
//!
//! A small class-conditioned video diffusion model is trained on procedurally
//! generated moving-shape clips. Guidance matches the frame-to-frame
//! differences of spatially averaged decoder features between a source video
//! and a generated one, so that motion carries over while the class changes.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod synthvid;
pub mod train;
pub mod video;

pub use denoiser::{Condition, Denoiser, DenoiserConfig, SpaceTimeFeature};
pub use diffusion::{NoiseSchedule, ScheduleParams};
pub use error::{Error, Result};
pub use synthvid::{SceneSpec, ShapeKind, TrackletSet};
pub use video::{VideoDims, VideoTensor};
