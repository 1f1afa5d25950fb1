//! Light-probe estimation by chrome-ball inpainting.
//!
//! The crate covers the numerical side of the toolkit: noise schedules and a
//! deterministic inpainting sampler, exposure-bracketed HDR merging, mirror
//! ball and panorama geometry, probe-sphere rendering, and scale-invariant
//! image metrics. The generative model itself sits behind [`Denoiser`].

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod denoiser;
pub mod error;
pub mod eval;
pub mod hdr;
pub mod inpaint;
pub mod io;
pub mod metrics;
pub mod pipelines;
pub mod probe;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use denoiser::{
    ActiveLora, Codec, Conditioning, CountingDenoiser, Denoiser, DenoiserCall, IdentityCodec,
    NfeCounter,
};
pub use error::{Error, ErrorKind, Result};
pub use hdr::{ExposureBracket, ToneMap};
pub use inpaint::{BallPlacement, InpaintConfig};
pub use pipelines::{run_pipeline, EstimateResult, PipelineConfig, PipelineKind};
pub use probe::{CropSpec, EnvMap, SphereMaterial};
pub use rng::{derive_seed, gaussian_like, SeededRng};
pub use schedule::{NoiseSchedule, ScheduleConfig, ScheduleKind};
pub use tensor::{percentile, Tensor};
