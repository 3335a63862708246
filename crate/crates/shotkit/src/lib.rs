//! Desk-scale building blocks for camera-conditioned multi-shot video generation.
//!
//! The crate covers the mechanisms such a pipeline adds around a diffusion
//! backbone, without the backbone itself:
//!
//! - [`camera`]: pinhole camera poses, per-pixel ray geometry in Plücker
//!   coordinates, relative poses, and trajectory error metrics.
//! - [`conditioning`]: the dual-branch camera encoders (extrinsic MLP and
//!   Plücker convolution), additive token injection, and analytic gradients.
//! - [`mask`]: shot-aware attention masks over visual and text tokens,
//!   with a full-visibility schedule for early layers.
//! - [`attention`]: a small masked multi-head attention stack that composes
//!   the conditioning and the mask, with exact leakage probes, end-to-end
//!   gradients, and a toy training loop.
//! - [`curation`]: clip-record filtering with the published thresholds,
//!   hierarchical caption validation, dataset statistics, and a seeded
//!   real/synthetic mixing sampler.
//! - [`metrics`]: transition confidence, transition-type accuracy and
//!   distribution, cross-shot consistency, and Fréchet feature distance.
//! - [`tensor`]: the shared dense tensor type and its binary file format.
//!
//! Everything runs in double precision with fixed reduction orders, so
//! results are reproducible bit-for-bit under a fixed seed.

pub mod attention;
pub mod camera;
pub mod conditioning;
pub mod curation;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod tensor;

pub use tensor::Tensor;
