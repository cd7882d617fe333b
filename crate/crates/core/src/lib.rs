//! Plane-wave ultrasound beamforming with a human-in-the-loop apodization network.
//!
//! The crate is organized along the processing chain:
//!
//! ```text
//! phantom ──> RfFrame ──> geometry::delay_compensate ──> DelayedTensor
//!                                                          │
//!            ┌──────────────┬────────────┬────────────┬────┴───────┐
//!            v              v            v            v            v
//!          das           fdmas         mvdr          gcf     neural::UNet -> ApodWeights
//!            └──────────────┴─────┬──────┴────────────┘            │
//!                                 v                                 v
//!                   postprocess::{envelope, log_compress}   neural::head (differentiable)
//!                                 │
//!                                 v
//!                      session: anonymized candidates, user pick, one Adam step
//! ```
//!
//! Everything runs on the CPU at desk scale (16 channels, 256 x 64 pixels) by
//! default; the same code paths accept the full 128-channel, 2400 x 128 geometry.

// `!(x > 0.0)` checks also reject NaN; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod beamform;
pub mod checksum;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod neural;
pub mod phantom;
pub mod postprocess;
pub mod rfbin;
pub mod session;

pub use beamform::{ApodWeights, BeamformedData, Method};
pub use error::{Error, Result};
pub use geometry::{DelayedTensor, ImageGrid};
pub use phantom::{PhantomSpec, ProbeConfig, RfFrame};
pub use postprocess::BModeImage;
