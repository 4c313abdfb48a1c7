//! Recursive inpainting (RIP) measurement harness.
//!
//! An image is repeatedly masked with a random grid cell and inpainted, each
//! output feeding the next iteration. At fixed steps of inpainted-pixel
//! fraction the current image is compared with the starting image using
//! SSIM, MS-SSIM and LPIPS, and the resulting trajectories are aggregated into
//! plot-ready CSV/JSON tables.
//!
//! Module map:
//!
//! * [`image`]: raster type, PNG/JPEG I/O, letterboxing, channel ablations,
//!   mask-restricted compositing.
//! * [`mask`]: grid geometry, the seeded mask sequence and pixel-fraction
//!   accounting.
//! * [`backend`]: the inpainting backend abstraction, the HTTP client for the
//!   diffusion service and three native fillers.
//! * [`metrics`]: SSIM, MS-SSIM and LPIPS (with a small ONNX runtime).
//! * [`runner`]: RIP chains, experiments, run directories and resume.
//! * [`stats`]: confidence intervals, aggregation, scatter export, flagging
//!   and CSV/JSON emission.
//!
//! With the default `parallel` feature the heavy loops run on rayon; building
//! with `--no-default-features` keeps everything on the calling thread.

pub mod backend;
pub mod image;
pub mod mask;
pub mod metrics;
pub mod par;
pub mod runner;
pub mod selftest;
pub mod stats;

pub use crate::backend::{BackendDescriptor, InpaintBackend, InpaintRequest};
pub use crate::image::{ChannelAblation, ImageBuffer, MaskRaster};
pub use crate::mask::{GridSpec, MaskSchedule, MaskSelection};
pub use crate::metrics::{MetricKind, MetricResult, MetricSuite};
pub use crate::runner::{ExperimentConfig, Trajectory};
pub use crate::stats::StatsSummary;

/// Version of every JSON document the harness writes.
pub const SCHEMA_VERSION: u32 = 1;
