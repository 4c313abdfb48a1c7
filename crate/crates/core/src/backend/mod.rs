//! Inpainting backends.
//!
//! A backend turns `(image, mask)` into a full-size candidate image. Callers
//! always composite the candidate against the pre-iteration image, so only the
//! masked pixels ever change regardless of what the backend returns.

mod harmonic;
mod native;
mod remote;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{composite, ImageBuffer, MaskRaster};

pub use harmonic::{harmonic_fill, HarmonicParams, HarmonicSolver};
pub use native::{boundary_mean_fill, constant_fill};
pub use remote::{
    Health, RemoteBackend, RemoteSettings, RetryPolicy, WireInpaintRequest, WireInpaintResponse,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend timed out: {0}")]
    Timeout(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("backend returned {got:?}, expected {expected:?}")]
    DimensionMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("invalid inpaint request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unreachable(_) | BackendError::Timeout(_))
    }
}

/// One `(image, mask)` pair to inpaint.
#[derive(Debug, Clone, Copy)]
pub struct InpaintRequest<'a> {
    pub image: &'a ImageBuffer,
    pub mask: &'a MaskRaster,
    pub seed: Option<u64>,
}

impl<'a> InpaintRequest<'a> {
    pub fn new(
        image: &'a ImageBuffer,
        mask: &'a MaskRaster,
        seed: Option<u64>,
    ) -> Result<Self, BackendError> {
        if image.dimensions() != mask.dimensions() {
            return Err(BackendError::InvalidRequest(format!(
                "image is {:?} but mask is {:?}",
                image.dimensions(),
                mask.dimensions()
            )));
        }
        if mask.popcount() == 0 {
            return Err(BackendError::InvalidRequest("mask is empty".into()));
        }
        Ok(Self { image, mask, seed })
    }
}

/// A backend's answer plus how many HTTP attempts it took (1 for native fillers).
#[derive(Debug, Clone)]
pub struct Inpainted {
    pub image: ImageBuffer,
    pub attempts: u32,
}

/// What produced the pixels, recorded in run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BackendIdentity {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deterministic: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defaults: Option<serde_json::Value>,
}

pub trait InpaintBackend: Send + Sync {
    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<Inpainted, BackendError>;

    fn identity(&self) -> BackendIdentity;

    /// Probes the backend; native backends are always ready.
    fn health(&self) -> Result<Option<Health>, BackendError> {
        Ok(None)
    }
}

/// Declarative backend choice as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum BackendDescriptor {
    #[serde(rename_all = "camelCase")]
    RemoteDiffusion {
        endpoint: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        #[serde(default = "default_max_in_flight")]
        max_in_flight: usize,
        #[serde(default)]
        retry: RetryPolicy,
    },
    #[serde(rename_all = "camelCase")]
    ConstantFill {
        #[serde(default = "default_gray")]
        gray: u8,
    },
    BoundaryMean,
    #[serde(rename_all = "camelCase")]
    HarmonicFill {
        /// `auto` solves rectangular masks directly and relaxes the rest;
        /// `iterative` relaxes every mask. `tol`, `maxIters` and `omega`
        /// only affect relaxation.
        #[serde(default, skip_serializing_if = "is_auto")]
        solver: HarmonicSolver,
        #[serde(default = "default_tol")]
        tol: f64,
        #[serde(default = "default_max_iters")]
        max_iters: u32,
        /// Over-relaxation factor; absent means the optimal value for the
        /// mask's extent, 1.0 is plain Gauss-Seidel.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        omega: Option<f64>,
    },
}

fn default_timeout_secs() -> u64 {
    300
}
fn default_max_in_flight() -> usize {
    2
}
fn default_gray() -> u8 {
    128
}
fn default_tol() -> f64 {
    0.01
}
fn default_max_iters() -> u32 {
    10_000
}
fn is_auto(s: &HarmonicSolver) -> bool {
    *s == HarmonicSolver::Auto
}

impl BackendDescriptor {
    pub fn constant_fill() -> Self {
        BackendDescriptor::ConstantFill { gray: default_gray() }
    }

    pub fn harmonic_fill() -> Self {
        BackendDescriptor::HarmonicFill {
            solver: HarmonicSolver::Auto,
            tol: default_tol(),
            max_iters: default_max_iters(),
            omega: None,
        }
    }

    pub fn remote(endpoint: impl Into<String>) -> Self {
        BackendDescriptor::RemoteDiffusion {
            endpoint: endpoint.into(),
            timeout_secs: default_timeout_secs(),
            max_in_flight: default_max_in_flight(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, BackendDescriptor::RemoteDiffusion { .. })
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self {
            BackendDescriptor::RemoteDiffusion { endpoint, max_in_flight, .. } => {
                if endpoint.trim().is_empty() {
                    return Err(BackendError::InvalidRequest("RemoteDiffusion requires an endpoint".into()));
                }
                if *max_in_flight == 0 {
                    return Err(BackendError::InvalidRequest("maxInFlight must be at least 1".into()));
                }
            }
            BackendDescriptor::HarmonicFill { tol, omega, .. } => {
                if !(tol.is_finite() && *tol > 0.0) {
                    return Err(BackendError::InvalidRequest(format!("harmonic tol must be positive, got {tol}")));
                }
                if let Some(w) = omega {
                    if !(*w > 0.0 && *w < 2.0) {
                        return Err(BackendError::InvalidRequest(format!("omega must be in (0, 2), got {w}")));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Arc<dyn InpaintBackend>, BackendError> {
        self.validate()?;
        Ok(match self {
            BackendDescriptor::RemoteDiffusion { endpoint, timeout_secs, max_in_flight, retry } => {
                Arc::new(RemoteBackend::new(RemoteSettings {
                    endpoint: endpoint.clone(),
                    timeout: std::time::Duration::from_secs(*timeout_secs),
                    max_in_flight: *max_in_flight,
                    retry: retry.clone(),
                })?)
            }
            BackendDescriptor::ConstantFill { gray } => Arc::new(native::ConstantFill { gray: *gray }),
            BackendDescriptor::BoundaryMean => Arc::new(native::BoundaryMean),
            BackendDescriptor::HarmonicFill { solver, tol, max_iters, omega } => {
                Arc::new(native::HarmonicFill(HarmonicParams {
                    solver: *solver,
                    tol: *tol,
                    max_iters: *max_iters,
                    omega: *omega,
                }))
            }
        })
    }
}

/// Deterministic RGB test card: horizontal and vertical ramps plus an XOR texture.
pub fn test_card(size: u32) -> ImageBuffer {
    let max = size.saturating_sub(1).max(1);
    ImageBuffer::from_fn(size, size, |x, y| [(x * 255 / max) as u8, (y * 255 / max) as u8, ((x ^ y) & 0xff) as u8])
}

/// Outcome of [`verify`].
#[derive(Debug, Clone)]
pub struct Verification {
    pub identity: BackendIdentity,
    pub health: Option<Health>,
    pub masked_pixels: usize,
    /// Masked pixels whose value differs from the test card after compositing.
    pub changed_pixels: usize,
    pub attempts: u32,
}

/// Health probe, then one inpaint of the centre quarter of a 512x512 test
/// card. The answer must have the card's dimensions, and once composited the
/// image may differ from the card only inside the mask.
pub fn verify(backend: &dyn InpaintBackend) -> Result<Verification, BackendError> {
    let health = backend.health()?;
    let card = test_card(crate::image::WORKING_SIZE);
    let (w, h) = card.dimensions();
    let mask = MaskRaster::from_rect(w, h, (w / 4, h / 4, w / 2, h / 2));
    let req = InpaintRequest::new(&card, &mask, Some(0))?;
    let out = backend.inpaint(&req)?;
    if out.image.dimensions() != card.dimensions() {
        return Err(BackendError::DimensionMismatch { expected: card.dimensions(), got: out.image.dimensions() });
    }
    let merged = composite(&card, &out.image, &mask).map_err(|e| BackendError::Backend(e.to_string()))?;
    let mut changed = 0;
    for y in 0..h {
        for x in 0..w {
            if merged.pixel(x, y) != card.pixel(x, y) {
                if !mask.is_set(x, y) {
                    return Err(BackendError::Backend(format!("composite changed unmasked pixel ({x}, {y})")));
                }
                changed += 1;
            }
        }
    }
    Ok(Verification {
        identity: backend.identity(),
        health,
        masked_pixels: mask.popcount(),
        changed_pixels: changed,
        attempts: out.attempts,
    })
}
