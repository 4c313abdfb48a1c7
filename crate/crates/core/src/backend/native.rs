//! Deterministic offline fillers.

use super::{BackendError, BackendIdentity, InpaintBackend, InpaintRequest, Inpainted};
use crate::image::{ImageBuffer, MaskRaster};
use super::harmonic::{boundary_ring, harmonic_fill, no_ring, HarmonicParams, HarmonicSolver};

pub(super) struct ConstantFill {
    pub gray: u8,
}

impl InpaintBackend for ConstantFill {
    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<Inpainted, BackendError> {
        Ok(Inpainted { image: constant_fill(req.image, req.mask, [self.gray; 3]), attempts: 1 })
    }

    fn identity(&self) -> BackendIdentity {
        native_identity(format!("ConstantFill(gray={})", self.gray))
    }
}

pub(super) struct BoundaryMean;

impl InpaintBackend for BoundaryMean {
    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<Inpainted, BackendError> {
        Ok(Inpainted { image: boundary_mean_fill(req.image, req.mask)?, attempts: 1 })
    }

    fn identity(&self) -> BackendIdentity {
        native_identity("BoundaryMean".into())
    }
}

pub(super) struct HarmonicFill(pub HarmonicParams);

impl InpaintBackend for HarmonicFill {
    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<Inpainted, BackendError> {
        Ok(Inpainted { image: harmonic_fill(req.image, req.mask, &self.0)?, attempts: 1 })
    }

    fn identity(&self) -> BackendIdentity {
        let p = &self.0;
        let omega = p.omega.map_or_else(|| "auto".to_string(), |w| w.to_string());
        let solver = match p.solver {
            HarmonicSolver::Auto => "auto",
            HarmonicSolver::Iterative => "iterative",
        };
        native_identity(format!(
            "HarmonicFill(solver={solver},tol={},maxIters={},omega={omega})",
            p.tol, p.max_iters
        ))
    }
}

fn native_identity(kind: String) -> BackendIdentity {
    BackendIdentity { kind, endpoint: None, model: None, deterministic: Some(true), defaults: None }
}

pub fn constant_fill(image: &ImageBuffer, mask: &MaskRaster, rgb: [u8; 3]) -> ImageBuffer {
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.is_set(x, y) {
                out.set_pixel(x, y, rgb);
            }
        }
    }
    out
}

/// Fills the mask with the per-channel mean of its boundary ring.
pub fn boundary_mean_fill(image: &ImageBuffer, mask: &MaskRaster) -> Result<ImageBuffer, BackendError> {
    let ring = boundary_ring(mask);
    if ring.is_empty() {
        return Err(no_ring());
    }
    let raw = image.as_raw();
    let mut sums = [0u64; 3];
    for &i in &ring {
        for c in 0..3 {
            sums[c] += raw[i * 3 + c] as u64;
        }
    }
    let n = ring.len() as f64;
    let mean = sums.map(|s| (s as f64 / n).round() as u8);
    Ok(constant_fill(image, mask, mean))
}
