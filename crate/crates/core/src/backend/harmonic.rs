//! Harmonic (Laplace) fill.
//!
//! Each masked pixel takes the mean of its in-image 4-neighbours; unmasked
//! pixels are fixed. On the image border a pixel has fewer neighbours, which
//! amounts to a zero-flux condition there.
//!
//! A mask that is one axis-aligned rectangle (every RIP cell) is solved
//! exactly: the operator separates into two tridiagonal 1-D operators whose
//! eigenvectors are known in closed form, so the solve is four small matrix
//! products per channel. Other masks use successive over-relaxation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::image::{ImageBuffer, MaskRaster};
use crate::par;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HarmonicSolver {
    /// Direct solve for rectangular masks, relaxation otherwise.
    #[default]
    Auto,
    /// Relaxation for every mask.
    Iterative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicParams {
    pub solver: HarmonicSolver,
    /// Relaxation stops once the largest per-pixel update is below this.
    pub tol: f64,
    pub max_iters: u32,
    /// Over-relaxation factor; `None` picks the optimum for the mask's extent.
    pub omega: Option<f64>,
}

impl Default for HarmonicParams {
    fn default() -> Self {
        Self { solver: HarmonicSolver::Auto, tol: 0.01, max_iters: 10_000, omega: None }
    }
}

/// Unmasked pixels 4-adjacent to a masked pixel, as flat indices.
pub(super) fn boundary_ring(mask: &MaskRaster) -> Vec<usize> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let m = mask.as_raw();
    let mut ring = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if m[i] == MaskRaster::SET {
                continue;
            }
            let touches = (x > 0 && m[i - 1] == MaskRaster::SET)
                || (x + 1 < w && m[i + 1] == MaskRaster::SET)
                || (y > 0 && m[i - w] == MaskRaster::SET)
                || (y + 1 < h && m[i + w] == MaskRaster::SET);
            if touches {
                ring.push(i);
            }
        }
    }
    ring
}

pub(super) fn no_ring() -> BackendError {
    BackendError::InvalidRequest("mask has no unmasked boundary inside the image".into())
}

/// Inclusive-exclusive bounding box `(x0, y0, x1, y1)` of the set pixels.
fn bounding_box(mask: &MaskRaster) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let m = mask.as_raw();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if m[y * w + x] == MaskRaster::SET {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then_some((x0, y0, x1, y1))
}

/// Solves the discrete Laplace equation over the masked pixels of each
/// channel with the unmasked pixels as fixed boundary values, then rounds.
/// Results are clamped to the boundary ring's range, where the exact solution
/// lies.
pub fn harmonic_fill(
    image: &ImageBuffer,
    mask: &MaskRaster,
    params: &HarmonicParams,
) -> Result<ImageBuffer, BackendError> {
    if image.dimensions() != mask.dimensions() {
        return Err(BackendError::InvalidRequest("mask and image dimensions differ".into()));
    }
    let ring = boundary_ring(mask);
    let Some((x0, y0, x1, y1)) = bounding_box(mask) else {
        return Err(no_ring());
    };
    if ring.is_empty() {
        return Err(no_ring());
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    let raw = image.as_raw();
    let m = mask.as_raw();
    let unknowns = m.iter().filter(|&&v| v == MaskRaster::SET).count();
    let rect = unknowns == (x1 - x0) * (y1 - y0);

    let channels: Vec<Vec<f64>> = if rect && params.solver == HarmonicSolver::Auto {
        let solver = RectSolver::new((x0, y0, x1, y1), w, h);
        par::map_range(3, |c| solver.solve(raw, c))
    } else {
        // Crop to the box plus a one-pixel margin: every unknown's neighbours
        // are inside, and a crop edge without margin is an image edge.
        let (cx0, cy0) = (x0.saturating_sub(1), y0.saturating_sub(1));
        let (cx1, cy1) = ((x1 + 1).min(w), (y1 + 1).min(h));
        let (cw, ch) = (cx1 - cx0, cy1 - cy0);
        let crop_mask: Vec<u8> =
            (cy0..cy1).flat_map(|y| m[y * w + cx0..y * w + cx1].iter().copied()).collect();
        let cells: Vec<usize> = (0..cw * ch).filter(|&i| crop_mask[i] == MaskRaster::SET).collect();
        let omega = params.omega.unwrap_or_else(|| optimal_omega(x1 - x0, y1 - y0));
        par::map_range(3, |c| {
            let mut v: Vec<f64> = (cy0..cy1)
                .flat_map(|y| (cx0..cx1).map(move |x| raw[(y * w + x) * 3 + c] as f64))
                .collect();
            initial_guess(&mut v, &crop_mask, cw, ch);
            relax(&mut v, &cells, cw, ch, omega, params);
            cells.iter().map(|&i| v[i]).collect()
        })
    };

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &ring {
        for c in 0..3 {
            let v = raw[i * 3 + c] as f64;
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }
    let mut data = raw.to_vec();
    let mut k = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            let i = y * w + x;
            if m[i] != MaskRaster::SET {
                continue;
            }
            for c in 0..3 {
                data[i * 3 + c] = channels[c][k].clamp(lo[c], hi[c]).round() as u8;
            }
            k += 1;
        }
    }
    Ok(ImageBuffer::from_raw(image.width(), image.height(), data).expect("same dimensions"))
}

// ---------------------------------------------------------------------------
// Direct solve on a rectangle

/// Orthonormal eigenvectors (column `k` of a row-major `n x n` matrix) and
/// eigenvalues of the 1-D operator `2u_j - u_{j-1} - u_{j+1}`, where an end
/// on the image border has only one neighbour (diagonal 1 instead of 2).
fn modes(n: usize, neumann_lo: bool, neumann_hi: bool) -> (Vec<f64>, Vec<f64>) {
    let nf = n as f64;
    let mut q = vec![0.0; n * n];
    let mut lambda = vec![0.0; n];
    for k in 0..n {
        let kf = k as f64;
        let (theta, phi): (f64, Box<dyn Fn(usize) -> f64>) = match (neumann_lo, neumann_hi) {
            (false, false) => {
                let a = PI * (kf + 1.0) / (nf + 1.0);
                (a, Box::new(move |j| (a * (j as f64 + 1.0)).sin()))
            }
            (true, true) => {
                let a = PI * kf / nf;
                (a, Box::new(move |j| (a * (j as f64 + 0.5)).cos()))
            }
            (true, false) => {
                let a = PI * (2.0 * kf + 1.0) / (2.0 * nf + 1.0);
                (a, Box::new(move |j| (a * (j as f64 + 0.5)).cos()))
            }
            (false, true) => {
                let a = PI * (2.0 * kf + 1.0) / (2.0 * nf + 1.0);
                (a, Box::new(move |j| (a * ((n - 1 - j) as f64 + 0.5)).cos()))
            }
        };
        lambda[k] = 2.0 - 2.0 * theta.cos();
        let norm = (0..n).map(|j| phi(j).powi(2)).sum::<f64>().sqrt();
        for j in 0..n {
            q[j * n + k] = phi(j) / norm;
        }
    }
    (q, lambda)
}

/// `C = op(A) * op(B)` for row-major matrices, `op` transposing when asked.
fn matmul(a: &[f64], ta: bool, b: &[f64], tb: bool, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the checked slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

struct RectSolver {
    rect: (usize, usize, usize, usize),
    w: usize,
    h: usize,
    qx: Vec<f64>,
    qy: Vec<f64>,
    /// `1 / (lambda_y[l] + lambda_x[k])`, row-major `ny x nx`.
    inv: Vec<f64>,
}

impl RectSolver {
    fn new(rect: (usize, usize, usize, usize), w: usize, h: usize) -> Self {
        let (x0, y0, x1, y1) = rect;
        let (qx, lx) = modes(x1 - x0, x0 == 0, x1 == w);
        let (qy, ly) = modes(y1 - y0, y0 == 0, y1 == h);
        let inv = ly.iter().flat_map(|a| lx.iter().map(move |b| 1.0 / (a + b))).collect();
        Self { rect, w, h, qx, qy, inv }
    }

    /// Interior values of channel `c`, row-major over the rectangle.
    fn solve(&self, raw: &[u8], c: usize) -> Vec<f64> {
        let (x0, y0, x1, y1) = self.rect;
        let (nx, ny) = (x1 - x0, y1 - y0);
        let px = |x: usize, y: usize| raw[(y * self.w + x) * 3 + c] as f64;
        // known neighbours move to the right-hand side
        let mut rhs = vec![0.0; nx * ny];
        for j in 0..ny {
            let y = y0 + j;
            if x0 > 0 {
                rhs[j * nx] += px(x0 - 1, y);
            }
            if x1 < self.w {
                rhs[j * nx + nx - 1] += px(x1, y);
            }
        }
        for i in 0..nx {
            let x = x0 + i;
            if y0 > 0 {
                rhs[i] += px(x, y0 - 1);
            }
            if y1 < self.h {
                rhs[(ny - 1) * nx + i] += px(x, y1);
            }
        }
        let t = matmul(&self.qy, true, &rhs, false, ny, ny, nx);
        let mut spec = matmul(&t, false, &self.qx, false, ny, nx, nx);
        for (s, d) in spec.iter_mut().zip(&self.inv) {
            *s *= d;
        }
        let t = matmul(&self.qy, false, &spec, false, ny, ny, nx);
        matmul(&t, false, &self.qx, true, ny, nx, nx)
    }
}

// ---------------------------------------------------------------------------
// Relaxation

/// SOR factor for a square region of the given extent.
fn optimal_omega(w: usize, h: usize) -> f64 {
    let extent = w.max(h);
    2.0 / (1.0 + (PI / (extent as f64 + 1.0)).sin())
}

/// Linear interpolation between the nearest known pixels along the row and
/// the column, averaged; exact for linear fields.
fn initial_guess(v: &mut [f64], m: &[u8], w: usize, h: usize) {
    let known = |i: usize| m[i] != MaskRaster::SET;
    // nearest known sample (value, distance) in each direction
    let mut left = vec![None; w * h];
    let mut right = vec![None; w * h];
    let mut up = vec![None; w * h];
    let mut down = vec![None; w * h];
    for y in 0..h {
        let mut last: Option<(f64, usize)> = None;
        for x in 0..w {
            let i = y * w + x;
            if known(i) {
                last = Some((v[i], x));
            } else {
                left[i] = last.map(|(val, lx)| (val, x - lx));
            }
        }
        let mut last: Option<(f64, usize)> = None;
        for x in (0..w).rev() {
            let i = y * w + x;
            if known(i) {
                last = Some((v[i], x));
            } else {
                right[i] = last.map(|(val, rx)| (val, rx - x));
            }
        }
    }
    for x in 0..w {
        let mut last: Option<(f64, usize)> = None;
        for y in 0..h {
            let i = y * w + x;
            if known(i) {
                last = Some((v[i], y));
            } else {
                up[i] = last.map(|(val, uy)| (val, y - uy));
            }
        }
        let mut last: Option<(f64, usize)> = None;
        for y in (0..h).rev() {
            let i = y * w + x;
            if known(i) {
                last = Some((v[i], y));
            } else {
                down[i] = last.map(|(val, dy)| (val, dy - y));
            }
        }
    }
    let blend = |a: Option<(f64, usize)>, b: Option<(f64, usize)>| match (a, b) {
        (Some((va, da)), Some((vb, db))) => Some((va * db as f64 + vb * da as f64) / (da + db) as f64),
        (Some((va, _)), None) | (None, Some((va, _))) => Some(va),
        (None, None) => None,
    };
    for i in 0..w * h {
        if known(i) {
            continue;
        }
        v[i] = match (blend(left[i], right[i]), blend(up[i], down[i])) {
            (Some(a), Some(b)) => 0.5 * (a + b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => 0.0,
        };
    }
}

/// Row-major sweeps until the largest update falls below `tol`.
fn relax(v: &mut [f64], unknowns: &[usize], w: usize, h: usize, omega: f64, p: &HarmonicParams) {
    let interior: Vec<bool> = unknowns
        .iter()
        .map(|&i| {
            let (x, y) = (i % w, i / w);
            x > 0 && x + 1 < w && y > 0 && y + 1 < h
        })
        .collect();
    for _ in 0..p.max_iters {
        let mut max_change: f64 = 0.0;
        for (&i, &inner) in unknowns.iter().zip(&interior) {
            let avg = if inner { 0.25 * (v[i - 1] + v[i + 1] + v[i - w] + v[i + w]) } else { edge_average(v, i, w, h) };
            let delta = omega * (avg - v[i]);
            v[i] += delta;
            max_change = max_change.max(delta.abs());
        }
        if max_change < p.tol {
            return;
        }
    }
}

/// Mean over the in-image 4-neighbours of a pixel on the image border.
fn edge_average(v: &[f64], i: usize, w: usize, h: usize) -> f64 {
    let (x, y) = (i % w, i / w);
    let mut sum = 0.0;
    let mut n = 0u32;
    if x > 0 {
        sum += v[i - 1];
        n += 1;
    }
    if x + 1 < w {
        sum += v[i + 1];
        n += 1;
    }
    if y > 0 {
        sum += v[i - w];
        n += 1;
    }
    if y + 1 < h {
        sum += v[i + w];
        n += 1;
    }
    sum / n as f64
}
