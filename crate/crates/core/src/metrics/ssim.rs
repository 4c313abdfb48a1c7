//! Single- and multi-scale structural similarity on BT.601 luma.

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::image::ImageBuffer;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SsimParams {
    pub window_size: usize,
    pub gaussian_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub ms_weights: Vec<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_size: 11,
            gaussian_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
            ms_weights: vec![0.0448, 0.2856, 0.3001, 0.2363, 0.1333],
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.window_size.is_multiple_of(2) {
            return Err(MetricError::Config(format!("window size must be odd, got {}", self.window_size)));
        }
        if self.gaussian_sigma.is_nan() || self.gaussian_sigma <= 0.0 {
            return Err(MetricError::Config("gaussian sigma must be positive".into()));
        }
        if self.ms_weights.is_empty() || (self.ms_weights.iter().sum::<f64>() - 1.0).abs() > 1e-4 {
            return Err(MetricError::Config("MS-SSIM weights must sum to 1".into()));
        }
        Ok(())
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Smallest side MS-SSIM accepts.
    pub fn min_ms_side(&self) -> usize {
        self.window_size << (self.ms_weights.len() - 1)
    }
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Single-channel plane.
#[derive(Debug, Clone)]
pub(crate) struct Plane {
    pub w: usize,
    pub h: usize,
    pub v: Vec<f64>,
}

impl Plane {
    pub fn luma(img: &ImageBuffer) -> Self {
        Self { w: img.width() as usize, h: img.height() as usize, v: img.luma_f64() }
    }

    /// 2×2 average pooling, dropping an odd trailing row/column.
    pub fn downsample(&self) -> Self {
        let (w, h) = (self.w / 2, self.h / 2);
        let v = par::map_range(h, |y| {
            let r0 = &self.v[2 * y * self.w..];
            let r1 = &self.v[(2 * y + 1) * self.w..];
            (0..w)
                .map(|x| (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) / 4.0)
                .collect::<Vec<_>>()
        })
        .concat();
        Self { w, h, v }
    }
}

/// Separable "valid" filtering: output is `(w-k+1) x (h-k+1)`.
fn filter_valid(p: &Plane, k: &[f64], f: impl Fn(usize) -> f64 + Sync) -> Plane {
    let n = k.len();
    let ow = p.w + 1 - n;
    let oh = p.h + 1 - n;
    let rows = par::map_range(p.h, |y| {
        (0..ow)
            .map(|x| k.iter().enumerate().map(|(j, kj)| kj * f(y * p.w + x + j)).sum::<f64>())
            .collect::<Vec<f64>>()
    });
    let v = par::map_range(oh, |y| {
        (0..ow)
            .map(|x| k.iter().enumerate().map(|(j, kj)| kj * rows[y + j][x]).sum::<f64>())
            .collect::<Vec<f64>>()
    })
    .concat();
    Plane { w: ow, h: oh, v }
}

/// Spatial means of the SSIM map and of its contrast-structure factor.
pub(crate) fn ssim_cs(a: &Plane, b: &Plane, p: &SsimParams) -> (f64, f64) {
    let k = gaussian_kernel(p.window_size, p.gaussian_sigma);
    let mu_a = filter_valid(a, &k, |i| a.v[i]);
    let mu_b = filter_valid(b, &k, |i| b.v[i]);
    let aa = filter_valid(a, &k, |i| a.v[i] * a.v[i]);
    let bb = filter_valid(b, &k, |i| b.v[i] * b.v[i]);
    let ab = filter_valid(a, &k, |i| a.v[i] * b.v[i]);
    let (c1, c2) = (p.c1(), p.c2());
    let n = mu_a.v.len();
    let terms = par::map_range(n, |i| {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        (l * cs, cs)
    });
    let (s, c) = terms.iter().fold((0.0, 0.0), |(s, c), (a, b)| (s + a, c + b));
    (s / n as f64, c / n as f64)
}

fn check(a: &ImageBuffer, b: &ImageBuffer, min_side: usize, what: &str) -> Result<(), MetricError> {
    if a.dimensions() != b.dimensions() {
        return Err(MetricError::DimensionMismatch(format!("{:?} vs {:?}", a.dimensions(), b.dimensions())));
    }
    let side = a.width().min(a.height()) as usize;
    if side < min_side {
        return Err(MetricError::ImageTooSmall { what: what.into(), side, min: min_side });
    }
    Ok(())
}

pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, p: &SsimParams) -> Result<f64, MetricError> {
    p.validate()?;
    check(a, b, p.window_size, "SSIM")?;
    Ok(ssim_cs(&Plane::luma(a), &Plane::luma(b), p).0)
}

/// Contrast-structure means on every scale but the last, full SSIM on the
/// last, combined as a weighted geometric product. Negative factors are
/// clamped to zero before exponentiation.
pub fn ms_ssim(a: &ImageBuffer, b: &ImageBuffer, p: &SsimParams) -> Result<f64, MetricError> {
    p.validate()?;
    check(a, b, p.min_ms_side(), "MS-SSIM")?;
    let mut pa = Plane::luma(a);
    let mut pb = Plane::luma(b);
    let levels = p.ms_weights.len();
    let mut value = 1.0;
    for (level, &weight) in p.ms_weights.iter().enumerate() {
        let (s, cs) = ssim_cs(&pa, &pb, p);
        let factor = if level + 1 == levels { s } else { cs };
        value *= factor.max(0.0).powf(weight);
        if level + 1 < levels {
            pa = pa.downsample();
            pb = pb.downsample();
        }
    }
    Ok(value)
}
