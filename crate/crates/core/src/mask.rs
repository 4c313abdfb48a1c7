//! Grid geometry, the seeded mask sequence and inpainted-fraction accounting.
//!
//! # Reproducibility
//!
//! Every chain gets its own 64-bit seed:
//!
//! ```text
//! seed = u64_le(SHA-256(u64_le(master) || u32_le(len(image_id)) || image_id
//!                       || u32_le(mask_size) || u32_le(run_index))[0..8])
//! ```
//!
//! The mask generator is ChaCha20 (20 rounds) keyed with `u64_le(seed)`
//! followed by 24 zero bytes, with a zero nonce and the block counter starting
//! at zero; the keystream is identical to RFC 7539 with an all-zero nonce.
//! 64-bit outputs are consecutive pairs of 32-bit keystream words, low word
//! first. A cell index in `0..n` is drawn from a 64-bit output `x` with
//! Lemire's multiply-shift method: `m = x * n` as a 128-bit product; if the
//! low half is below `(2^64 - n) mod n` the draw is rejected and repeated,
//! otherwise the high half is the index. Any language with a ChaCha20
//! implementation can replay the exact sequence.

use num_rational::Ratio;
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::MaskRaster;

/// Exact inpainted-pixel fraction (1 = as many pixels as the image holds).
pub type Fraction = Ratio<u64>;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("image size and cell size must be positive (got {image_size} and {cell_size})")]
    NonPositive { image_size: u32, cell_size: u32 },
    #[error("cellSize must divide {image_size} (got {cell_size})")]
    NotADivisor { image_size: u32, cell_size: u32 },
    #[error("step fraction {step} is not a whole number of {cell_size}x{cell_size} masks on a {image_size}x{image_size} image")]
    UnalignedStep { step: String, cell_size: u32, image_size: u32 },
    #[error("total fraction {total} is not a positive multiple of the step fraction {step}")]
    UnalignedTotal { total: String, step: String },
    #[error("fraction {0} is not a finite positive number")]
    BadFraction(f64),
}

/// Square image partitioned into `cells_per_side²` square cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GridSpec {
    pub image_size: u32,
    pub cell_size: u32,
    pub cells_per_side: u32,
}

impl GridSpec {
    pub fn new(image_size: u32, cell_size: u32) -> Result<Self, ConfigError> {
        if image_size == 0 || cell_size == 0 {
            return Err(ConfigError::NonPositive { image_size, cell_size });
        }
        if !image_size.is_multiple_of(cell_size) {
            return Err(ConfigError::NotADivisor { image_size, cell_size });
        }
        Ok(Self { image_size, cell_size, cells_per_side: image_size / cell_size })
    }

    pub fn cell_count(&self) -> u32 {
        self.cells_per_side * self.cells_per_side
    }

    /// `(x0, y0, size, size)` of cell `index`, row-major.
    pub fn cell_rect(&self, index: u32) -> (u32, u32, u32, u32) {
        debug_assert!(index < self.cell_count());
        let col = index % self.cells_per_side;
        let row = index / self.cells_per_side;
        (col * self.cell_size, row * self.cell_size, self.cell_size, self.cell_size)
    }

    /// Fraction of the image covered by one cell.
    pub fn cell_fraction(&self) -> Fraction {
        inpaint_fraction(1, self.cell_size, self.image_size)
    }
}

/// Same as [`GridSpec::new`].
pub fn build_grid(image_size: u32, cell_size: u32) -> Result<GridSpec, ConfigError> {
    GridSpec::new(image_size, cell_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MaskSelection {
    /// 1-based.
    pub iteration: u32,
    pub cell_index: u32,
    pub rect: (u32, u32, u32, u32),
}

/// Draws one grid cell per iteration, uniformly and with replacement.
#[derive(Debug, Clone)]
pub struct MaskSchedule {
    seed: u64,
    grid: GridSpec,
    rng: ChaCha20Rng,
    iterations_done: u32,
    hit_counts: Vec<u32>,
}

impl MaskSchedule {
    pub fn new(seed: u64, grid: GridSpec) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        Self {
            seed,
            grid,
            rng: ChaCha20Rng::from_seed(key),
            iterations_done: 0,
            hit_counts: vec![0; grid.cell_count() as usize],
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn iterations_done(&self) -> u32 {
        self.iterations_done
    }

    pub fn hit_counts(&self) -> &[u32] {
        &self.hit_counts
    }

    pub fn cumulative_fraction(&self) -> Fraction {
        inpaint_fraction(self.iterations_done, self.grid.cell_size, self.grid.image_size)
    }

    pub fn next_mask(&mut self) -> MaskSelection {
        let index = uniform_index(&mut self.rng, self.grid.cell_count() as u64) as u32;
        self.iterations_done += 1;
        self.hit_counts[index as usize] += 1;
        MaskSelection {
            iteration: self.iterations_done,
            cell_index: index,
            rect: self.grid.cell_rect(index),
        }
    }
}

/// Unbiased draw from `0..n` (Lemire, with rejection).
fn uniform_index(rng: &mut impl RngCore, n: u64) -> u64 {
    debug_assert!(n > 0);
    let threshold = n.wrapping_neg() % n;
    loop {
        let m = rng.next_u64() as u128 * n as u128;
        if (m as u64) >= threshold {
            return (m >> 64) as u64;
        }
    }
}

pub fn render_mask(sel: &MaskSelection, grid: &GridSpec) -> MaskRaster {
    MaskRaster::from_rect(grid.image_size, grid.image_size, sel.rect)
}

pub fn inpaint_fraction(iterations: u32, cell_size: u32, image_size: u32) -> Fraction {
    let cell = cell_size as u64 * cell_size as u64;
    let image = image_size as u64 * image_size as u64;
    Ratio::new(iterations as u64 * cell, image)
}

/// Converts a configured fraction such as `0.5` or `4.0` to an exact ratio.
///
/// Only values with a short exact binary expansion make sense here (all
/// cell/image area ratios are powers of two), so the float is decomposed
/// exactly rather than approximated.
pub fn fraction_from_f64(value: f64) -> Result<Fraction, ConfigError> {
    if !value.is_finite() || value <= 0.0 {
        return Err(ConfigError::BadFraction(value));
    }
    let mut num = value;
    let mut den: u64 = 1;
    while num.fract() != 0.0 {
        if den >= 1 << 40 {
            return Err(ConfigError::BadFraction(value));
        }
        num *= 2.0;
        den *= 2;
    }
    if num > (1u64 << 53) as f64 {
        return Err(ConfigError::BadFraction(value));
    }
    Ok(Ratio::new(num as u64, den))
}

pub fn fraction_to_f64(f: Fraction) -> f64 {
    *f.numer() as f64 / *f.denom() as f64
}

/// Iteration counts at which the inpainted fraction reaches each multiple of
/// `step` up to `total`.
pub fn checkpoint_iterations(
    step: Fraction,
    total: Fraction,
    cell_size: u32,
    image_size: u32,
) -> Result<Vec<u32>, ConfigError> {
    let grid = GridSpec::new(image_size, cell_size)?;
    let per_step = step / grid.cell_fraction();
    if !per_step.is_integer() || per_step.to_integer() == 0 {
        return Err(ConfigError::UnalignedStep {
            step: step.to_string(),
            cell_size,
            image_size,
        });
    }
    let steps = total / step;
    if !steps.is_integer() || steps.to_integer() == 0 {
        return Err(ConfigError::UnalignedTotal { total: total.to_string(), step: step.to_string() });
    }
    let per_step = per_step.to_integer();
    Ok((1..=steps.to_integer()).map(|k| (k * per_step) as u32).collect())
}

/// Per-chain seed from the master seed (see the module docs).
pub fn derive_chain_seed(master: u64, image_id: &str, mask_size: u32, run_index: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((image_id.len() as u32).to_le_bytes());
    h.update(image_id.as_bytes());
    h.update(mask_size.to_le_bytes());
    h.update(run_index.to_le_bytes());
    let digest = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}

/// Human-readable description stored in run manifests.
pub const SEED_SCHEME: &str = "chain seed = first 8 bytes (LE) of SHA-256(u64le master || u32le len(imageId) || imageId || u32le maskSize || u32le runIndex); \
masks = ChaCha20 keyed with u64le(seed) || 0^24, u64 outputs = two LE u32 words, index via Lemire multiply-shift with rejection";
