//! 8-bit RGB rasters, binary masks and the pixel operations the harness needs.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use ::image::{imageops::FilterType, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Working size every source is normalized to.
pub const WORKING_SIZE: u32 = 512;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    FileMissing(String),
    #[error("cannot decode {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("cannot write {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid image: {0}")]
    Invalid(String),
}

/// Row-major interleaved RGB raster.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageBuffer({}x{})", self.width, self.height)
    }
}

impl ImageBuffer {
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Invalid("empty image".into()));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(ImageError::Invalid(format!(
                "{width}x{height} needs {expected} samples, got {}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        let data = rgb.iter().copied().cycle().take(n * 3).collect();
        Self { width, height, data }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Interleaved samples, `3 * width * height` long.
    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.offset(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y as usize * self.width as usize + x as usize) * 3
    }

    /// One channel as `f64`, row-major.
    pub fn channel_f64(&self, c: usize) -> Vec<f64> {
        self.data.chunks_exact(3).map(|p| p[c] as f64).collect()
    }

    /// BT.601 luma (unrounded), row-major.
    pub fn luma_f64(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length checked at construction")
    }

    pub fn from_rgb_image(img: RgbImage) -> Self {
        let (width, height) = img.dimensions();
        Self { width, height, data: img.into_raw() }
    }

    /// Lossless PNG encoding.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb_image()
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ImageError::Io { path: "<memory>".into(), reason: e.to_string() })?;
        Ok(out.into_inner())
    }

    /// Decodes any supported raster from memory, converting to 8-bit RGB.
    pub fn decode(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = ::image::load_from_memory(bytes).map_err(|e| ImageError::Decode {
            path: "<memory>".into(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_rgb_image(img.to_rgb8()))
    }

    /// Number of pixels whose RGB triple differs between `self` and `other`.
    pub fn count_differing(&self, other: &ImageBuffer) -> Result<usize, ImageError> {
        check_dims("count_differing", self.dimensions(), other.dimensions())?;
        Ok(self
            .data
            .chunks_exact(3)
            .zip(other.data.chunks_exact(3))
            .filter(|(a, b)| a != b)
            .count())
    }

    /// Mean squared error over all samples.
    pub fn mse(&self, other: &ImageBuffer) -> Result<f64, ImageError> {
        check_dims("mse", self.dimensions(), other.dimensions())?;
        let sum: u64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as i64 - b as i64;
                (d * d) as u64
            })
            .sum();
        Ok(sum as f64 / self.data.len() as f64)
    }
}

fn check_dims(what: &str, a: (u32, u32), b: (u32, u32)) -> Result<(), ImageError> {
    if a != b {
        return Err(ImageError::DimensionMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Single-channel binary mask; 255 marks pixels to inpaint.
#[derive(Clone, PartialEq, Eq)]
pub struct MaskRaster {
    width: u32,
    height: u32,
    values: Vec<u8>,
}

impl fmt::Debug for MaskRaster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MaskRaster({}x{}, {} set)", self.width, self.height, self.popcount())
    }
}

impl MaskRaster {
    pub const SET: u8 = 255;

    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, values: vec![0; width as usize * height as usize] }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self { width, height, values: vec![Self::SET; width as usize * height as usize] }
    }

    pub fn from_raw(width: u32, height: u32, values: Vec<u8>) -> Result<Self, ImageError> {
        if values.len() != width as usize * height as usize {
            return Err(ImageError::Invalid("mask length does not match dimensions".into()));
        }
        if let Some(v) = values.iter().find(|&&v| v != 0 && v != Self::SET) {
            return Err(ImageError::Invalid(format!("mask value {v} is neither 0 nor 255")));
        }
        Ok(Self { width, height, values })
    }

    /// Mask with `rect = (x0, y0, w, h)` set.
    pub fn from_rect(width: u32, height: u32, rect: (u32, u32, u32, u32)) -> Self {
        let mut m = Self::empty(width, height);
        let (x0, y0, w, h) = rect;
        for y in y0..(y0 + h).min(height) {
            let row = y as usize * width as usize;
            m.values[row + x0 as usize..row + (x0 + w).min(width) as usize].fill(Self::SET);
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.values
    }

    pub fn is_set(&self, x: u32, y: u32) -> bool {
        self.values[y as usize * self.width as usize + x as usize] == Self::SET
    }

    pub fn popcount(&self) -> usize {
        self.values.iter().filter(|&&v| v == Self::SET).count()
    }

    /// 8-bit grayscale PNG.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let img = GrayImage::from_raw(self.width, self.height, self.values.clone())
            .expect("mask length checked at construction");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ImageError::Io { path: "<memory>".into(), reason: e.to_string() })?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| ImageError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// Color variant derived from an image before a chain starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChannelAblation {
    None,
    DropRed,
    DropGreen,
    DropBlue,
    Grayscale,
}

impl ChannelAblation {
    pub const ALL: [ChannelAblation; 5] = [
        ChannelAblation::None,
        ChannelAblation::DropRed,
        ChannelAblation::DropGreen,
        ChannelAblation::DropBlue,
        ChannelAblation::Grayscale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelAblation::None => "None",
            ChannelAblation::DropRed => "DropRed",
            ChannelAblation::DropGreen => "DropGreen",
            ChannelAblation::DropBlue => "DropBlue",
            ChannelAblation::Grayscale => "Grayscale",
        }
    }
}

impl fmt::Display for ChannelAblation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ChannelAblation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ChannelAblation::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown ablation {s:?}"))
    }
}

/// Reads a PNG or JPEG (or any format the `image` crate is built with) as 8-bit RGB.
pub fn load_image(path: &Path) -> Result<ImageBuffer, ImageError> {
    if !path.exists() {
        return Err(ImageError::FileMissing(path.display().to_string()));
    }
    let img = ::image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| ImageError::Decode { path: path.display().to_string(), reason: e.to_string() })?
        .decode()
        .map_err(|e| ImageError::Decode { path: path.display().to_string(), reason: e.to_string() })?;
    Ok(ImageBuffer::from_rgb_image(img.to_rgb8()))
}

/// Writes `img` as PNG regardless of the path's extension.
pub fn save_image(img: &ImageBuffer, path: &Path) -> Result<(), ImageError> {
    let io_err = |e: String| ImageError::Io { path: path.display().to_string(), reason: e };
    let bytes = img.encode_png().map_err(|e| io_err(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| io_err(e.to_string()))
}

/// Where the scaled source sits inside a letterboxed frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContentRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone)]
pub struct Letterboxed {
    pub image: ImageBuffer,
    pub content: ContentRect,
}

/// Scales `img` so its longer side equals `target` and centers it on a
/// `target`×`target` canvas filled with `fill`. An odd remainder goes to the
/// right/bottom band.
pub fn letterbox(img: &ImageBuffer, target: u32, fill: [u8; 3]) -> Letterboxed {
    let (w, h) = img.dimensions();
    let longer = w.max(h) as f64;
    let scale = target as f64 / longer;
    let cw = ((w as f64 * scale).round() as u32).clamp(1, target);
    let ch = ((h as f64 * scale).round() as u32).clamp(1, target);

    let content = if (cw, ch) == (w, h) {
        img.clone()
    } else {
        ImageBuffer::from_rgb_image(::image::imageops::resize(
            &img.to_rgb_image(),
            cw,
            ch,
            FilterType::Triangle,
        ))
    };

    let x0 = (target - cw) / 2;
    let y0 = (target - ch) / 2;
    if (cw, ch) == (target, target) {
        return Letterboxed {
            image: content,
            content: ContentRect { x: 0, y: 0, width: target, height: target },
        };
    }
    let mut out = ImageBuffer::filled(target, target, fill);
    let row_len = cw as usize * 3;
    for y in 0..ch {
        let src = y as usize * row_len;
        let dst = ((y0 + y) as usize * target as usize + x0 as usize) * 3;
        out.data[dst..dst + row_len].copy_from_slice(&content.data[src..src + row_len]);
    }
    Letterboxed { image: out, content: ContentRect { x: x0, y: y0, width: cw, height: ch } }
}

/// BT.601 luma rounded half-up, in exact integer arithmetic.
pub fn luma_u8(rgb: [u8; 3]) -> u8 {
    let weighted = 299 * rgb[0] as u32 + 587 * rgb[1] as u32 + 114 * rgb[2] as u32;
    ((weighted + 500) / 1000) as u8
}

pub fn ablate(img: &ImageBuffer, kind: ChannelAblation) -> ImageBuffer {
    let mut out = img.clone();
    let zero = match kind {
        ChannelAblation::None => return out,
        ChannelAblation::DropRed => Some(0),
        ChannelAblation::DropGreen => Some(1),
        ChannelAblation::DropBlue => Some(2),
        ChannelAblation::Grayscale => None,
    };
    for p in out.data.chunks_exact_mut(3) {
        match zero {
            Some(c) => p[c] = 0,
            None => {
                let y = luma_u8([p[0], p[1], p[2]]);
                p.fill(y);
            }
        }
    }
    out
}

/// Takes `candidate` where the mask is set and `base` everywhere else.
pub fn composite(
    base: &ImageBuffer,
    candidate: &ImageBuffer,
    mask: &MaskRaster,
) -> Result<ImageBuffer, ImageError> {
    check_dims("composite candidate", base.dimensions(), candidate.dimensions())?;
    check_dims("composite mask", base.dimensions(), mask.dimensions())?;
    let mut out = base.clone();
    for (i, &m) in mask.values.iter().enumerate() {
        if m == MaskRaster::SET {
            out.data[i * 3..i * 3 + 3].copy_from_slice(&candidate.data[i * 3..i * 3 + 3]);
        }
    }
    Ok(out)
}
