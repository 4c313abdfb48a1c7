//! Deterministic synthetic images and dataset manifests.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde_json::json;

use rip_core::image::save_image;
use rip_core::ImageBuffer;

/// Gradient, two sinusoids, a few flat rectangles and mild noise, all drawn
/// from `seed`. Different seeds give visibly different images.
pub fn synthetic_image(seed: u64, width: u32, height: u32) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = move || (rng.next_u32() as f64) / (u32::MAX as f64);
    let fx = 4.0 + 30.0 * unit();
    let fy = 4.0 + 30.0 * unit();
    let phase = std::f64::consts::TAU * unit();
    let tint = [unit(), unit(), unit()];
    let rects: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let (x, y) = (unit(), unit());
            (x, y, x + 0.1 + 0.3 * unit(), y + 0.1 + 0.3 * unit(), [255.0 * unit(), 255.0 * unit(), 255.0 * unit()])
        })
        .collect();
    let noise: Vec<f64> = (0..(width * height) as usize).map(|_| 12.0 * (unit() - 0.5)).collect();
    ImageBuffer::from_fn(width, height, |x, y| {
        let u = x as f64 / width as f64;
        let v = y as f64 / height as f64;
        let wave = (u * fx + phase).sin() * (v * fy).cos();
        let mut px = [0.0; 3];
        for (c, p) in px.iter_mut().enumerate() {
            *p = 255.0 * (0.5 * tint[c] * (u + v)) + 60.0 * wave * (c as f64 - 1.0) + 110.0;
        }
        for &(x0, y0, x1, y1, rgb) in &rects {
            if u >= x0 && u < x1 && v >= y0 && v < y1 {
                px = rgb;
            }
        }
        let n = noise[(y * width + x) as usize];
        px.map(|p| (p + n).round().clamp(0.0, 255.0) as u8)
    })
}

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub id: String,
    pub path: PathBuf,
    pub group_tag: String,
    pub source_tag: &'static str,
    pub license_restricted: bool,
}

/// Writes `n` synthetic `size`x`size` PNGs plus `manifest.json` into `dir`
/// and returns the manifest path. Entries alternate art/photo and cycle
/// through three group tags; entry 0 is license restricted when
/// `restrict_first` is set.
pub fn write_dataset(dir: &Path, n: usize, size: u32, restrict_first: bool) -> (PathBuf, Vec<DatasetEntry>) {
    std::fs::create_dir_all(dir).unwrap();
    let groups = ["impressionism", "cubism", "landscape"];
    let mut entries = Vec::new();
    for i in 0..n {
        let id = format!("img{i:02}");
        let path = dir.join(format!("{id}.png"));
        save_image(&synthetic_image(1000 + i as u64, size, size), &path).unwrap();
        entries.push(DatasetEntry {
            id,
            path,
            group_tag: groups[i % groups.len()].into(),
            source_tag: if i % 2 == 0 { "art" } else { "photo" },
            license_restricted: restrict_first && i == 0,
        });
    }
    let doc = json!({
        "schemaVersion": 1,
        "entries": entries.iter().map(|e| json!({
            "id": e.id,
            "path": e.path.file_name().unwrap().to_str().unwrap(),
            "groupTag": e.group_tag,
            "sourceTag": e.source_tag,
            "licenseRestricted": e.license_restricted,
        })).collect::<Vec<_>>(),
    });
    let manifest = dir.join("manifest.json");
    std::fs::write(&manifest, serde_json::to_vec_pretty(&doc).unwrap()).unwrap();
    (manifest, entries)
}
