//! Learned perceptual distance over a serialized feature network.
//!
//! Both images are mapped into the network's input range, activations are
//! read at the configured tap points, unit-normalized along channels, and the
//! squared differences are weighted per channel, averaged over space and
//! summed over channels and layers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::onnx::{OnnxModel, Tensor};
use super::MetricError;
use crate::image::ImageBuffer;
use crate::par;

const NORM_EPS: f64 = 1e-10;

/// Per-channel affine map from 8-bit samples: `y = x * mul + add`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNormalization {
    pub mul: [f32; 3],
    pub add: [f32; 3],
}

impl InputNormalization {
    /// `[0,255] -> [-1,1]` followed by the reference scaling layer
    /// (`shift = [-.030,-.088,-.188]`, `scale = [.458,.448,.450]`).
    pub fn lpips() -> Self {
        let shift = [-0.030f32, -0.088, -0.188];
        let scale = [0.458f32, 0.448, 0.450];
        let mut mul = [0.0; 3];
        let mut add = [0.0; 3];
        for c in 0..3 {
            mul[c] = (2.0 / 255.0) / scale[c];
            add[c] = (-1.0 - shift[c]) / scale[c];
        }
        Self { mul, add }
    }
}

impl Default for InputNormalization {
    fn default() -> Self {
        Self::lpips()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FeatureNetSpec {
    /// Variant name reported with results, e.g. `alex`, `squeeze`, `vgg`.
    pub name: String,
    pub model_path: PathBuf,
    /// Hex SHA-256 of the model file; verified at load when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    /// Value names of the tapped activations, shallow to deep.
    pub layers: Vec<String>,
    /// JSON file holding the per-layer channel weights.
    pub calibration_path: PathBuf,
    #[serde(default)]
    pub input_normalization: InputNormalization,
}

impl FeatureNetSpec {
    /// Resolves relative paths against `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let fix = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        Self { model_path: fix(&self.model_path), calibration_path: fix(&self.calibration_path), ..self.clone() }
    }
}

/// On-disk calibration weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub version: String,
    pub layers: Vec<CalibrationLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationLayer {
    pub name: String,
    pub weights: Vec<f32>,
}

pub fn sha256_file(path: &Path) -> Result<String, std::io::Error> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// A loaded network, immutable and shareable across threads.
#[derive(Debug)]
pub struct FeatureNet {
    spec: FeatureNetSpec,
    model: OnnxModel,
    weights: Vec<Vec<f32>>,
    calibration_version: String,
}

/// Unit-normalized activations of one image, one entry per tap.
#[derive(Debug, Clone)]
pub struct Features(Vec<Tensor>);

impl FeatureNet {
    pub fn load(spec: &FeatureNetSpec) -> Result<Self, MetricError> {
        let load_err = |reason: String| MetricError::ModelLoad { name: spec.name.clone(), reason };
        if let Some(expected) = &spec.sha256 {
            let got = sha256_file(&spec.model_path)
                .map_err(|e| load_err(format!("{}: {e}", spec.model_path.display())))?;
            if !got.eq_ignore_ascii_case(expected.trim()) {
                return Err(load_err(format!("checksum mismatch: expected {expected}, file has {got}")));
            }
        }
        let model = OnnxModel::load(&spec.model_path).map_err(|e| load_err(e.to_string()))?;
        for layer in &spec.layers {
            if !model.has_value(layer) {
                return Err(load_err(format!("model has no value named {layer:?}")));
            }
        }
        let text = std::fs::read_to_string(&spec.calibration_path)
            .map_err(|e| load_err(format!("{}: {e}", spec.calibration_path.display())))?;
        let cal: Calibration =
            serde_json::from_str(&text).map_err(|e| load_err(format!("calibration file: {e}")))?;
        let mut weights = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            let entry = cal
                .layers
                .iter()
                .find(|l| &l.name == layer)
                .ok_or_else(|| load_err(format!("calibration has no weights for {layer:?}")))?;
            if entry.weights.iter().any(|w| w.is_nan() || *w < 0.0) {
                return Err(load_err(format!("calibration weights for {layer:?} must be non-negative")));
            }
            weights.push(entry.weights.clone());
        }
        Ok(Self { spec: spec.clone(), model, weights, calibration_version: cal.version })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn calibration_version(&self) -> &str {
        &self.calibration_version
    }

    pub fn spec(&self) -> &FeatureNetSpec {
        &self.spec
    }

    fn input_tensor(&self, img: &ImageBuffer) -> Tensor {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let norm = &self.spec.input_normalization;
        let raw = img.as_raw();
        let mut data = vec![0f32; 3 * w * h];
        for c in 0..3 {
            let plane = &mut data[c * w * h..(c + 1) * w * h];
            for (i, v) in plane.iter_mut().enumerate() {
                *v = raw[i * 3 + c] as f32 * norm.mul[c] + norm.add[c];
            }
        }
        Tensor::new(vec![1, 3, h, w], data)
    }

    /// Runs the network and unit-normalizes each tap along channels.
    pub fn features(&self, img: &ImageBuffer) -> Result<Features, MetricError> {
        let infer_err = |reason: String| MetricError::Inference { name: self.spec.name.clone(), reason };
        let taps = self
            .model
            .run(self.input_tensor(img), &self.spec.layers)
            .map_err(|e| infer_err(e.to_string()))?;
        let mut out = Vec::with_capacity(taps.len());
        for (k, mut t) in taps.into_iter().enumerate() {
            let [1, c, h, w] = t.shape[..] else {
                return Err(infer_err(format!("tap {} has shape {:?}, expected [1,C,H,W]", self.spec.layers[k], t.shape)));
            };
            if self.weights[k].len() != c {
                return Err(MetricError::ShapeMismatch {
                    name: self.spec.name.clone(),
                    layer: self.spec.layers[k].clone(),
                    weights: self.weights[k].len(),
                    channels: c,
                });
            }
            let plane = h * w;
            let norms: Vec<f64> = par::map_range(plane, |p| {
                (0..c).map(|ch| (t.data[ch * plane + p] as f64).powi(2)).sum::<f64>().sqrt() + NORM_EPS
            });
            for ch in 0..c {
                for (p, v) in t.data[ch * plane..(ch + 1) * plane].iter_mut().enumerate() {
                    *v = (*v as f64 / norms[p]) as f32;
                }
            }
            out.push(t);
        }
        Ok(Features(out))
    }

    pub fn distance(&self, a: &Features, b: &Features) -> f64 {
        a.0.iter()
            .zip(&b.0)
            .zip(&self.weights)
            .map(|((fa, fb), weights)| {
                let plane = fa.shape[2] * fa.shape[3];
                let per_channel = par::map_range(weights.len(), |ch| {
                    let xa = &fa.data[ch * plane..(ch + 1) * plane];
                    let xb = &fb.data[ch * plane..(ch + 1) * plane];
                    let sq: f64 = xa.iter().zip(xb).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum();
                    weights[ch] as f64 * sq
                });
                per_channel.iter().sum::<f64>() / plane as f64
            })
            .sum()
    }

    pub fn lpips(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricError> {
        if a.dimensions() != b.dimensions() {
            return Err(MetricError::DimensionMismatch(format!("{:?} vs {:?}", a.dimensions(), b.dimensions())));
        }
        Ok(self.distance(&self.features(a)?, &self.features(b)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::onnx::tests::enc;

    /// One 1x1 conv tap with 2 channels and a ReLU tap after it.
    fn tiny_net(dir: &Path) -> FeatureNetSpec {
        let w = [1.0f32, 0.0, 0.0, 0.0, 1.0, 0.5];
        let bytes = enc::model(
            &[enc::node("Conv", &["x", "w"], &["c1"], &[]), enc::node("Relu", &["c1"], &["r1"], &[])],
            &[enc::tensor("w", &[2, 3, 1, 1], &w)],
            "x",
            &["r1"],
        );
        let model_path = dir.join("tiny.onnx");
        std::fs::write(&model_path, &bytes).unwrap();
        let cal = Calibration {
            version: "test".into(),
            layers: vec![
                CalibrationLayer { name: "c1".into(), weights: vec![1.0, 2.0] },
                CalibrationLayer { name: "r1".into(), weights: vec![0.5, 0.5] },
            ],
        };
        let calibration_path = dir.join("cal.json");
        std::fs::write(&calibration_path, serde_json::to_string(&cal).unwrap()).unwrap();
        FeatureNetSpec {
            name: "tiny".into(),
            sha256: Some(sha256_file(&model_path).unwrap()),
            model_path,
            layers: vec!["c1".into(), "r1".into()],
            calibration_path,
            input_normalization: InputNormalization::lpips(),
        }
    }

    #[test]
    fn identity_symmetry_and_hand_value() {
        let dir = tempfile::tempdir().unwrap();
        let net = FeatureNet::load(&tiny_net(dir.path())).unwrap();
        let a = ImageBuffer::filled(4, 4, [200, 10, 30]);
        let b = ImageBuffer::filled(4, 4, [10, 200, 30]);
        assert!(net.lpips(&a, &a).unwrap().abs() < 1e-12);
        let ab = net.lpips(&a, &b).unwrap();
        assert_eq!(ab, net.lpips(&b, &a).unwrap());

        // hand computation on the constant images
        let n = InputNormalization::lpips();
        let inp = |p: [u8; 3]| [0, 1, 2].map(|c| p[c] as f32 * n.mul[c] + n.add[c]);
        let (ia, ib) = (inp([200, 10, 30]), inp([10, 200, 30]));
        let feat = |i: [f32; 3]| [i[0] as f64, (i[1] + 0.5 * i[2]) as f64];
        let unit = |f: [f64; 2], relu: bool| {
            let f = if relu { f.map(|v| v.max(0.0)) } else { f };
            let norm = (f[0] * f[0] + f[1] * f[1]).sqrt() + NORM_EPS;
            f.map(|v| v / norm)
        };
        let (fa, fb) = (feat(ia), feat(ib));
        let (ua, ub) = (unit(fa, false), unit(fb, false));
        let (ra, rb) = (unit(fa, true), unit(fb, true));
        let expected = (ua[0] - ub[0]).powi(2) + 2.0 * (ua[1] - ub[1]).powi(2)
            + 0.5 * (ra[0] - rb[0]).powi(2)
            + 0.5 * (ra[1] - rb[1]).powi(2);
        assert!((ab - expected).abs() < 1e-5, "{ab} vs {expected}");
    }

    #[test]
    fn load_failures() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_net(dir.path());

        let bad_sum = FeatureNetSpec { sha256: Some("00".into()), ..spec.clone() };
        assert!(matches!(FeatureNet::load(&bad_sum), Err(MetricError::ModelLoad { .. })));

        let missing_layer = FeatureNetSpec { layers: vec!["zz".into()], ..spec.clone() };
        assert!(matches!(FeatureNet::load(&missing_layer), Err(MetricError::ModelLoad { .. })));

        let missing_file = FeatureNetSpec { model_path: dir.path().join("none.onnx"), sha256: None, ..spec.clone() };
        assert!(matches!(FeatureNet::load(&missing_file), Err(MetricError::ModelLoad { .. })));

        std::fs::write(
            &spec.calibration_path,
            r#"{"version":"x","layers":[{"name":"c1","weights":[1,2,3]},{"name":"r1","weights":[1,1]}]}"#,
        )
        .unwrap();
        let net = FeatureNet::load(&spec).unwrap();
        let img = ImageBuffer::filled(2, 2, [0; 3]);
        assert!(matches!(net.lpips(&img, &img), Err(MetricError::ShapeMismatch { .. })));

        std::fs::write(
            &spec.calibration_path,
            r#"{"version":"x","layers":[{"name":"c1","weights":[1,-2]},{"name":"r1","weights":[1,1]}]}"#,
        )
        .unwrap();
        assert!(matches!(FeatureNet::load(&spec), Err(MetricError::ModelLoad { .. })));
    }
}
