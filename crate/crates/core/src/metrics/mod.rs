//! Similarity between the starting image and each checkpoint.

pub mod lpips;
pub mod onnx;
pub mod ssim;

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageBuffer;
pub use lpips::{FeatureNet, FeatureNetSpec, Features, InputNormalization};
pub use ssim::{ms_ssim, ssim, SsimParams};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{what} needs images of at least {min} pixels per side, got {side}")]
    ImageTooSmall { what: String, side: usize, min: usize },
    #[error("cannot load feature network {name}: {reason}")]
    ModelLoad { name: String, reason: String },
    #[error("feature network {name} failed: {reason}")]
    Inference { name: String, reason: String },
    #[error("feature network {name}, layer {layer}: {weights} calibration weights for {channels} channels")]
    ShapeMismatch { name: String, layer: String, weights: usize, channels: usize },
    #[error("metric configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "SSIM")]
    Ssim,
    #[serde(rename = "MSSSIM")]
    MsSsim,
    #[serde(rename = "LPIPS")]
    Lpips,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Ssim => "SSIM",
            MetricKind::MsSsim => "MSSSIM",
            MetricKind::Lpips => "LPIPS",
        }
    }

    /// Similarities fall as images diverge; distances rise.
    pub fn higher_is_more_similar(self) -> bool {
        !matches!(self, MetricKind::Lpips)
    }

    /// Value on identical inputs.
    pub fn identity_value(self) -> f64 {
        if self.higher_is_more_similar() {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace(['-', '_'], "").as_str() {
            "SSIM" => Ok(MetricKind::Ssim),
            "MSSSIM" => Ok(MetricKind::MsSsim),
            "LPIPS" => Ok(MetricKind::Lpips),
            _ => Err(format!("unknown metric {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub value: f64,
}

/// One configured metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum MetricSpec {
    #[serde(rename = "SSIM")]
    Ssim,
    #[serde(rename = "MSSSIM")]
    MsSsim,
    #[serde(rename = "LPIPS")]
    Lpips { net: FeatureNetSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsConfig {
    pub metrics: Vec<MetricSpec>,
    #[serde(default)]
    pub ssim: SsimParams,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { metrics: vec![MetricSpec::Ssim, MetricSpec::MsSsim], ssim: SsimParams::default() }
    }
}

enum Loaded {
    Ssim,
    MsSsim,
    Lpips(Arc<FeatureNet>),
}

/// Configured metrics with feature networks loaded once.
pub struct MetricSuite {
    members: Vec<Loaded>,
    ssim: SsimParams,
}

/// Per-reference cache so the starting image's features are computed once per chain.
pub struct Reference<'a> {
    image: &'a ImageBuffer,
    features: Vec<Option<Features>>,
}

/// Versions recorded alongside results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricVersions {
    pub ssim: SsimParams,
    pub ssim_input: String,
    pub lpips: Vec<LpipsVersion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LpipsVersion {
    pub variant: String,
    pub layers: Vec<String>,
    pub calibration_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

impl MetricSuite {
    /// Loads every configured network; relative model paths resolve against `base`.
    pub fn load(config: &MetricsConfig, base: &Path) -> Result<Self, MetricError> {
        if config.metrics.is_empty() {
            return Err(MetricError::Config("at least one metric must be configured".into()));
        }
        config.ssim.validate()?;
        let mut members = Vec::with_capacity(config.metrics.len());
        for spec in &config.metrics {
            members.push(match spec {
                MetricSpec::Ssim => Loaded::Ssim,
                MetricSpec::MsSsim => Loaded::MsSsim,
                MetricSpec::Lpips { net } => Loaded::Lpips(Arc::new(FeatureNet::load(&net.resolved(base))?)),
            });
        }
        Ok(Self { members, ssim: config.ssim.clone() })
    }

    pub fn versions(&self) -> MetricVersions {
        MetricVersions {
            ssim: self.ssim.clone(),
            ssim_input: "BT.601 luma".into(),
            lpips: self
                .members
                .iter()
                .filter_map(|m| match m {
                    Loaded::Lpips(net) => Some(LpipsVersion {
                        variant: net.name().into(),
                        layers: net.spec().layers.clone(),
                        calibration_version: net.calibration_version().into(),
                        sha256: net.spec().sha256.clone(),
                    }),
                    _ => None,
                })
                .collect(),
        }
    }

    pub fn reference<'a>(&self, original: &'a ImageBuffer) -> Result<Reference<'a>, MetricError> {
        let features = self
            .members
            .iter()
            .map(|m| match m {
                Loaded::Lpips(net) => net.features(original).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_, _>>()?;
        Ok(Reference { image: original, features })
    }

    /// One result per configured metric, always measured against the reference.
    pub fn compare(&self, reference: &Reference<'_>, candidate: &ImageBuffer) -> Result<Vec<MetricResult>, MetricError> {
        self.members
            .iter()
            .zip(&reference.features)
            .map(|(m, cached)| {
                Ok(match m {
                    Loaded::Ssim => MetricResult {
                        metric: MetricKind::Ssim,
                        variant: None,
                        value: ssim(reference.image, candidate, &self.ssim)?,
                    },
                    Loaded::MsSsim => MetricResult {
                        metric: MetricKind::MsSsim,
                        variant: None,
                        value: ms_ssim(reference.image, candidate, &self.ssim)?,
                    },
                    Loaded::Lpips(net) => {
                        if reference.image.dimensions() != candidate.dimensions() {
                            return Err(MetricError::DimensionMismatch(format!(
                                "{:?} vs {:?}",
                                reference.image.dimensions(),
                                candidate.dimensions()
                            )));
                        }
                        let fa = cached.as_ref().expect("reference features computed for every LPIPS member");
                        let value = if std::ptr::eq(reference.image, candidate) || reference.image == candidate {
                            net.distance(fa, fa)
                        } else {
                            net.distance(fa, &net.features(candidate)?)
                        };
                        MetricResult { metric: MetricKind::Lpips, variant: Some(net.name().into()), value }
                    }
                })
            })
            .collect()
    }

    pub fn evaluate(&self, original: &ImageBuffer, candidate: &ImageBuffer) -> Result<Vec<MetricResult>, MetricError> {
        self.compare(&self.reference(original)?, candidate)
    }
}

/// Convenience wrapper over [`MetricSuite`].
pub fn metric_suite(
    original: &ImageBuffer,
    candidate: &ImageBuffer,
    config: &MetricsConfig,
    base: &Path,
) -> Result<Vec<MetricResult>, MetricError> {
    MetricSuite::load(config, base)?.evaluate(original, candidate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ssim_only_suite_on_identical_pair() {
        let img = ImageBuffer::from_fn(32, 32, |x, y| [x as u8 * 8, y as u8 * 8, 0]);
        let cfg = MetricsConfig { metrics: vec![MetricSpec::Ssim], ssim: SsimParams::default() };
        let r = metric_suite(&img, &img, &cfg, Path::new(".")).unwrap();
        assert_eq!(r, vec![MetricResult { metric: MetricKind::Ssim, variant: None, value: 1.0 }]);
    }

    #[test]
    fn empty_suite_is_a_config_error() {
        let cfg = MetricsConfig { metrics: vec![], ssim: SsimParams::default() };
        assert!(matches!(MetricSuite::load(&cfg, Path::new(".")), Err(MetricError::Config(_))));
    }

    #[test]
    fn metric_spec_json() {
        let cfg: MetricsConfig = serde_json::from_str(r#"{"metrics":[{"kind":"SSIM"},{"kind":"MSSSIM"}]}"#).unwrap();
        assert_eq!(cfg, MetricsConfig::default());
        assert_eq!("ms-ssim".parse::<MetricKind>().unwrap(), MetricKind::MsSsim);
        assert_eq!(MetricKind::Lpips.identity_value(), 0.0);
    }
}
