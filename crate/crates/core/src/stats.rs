//! Confidence intervals, grouped summaries, scatter exports, degradation
//! flags and their CSV/JSON emission.
//!
//! Intervals are Student-t: `mean ± t(n-1, 1-(1-level)/2) · s/√n` with the
//! sample standard deviation `s`. A single sample collapses to a point.
//! Values are sorted before summation so results do not depend on input
//! order. CSV files use LF line endings, `.` decimals and the shortest
//! decimal that round-trips each float.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::image::ChannelAblation;
use crate::metrics::MetricKind;
use crate::runner::Trajectory;
use crate::SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no values to summarize")]
    Empty,
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("confidence level must be in (0, 1), got {0}")]
    Level(f64),
    #[error("trajectories do not share a checkpoint grid: {0}")]
    MixedGrids(String),
    #[error("metric {0} is absent from trajectory {1}")]
    MetricAbsent(String, String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

pub const CI_METHOD: &str = "Student-t, two-sided";

/// Sample statistics of one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MeanCi {
    pub n: usize,
    pub mean: f64,
    /// Sample (n-1) standard deviation; 0 for a single value.
    pub stddev: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
}

/// Two-sided Student-t critical value for `df` degrees of freedom.
pub fn t_critical(df: usize, level: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    dist.inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

pub fn mean_ci(values: &[f64], level: f64) -> Result<MeanCi, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::Level(level));
    }
    if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite(bad));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(MeanCi { n, mean, stddev: 0.0, ci_low: mean, ci_high: mean, level });
    }
    let ss: f64 = sorted.iter().map(|v| (v - mean) * (v - mean)).sum();
    let stddev = (ss / (n - 1) as f64).sqrt();
    let half = t_critical(n - 1, level) * stddev / (n as f64).sqrt();
    Ok(MeanCi { n, mean, stddev, ci_low: mean - half, ci_high: mean + half, level })
}

/// Dimensions a summary can be split by, besides metric, variant and fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum GroupKey {
    MaskSize,
    GroupTag,
    Ablation,
}

impl GroupKey {
    /// Mask size and ablation: the split every report starts from.
    pub const DEFAULT: [GroupKey; 2] = [GroupKey::MaskSize, GroupKey::Ablation];
}

impl std::str::FromStr for GroupKey {
    type Err = String;

    /// `style` and `category` both name the manifest's group tag.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "masksize" | "mask" => Ok(GroupKey::MaskSize),
            "style" | "category" | "group" | "grouptag" => Ok(GroupKey::GroupTag),
            "ablation" => Ok(GroupKey::Ablation),
            _ => Err(format!("unknown grouping {s:?} (expected style, category or ablation)")),
        }
    }
}

/// One row of `summary.csv`. `None` in a key column means the dimension was
/// collapsed (written as `*`); `variant` is `None` for metrics without one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StatsSummary {
    pub metric: MetricKind,
    pub variant: Option<String>,
    pub mask_size: Option<u32>,
    pub group_tag: Option<String>,
    pub ablation: Option<ChannelAblation>,
    pub fraction: f64,
    #[serde(flatten)]
    pub stats: MeanCi,
}

type Key = (MetricKind, Option<String>, Option<u32>, Option<String>, Option<ChannelAblation>, usize);

/// The fraction grid shared by all `trajectories`.
pub fn shared_grid(trajectories: &[Trajectory]) -> Result<Vec<f64>, StatsError> {
    let Some(first) = trajectories.first() else { return Ok(Vec::new()) };
    let grid = first.fractions();
    let odd: Vec<&str> = trajectories
        .iter()
        .filter(|t| t.fractions() != grid)
        .map(|t| t.chain_id.as_str())
        .collect();
    if !odd.is_empty() {
        return Err(StatsError::MixedGrids(format!(
            "{} differ from {} ({:?})",
            odd.join(", "),
            first.chain_id,
            grid
        )));
    }
    Ok(grid)
}

/// One summary per metric, variant, requested key combination and checkpoint fraction, sorted by key.
pub fn aggregate(trajectories: &[Trajectory], keys: &[GroupKey], level: f64) -> Result<Vec<StatsSummary>, StatsError> {
    let grid = shared_grid(trajectories)?;
    let mut groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for t in trajectories {
        for (k, ck) in t.checkpoints.iter().enumerate() {
            for m in &ck.metrics {
                let key = (
                    m.metric,
                    m.variant.clone(),
                    keys.contains(&GroupKey::MaskSize).then_some(t.mask_size),
                    keys.contains(&GroupKey::GroupTag).then(|| t.group_tag.clone()),
                    keys.contains(&GroupKey::Ablation).then_some(t.ablation),
                    k,
                );
                groups.entry(key).or_default().push(m.value);
            }
        }
    }
    groups
        .into_iter()
        .map(|((metric, variant, mask_size, group_tag, ablation, k), values)| {
            Ok(StatsSummary {
                metric,
                variant,
                mask_size,
                group_tag,
                ablation,
                fraction: grid[k],
                stats: mean_ci(&values, level)?,
            })
        })
        .collect()
}

/// One row of `scatter.csv`: a raw per-image checkpoint value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScatterRow {
    pub image_id: String,
    pub run_index: u32,
    pub metric: MetricKind,
    pub variant: Option<String>,
    pub mask_size: u32,
    pub ablation: ChannelAblation,
    pub fraction: f64,
    pub value: f64,
}

pub fn scatter_export(trajectories: &[Trajectory]) -> Vec<ScatterRow> {
    trajectories
        .iter()
        .flat_map(|t| {
            t.checkpoints.iter().flat_map(move |ck| {
                ck.metrics.iter().map(move |m| ScatterRow {
                    image_id: t.image_id.clone(),
                    run_index: t.run_index,
                    metric: m.metric,
                    variant: m.variant.clone(),
                    mask_size: t.mask_size,
                    ablation: t.ablation,
                    fraction: ck.fraction,
                    value: m.value,
                })
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DegradationFlag {
    pub chain_id: String,
    pub metric: MetricKind,
    pub variant: Option<String>,
    pub threshold: f64,
    /// Whether the final checkpoint is past the threshold.
    pub flagged: bool,
    /// Earliest checkpoint fraction past the threshold.
    pub first_crossing: Option<f64>,
    pub final_value: f64,
}

/// Distances cross when above `threshold`, similarities when below it.
pub fn flag_degradation(
    t: &Trajectory,
    metric: MetricKind,
    variant: Option<&str>,
    threshold: f64,
) -> Result<DegradationFlag, StatsError> {
    let crosses = |v: f64| if metric.higher_is_more_similar() { v < threshold } else { v > threshold };
    let series: Vec<(f64, f64)> = t
        .checkpoints
        .iter()
        .filter_map(|ck| {
            ck.metrics
                .iter()
                .find(|m| m.metric == metric && m.variant.as_deref() == variant)
                .map(|m| (ck.fraction, m.value))
        })
        .collect();
    let Some(&(_, final_value)) = series.last() else {
        let name = match variant {
            Some(v) => format!("{metric}/{v}"),
            None => metric.to_string(),
        };
        return Err(StatsError::MetricAbsent(name, t.chain_id.clone()));
    };
    Ok(DegradationFlag {
        chain_id: t.chain_id.clone(),
        metric,
        variant: variant.map(str::to_string),
        threshold,
        flagged: crosses(final_value),
        first_crossing: series.iter().find(|(_, v)| crosses(*v)).map(|(f, _)| *f),
        final_value,
    })
}

// ---------------------------------------------------------------------------
// Emission

pub const SUMMARY_COLUMNS: [&str; 11] =
    ["metric", "variant", "maskSize", "groupTag", "ablation", "fraction", "n", "mean", "stddev", "ciLow", "ciHigh"];
pub const SCATTER_COLUMNS: [&str; 8] =
    ["imageId", "runIndex", "metric", "variant", "maskSize", "ablation", "fraction", "value"];
pub const FLAG_COLUMNS: [&str; 7] =
    ["chainId", "metric", "variant", "threshold", "flagged", "firstCrossing", "finalValue"];

/// Shortest decimal that parses back to the same float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn collapsed<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "*".to_string(), T::to_string)
}

fn csv_bytes<const N: usize>(header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn summary_csv(rows: &[StatsSummary]) -> Vec<u8> {
    csv_bytes(
        SUMMARY_COLUMNS,
        rows.iter().map(|r| {
            [
                r.metric.to_string(),
                r.variant.clone().unwrap_or_default(),
                collapsed(&r.mask_size),
                collapsed(&r.group_tag),
                collapsed(&r.ablation),
                fmt_f64(r.fraction),
                r.stats.n.to_string(),
                fmt_f64(r.stats.mean),
                fmt_f64(r.stats.stddev),
                fmt_f64(r.stats.ci_low),
                fmt_f64(r.stats.ci_high),
            ]
        }),
    )
}

pub fn scatter_csv(rows: &[ScatterRow]) -> Vec<u8> {
    csv_bytes(
        SCATTER_COLUMNS,
        rows.iter().map(|r| {
            [
                r.image_id.clone(),
                r.run_index.to_string(),
                r.metric.to_string(),
                r.variant.clone().unwrap_or_default(),
                r.mask_size.to_string(),
                r.ablation.to_string(),
                fmt_f64(r.fraction),
                fmt_f64(r.value),
            ]
        }),
    )
}

pub fn flags_csv(rows: &[DegradationFlag]) -> Vec<u8> {
    csv_bytes(
        FLAG_COLUMNS,
        rows.iter().map(|r| {
            [
                r.chain_id.clone(),
                r.metric.to_string(),
                r.variant.clone().unwrap_or_default(),
                fmt_f64(r.threshold),
                r.flagged.to_string(),
                r.first_crossing.map(fmt_f64).unwrap_or_default(),
                fmt_f64(r.final_value),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SummaryDocument {
    pub schema_version: u32,
    pub ci_method: String,
    pub level: f64,
    pub group_by: Vec<GroupKey>,
    pub rows: Vec<StatsSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScatterDocument {
    pub schema_version: u32,
    pub rows: Vec<ScatterRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FlagDocument {
    pub schema_version: u32,
    pub rows: Vec<DegradationFlag>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), StatsError> {
    std::fs::write(path, bytes).map_err(|e| StatsError::Io { path: path.display().to_string(), reason: e.to_string() })
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

pub fn emit_summary(rows: &[StatsSummary], keys: &[GroupKey], level: f64, dir: &Path) -> Result<(), StatsError> {
    write(&dir.join("summary.csv"), &summary_csv(rows))?;
    let doc = SummaryDocument {
        schema_version: SCHEMA_VERSION,
        ci_method: CI_METHOD.into(),
        level,
        group_by: keys.to_vec(),
        rows: rows.to_vec(),
    };
    write(&dir.join("summary.json"), &json(&doc))
}

pub fn emit_scatter(rows: &[ScatterRow], dir: &Path) -> Result<(), StatsError> {
    write(&dir.join("scatter.csv"), &scatter_csv(rows))?;
    write(&dir.join("scatter.json"), &json(&ScatterDocument { schema_version: SCHEMA_VERSION, rows: rows.to_vec() }))
}

pub fn emit_flags(rows: &[DegradationFlag], dir: &Path) -> Result<(), StatsError> {
    write(&dir.join("flags.csv"), &flags_csv(rows))?;
    write(&dir.join("flags.json"), &json(&FlagDocument { schema_version: SCHEMA_VERSION, rows: rows.to_vec() }))
}

/// A degradation threshold requested for a report.
#[derive(Debug, Clone, PartialEq)]
pub struct FlagRule {
    pub metric: MetricKind,
    pub variant: Option<String>,
    pub threshold: f64,
}

impl std::str::FromStr for FlagRule {
    type Err = String;

    /// `METRIC[:variant]=threshold`, e.g. `LPIPS:vgg=0.4` or `SSIM=0.5`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lhs, t) = s.split_once('=').ok_or_else(|| format!("flag rule {s:?} is not METRIC[:variant]=threshold"))?;
        let threshold: f64 = t.trim().parse().map_err(|e| format!("threshold {t:?}: {e}"))?;
        let (metric, variant) = match lhs.split_once(':') {
            Some((m, v)) => (m, Some(v.trim().to_string())),
            None => (lhs, None),
        };
        Ok(Self { metric: metric.trim().parse()?, variant, threshold })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportOutcome {
    pub used: usize,
    pub skipped_incomplete: Vec<String>,
    pub summary_rows: usize,
    pub scatter_rows: usize,
}

/// Writes summary, scatter and (when rules are given) flag tables for the
/// complete trajectories; incomplete ones are listed in the outcome.
pub fn write_report(
    trajectories: &[Trajectory],
    keys: &[GroupKey],
    rules: &[FlagRule],
    out: &Path,
) -> Result<ReportOutcome, StatsError> {
    let mut complete: Vec<Trajectory> = trajectories.iter().filter(|t| t.is_complete()).cloned().collect();
    complete.sort_by(|a, b| a.chain_id.cmp(&b.chain_id));
    let skipped: Vec<String> =
        trajectories.iter().filter(|t| !t.is_complete()).map(|t| t.chain_id.clone()).collect();
    std::fs::create_dir_all(out).map_err(|e| StatsError::Io { path: out.display().to_string(), reason: e.to_string() })?;
    let level = 0.95;
    let summary = aggregate(&complete, keys, level)?;
    emit_summary(&summary, keys, level, out)?;
    let scatter = scatter_export(&complete);
    emit_scatter(&scatter, out)?;
    if !rules.is_empty() {
        let flags = rules
            .iter()
            .flat_map(|r| complete.iter().map(move |t| flag_degradation(t, r.metric, r.variant.as_deref(), r.threshold)))
            .collect::<Result<Vec<_>, _>>()?;
        emit_flags(&flags, out)?;
    }
    Ok(ReportOutcome {
        used: complete.len(),
        skipped_incomplete: skipped,
        summary_rows: summary.len(),
        scatter_rows: scatter.len(),
    })
}
