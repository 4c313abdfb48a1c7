//! RIP chains, experiments over a dataset manifest, run directories and resume.
//!
//! Run directory layout:
//!
//! ```text
//! <outputDir>/manifest.json                 config, dataset, seeds, backend and metric versions
//! <outputDir>/trajectories/<chainId>.json   one per chain, rewritten after every checkpoint
//! <outputDir>/images/<chainId>/ckpt_<pct>.png
//! <outputDir>/run_log.jsonl                 load failures, aborts, retries
//! ```
//!
//! `chainId` is `<imageId>__<ablation>__m<maskSize>__r<runIndex>`, with
//! characters outside `[A-Za-z0-9._-]` in the image id replaced by `_`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendDescriptor, BackendError, BackendIdentity, InpaintBackend, InpaintRequest, Inpainted};
use crate::image::{ablate, composite, letterbox, load_image, save_image, ChannelAblation, ContentRect, ImageBuffer};
use crate::mask::{
    checkpoint_iterations, derive_chain_seed, fraction_from_f64, fraction_to_f64, inpaint_fraction, render_mask,
    Fraction, GridSpec, MaskSchedule, SEED_SCHEME,
};
use crate::metrics::{MetricResult, MetricSpec, MetricSuite, MetricVersions, MetricsConfig};
use crate::{par, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset manifest error: {0}")]
    Manifest(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("run directory {path} is unusable: {reason}")]
    CorruptRun { path: String, reason: String },
}

fn io_err(path: &Path, e: impl ToString) -> RunError {
    RunError::Io { path: path.display().to_string(), reason: e.to_string() }
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub manifest_path: PathBuf,
    #[serde(default = "default_mask_sizes")]
    pub mask_sizes: Vec<u32>,
    #[serde(default = "default_total")]
    pub total_fraction: f64,
    #[serde(default = "default_step")]
    pub step_fraction: f64,
    #[serde(default = "one")]
    pub runs_per_image: u32,
    #[serde(default)]
    pub master_seed: u64,
    pub backend: BackendDescriptor,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default = "default_ablations")]
    pub ablations: Vec<ChannelAblation>,
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub save_checkpoint_images: bool,
    #[serde(default = "default_image_size")]
    pub image_size: u32,
    #[serde(default)]
    pub letterbox_fill: [u8; 3],
    /// Concurrent chains; absent means one per core.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_mask_sizes() -> Vec<u32> {
    vec![64, 128, 256]
}
fn default_total() -> f64 {
    4.0
}
fn default_step() -> f64 {
    0.5
}
fn one() -> u32 {
    1
}
fn yes() -> bool {
    true
}
fn default_ablations() -> Vec<ChannelAblation> {
    vec![ChannelAblation::None]
}
fn default_image_size() -> u32 {
    crate::image::WORKING_SIZE
}

/// Keys accepted by [`apply_override`]; dotted keys address nested objects.
pub const OVERRIDABLE_KEYS: &[&str] = &[
    "manifestPath",
    "maskSizes",
    "totalFraction",
    "stepFraction",
    "runsPerImage",
    "masterSeed",
    "ablations",
    "outputDir",
    "saveCheckpointImages",
    "imageSize",
    "letterboxFill",
    "workers",
    "metrics",
    "backend",
    "backend.kind",
    "backend.endpoint",
    "backend.timeoutSecs",
    "backend.maxInFlight",
    "backend.gray",
    "backend.solver",
    "backend.tol",
    "backend.maxIters",
    "backend.omega",
];

/// Applies `key=value` to a config document. The value is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), RunError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| RunError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    if !OVERRIDABLE_KEYS.contains(&key) {
        return Err(RunError::Config(format!(
            "unknown override key {key:?}; accepted keys: {}",
            OVERRIDABLE_KEYS.join(", ")
        )));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut target = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = target
            .as_object_mut()
            .ok_or_else(|| RunError::Config(format!("cannot set {key}: parent is not an object")))?;
        target = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = target
        .as_object_mut()
        .ok_or_else(|| RunError::Config(format!("cannot set {key}: parent is not an object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// The raw JSON of a config file, before overrides and validation.
pub fn read_document(path: &Path) -> Result<Value, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
}

/// Directory that relative paths in the config at `path` are resolved against.
pub fn config_base(path: &Path) -> PathBuf {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf()
}

impl ExperimentConfig {
    /// Parses a config document, resolving relative paths against `base`.
    pub fn from_value(doc: Value, base: &Path) -> Result<Self, RunError> {
        let mut cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a JSON config file and applies `overrides` before validation.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, RunError> {
        let mut doc = read_document(path)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_value(doc, &config_base(path))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.manifest_path = abs(&self.manifest_path);
        self.output_dir = abs(&self.output_dir);
        for m in &mut self.metrics.metrics {
            if let MetricSpec::Lpips { net } = m {
                *net = net.resolved(base);
            }
        }
    }

    pub fn step(&self) -> Result<Fraction, RunError> {
        fraction_from_f64(self.step_fraction).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn total(&self) -> Result<Fraction, RunError> {
        fraction_from_f64(self.total_fraction).map_err(|e| RunError::Config(e.to_string()))
    }

    /// Checkpoint iterations per mask size.
    pub fn schedule(&self) -> Result<BTreeMap<u32, Vec<u32>>, RunError> {
        let (step, total) = (self.step()?, self.total()?);
        self.mask_sizes
            .iter()
            .map(|&m| {
                checkpoint_iterations(step, total, m, self.image_size)
                    .map(|c| (m, c))
                    .map_err(|e| RunError::Config(e.to_string()))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(RunError::Config(format!(
                "unsupported schemaVersion {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.mask_sizes.is_empty() {
            return Err(RunError::Config("maskSizes is empty".into()));
        }
        if self.runs_per_image == 0 {
            return Err(RunError::Config("runsPerImage must be at least 1".into()));
        }
        if self.ablations.is_empty() {
            return Err(RunError::Config("ablations is empty (use [\"None\"])".into()));
        }
        let distinct: BTreeSet<_> = self.ablations.iter().collect();
        if distinct.len() != self.ablations.len() {
            return Err(RunError::Config("ablations contains duplicates".into()));
        }
        let distinct: BTreeSet<_> = self.mask_sizes.iter().collect();
        if distinct.len() != self.mask_sizes.len() {
            return Err(RunError::Config("maskSizes contains duplicates".into()));
        }
        if self.metrics.metrics.is_empty() {
            return Err(RunError::Config("at least one metric must be configured".into()));
        }
        self.metrics.ssim.validate().map_err(|e| RunError::Config(e.to_string()))?;
        self.backend.validate().map_err(|e| RunError::Config(e.to_string()))?;
        self.schedule()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dataset manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Art,
    Photo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub group_tag: String,
    pub source_tag: SourceTag,
    #[serde(default)]
    pub license_restricted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Reads and validates a manifest; entry paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(|e| RunError::Manifest(format!("{}: {e}", path.display())))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| RunError::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let mut seen = BTreeMap::new();
        for e in &self.entries {
            if e.id.is_empty() {
                return Err(RunError::Manifest("entry with empty id".into()));
            }
            if let Some(prev) = seen.insert(sanitize_id(&e.id), &e.id) {
                return Err(RunError::Manifest(format!("duplicate id {:?} (clashes with {prev:?})", e.id)));
            }
            if e.group_tag.trim().is_empty() {
                return Err(RunError::Manifest(format!("entry {:?} has an empty groupTag", e.id)));
            }
            if !e.path.exists() {
                return Err(RunError::Manifest(format!("entry {:?}: {} does not exist", e.id, e.path.display())));
            }
        }
        Ok(())
    }
}

/// Maps characters outside `[A-Za-z0-9._-]` to `_`.
pub fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect()
}

// ---------------------------------------------------------------------------
// Trajectories

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "state")]
pub enum TrajectoryStatus {
    Complete,
    Aborted { reason: String },
    /// Written while the chain runs; a file left in this state was interrupted.
    InProgress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Checkpoint {
    pub fraction: f64,
    pub iteration: u32,
    pub metrics: Vec<MetricResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Trajectory {
    pub schema_version: u32,
    pub chain_id: String,
    pub image_id: String,
    pub group_tag: String,
    pub source_tag: SourceTag,
    pub ablation: ChannelAblation,
    pub mask_size: u32,
    pub image_size: u32,
    pub run_index: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_rect: Option<ContentRect>,
    pub checkpoints: Vec<Checkpoint>,
    /// Drawn cell indices, one per iteration.
    pub masks: Vec<u32>,
    pub backend_calls: u32,
    pub retries: u32,
    pub status: TrajectoryStatus,
}

impl Trajectory {
    pub fn is_complete(&self) -> bool {
        self.status == TrajectoryStatus::Complete
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.checkpoints.iter().map(|c| c.fraction).collect()
    }
}

/// Identity of one chain within an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChainSpec {
    pub chain_id: String,
    pub image_id: String,
    pub group_tag: String,
    pub source_tag: SourceTag,
    pub ablation: ChannelAblation,
    pub mask_size: u32,
    pub run_index: u32,
    pub seed: u64,
}

impl ChainSpec {
    pub fn new(entry: &ManifestEntry, ablation: ChannelAblation, mask_size: u32, run_index: u32, master: u64) -> Self {
        Self {
            chain_id: format!("{}__{}__m{mask_size}__r{run_index}", sanitize_id(&entry.id), ablation.as_str()),
            image_id: entry.id.clone(),
            group_tag: entry.group_tag.clone(),
            source_tag: entry.source_tag,
            ablation,
            mask_size,
            run_index,
            seed: derive_chain_seed(master, &entry.id, mask_size, run_index),
        }
    }

    fn empty_trajectory(&self, image_size: u32, content_rect: Option<ContentRect>) -> Trajectory {
        Trajectory {
            schema_version: SCHEMA_VERSION,
            chain_id: self.chain_id.clone(),
            image_id: self.image_id.clone(),
            group_tag: self.group_tag.clone(),
            source_tag: self.source_tag,
            ablation: self.ablation,
            mask_size: self.mask_size,
            image_size,
            run_index: self.run_index,
            seed: self.seed,
            content_rect,
            checkpoints: Vec::new(),
            masks: Vec::new(),
            backend_calls: 0,
            retries: 0,
            status: TrajectoryStatus::InProgress,
        }
    }
}

/// Seed sent with iteration `i` (1-based) of a chain: SplitMix64 of
/// `chain_seed + i`, shifted right by one so it fits a signed 64-bit integer.
pub fn iteration_seed(chain_seed: u64, iteration: u32) -> u64 {
    let mut z = chain_seed.wrapping_add(iteration as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) >> 1
}

pub const ITERATION_SEED_SCHEME: &str =
    "iteration seed = SplitMix64(chainSeed + iteration) >> 1, iteration 1-based";

/// Receives the trajectory after every checkpoint together with the image at that checkpoint.
pub type CheckpointSink<'a> = dyn FnMut(&Trajectory, &ImageBuffer) -> Result<(), String> + 'a;

/// Runs one chain on an already normalized starting image.
///
/// `checkpoints` are the iterations at which metrics are taken; a fraction-0
/// row comparing the original with itself always comes first. Backend,
/// metric and sink failures end the chain with an aborted status and keep
/// the checkpoints reached so far.
#[allow(clippy::too_many_arguments)]
pub fn run_rip_chain(
    original: &ImageBuffer,
    chain: &ChainSpec,
    content_rect: Option<ContentRect>,
    checkpoints: &[u32],
    backend: &dyn InpaintBackend,
    suite: &MetricSuite,
    sink: &mut CheckpointSink<'_>,
) -> Trajectory {
    let image_size = original.width();
    let mut traj = chain.empty_trajectory(image_size, content_rect);
    let abort = |mut t: Trajectory, reason: String| {
        log::warn!("chain {} aborted: {reason}", t.chain_id);
        t.status = TrajectoryStatus::Aborted { reason };
        t
    };
    if original.width() != original.height() {
        return abort(traj, format!("starting image is {:?}, not square", original.dimensions()));
    }
    let grid = match GridSpec::new(image_size, chain.mask_size) {
        Ok(g) => g,
        Err(e) => return abort(traj, e.to_string()),
    };
    let reference = match suite.reference(original) {
        Ok(r) => r,
        Err(e) => return abort(traj, format!("metrics: {e}")),
    };
    let mut record = |traj: &mut Trajectory, iteration: u32, image: &ImageBuffer| -> Result<(), String> {
        let metrics = suite.compare(&reference, image).map_err(|e| format!("metrics: {e}"))?;
        let fraction: Fraction = inpaint_fraction(iteration, chain.mask_size, image_size);
        traj.checkpoints.push(Checkpoint { fraction: fraction_to_f64(fraction), iteration, metrics, image: None });
        sink(traj, image)
    };
    if let Err(reason) = record(&mut traj, 0, original) {
        return abort(traj, reason);
    }

    let mut schedule = MaskSchedule::new(chain.seed, grid);
    let mut current = original.clone();
    let last = checkpoints.last().copied().unwrap_or(0);
    let mut next_ckpt = checkpoints.iter().copied().peekable();
    for iteration in 1..=last {
        let sel = schedule.next_mask();
        traj.masks.push(sel.cell_index);
        let mask = render_mask(&sel, &grid);
        let result = InpaintRequest::new(&current, &mask, Some(iteration_seed(chain.seed, iteration)))
            .and_then(|req| backend.inpaint(&req));
        match result {
            Ok(Inpainted { image, attempts }) => {
                traj.backend_calls += 1;
                traj.retries += attempts.saturating_sub(1);
                current = match composite(&current, &image, &mask) {
                    Ok(c) => c,
                    Err(e) => return abort(traj, format!("iteration {iteration}: {e}")),
                };
            }
            Err(e) => return abort(traj, format!("iteration {iteration}: {e}")),
        }
        if next_ckpt.peek() == Some(&iteration) {
            next_ckpt.next();
            if let Err(reason) = record(&mut traj, iteration, &current) {
                return abort(traj, reason);
            }
        }
    }
    traj.status = TrajectoryStatus::Complete;
    traj
}

/// The configured variants of a normalized image, each the starting image of its own chains.
pub fn ablation_expand(img: &ImageBuffer, ablations: &[ChannelAblation]) -> Vec<(ChannelAblation, ImageBuffer)> {
    ablations.iter().map(|&a| (a, ablate(img, a))).collect()
}

/// Loads, letterboxes and ablates one manifest entry.
pub fn prepare_image(
    entry: &ManifestEntry,
    ablation: ChannelAblation,
    image_size: u32,
    fill: [u8; 3],
) -> Result<(ImageBuffer, ContentRect), crate::image::ImageError> {
    let lb = letterbox(&load_image(&entry.path)?, image_size, fill);
    Ok((ablate(&lb.image, ablation), lb.content))
}

// ---------------------------------------------------------------------------
// Run directory

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LetterboxInfo {
    pub fill: [u8; 3],
    pub filter: String,
    pub odd_remainder: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EnvironmentInfo {
    pub harness_version: String,
    pub parallel: bool,
    pub os: String,
    pub arch: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunManifest {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub dataset: DatasetManifest,
    pub seed_scheme: String,
    pub iteration_seed_scheme: String,
    pub checkpoint_iterations: BTreeMap<u32, Vec<u32>>,
    pub chains: Vec<ChainSpec>,
    pub backend: BackendIdentity,
    pub metrics: MetricVersions,
    pub letterbox: LetterboxInfo,
    pub environment: EnvironmentInfo,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self, RunError> {
        let path = run_dir.join("manifest.json");
        let corrupt = |reason: String| RunError::CorruptRun { path: run_dir.display().to_string(), reason };
        let text = fs::read_to_string(&path).map_err(|e| corrupt(format!("cannot read manifest.json: {e}")))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| corrupt(format!("manifest.json: {e}")))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(corrupt(format!("manifest schemaVersion {} is not {SCHEMA_VERSION}", m.schema_version)));
        }
        m.config.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(m)
    }
}

/// Outcome of [`run_experiment`] or [`resume`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub chains: usize,
    /// Chains executed by this invocation.
    pub executed: usize,
    pub complete: usize,
    pub aborted: Vec<String>,
}

impl RunSummary {
    pub fn all_complete(&self) -> bool {
        self.aborted.is_empty()
    }
}

struct RunLog(Mutex<fs::File>);

impl RunLog {
    fn open(path: &Path) -> Result<Self, RunError> {
        let f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
        Ok(Self(Mutex::new(f)))
    }

    fn event(&self, v: Value) {
        let mut f = self.0.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = writeln!(f, "{v}") {
            log::error!("cannot write run log: {e}");
        }
    }
}

/// Stands in for a backend that failed its health probe, so every chain
/// aborts immediately and is persisted.
struct Unavailable {
    reason: String,
    identity: BackendIdentity,
}

impl InpaintBackend for Unavailable {
    fn inpaint(&self, _: &InpaintRequest<'_>) -> Result<Inpainted, BackendError> {
        Err(BackendError::Unreachable(self.reason.clone()))
    }

    fn identity(&self) -> BackendIdentity {
        self.identity.clone()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), String> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| format!("{}: {e}", tmp.display()))?;
    fs::rename(&tmp, path).map_err(|e| format!("{}: {e}", path.display()))
}

fn to_json(v: &impl Serialize) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("serializable");
    bytes.push(b'\n');
    bytes
}

pub fn trajectory_path(run_dir: &Path, chain_id: &str) -> PathBuf {
    run_dir.join("trajectories").join(format!("{chain_id}.json"))
}

/// `ckpt_050.png` for 50%; non-integer percentages become `ckpt_<num>-<den>.png`.
pub fn checkpoint_image_name(fraction: Fraction) -> String {
    let pct = fraction * Fraction::from_integer(100);
    if pct.is_integer() {
        format!("ckpt_{:03}.png", pct.to_integer())
    } else {
        format!("ckpt_{}-{}.png", pct.numer(), pct.denom())
    }
}

/// Reads every trajectory in a run directory, sorted by chain id.
pub fn load_trajectories(run_dir: &Path) -> Result<Vec<Trajectory>, RunError> {
    let dir = run_dir.join("trajectories");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| io_err(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| RunError::CorruptRun {
                path: p.display().to_string(),
                reason: e.to_string(),
            })
        })
        .collect()
}

struct Executor<'a> {
    run_dir: &'a Path,
    manifest: &'a RunManifest,
    entries: BTreeMap<&'a str, &'a ManifestEntry>,
    backend: &'a dyn InpaintBackend,
    suite: &'a MetricSuite,
    log: &'a RunLog,
}

impl Executor<'_> {
    fn run_chain(&self, chain: &ChainSpec) -> Trajectory {
        let cfg = &self.manifest.config;
        let entry = self.entries[chain.image_id.as_str()];
        let out_path = trajectory_path(self.run_dir, &chain.chain_id);
        let (original, content) = match prepare_image(entry, chain.ablation, cfg.image_size, cfg.letterbox_fill) {
            Ok(v) => v,
            Err(e) => {
                let mut t = chain.empty_trajectory(cfg.image_size, None);
                t.status = TrajectoryStatus::Aborted { reason: format!("load failed: {e}") };
                self.log.event(serde_json::json!({"event": "loadFailed", "chainId": chain.chain_id, "imageId": chain.image_id, "reason": e.to_string()}));
                if let Err(e) = write_atomic(&out_path, &to_json(&t)) {
                    log::error!("{e}");
                }
                return t;
            }
        };
        let save_images = cfg.save_checkpoint_images && !entry.license_restricted;
        let image_dir = self.run_dir.join("images").join(&chain.chain_id);
        let mut sink = |t: &Trajectory, img: &ImageBuffer| -> Result<(), String> {
            let mut t = t.clone();
            if save_images {
                let ck = t.checkpoints.last_mut().expect("sink runs after a checkpoint");
                let name = checkpoint_image_name(inpaint_fraction(ck.iteration, chain.mask_size, cfg.image_size));
                fs::create_dir_all(&image_dir).map_err(|e| format!("{}: {e}", image_dir.display()))?;
                save_image(img, &image_dir.join(&name)).map_err(|e| e.to_string())?;
                ck.image = Some(format!("images/{}/{name}", chain.chain_id));
            }
            write_atomic(&out_path, &to_json(&t))
        };
        let checkpoints = &self.manifest.checkpoint_iterations[&chain.mask_size];
        let mut traj = run_rip_chain(&original, chain, Some(content), checkpoints, self.backend, self.suite, &mut sink);
        if save_images {
            for ck in &mut traj.checkpoints {
                let name = checkpoint_image_name(inpaint_fraction(ck.iteration, chain.mask_size, cfg.image_size));
                ck.image = Some(format!("images/{}/{name}", chain.chain_id));
            }
        }
        if traj.retries > 0 {
            self.log.event(serde_json::json!({"event": "retries", "chainId": chain.chain_id, "retries": traj.retries}));
        }
        if let TrajectoryStatus::Aborted { reason } = &traj.status {
            self.log.event(serde_json::json!({"event": "chainAborted", "chainId": chain.chain_id, "reason": reason}));
        }
        if let Err(e) = write_atomic(&out_path, &to_json(&traj)) {
            log::error!("{e}");
            traj.status = TrajectoryStatus::Aborted { reason: e };
        }
        traj
    }
}

fn plan_chains(config: &ExperimentConfig, dataset: &DatasetManifest) -> Vec<ChainSpec> {
    let mut chains = Vec::new();
    for entry in &dataset.entries {
        for &ablation in &config.ablations {
            for &mask in &config.mask_sizes {
                for run in 0..config.runs_per_image {
                    chains.push(ChainSpec::new(entry, ablation, mask, run, config.master_seed));
                }
            }
        }
    }
    chains
}

fn connect(config: &ExperimentConfig) -> Result<Box<dyn InpaintBackend>, RunError> {
    let backend = config.backend.build().map_err(|e| RunError::Config(e.to_string()))?;
    match backend.health() {
        Ok(_) => Ok(Box::new(ArcBackend(backend))),
        Err(e) => {
            log::error!("backend health probe failed: {e}; every chain will be recorded as aborted");
            Ok(Box::new(Unavailable { reason: format!("health probe failed: {e}"), identity: backend.identity() }))
        }
    }
}

struct ArcBackend(std::sync::Arc<dyn InpaintBackend>);

impl InpaintBackend for ArcBackend {
    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<Inpainted, BackendError> {
        self.0.inpaint(req)
    }

    fn identity(&self) -> BackendIdentity {
        self.0.identity()
    }
}

fn execute(
    run_dir: &Path,
    manifest: &RunManifest,
    backend: &dyn InpaintBackend,
    suite: &MetricSuite,
    todo: &[ChainSpec],
) -> Result<Vec<Trajectory>, RunError> {
    for sub in ["trajectories", "images"] {
        let p = run_dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
    }
    let log = RunLog::open(&run_dir.join("run_log.jsonl"))?;
    let exec = Executor {
        run_dir,
        manifest,
        entries: manifest.dataset.entries.iter().map(|e| (e.id.as_str(), e)).collect(),
        backend,
        suite,
        log: &log,
    };
    Ok(par::with_workers(manifest.config.workers, || par::map(todo, |c| exec.run_chain(c))))
}

fn summarize(run_dir: &Path, manifest: &RunManifest, executed: usize) -> Result<RunSummary, RunError> {
    let mut summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        chains: manifest.chains.len(),
        executed,
        ..Default::default()
    };
    for chain in &manifest.chains {
        match read_trajectory(run_dir, &chain.chain_id) {
            Some(t) if t.is_complete() => summary.complete += 1,
            _ => summary.aborted.push(chain.chain_id.clone()),
        }
    }
    Ok(summary)
}

fn read_trajectory(run_dir: &Path, chain_id: &str) -> Option<Trajectory> {
    let text = fs::read_to_string(trajectory_path(run_dir, chain_id)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Runs every (entry, ablation, mask size, run) chain of `config` into `config.outputDir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary, RunError> {
    config.validate()?;
    let dataset = DatasetManifest::load(&config.manifest_path)?;
    let run_dir = &config.output_dir;
    if run_dir.join("manifest.json").exists() {
        return Err(RunError::Config(format!(
            "{} already holds a run; resume it or choose another outputDir",
            run_dir.display()
        )));
    }
    let suite = MetricSuite::load(&config.metrics, Path::new(".")).map_err(|e| RunError::Config(e.to_string()))?;
    let backend = connect(config)?;
    let chains = plan_chains(config, &dataset);
    if chains.is_empty() {
        log::warn!("dataset manifest has no entries; nothing to run");
    }
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        dataset,
        seed_scheme: SEED_SCHEME.into(),
        iteration_seed_scheme: ITERATION_SEED_SCHEME.into(),
        checkpoint_iterations: config.schedule()?,
        chains,
        backend: backend.identity(),
        metrics: suite.versions(),
        letterbox: LetterboxInfo {
            fill: config.letterbox_fill,
            filter: "bilinear (triangle), longer side scaled to imageSize".into(),
            odd_remainder: "right/bottom band".into(),
        },
        environment: EnvironmentInfo {
            harness_version: env!("CARGO_PKG_VERSION").into(),
            parallel: cfg!(feature = "parallel"),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        },
    };
    fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    let path = run_dir.join("manifest.json");
    fs::write(&path, to_json(&manifest)).map_err(|e| io_err(&path, e))?;
    let done = execute(run_dir, &manifest, backend.as_ref(), &suite, &manifest.chains)?;
    summarize(run_dir, &manifest, done.len())
}

/// Re-runs every chain of `run_dir` that is not complete, from scratch and with its original seed.
pub fn resume(run_dir: &Path, workers: Option<usize>) -> Result<RunSummary, RunError> {
    let mut manifest = RunManifest::load(run_dir)?;
    if workers.is_some() {
        manifest.config.workers = workers;
    }
    let todo: Vec<ChainSpec> = manifest
        .chains
        .iter()
        .filter(|c| !read_trajectory(run_dir, &c.chain_id).is_some_and(|t| t.is_complete()))
        .cloned()
        .collect();
    if todo.is_empty() {
        log::info!("all {} chains are complete", manifest.chains.len());
        return summarize(run_dir, &manifest, 0);
    }
    manifest.dataset.validate()?;
    let suite =
        MetricSuite::load(&manifest.config.metrics, Path::new(".")).map_err(|e| RunError::Config(e.to_string()))?;
    let backend = connect(&manifest.config)?;
    log::info!("resuming {} of {} chains", todo.len(), manifest.chains.len());
    for c in &todo {
        let img_dir = run_dir.join("images").join(&c.chain_id);
        if img_dir.exists() {
            fs::remove_dir_all(&img_dir).map_err(|e| io_err(&img_dir, e))?;
        }
    }
    let done = execute(run_dir, &manifest, backend.as_ref(), &suite, &todo)?;
    summarize(run_dir, &manifest, done.len())
}
