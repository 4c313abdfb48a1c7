//! `rip`: command-line front end of the recursive inpainting harness.
//!
//! Exit codes:
//!
//! | code | meaning                                                      |
//! |------|--------------------------------------------------------------|
//! | 0    | success                                                      |
//! | 1    | usage, configuration or I/O error                            |
//! | 2    | run finished but some chains aborted (trajectories persisted) |
//! | 3    | backend unhealthy (`verify-backend`)                         |
//! | 4    | `self-test` found a failing check                            |

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde_json::Value;

use rip_core::backend::{verify, BackendDescriptor};
use rip_core::metrics::FeatureNetSpec;
use rip_core::runner::{
    self, apply_override, config_base, load_trajectories, prepare_image, read_document, sanitize_id, DatasetManifest,
    ExperimentConfig, RunSummary,
};
use rip_core::stats::{write_report, FlagRule, GroupKey};

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_UNHEALTHY: u8 = 3;
const EXIT_SELF_TEST: u8 = 4;

const ENDPOINT_ENV: &str = "RIP_ENDPOINT";

#[derive(Debug, Parser)]
#[command(name = "rip", version, about = "Recursive inpainting measurement harness")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Less log output (repeatable).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    quiet: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every chain of an experiment config into a fresh run directory.
    Run(ConfigArgs),
    /// Re-run the chains of a run directory that are not complete.
    Resume {
        run_dir: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Write summary, scatter and flag tables for a run directory.
    Report {
        run_dir: PathBuf,
        /// Extra grouping beside mask size: style, category or ablation.
        #[arg(long = "group-by", value_delimiter = ',')]
        group_by: Vec<GroupKey>,
        /// Threshold rule METRIC[:variant]=value, e.g. LPIPS:vgg=0.4 (repeatable).
        #[arg(long = "flag")]
        flags: Vec<FlagRule>,
        /// Output directory [default: <run_dir>/report].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the normalized, ablated starting images of a config as PNGs.
    AblatePrepare(ConfigArgs),
    /// Probe a diffusion service and run one inpaint on a test card.
    VerifyBackend {
        /// Service base URL [env: RIP_ENDPOINT].
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 300)]
        timeout_secs: u64,
    },
    /// Offline checks of PRNG, accounting, fillers, metrics and statistics.
    SelfTest {
        /// LPIPS network spec JSON to include (repeatable).
        #[arg(long = "lpips")]
        lpips: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Config override key=value, value parsed as JSON when possible (repeatable).
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Endpoint of a RemoteDiffusion backend; RIP_ENDPOINT fills it in when the config has none.
    #[arg(long)]
    endpoint: Option<String>,
    /// Output directory, replacing the config's outputDir.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: impl ToString) -> Self {
        Self { code: EXIT_CONFIG, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn init_logging(verbose: u8, quiet: u8) {
    let level = match 2 + verbose as i32 - quiet as i32 {
        i32::MIN..=0 => log::LevelFilter::Error,
        1 => log::LevelFilter::Warn,
        2 => log::LevelFilter::Info,
        3 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(args) => {
            let config = load_config(&args)?;
            let summary = runner::run_experiment(&config).map_err(Failure::config)?;
            finish_run(&summary)
        }
        Command::Resume { run_dir, workers } => {
            let summary = runner::resume(&run_dir, workers).map_err(Failure::config)?;
            finish_run(&summary)
        }
        Command::Report { run_dir, group_by, flags, out } => report(&run_dir, &group_by, &flags, out),
        Command::AblatePrepare(args) => ablate_prepare(&args),
        Command::VerifyBackend { endpoint, timeout_secs } => verify_backend(endpoint, timeout_secs),
        Command::SelfTest { lpips } => self_test(&lpips),
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut doc = read_document(&args.config).map_err(Failure::config)?;
    for o in &args.overrides {
        apply_override(&mut doc, o).map_err(Failure::config)?;
    }
    fill_endpoint(&mut doc, args.endpoint.as_deref(), std::env::var(ENDPOINT_ENV).ok().as_deref());
    let mut config = ExperimentConfig::from_value(doc, &config_base(&args.config)).map_err(Failure::config)?;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if args.workers.is_some() {
        config.workers = args.workers;
    }
    Ok(config)
}

/// An explicit `--endpoint` replaces the config's; the environment only fills a missing one.
fn fill_endpoint(doc: &mut Value, flag: Option<&str>, env: Option<&str>) {
    let Some(backend) = doc.get_mut("backend").and_then(Value::as_object_mut) else {
        return;
    };
    if backend.get("kind").and_then(Value::as_str) != Some("RemoteDiffusion") {
        return;
    }
    let missing = backend.get("endpoint").and_then(Value::as_str).is_none_or(|s| s.trim().is_empty());
    if let Some(url) = flag.or(env.filter(|_| missing)) {
        backend.insert("endpoint".into(), Value::String(url.to_string()));
    }
}

fn finish_run(summary: &RunSummary) -> Result<(), Failure> {
    println!(
        "{}: {} chains, {} executed, {} complete, {} aborted",
        summary.run_dir.display(),
        summary.chains,
        summary.executed,
        summary.complete,
        summary.aborted.len()
    );
    if summary.all_complete() {
        return Ok(());
    }
    for id in summary.aborted.iter().take(10) {
        eprintln!("aborted: {id}");
    }
    Err(Failure {
        code: EXIT_PARTIAL,
        message: format!(
            "{} of {} chains aborted; see {}",
            summary.aborted.len(),
            summary.chains,
            summary.run_dir.join("run_log.jsonl").display()
        ),
    })
}

fn report(run_dir: &Path, group_by: &[GroupKey], flags: &[FlagRule], out: Option<PathBuf>) -> Result<(), Failure> {
    if !run_dir.is_dir() {
        return Err(Failure::config(format!("run directory {} does not exist", run_dir.display())));
    }
    let keys: Vec<GroupKey> = if group_by.is_empty() {
        GroupKey::DEFAULT.to_vec()
    } else {
        let mut keys = vec![GroupKey::MaskSize];
        for k in group_by {
            if !keys.contains(k) {
                keys.push(*k);
            }
        }
        keys
    };
    let trajectories = load_trajectories(run_dir).map_err(Failure::config)?;
    let out = out.unwrap_or_else(|| run_dir.join("report"));
    let outcome = write_report(&trajectories, &keys, flags, &out).map_err(Failure::config)?;
    if !outcome.skipped_incomplete.is_empty() {
        log::warn!(
            "{} incomplete chains left out of the report: {}",
            outcome.skipped_incomplete.len(),
            outcome.skipped_incomplete.join(", ")
        );
    }
    println!(
        "{}: {} chains, {} summary rows, {} scatter rows",
        out.display(),
        outcome.used,
        outcome.summary_rows,
        outcome.scatter_rows
    );
    Ok(())
}

fn ablate_prepare(args: &ConfigArgs) -> Result<(), Failure> {
    let config = load_config(args)?;
    let dataset = DatasetManifest::load(&config.manifest_path).map_err(Failure::config)?;
    let out = args.out.clone().unwrap_or_else(|| config.output_dir.join("ablated"));
    std::fs::create_dir_all(&out).map_err(|e| Failure::config(format!("{}: {e}", out.display())))?;
    let mut written = 0;
    for entry in &dataset.entries {
        if entry.license_restricted {
            log::info!("{}: license restricted, not written", entry.id);
            continue;
        }
        for &ablation in &config.ablations {
            let (img, _) = prepare_image(entry, ablation, config.image_size, config.letterbox_fill)
                .map_err(|e| Failure::config(format!("{}: {e}", entry.id)))?;
            let path = out.join(format!("{}__{}.png", sanitize_id(&entry.id), ablation.as_str()));
            rip_core::image::save_image(&img, &path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            written += 1;
        }
    }
    println!("{}: {written} images", out.display());
    Ok(())
}

fn verify_backend(endpoint: Option<String>, timeout_secs: u64) -> Result<(), Failure> {
    let endpoint = endpoint
        .or_else(|| std::env::var(ENDPOINT_ENV).ok())
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| Failure::config(format!("no endpoint: pass --endpoint or set {ENDPOINT_ENV}")))?;
    let BackendDescriptor::RemoteDiffusion { max_in_flight, retry, .. } = BackendDescriptor::remote(&endpoint) else {
        unreachable!()
    };
    let descriptor = BackendDescriptor::RemoteDiffusion { endpoint: endpoint.clone(), timeout_secs, max_in_flight, retry };
    let backend = descriptor.build().map_err(Failure::config)?;
    let unhealthy = |e: rip_core::backend::BackendError| Failure { code: EXIT_UNHEALTHY, message: format!("{endpoint}: {e}") };
    let v = verify(backend.as_ref()).map_err(unhealthy)?;
    let model = v.identity.model.as_deref().unwrap_or("unknown");
    println!("endpoint: {endpoint}");
    println!("model: {model}");
    if let Some(det) = v.identity.deterministic {
        println!("deterministic: {det}");
    }
    println!(
        "inpaint: {} of {} masked pixels changed, none outside the mask ({} attempt{})",
        v.changed_pixels,
        v.masked_pixels,
        v.attempts,
        if v.attempts == 1 { "" } else { "s" }
    );
    Ok(())
}

fn self_test(lpips: &[PathBuf]) -> Result<(), Failure> {
    let mut specs = Vec::new();
    for path in lpips {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let spec: FeatureNetSpec =
            serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        specs.push(spec.resolved(&config_base(path)));
    }
    let outcomes = rip_core::selftest::run(&specs, Path::new("."));
    let mut failed = 0;
    for c in &outcomes {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure { code: EXIT_SELF_TEST, message: format!("{failed} of {} checks failed", outcomes.len()) })
    }
}
