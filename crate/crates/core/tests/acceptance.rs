//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p rip-core --test acceptance [-- <name filter>...]`
//!
//! A criterion whose external prerequisite is missing (the pretrained LPIPS
//! exports) prints FAIL with the reason but only fails the process when
//! `RIP_ACCEPTANCE_STRICT=1`. Every other FAIL exits nonzero.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde_json::{json, Value};

use rip_core::backend::{harmonic_fill, HarmonicParams, HarmonicSolver};
use rip_core::image::load_image;
use rip_core::mask::{checkpoint_iterations, fraction_from_f64, inpaint_fraction, GridSpec, MaskSchedule};
use rip_core::metrics::{ms_ssim, ssim, FeatureNet, FeatureNetSpec, SsimParams};
use rip_core::runner::{load_trajectories, run_experiment, run_rip_chain, ChainSpec, SourceTag, Trajectory};
use rip_core::stats::{mean_ci, t_critical, write_report, GroupKey};
use rip_core::{BackendDescriptor, ChannelAblation, ExperimentConfig, ImageBuffer, MaskRaster, MetricSuite};
use rip_testkit::{synthetic_image, write_dataset};

// Tolerances.
const ACCOUNTING_BUDGET: Duration = Duration::from_millis(1);
const MUTATION_CHAINS: u64 = 200;
const MUTATION_ITERATIONS: u32 = 32;
const MUTATION_CHECK_EVERY: u32 = 8;
const ORACLE_SEEDS: u64 = 50;
const COUPON_SEEDS: u64 = 1000;
const COUPON_TOL: f64 = 1.0;
const SSIM_PAIRS: u64 = 100;
const SSIM_TOL: f64 = 1e-6;
const MS_SSIM_TOL: f64 = 1e-5;
const LPIPS_IDENTITY_TOL: f64 = 1e-6;
const LPIPS_GOLDEN_TOL: f64 = 1e-4;
const T_TOL: f64 = 1e-12;
const RAMP_TOL: f64 = 2.0;
const MAX_PRINCIPLE_CASES: u64 = 100;

/// Two-sided 95% Student-t critical values, computed to 40 digits with mpmath.
#[allow(clippy::excessive_precision)]
const T_TABLE: [(usize, f64); 4] = [
    (1, 12.70620473617470393777667755634994645368),
    (4, 2.776445105197794303552345931044763508779),
    (9, 2.262157162798205508644962330399700978968),
    (29, 2.04522964213270427171419294216269732808),
];

enum Outcome {
    Pass(String),
    Fail(String),
    /// A prerequisite outside the repository is missing.
    Unavailable(String),
}

use Outcome::{Fail, Pass, Unavailable};

type Check = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let strict = std::env::var("RIP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [Check; 9] = [
        ("pixel accounting", accounting),
        ("mask-only mutation", mask_only_mutation),
        ("constant-fill oracle", constant_fill_oracle),
        ("coupon collector", coupon_collector),
        ("SSIM/MS-SSIM oracle", ssim_oracle),
        ("LPIPS conformance", lpips_conformance),
        ("statistics oracle", statistics_oracle),
        ("end-to-end determinism", end_to_end_determinism),
        ("harmonic fill", harmonic_checks),
    ];
    // free arguments select criteria by substring
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = false;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed = true;
                ("FAIL", d)
            }
            Unavailable(d) => {
                failed |= strict;
                ("FAIL", format!("unavailable: {d}"))
            }
        };
        println!("{tag} {name} ({secs:.1}s): {detail}");
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn outcome(r: Result<String, String>) -> Outcome {
    match r {
        Ok(d) => Pass(d),
        Err(d) => Fail(d),
    }
}

fn frac(v: f64) -> rip_core::mask::Fraction {
    fraction_from_f64(v).unwrap()
}

// ---------------------------------------------------------------------------

fn accounting() -> Outcome {
    let start = Instant::now();
    let checks = [
        (inpaint_fraction(4, 256, 512) == frac(1.0), "4 x 256^2 = 100%"),
        (inpaint_fraction(16, 128, 512) == frac(1.0), "16 x 128^2 = 100%"),
        (inpaint_fraction(16, 256, 512) == frac(4.0), "16 x 256^2 = 400%"),
        (checkpoint_iterations(frac(1.0), frac(1.0), 256, 512) == Ok(vec![4]), "256 reaches 100% at 4"),
        (checkpoint_iterations(frac(1.0), frac(1.0), 128, 512) == Ok(vec![16]), "128 reaches 100% at 16"),
        (checkpoint_iterations(frac(4.0), frac(4.0), 256, 512) == Ok(vec![16]), "256 reaches 400% at 16"),
    ];
    let elapsed = start.elapsed();
    if let Some((_, what)) = checks.iter().find(|(ok, _)| !ok) {
        return Fail(format!("{what} does not hold"));
    }
    if elapsed >= ACCOUNTING_BUDGET {
        return Fail(format!("took {elapsed:?}"));
    }
    Pass(format!("{} equalities exact in {elapsed:?}", checks.len()))
}

// ---------------------------------------------------------------------------

fn chain_spec(id: &str, mask_size: u32, seed: u64) -> ChainSpec {
    ChainSpec {
        chain_id: id.into(),
        image_id: id.into(),
        group_tag: "synthetic".into(),
        source_tag: SourceTag::Photo,
        ablation: ChannelAblation::None,
        mask_size,
        run_index: 0,
        seed,
    }
}

fn ssim_suite() -> MetricSuite {
    let cfg = serde_json::from_value(json!({"metrics": [{"kind": "SSIM"}]})).unwrap();
    MetricSuite::load(&cfg, Path::new("/")).unwrap()
}

fn union_of_cells(traj: &Trajectory, size: u32) -> Vec<bool> {
    let grid = GridSpec::new(size, traj.mask_size).unwrap();
    let mut union = vec![false; (size * size) as usize];
    for &cell in &traj.masks {
        let (x0, y0, w, h) = grid.cell_rect(cell);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                union[(y * size + x) as usize] = true;
            }
        }
    }
    union
}

fn mask_only_mutation() -> Outcome {
    let suite = ssim_suite();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d61_736b);
    let backends = [
        BackendDescriptor::constant_fill(),
        BackendDescriptor::BoundaryMean,
        BackendDescriptor::harmonic_fill(),
    ];
    let ckpts: Vec<u32> = (1..=MUTATION_ITERATIONS / MUTATION_CHECK_EVERY).map(|k| k * MUTATION_CHECK_EVERY).collect();
    let mut checked = 0usize;
    let mut violations = Vec::new();
    for k in 0..MUTATION_CHAINS {
        let image_seed = rng.next_u64();
        let chain_seed = rng.next_u64();
        let backend = &backends[(rng.next_u32() % 3) as usize];
        let mask_size = [64, 128, 256][(rng.next_u32() % 3) as usize];
        let original = synthetic_image(image_seed, 512, 512);
        let chain = chain_spec(&format!("mutation{k}"), mask_size, chain_seed);
        let built = backend.build().unwrap();
        let mut sink = |t: &Trajectory, img: &ImageBuffer| {
            let union = union_of_cells(t, 512);
            let outside = original
                .pixels()
                .zip(img.pixels())
                .zip(&union)
                .filter(|((a, b), inside)| a != b && !**inside)
                .count();
            checked += 1;
            if outside > 0 {
                violations.push(format!("{} iteration {}: {outside} pixels", t.chain_id, t.masks.len()));
            }
            Ok(())
        };
        let traj = run_rip_chain(&original, &chain, None, &ckpts, built.as_ref(), &suite, &mut sink);
        if !traj.is_complete() {
            return Fail(format!("{} did not complete: {:?}", traj.chain_id, traj.status));
        }
    }
    if violations.is_empty() {
        Pass(format!("{MUTATION_CHAINS} chains, {checked} checkpoint images, 0 violations"))
    } else {
        Fail(format!("{} violations, first: {}", violations.len(), violations[0]))
    }
}

// ---------------------------------------------------------------------------

fn constant_fill_oracle() -> Outcome {
    outcome((|| {
        let suite = ssim_suite();
        let backend = BackendDescriptor::constant_fill().build().unwrap();
        let mut chains = 0;
        for seed in 0..ORACLE_SEEDS {
            // odd red channel: no original pixel equals the fill gray
            let base = synthetic_image(seed, 512, 512);
            let original = ImageBuffer::from_fn(512, 512, |x, y| {
                let [r, g, b] = base.pixel(x, y);
                [r | 1, g, b]
            });
            for mask_size in [64u32, 128, 256] {
                let ckpts = checkpoint_iterations(frac(0.5), frac(4.0), mask_size, 512).unwrap();
                let chain = chain_spec(&format!("oracle{seed}m{mask_size}"), mask_size, seed);
                let mut last_mse = 0.0;
                let mut problem: Option<String> = None;
                let mut sink = |t: &Trajectory, img: &ImageBuffer| {
                    let mse = original.mse(img).unwrap();
                    let union = union_of_cells(t, 512);
                    let differing: Vec<bool> = original.pixels().zip(img.pixels()).map(|(a, b)| a != b).collect();
                    if problem.is_none() {
                        if mse < last_mse {
                            problem = Some(format!("MSE fell from {last_mse} to {mse}"));
                        } else if differing != union {
                            problem = Some("differing pixels are not the union of drawn cells".into());
                        }
                    }
                    last_mse = mse;
                    Ok(())
                };
                let traj = run_rip_chain(&original, &chain, None, &ckpts, backend.as_ref(), &suite, &mut sink);
                ensure(traj.is_complete(), || format!("{} did not complete", traj.chain_id))?;
                if let Some(p) = problem {
                    return Err(format!("{}: {p}", traj.chain_id));
                }
                chains += 1;
            }
        }
        Ok(format!("{chains} chains to 400%, 0 violations"))
    })())
}

// ---------------------------------------------------------------------------

fn coupon_collector() -> Outcome {
    let grid = GridSpec::new(512, 64).unwrap();
    let n = grid.cell_count() as f64;
    let expected = n * (1.0 - (1.0 - 1.0 / n).powi(64));
    let total: usize = (0..COUPON_SEEDS)
        .map(|seed| {
            let mut s = MaskSchedule::new(seed, grid);
            (0..64).map(|_| s.next_mask().cell_index).collect::<BTreeSet<_>>().len()
        })
        .sum();
    let mean = total as f64 / COUPON_SEEDS as f64;
    let detail = format!("mean {mean:.3} distinct cells vs {expected:.3}");
    if (mean - expected).abs() <= COUPON_TOL {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

// ---------------------------------------------------------------------------

/// Plain 2-D SSIM: normalized 2-D Gaussian window, two-pass moments, every
/// valid window position summed directly. Returns (mean SSIM, mean cs).
fn oracle_ssim(a: &[f64], b: &[f64], w: usize, h: usize) -> (f64, f64) {
    let p = SsimParams::default();
    let r = p.window_size / 2;
    let mut win = vec![0.0; p.window_size * p.window_size];
    for dy in 0..p.window_size {
        for dx in 0..p.window_size {
            let (fx, fy) = (dx as f64 - r as f64, dy as f64 - r as f64);
            win[dy * p.window_size + dx] = (-(fx * fx + fy * fy) / (2.0 * p.gaussian_sigma.powi(2))).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let (mut s_sum, mut cs_sum, mut count) = (0.0, 0.0, 0usize);
    for y in 0..=h - p.window_size {
        for x in 0..=w - p.window_size {
            let at = |v: &[f64], dx: usize, dy: usize| v[(y + dy) * w + x + dx];
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..p.window_size {
                for dx in 0..p.window_size {
                    let g = win[dy * p.window_size + dx];
                    ma += g * at(a, dx, dy);
                    mb += g * at(b, dx, dy);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..p.window_size {
                for dx in 0..p.window_size {
                    let g = win[dy * p.window_size + dx];
                    let (da, db) = (at(a, dx, dy) - ma, at(b, dx, dy) - mb);
                    va += g * da * da;
                    vb += g * db * db;
                    cov += g * da * db;
                }
            }
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            s_sum += l * cs;
            cs_sum += cs;
            count += 1;
        }
    }
    (s_sum / count as f64, cs_sum / count as f64)
}

fn oracle_luma(img: &ImageBuffer) -> Vec<f64> {
    img.pixels().map(|[r, g, b]| 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).collect()
}

fn oracle_halve(v: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (hw, hh) = (w / 2, h / 2);
    let mut out = Vec::with_capacity(hw * hh);
    for y in 0..hh {
        for x in 0..hw {
            let s = v[2 * y * w + 2 * x] + v[2 * y * w + 2 * x + 1] + v[(2 * y + 1) * w + 2 * x] + v[(2 * y + 1) * w + 2 * x + 1];
            out.push(s / 4.0);
        }
    }
    out
}

fn oracle_ms_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let weights = SsimParams::default().ms_weights;
    let (mut w, mut h) = (a.width() as usize, a.height() as usize);
    let (mut la, mut lb) = (oracle_luma(a), oracle_luma(b));
    let mut product = 1.0;
    for (level, &weight) in weights.iter().enumerate() {
        let (s, cs) = oracle_ssim(&la, &lb, w, h);
        let factor = if level + 1 == weights.len() { s } else { cs };
        product *= factor.max(0.0).powf(weight);
        la = oracle_halve(&la, w, h);
        lb = oracle_halve(&lb, w, h);
        w /= 2;
        h /= 2;
    }
    product
}

/// `a` plus a random amount of noise, so pairs span the similarity range.
fn random_pair(rng: &mut ChaCha8Rng, size: u32) -> (ImageBuffer, ImageBuffer) {
    let a = synthetic_image(rng.next_u64(), size, size);
    let amp = (rng.next_u32() % 200) as i32 + 1;
    let b = ImageBuffer::from_fn(size, size, |x, y| {
        a.pixel(x, y).map(|c| (c as i32 + (rng.next_u32() % (2 * amp as u32 + 1)) as i32 - amp).clamp(0, 255) as u8)
    });
    (a, b)
}

fn ssim_oracle() -> Outcome {
    outcome((|| {
        let p = SsimParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0x7373_696d);
        let (mut worst_s, mut worst_ms) = (0.0f64, 0.0f64);
        let ms_side = p.min_ms_side() as u32;
        for _ in 0..SSIM_PAIRS {
            let (a, b) = random_pair(&mut rng, 64);
            let got = ssim(&a, &b, &p).map_err(|e| e.to_string())?;
            let (want, _) = oracle_ssim(&oracle_luma(&a), &oracle_luma(&b), 64, 64);
            worst_s = worst_s.max((got - want).abs());
            ensure(ssim(&a, &a, &p).map_err(|e| e.to_string())? == 1.0, || "ssim(a, a) != 1".into())?;

            let (a, b) = random_pair(&mut rng, ms_side);
            let got = ms_ssim(&a, &b, &p).map_err(|e| e.to_string())?;
            worst_ms = worst_ms.max((got - oracle_ms_ssim(&a, &b)).abs());
            ensure(ms_ssim(&a, &a, &p).map_err(|e| e.to_string())? == 1.0, || "ms_ssim(a, a) != 1".into())?;
        }
        ensure(worst_s <= SSIM_TOL, || format!("SSIM off by {worst_s:e}"))?;
        ensure(worst_ms <= MS_SSIM_TOL, || format!("MS-SSIM off by {worst_ms:e}"))?;
        Ok(format!(
            "{SSIM_PAIRS} pairs; max |d| SSIM {worst_s:.1e} (64x64), MS-SSIM {worst_ms:.1e} ({ms_side}x{ms_side}); identity exact"
        ))
    })())
}

// ---------------------------------------------------------------------------

fn workspace_root() -> PathBuf {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    manifest.parent().and_then(Path::parent).unwrap_or(manifest).to_path_buf()
}

fn lpips_conformance() -> Outcome {
    let dir = std::env::var_os("RIP_LPIPS_MODELS")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("models/lpips"));
    if !dir.join("golden.json").exists() {
        return Unavailable(format!(
            "no exported models in {} (run tools/export_lpips_models.py or set RIP_LPIPS_MODELS)",
            dir.display()
        ));
    }
    let read = |p: &Path| -> Result<Value, String> {
        let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
    };
    let result = (|| -> Result<(String, bool), String> {
        let golden = read(&dir.join("golden.json"))?;
        let random = read(&dir.join("PROVENANCE.json"))
            .ok()
            .and_then(|v| v["randomBackbone"].as_bool())
            .unwrap_or(false);
        let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/lpips");
        let a = load_image(&fixtures.join("pair_a.png")).map_err(|e| e.to_string())?;
        let b = load_image(&fixtures.join("pair_b.png")).map_err(|e| e.to_string())?;
        let mut parts = Vec::new();
        for name in ["alex", "squeeze", "vgg"] {
            let spec: FeatureNetSpec = serde_json::from_value(read(&dir.join(format!("{name}.spec.json")))?)
                .map_err(|e| e.to_string())?;
            let net = FeatureNet::load(&spec.resolved(&dir)).map_err(|e| e.to_string())?;
            let d = net.lpips(&a, &b).map_err(|e| e.to_string())?;
            let id = net.lpips(&a, &a).map_err(|e| e.to_string())?;
            let want = golden["nets"][name]["distance"].as_f64().ok_or("golden.json lacks distance")?;
            ensure(id.abs() < LPIPS_IDENTITY_TOL, || format!("{name}: identity distance {id:e}"))?;
            ensure((d - want).abs() <= LPIPS_GOLDEN_TOL, || format!("{name}: {d} vs golden {want}"))?;
            parts.push(format!("{name} |d| {:.1e}", (d - want).abs()));
        }
        Ok((parts.join(", "), random))
    })();
    match result {
        Ok((detail, false)) => Pass(detail),
        Ok((detail, true)) => Unavailable(format!(
            "{} holds random-backbone exports; runtime matches them ({detail}) but pretrained weights are needed",
            dir.display()
        )),
        Err(e) => Fail(e),
    }
}

// ---------------------------------------------------------------------------

fn statistics_oracle() -> Outcome {
    outcome((|| {
        for (df, t) in T_TABLE {
            let got = t_critical(df, 0.95);
            ensure((got - t).abs() <= T_TOL, || format!("t({df}) = {got}, table {t}"))?;
            let n = df + 1;
            let values: Vec<f64> = (0..n).map(|i| ((i * 37 + 11) % 17) as f64 * 0.25 - 1.0).collect();
            let ci = mean_ci(&values, 0.95).map_err(|e| e.to_string())?;
            let mean = values.iter().sum::<f64>() / n as f64;
            let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / df as f64).sqrt();
            let half = t * sd / (n as f64).sqrt();
            ensure((ci.mean - mean).abs() <= T_TOL, || format!("n={n}: mean {}", ci.mean))?;
            ensure((ci.ci_low - (mean - half)).abs() <= T_TOL, || format!("n={n}: low {}", ci.ci_low))?;
            ensure((ci.ci_high - (mean + half)).abs() <= T_TOL, || format!("n={n}: high {}", ci.ci_high))?;
        }
        let flat = mean_ci(&[0.625; 7], 0.95).map_err(|e| e.to_string())?;
        ensure(
            flat.mean == 0.625 && flat.stddev == 0.0 && flat.ci_low == 0.625 && flat.ci_high == 0.625,
            || format!("zero variance: {flat:?}"),
        )?;
        let single = mean_ci(&[0.3], 0.95).map_err(|e| e.to_string())?;
        ensure(single.n == 1 && single.ci_low == 0.3 && single.ci_high == 0.3, || format!("n=1: {single:?}"))?;
        Ok("t critical values and intervals for n = 2, 5, 10, 30; zero-variance and n = 1 exact".into())
    })())
}

// ---------------------------------------------------------------------------

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn end_to_end_determinism() -> Outcome {
    outcome((|| {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (manifest, _) = write_dataset(&tmp.path().join("data"), 5, 512, false);
        let mut outputs = Vec::new();
        for (label, workers) in [("a", Some(1)), ("b", None)] {
            let run = tmp.path().join(label);
            let doc = json!({
                "manifestPath": manifest,
                "maskSizes": [64, 128, 256],
                "runsPerImage": 2,
                "masterSeed": 2024,
                "backend": {"kind": "HarmonicFill"},
                "metrics": {"metrics": [{"kind": "SSIM"}, {"kind": "MSSSIM"}]},
                "outputDir": run,
                "workers": workers,
            });
            let cfg = ExperimentConfig::from_value(doc, Path::new("/")).map_err(|e| e.to_string())?;
            let summary = run_experiment(&cfg).map_err(|e| e.to_string())?;
            ensure(summary.all_complete() && summary.chains == 30, || format!("run {label}: {summary:?}"))?;
            let ts = load_trajectories(&run).map_err(|e| e.to_string())?;
            write_report(&ts, &GroupKey::DEFAULT, &[], &run.join("report")).map_err(|e| e.to_string())?;
            outputs.push((tree_bytes(&run.join("trajectories")), tree_bytes(&run.join("report"))));
        }
        let (ta, ra) = &outputs[0];
        let (tb, rb) = &outputs[1];
        ensure(ta.len() == 30, || format!("{} trajectory files", ta.len()))?;
        if let Some(((name, _), _)) = ta.iter().zip(tb).find(|(x, y)| x != y) {
            return Err(format!("trajectory {name} differs between runs"));
        }
        ensure(ta.len() == tb.len(), || "trajectory sets differ".into())?;
        ensure(ra == rb, || "report files differ between runs".into())?;
        Ok(format!("30 trajectories and {} report files byte-identical (1 worker vs default)", ra.len()))
    })())
}

// ---------------------------------------------------------------------------

/// Ring of unmasked pixels with a masked 4-neighbour, per channel (min, max).
fn ring_range(img: &ImageBuffer, mask: &MaskRaster) -> [(u8, u8); 3] {
    let (w, h) = mask.dimensions();
    let mut range = [(255u8, 0u8); 3];
    for y in 0..h {
        for x in 0..w {
            if mask.is_set(x, y) {
                continue;
            }
            let near = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 && mask.is_set(nx as u32, ny as u32)
            });
            if near {
                for (c, v) in img.pixel(x, y).into_iter().enumerate() {
                    range[c] = (range[c].0.min(v), range[c].1.max(v));
                }
            }
        }
    }
    range
}

fn harmonic_checks() -> Outcome {
    outcome((|| {
        let ramp = ImageBuffer::from_fn(512, 512, |x, y| [(x / 2) as u8, (y / 2) as u8, ((x + y) / 4) as u8]);
        let mut worst = 0.0f64;
        // interior rectangles: on the image border the fill is zero-flux, which a ramp is not
        for rect in [(192, 320, 64, 64), (64, 64, 128, 128), (128, 128, 256, 256), (320, 64, 128, 64)] {
            for solver in [HarmonicSolver::Auto, HarmonicSolver::Iterative] {
                let mask = MaskRaster::from_rect(512, 512, rect);
                let p = HarmonicParams { solver, tol: 1e-3, ..Default::default() };
                let out = harmonic_fill(&ramp, &mask, &p).map_err(|e| e.to_string())?;
                let (x0, y0, w, h) = rect;
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        let exact = [x as f64 / 2.0, y as f64 / 2.0, (x + y) as f64 / 4.0];
                        for (c, e) in exact.iter().enumerate() {
                            worst = worst.max((out.pixel(x, y)[c] as f64 - e).abs());
                        }
                    }
                }
            }
        }
        ensure(worst <= RAMP_TOL, || format!("ramp error {worst}"))?;

        let mut rng = ChaCha8Rng::seed_from_u64(0x6861_726d);
        for case in 0..MAX_PRINCIPLE_CASES {
            let size = 64 + 32 * (rng.next_u32() % 4);
            let img = synthetic_image(rng.next_u64(), size, size);
            // union of one to three rectangles, so both solver paths are exercised
            let mut raw = vec![0u8; (size * size) as usize];
            for _ in 0..1 + rng.next_u32() % 3 {
                let (rw, rh) = (1 + rng.next_u32() % (size / 2), 1 + rng.next_u32() % (size / 2));
                let (x0, y0) = (rng.next_u32() % (size - rw + 1), rng.next_u32() % (size - rh + 1));
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        raw[(y * size + x) as usize] = MaskRaster::SET;
                    }
                }
            }
            let mask = MaskRaster::from_raw(size, size, raw).unwrap();
            let out = harmonic_fill(&img, &mask, &HarmonicParams::default()).map_err(|e| e.to_string())?;
            let range = ring_range(&img, &mask);
            for y in 0..size {
                for x in 0..size {
                    if !mask.is_set(x, y) {
                        continue;
                    }
                    for (c, v) in out.pixel(x, y).into_iter().enumerate() {
                        ensure(v >= range[c].0 && v <= range[c].1, || {
                            format!("case {case}: ({x},{y}) c{c} = {v} outside {:?}", range[c])
                        })?;
                    }
                }
            }
        }
        Ok(format!("ramp max error {worst} levels; maximum principle held in {MAX_PRINCIPLE_CASES} cases"))
    })())
}
