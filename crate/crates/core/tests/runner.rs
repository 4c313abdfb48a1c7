//! Experiments end to end on small synthetic datasets.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use rip_core::runner::{load_trajectories, resume, run_experiment, trajectory_path, RunManifest, TrajectoryStatus};
use rip_core::stats::{write_report, GroupKey};
use rip_core::{ExperimentConfig, MetricKind};
use rip_testkit::mock::dead_endpoint;
use rip_testkit::{write_dataset, Behavior, MockServer};

fn config(manifest: &Path, out: &Path, backend: Value) -> ExperimentConfig {
    let doc = json!({
        "schemaVersion": 1,
        "manifestPath": manifest,
        "maskSizes": [32, 64],
        "totalFraction": 1.0,
        "stepFraction": 0.5,
        "imageSize": 128,
        "masterSeed": 9,
        "backend": backend,
        "outputDir": out,
        "metrics": {"metrics": [{"kind": "SSIM"}]},
    });
    ExperimentConfig::from_value(doc, Path::new("/")).unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    out.sort();
    out
}

fn report_bytes(run_dir: &Path, out: &Path) -> Vec<(String, Vec<u8>)> {
    let ts = load_trajectories(run_dir).unwrap();
    write_report(&ts, &GroupKey::DEFAULT, &[], out).unwrap();
    files(out).into_iter().map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())).collect()
}

#[test]
fn native_run_layout_and_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, entries) = write_dataset(&tmp.path().join("data"), 3, 96, true);
    let mut cfg = config(&manifest, &tmp.path().join("run"), json!({"kind": "ConstantFill"}));
    cfg.ablations = vec!["None".parse().unwrap(), "Grayscale".parse().unwrap()];
    cfg.runs_per_image = 2;
    let summary = run_experiment(&cfg).unwrap();
    assert_eq!(summary.chains, 3 * 2 * 2 * 2);
    assert!(summary.all_complete());
    assert_eq!(summary.executed, summary.chains);

    let ts = load_trajectories(&cfg.output_dir).unwrap();
    assert_eq!(ts.len(), summary.chains);
    for t in &ts {
        assert!(t.is_complete());
        let per_cell = (t.mask_size * t.mask_size) as f64 / (128.0 * 128.0);
        let iters = (1.0 / per_cell) as usize;
        assert_eq!(t.masks.len(), iters);
        assert_eq!(t.backend_calls as usize, iters);
        assert_eq!(t.fractions(), [0.0, 0.5, 1.0]);
        assert_eq!(t.checkpoints[0].metrics[0].value, 1.0);
        let restricted = t.image_id == entries[0].id;
        for ck in &t.checkpoints {
            assert_eq!(ck.image.is_some(), !restricted, "{}", t.chain_id);
            if let Some(rel) = &ck.image {
                assert!(cfg.output_dir.join(rel).is_file());
            }
        }
        assert_eq!(cfg.output_dir.join("images").join(&t.chain_id).exists(), !restricted);
    }

    let m = RunManifest::load(&cfg.output_dir).unwrap();
    assert_eq!(m.chains.len(), summary.chains);
    assert_eq!(m.checkpoint_iterations[&32], [8, 16]);
    assert_eq!(m.checkpoint_iterations[&64], [2, 4]);
    assert_eq!(m.backend.kind, "ConstantFill(gray=128)");

    // runs of the same image share nothing but ablation variants share masks
    let by = |id: &str| ts.iter().find(|t| t.chain_id == id).unwrap();
    let a = by("img01__None__m32__r0");
    assert_eq!(a.masks, by("img01__Grayscale__m32__r0").masks);
    assert_ne!(a.masks, by("img01__None__m32__r1").masks);
    assert_ne!(a.seed, by("img02__None__m32__r0").seed);

    assert!(run_experiment(&cfg).is_err(), "an existing run directory is never overwritten");
}

#[test]
fn remote_echo_run_records_backend_identity() {
    let server = MockServer::start(Behavior::Echo);
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, _) = write_dataset(&tmp.path().join("data"), 1, 128, false);
    let cfg = config(&manifest, &tmp.path().join("run"), json!({"kind": "RemoteDiffusion", "endpoint": server.url()}));
    let summary = run_experiment(&cfg).unwrap();
    assert!(summary.all_complete());
    let ts = load_trajectories(&cfg.output_dir).unwrap();
    for t in &ts {
        for ck in &t.checkpoints {
            assert_eq!(ck.metrics[0].metric, MetricKind::Ssim);
            assert_eq!(ck.metrics[0].value, 1.0, "echo leaves the image untouched");
        }
    }
    assert_eq!(server.inpaint_calls(), 16 + 4);
    let reqs = server.requests();
    assert!(reqs.iter().all(|r| r.get("prompt").is_none() && r["seed"].is_u64()));
    let m = RunManifest::load(&cfg.output_dir).unwrap();
    assert_eq!(m.backend.model.as_deref(), Some(rip_testkit::mock::MOCK_MODEL));
}

#[test]
fn unreachable_backend_aborts_and_persists_every_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, _) = write_dataset(&tmp.path().join("data"), 2, 64, false);
    let cfg = config(
        &manifest,
        &tmp.path().join("run"),
        json!({"kind": "RemoteDiffusion", "endpoint": dead_endpoint(), "retry": {"attempts": 1, "initialBackoffMs": 1}}),
    );
    let summary = run_experiment(&cfg).unwrap();
    assert_eq!(summary.chains, 4);
    assert_eq!(summary.aborted.len(), 4);
    for t in load_trajectories(&cfg.output_dir).unwrap() {
        assert!(matches!(t.status, TrajectoryStatus::Aborted { .. }));
        // the fraction-0 identity row is recorded before the first backend call
        assert_eq!(t.checkpoints.len(), 1);
    }
    let log = fs::read_to_string(cfg.output_dir.join("run_log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("chainAborted")).count(), 4);
}

#[test]
fn failing_service_aborts_chains_mid_run() {
    let server = MockServer::start(Behavior::Status(500));
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, _) = write_dataset(&tmp.path().join("data"), 1, 64, false);
    let cfg = config(&manifest, &tmp.path().join("run"), json!({"kind": "RemoteDiffusion", "endpoint": server.url()}));
    let summary = run_experiment(&cfg).unwrap();
    assert_eq!(summary.aborted.len(), 2);
    for t in load_trajectories(&cfg.output_dir).unwrap() {
        let TrajectoryStatus::Aborted { reason } = &t.status else { panic!("{:?}", t.status) };
        assert!(reason.contains("500"), "{reason}");
    }
}

#[test]
fn resume_reruns_only_unfinished_chains_and_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, _) = write_dataset(&tmp.path().join("data"), 2, 128, false);
    let backend = json!({"kind": "HarmonicFill"});
    let full = config(&manifest, &tmp.path().join("full"), backend.clone());
    run_experiment(&full).unwrap();
    let part = config(&manifest, &tmp.path().join("part"), backend);
    run_experiment(&part).unwrap();

    let noop = resume(&part.output_dir, None).unwrap();
    assert_eq!(noop.executed, 0);
    assert!(noop.all_complete());

    // simulate one crash mid-chain and one chain that never started
    let crashed = trajectory_path(&part.output_dir, "img00__None__m32__r0");
    let mut t: Value = serde_json::from_str(&fs::read_to_string(&crashed).unwrap()).unwrap();
    t["status"] = json!({"state": "inProgress"});
    t["checkpoints"].as_array_mut().unwrap().truncate(2);
    fs::write(&crashed, serde_json::to_vec_pretty(&t).unwrap()).unwrap();
    fs::remove_file(trajectory_path(&part.output_dir, "img01__None__m64__r0")).unwrap();
    fs::remove_dir_all(part.output_dir.join("images/img01__None__m64__r0")).unwrap();

    let partial = load_trajectories(&part.output_dir).unwrap();
    assert_eq!(partial.iter().filter(|t| t.is_complete()).count(), 2);

    let resumed = resume(&part.output_dir, Some(1)).unwrap();
    assert_eq!(resumed.executed, 2);
    assert!(resumed.all_complete());

    for id in ["img00__None__m32__r0", "img01__None__m64__r0", "img00__None__m64__r0"] {
        assert_eq!(
            fs::read(trajectory_path(&part.output_dir, id)).unwrap(),
            fs::read(trajectory_path(&full.output_dir, id)).unwrap(),
            "{id}"
        );
    }
    assert_eq!(
        report_bytes(&part.output_dir, &tmp.path().join("rp")),
        report_bytes(&full.output_dir, &tmp.path().join("rf"))
    );
}

#[test]
fn empty_manifest_yields_no_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("manifest.json");
    fs::write(&manifest, r#"{"schemaVersion": 1, "entries": []}"#).unwrap();
    let cfg = config(&manifest, &tmp.path().join("run"), json!({"kind": "ConstantFill"}));
    let summary = run_experiment(&cfg).unwrap();
    assert_eq!(summary.chains, 0);
    assert!(summary.all_complete());
    assert!(load_trajectories(&cfg.output_dir).unwrap().is_empty());
}

#[test]
fn missing_image_aborts_only_its_chains() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, entries) = write_dataset(&tmp.path().join("data"), 2, 64, false);
    let cfg = config(&manifest, &tmp.path().join("run"), json!({"kind": "ConstantFill"}));
    fs::write(&entries[1].path, b"not a png").unwrap();
    let summary = run_experiment(&cfg).unwrap();
    assert_eq!(summary.complete, 2);
    assert_eq!(summary.aborted, ["img01__None__m32__r0", "img01__None__m64__r0"]);
    let log = fs::read_to_string(cfg.output_dir.join("run_log.jsonl")).unwrap();
    assert!(log.contains("loadFailed"));
}
