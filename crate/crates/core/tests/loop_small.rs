mod common;

use std::fs;

use loopworld::log::Logger;
use loopworld::pipeline::report::{Report, CURVES_SVG, REPORT_FILE, SUCCESS_CSV};
use loopworld::pipeline::{self, emit_report, run_ablation, run_iteration, run_iterations, Ablation, Layout};
use loopworld::sans;
use loopworld::Error;

#[test]
fn iteration_zero_writes_a_consistent_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = common::tiny_config();
    let m = run_iteration(&cfg, None, &layout, &Logger::silent()).unwrap();
    assert_eq!(m.iteration_index, 0);
    m.verify(&layout).unwrap();
    // The manifest names the augmented dataset, one iteration ahead.
    assert_eq!(sans::load(layout.resolve(&m.sans_path)).unwrap().iteration_index, 1);
    let consumed = sans::load(layout.sans(0)).unwrap();
    let next = sans::load(layout.augmented(0)).unwrap();
    assert_eq!(next.len(), consumed.len() + cfg.loop_.deploy_episodes);
    assert_eq!(&next.records[..consumed.len()], &consumed.records[..]);
    let on_disk = loopworld::pipeline::IterationManifest::load(&layout.manifest(0)).unwrap();
    assert_eq!(on_disk, m);
}

#[test]
fn rerun_reproduces_metrics_and_files() {
    let cfg = common::tiny_config();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let ms = run_iterations(&cfg, 2, &layout, &Logger::silent()).unwrap();
        emit_report(&ms, &layout).unwrap();
        let files: Vec<Vec<u8>> = [REPORT_FILE, SUCCESS_CSV, CURVES_SVG, "iter_1/wm/worldmodel.ckpt", "iter_1/rl/policy.ckpt"]
            .iter()
            .map(|f| fs::read(dir.path().join(f)).unwrap())
            .collect();
        (ms.into_iter().map(|m| m.metrics).collect::<Vec<_>>(), files)
    };
    assert_eq!(run(), run());
}

#[test]
fn later_iterations_resume_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = common::tiny_config();
    let first = run_iterations(&cfg, 1, &layout, &Logger::silent()).unwrap();
    let both = run_iterations(&cfg, 2, &layout, &Logger::silent()).unwrap();
    assert_eq!(both[0], first[0]);
    assert_eq!(both[1].iteration_index, 1);
    both[1].verify(&layout).unwrap();
    assert_eq!(sans::load(layout.sans(1)).unwrap().iteration_index, 1);
}

#[test]
fn failed_phase_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let mut cfg = common::tiny_config();
    let prev = run_iteration(&cfg, None, &layout, &Logger::silent()).unwrap();
    // A world model whose architecture disagrees with the pretrained one
    // cannot be fine-tuned.
    cfg.wm.denoiser_hidden = vec![12];
    let err = run_iteration(&cfg, Some(&prev), &layout, &Logger::silent()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    let m = loopworld::pipeline::IterationManifest::load(&layout.manifest(1)).unwrap();
    assert_eq!(m.failed_phase.as_deref(), Some("train_wm"));
    assert!(m.error.is_some());
    assert!(!m.heldout_path.is_empty());
    assert!(m.rl_path.is_empty());
    assert_eq!(pipeline::completed_manifests(&layout).unwrap().len(), 1);
}

#[test]
fn report_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = common::tiny_config();
    let ms = run_iterations(&cfg, 1, &layout, &Logger::silent()).unwrap();
    run_ablation(&cfg, Ablation::NoRewardHead, &layout, &Logger::silent()).unwrap();
    emit_report(&ms, &layout).unwrap();
    let report = Report::load(&dir.path().join(REPORT_FILE)).unwrap();
    assert_eq!(report.iterations.len(), 1);
    assert_eq!(report.iterations[0].metrics, ms[0].metrics);
    assert_eq!(report.ablations["no_reward_head"].reward_alignment_pct, None);
    let text = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<Report>(&text).unwrap(), report);
    let csv = fs::read_to_string(dir.path().join(SUCCESS_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(
        fs::read(dir.path().join("rl_curve.csv")).unwrap(),
        fs::read(layout.curve(0)).unwrap()
    );
}

#[test]
fn report_needs_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(emit_report(&[], &Layout::new(dir.path())), Err(Error::Contract(_))));
}

#[test]
fn ablations_share_the_baseline_heldout_set() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = common::tiny_config();
    let near = run_ablation(&cfg, Ablation::NoNearSuccess, &layout, &Logger::silent()).unwrap();
    let held = sans::load(layout.heldout()).unwrap();
    let again = run_ablation(&cfg, Ablation::NoNearSuccess, &layout, &Logger::silent()).unwrap();
    assert_eq!(near, again);
    assert_eq!(sans::load(layout.heldout()).unwrap(), held);
    assert!(near.reward_alignment_pct.is_some());
}
