use std::path::{Path, PathBuf};
use std::time::Instant;

use ekg::harness::pipeline::{phase_hash, SearchSummary};
use ekg::harness::{report, run_pipeline, EvalMetrics, Phase, Pipeline, RunConfig, RunLayout, RunManifest};
use ekg::membank::MemoryBank;
use ekg::search::read_trace;
use ekg::Error;

fn toy_config(run_dir: &Path) -> RunConfig {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")).unwrap();
    let mut cfg = RunConfig::from_toml(&text).unwrap();
    cfg.run_dir = run_dir.to_path_buf();
    cfg
}

#[test]
fn shipped_configs_round_trip() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["toy.toml", "cifar10_resnet56.toml"] {
        let cfg = RunConfig::from_toml(&std::fs::read_to_string(root.join(name)).unwrap()).unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg, "{name}");
    }
}

#[test]
fn toy_pipeline_end_to_end_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let start = Instant::now();
    let manifest = run_pipeline(cfg.clone()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    eprintln!("toy pipeline took {secs:.1}s");
    assert!(secs < 300.0, "toy pipeline took {secs:.1}s");
    for p in Phase::ALL {
        assert!(manifest.is_current(p, &phase_hash(&cfg, p)), "{p}");
    }

    let layout = RunLayout::new(dir.path());
    for f in [
        layout.config(),
        layout.subset(),
        layout.val(),
        layout.pretrained().join("manifest.txt"),
        layout.warmed().join("manifest.txt"),
        layout.pruned().join("manifest.txt"),
        layout.trace(),
        layout.membank().join("manifest.json"),
        layout.finetune_metrics(),
        layout.finetune_steps(),
        layout.final_checkpoint().join("manifest.txt"),
        layout.eval_metrics(),
        layout.cn_csv(),
        layout.grid_csv(),
        layout.grid_png(),
    ] {
        assert!(f.exists(), "{} missing", f.display());
    }
    assert!(!layout.lock().exists());

    let summary: SearchSummary = serde_json::from_slice(&std::fs::read(layout.search_summary()).unwrap()).unwrap();
    assert!((summary.achieved_rate - 0.3).abs() <= 0.01, "{}", summary.achieved_rate);
    let bank = MemoryBank::open(&layout.membank()).unwrap();
    assert_eq!(bank.k(), 2);
    let m: EvalMetrics = serde_json::from_slice(&std::fs::read(layout.eval_metrics()).unwrap()).unwrap();
    assert!((m.flops_reduction_pct - 100.0 * summary.achieved_rate).abs() < 1e-9);
    assert!(m.accuracy > 25.0, "{}", m.accuracy);

    // test set isolation: search and membank ids come from the training split only
    let train_len = 4 * 96;
    assert!(bank.ids().iter().all(|&i| i < train_len));
    let splits = layout.read_splits().unwrap();
    assert!(splits.subset.iter().all(|i| !splits.val.contains(i)));

    // resume is a no-op
    let trace = std::fs::read(layout.trace()).unwrap();
    let again = run_pipeline(cfg.clone()).unwrap();
    for p in Phase::ALL {
        assert_eq!(again.phases[&p], manifest.phases[&p], "{p} was recomputed");
    }
    assert_eq!(std::fs::read(layout.trace()).unwrap(), trace);

    // changing fine-tuning recomputes only the requested phase and invalidates later ones
    let mut changed = cfg.clone();
    changed.finetune.kd_weight = 0.0;
    let mut p = Pipeline::open(changed.clone()).unwrap();
    assert!(matches!(p.run(Phase::Landscape), Err(Error::Phase { .. })));
    p.run(Phase::Finetune).unwrap();
    let m2 = p.manifest().clone();
    assert_eq!(m2.phases[&Phase::Search], manifest.phases[&Phase::Search]);
    assert_ne!(m2.phases[&Phase::Finetune], manifest.phases[&Phase::Finetune]);
    assert!(!m2.is_complete(Phase::Evaluate));
    drop(p);
    let on_disk = RunManifest::load(dir.path()).unwrap();
    assert_eq!(on_disk, m2);

    let table = report(&[dir.path().to_path_buf()], &dir.path().join("report")).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].accuracy, None, "evaluation was invalidated");
}

#[test]
fn identical_configs_give_identical_traces() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |d: &Path| {
        let mut cfg = toy_config(d);
        cfg.pretrain.epochs = 3;
        cfg.pretrain.lr.milestones.clear();
        let mut p = Pipeline::open(cfg).unwrap();
        p.run(Phase::Search).unwrap();
        read_trace(&RunLayout::new(d).trace()).unwrap()
    };
    let (ta, tb) = (run(a.path()), run(b.path()));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
    let ia = std::fs::read_to_string(a.path().join("interim/1/interim.json")).unwrap();
    let ib = std::fs::read_to_string(b.path().join("interim/1/interim.json")).unwrap();
    assert_eq!(ia, ib);
}

#[test]
fn zero_target_keeps_the_warmed_network_as_every_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path());
    cfg.search.target_rate = 0.0;
    cfg.membank.k = 3;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.lr.milestones.clear();
    let mut p = Pipeline::open(cfg).unwrap();
    p.run(Phase::Membank).unwrap();
    let layout = RunLayout::new(dir.path());
    assert!(read_trace(&layout.trace()).unwrap().is_empty());
    let bank = MemoryBank::open(&layout.membank()).unwrap();
    assert_eq!(bank.k(), 3);
    assert!(bank.entries().iter().all(|e| e.iteration == 0));
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let _p = Pipeline::open(toy_config(dir.path())).unwrap();
    assert!(matches!(Pipeline::open(toy_config(dir.path())), Err(Error::Locked(_))));
}

#[test]
fn failing_phase_names_itself_and_keeps_earlier_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path());
    cfg.pretrain.epochs = 1;
    cfg.pretrain.lr.milestones.clear();
    cfg.splits.per_class_subset = 500;
    let err = run_pipeline(cfg).unwrap_err();
    match err {
        Error::Phase { phase, source } => {
            assert_eq!(phase, "splits");
            assert!(matches!(*source, Error::InsufficientData { .. }));
        }
        e => panic!("unexpected {e}"),
    }
    let m = RunManifest::load(dir.path()).unwrap();
    assert!(m.is_complete(Phase::Pretrain));
    assert!(!m.is_complete(Phase::Splits));
    assert!(RunLayout::new(dir.path()).pretrained().join("manifest.txt").exists());
}

#[test]
fn empty_report_has_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let t = report(&Vec::<PathBuf>::new(), dir.path()).unwrap();
    assert!(t.rows.is_empty());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("table.csv")).unwrap(),
        "method,accuracy,flops_reduction_pct,param_reduction_pct\n"
    );
}
