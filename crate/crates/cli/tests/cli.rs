use std::path::Path;
use std::process::{Command, Output};

fn ekg(args: &[&str], run_dir: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ekg"));
    c.args(args).env("RUST_LOG", "warn");
    if let Some(d) = run_dir {
        c.env("EKG_RUN_DIR", d);
    }
    let out = c.output().unwrap();
    assert!(out.status.success(), "ekg {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// The shipped toy config, shortened.
fn quick_config(dir: &Path) -> std::path::PathBuf {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")).unwrap();
    let text = text
        .replace("epochs = 12", "epochs = 4")
        .replace("milestones = [8]", "milestones = []")
        .replace("epochs = 5", "epochs = 2")
        .replace("milestones = [3]", "milestones = [1]");
    let p = dir.join("quick.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn phase_commands_drive_a_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let run = tmp.path().join("run");
    let cfg_s = cfg.to_str().unwrap();
    let run_s = run.to_str().unwrap();

    let out = stdout(&ekg(&["prune", "--config", cfg_s, "--target-rate", "0.5"], Some(&run)));
    assert!(out.contains("\"target_rate\": 0.5"), "{out}");
    assert!(run.join("search/pruned/manifest.txt").exists());

    let out = stdout(&ekg(&["membank", "build", "--run", run_s, "--k", "3"], None));
    assert!(out.contains("\"k\": 3"), "{out}");

    let out = stdout(&ekg(&["finetune", "--run", run_s, "--kd-weight", "0.5", "--epochs", "1"], None));
    assert_eq!(out.lines().count(), 2, "{out}");
    assert!(out.starts_with("epoch,lr,train_loss"));

    let out = stdout(&ekg(&["evaluate", "--run", run_s], None));
    assert!(out.contains("flops_reduction_pct"), "{out}");
    let saved = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(saved.contains("kd_weight = 0.5") && saved.contains("k = 3"), "{saved}");

    let ckpt = run.join("finetune/final");
    let ckpt_s = ckpt.to_str().unwrap();
    let out = stdout(&ekg(&["landscape", "cn", "--checkpoint", ckpt_s, "--points", "3"], None));
    assert_eq!(out.lines().count(), 5, "{out}");
    let out = stdout(&ekg(&["landscape", "cn", "--checkpoint", ckpt_s, "--points", "3", "--directional"], None));
    assert!(out.lines().last().unwrap().starts_with("cn_mean,"));

    let grid = tmp.path().join("grid");
    ekg(&["landscape", "grid", "--checkpoint", ckpt_s, "--resolution", "2", "--out", grid.to_str().unwrap()], None);
    assert_eq!(std::fs::read_to_string(grid.join("grid.csv")).unwrap().lines().count(), 1 + 25);
    assert!(grid.join("grid.png").exists());

    let rep = tmp.path().join("report");
    let out = stdout(&ekg(&["report", "--runs", run_s, "--out", rep.to_str().unwrap()], None));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "method,accuracy,flops_reduction_pct,param_reduction_pct");
    assert!(lines[1].starts_with("ekg,") && !lines[1].contains("N/A"), "{out}");
    for f in ["table.csv", "rate_accuracy.png", "trace.png"] {
        assert!(rep.join(f).exists(), "{f}");
    }
}

#[test]
fn empty_report_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stdout(&ekg(&["report", "--out", tmp.path().to_str().unwrap()], None));
    assert_eq!(out, "method,accuracy,flops_reduction_pct,param_reduction_pct\n");
}

#[test]
fn sweep_and_correlate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let cfg_s = cfg.to_str().unwrap();
    let root = tmp.path().join("sweep");
    let out = stdout(&ekg(&["sweep", "--config", cfg_s, "--rates", "0.3", "--seeds", "2", "--out", root.to_str().unwrap()], None));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2, "{out}");
    assert!(lines[1].starts_with("0.3,2,"), "{out}");
    assert!(!lines[1].contains("N/A"), "{out}");
    assert!(root.join("report/table.csv").exists());

    let run = tmp.path().join("corr");
    let out = stdout(&ekg(&["landscape", "correlate", "--config", cfg_s, "--samples", "3", "--trials", "2", "--epochs", "1"], Some(&run)));
    assert!(out.contains("pcc(CN, potential loss)"), "{out}");
    assert!(run.join("landscape/correlation.csv").exists());
}

#[test]
fn unknown_device_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let out = Command::new(env!("CARGO_BIN_EXE_ekg"))
        .args(["prune", "--config", cfg.to_str().unwrap()])
        .env("EKG_DEVICE", "cuda")
        .env("EKG_RUN_DIR", tmp.path().join("r"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cuda"));
}
