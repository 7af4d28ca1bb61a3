//! End-to-end tests of the `fmalloc` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "name=tiny",
    "model.d_model=8",
    "model.n_heads=2",
    "model.n_enc_layers=1",
    "model.n_dec_layers=1",
    "model.d_ff=16",
    "general.n_train=120",
    "general.n_dev=100",
    "general.n_test=100",
    "domains.0.n_train=40",
    "domains.1.n_train=40",
    "domains.2.n_train=40",
    "domains.3.n_train=40",
    "domains.4.n_train=40",
    "pretrain_max_epochs=1",
    "max_epochs=1",
    "patience=1",
    "importance_batches=2",
    "beam_size=2",
];

fn tiny_config(dir: &Path) -> PathBuf {
    // shrink dev/test splits of every domain through a config file
    let mut args: Vec<String> = TINY.iter().map(|s| s.to_string()).collect();
    for i in 0..5 {
        args.push(format!("domains.{i}.n_dev=100"));
        args.push(format!("domains.{i}.n_test=100"));
    }
    let path = dir.join("tiny.json");
    let cfg = fmalloc::config::RunConfig::default().with_overrides(&args).unwrap();
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn fmalloc(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmalloc"))
        .args(args)
        .env("FMALLOC_RUN_DIR", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root.join("tiny"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            !name.starts_with("general-") && name != "sweeps"
        })
        .collect();
    dirs.sort();
    dirs
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn config_errors_exit_with_code_2_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fmalloc(tmp.path(), &["cl-run", "--override", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = fmalloc(tmp.path(), &["pretrain", "--override", "sparsity=1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sparsity"));
    let out = fmalloc(tmp.path(), &["prune", "--sparsity", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sparsity"));
    let out = fmalloc(tmp.path(), &["report", "--config", "/nonexistent/config.json"]);
    assert_ne!(out.status.code(), Some(0));
    let out = fmalloc(tmp.path(), &["sweep", "--axis", "lr", "--values", "1"]);
    assert_eq!(out.status.code(), Some(2));
    // nothing was written
    assert!(fs::read_dir(tmp.path()).unwrap().next().is_none());
}

#[test]
fn continual_run_layout_idempotence_evaluate_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("runs");
    let cfg = tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();

    ok(&fmalloc(&root, &["cl-run", "--config", cfg]));
    let runs = run_dirs(&root);
    assert_eq!(runs.len(), 1);
    let run = &runs[0];
    assert!(run.file_name().unwrap().to_string_lossy().starts_with("fmalloc_order-"));
    for f in ["config.json", "masks/archive.json", "metrics/bleu_matrix.csv", "metrics/summary.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    for f in ["metrics/capacity.csv", "metrics/reuse.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    for t in 0..=5 {
        assert!(run.join(format!("checkpoints/stage_{t}.ckpt")).exists());
        assert!(run.join(format!("logs/stage_{t}.log")).exists());
    }
    let csv = fs::read_to_string(run.join("metrics/bleu_matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 21, "header plus the 21 cells i <= j");
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(run.join("metrics/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["partial"], false);
    assert_eq!(summary["forgetting_ratio"].as_array().unwrap().len(), 5);
    let log = fs::read_to_string(run.join("logs/stage_1.log")).unwrap();
    assert!(log.contains("tau=") && log.contains("capacity=") && log.contains("loss="), "{log}");

    // a completed run is not touched again
    let before = snapshot(&root);
    ok(&fmalloc(&root, &["cl-run", "--config", cfg]));
    ok(&fmalloc(&root, &["pretrain", "--config", cfg]));
    ok(&fmalloc(&root, &["prune", "--config", cfg]));
    assert_eq!(before, snapshot(&root));

    // re-decoding with the archived masks reproduces the stage-time outputs
    let out = fmalloc(&root, &["evaluate", "--config", cfg]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.matches("identical=true").count(), 6, "{text}");
    let eval = fs::read_to_string(run.join("metrics/final_eval.csv")).unwrap();
    assert!(!eval.contains(",false"));

    // a baseline goes to a sibling directory and reuses the pretrained model
    ok(&fmalloc(&root, &["cl-run", "--config", cfg, "--override", "method=seq_finetune"]));
    let runs = run_dirs(&root);
    assert_eq!(runs.len(), 2);
    assert!(runs.iter().any(|r| r.file_name().unwrap().to_string_lossy().starts_with("seq_finetune_order-")));
    let generals = fs::read_dir(root.join("tiny"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("general-"))
        .count();
    assert_eq!(generals, 1);

    // report on a truncated run is flagged partial and still succeeds
    let keep: Vec<&str> = csv.lines().take(1 + 3).collect();
    fs::write(run.join("metrics/bleu_matrix.csv"), keep.join("\n") + "\n").unwrap();
    let out = fmalloc(&root, &["report", "--config", cfg]);
    ok(&out);
    let s: serde_json::Value = serde_json::from_slice(&fs::read(run.join("metrics/summary.json")).unwrap()).unwrap();
    assert_eq!(s["partial"], true);
    assert_eq!(s["completed_stages"], 2);

    // --force redoes the run and restores the full matrix
    ok(&fmalloc(&root, &["cl-run", "--config", cfg, "--force"]));
    assert_eq!(fs::read_to_string(run.join("metrics/bleu_matrix.csv")).unwrap(), csv);
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&fmalloc(&a, &["cl-run", "--config", cfg, "--override", "order=[4,2,0,1,3]"]));
    ok(&fmalloc(&b, &["cl-run", "--config", cfg, "--override", "order=[4,2,0,1,3]"]));
    let (ra, rb) = (&run_dirs(&a)[0], &run_dirs(&b)[0]);
    for f in ["metrics/bleu_matrix.csv", "metrics/summary.json", "masks/archive.json", "metrics/capacity.csv"] {
        assert_eq!(fs::read(ra.join(f)).unwrap(), fs::read(rb.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn order_and_axis_sweeps() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("runs");
    let cfg = tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let out = fmalloc(&root, &["sweep", "--config", cfg, "--orders", "2", "--seed", "7", "--jobs", "2"]);
    ok(&out);
    let runs = run_dirs(&root);
    assert_eq!(runs.len(), 2);
    let table = root.join("tiny/sweeps/fmalloc_orders-2_seed-7/table.csv");
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(!text.contains(",false,"), "{text}");
    // the same seed draws the same orders: nothing new is run
    ok(&fmalloc(&root, &["sweep", "--config", cfg, "--orders", "2", "--seed", "7"]));
    assert_eq!(run_dirs(&root), runs);

    // a single-value sweep matches a plain run with that value
    ok(&fmalloc(&root, &["sweep", "--config", cfg, "--axis", "tau_max", "--values", "50"]));
    let swept = run_dirs(&root).into_iter().find(|p| p.to_string_lossy().ends_with("_tau_max-50")).unwrap();
    let plain = tmp.path().join("plain");
    ok(&fmalloc(&plain, &["cl-run", "--config", cfg, "--override", "tau_max=50"]));
    let plain_run = &run_dirs(&plain)[0];
    assert_eq!(
        fs::read(swept.join("metrics/bleu_matrix.csv")).unwrap(),
        fs::read(plain_run.join("metrics/bleu_matrix.csv")).unwrap()
    );

    // invalid values are rejected before anything runs
    let out = fmalloc(&root, &["sweep", "--config", cfg, "--axis", "tau_max", "--values", "50,-1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failing_sweep_value_is_isolated() {
    use fmalloc_cli::pipeline::{sweep, SweepAxis, SweepSpec};
    use std::os::unix::fs::PermissionsExt;

    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("runs");
    let cfg_path = tiny_config(tmp.path());
    let cfg = fmalloc::config::RunConfig::load(&cfg_path).unwrap();
    // worker wrapper that crashes for one value and runs the real binary otherwise
    let script = tmp.path().join("worker.sh");
    fs::write(
        &script,
        format!(
            "#!/bin/sh\ncase \"$*\" in *_tau_max-200.json*) exit 1;; esac\nexec {} \"$@\"\n",
            env!("CARGO_BIN_EXE_fmalloc")
        ),
    )
    .unwrap();
    fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();
    let spec = SweepSpec::Axis {
        axis: SweepAxis::TauMax,
        values: vec![200.0, 400.0],
    };
    let rows = sweep(&cfg, &spec, &root, 1, false, &script).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(!rows[0].ok && rows[0].error.is_some());
    assert!(rows[1].ok && rows[1].average_bleu.is_some(), "{:?}", rows[1]);
    let table = fs::read_to_string(root.join("tiny/sweeps/fmalloc_tau_max-200-400/table.csv")).unwrap();
    assert!(table.contains(",false,") && table.contains(",true,"), "{table}");
}
