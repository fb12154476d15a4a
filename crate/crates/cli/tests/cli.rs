use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
out_dir = "run"

[data.synthetic]
n_tasks = 2
grid_b = { rows = 8, cols = 8, cell_size = 1.0, origin = [0.0, 0.0] }
grid_c = { rows = 4, cols = 4, cell_size = 2.0, origin = [0.0, 0.0] }
dense_rank = 1
sparse_rank = 1
n_samples = 3000
label_noise = 0.05
seed = 2

[schedule]
base_b = { rows = 2, cols = 2, cell_size = 4.0, origin = [0.0, 0.0] }
base_c = { rows = 1, cols = 1, cell_size = 8.0, origin = [0.0, 0.0] }
stages = 3
split_index = 2

[train]
learning_rate = 0.05
batch_size = 32
max_steps_per_stage = 150
eval_every = 25
rank_dense = 1
rank_sparse = 1
seed = 4

[train.criterion]
kind = "entropy_threshold"
tau_s = 1e-3
p_frac = 0.1
check_every = 25
window = 25

[bench]
workers = 2

[[bench.criteria]]
kind = "entropy_threshold"
tau_s = 1e-3
p_frac = 0.1
check_every = 25
window = 25
"#;

fn mrtl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrtl")).args(args).current_dir(dir).env("MRTL_THREADS", "1").output().unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), config).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_populates_the_run_directory() {
    let dir = setup(CONFIG);
    let o = mrtl(&["train", "--config", "c.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["config.toml", "report.json", "diagnostics.jsonl", "factors.csv", "smoothness.csv", "final.ckpt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    assert!(report["final_val_loss"].as_f64().unwrap() > 0.0);
    assert_eq!(report["report"]["factorized_at"], 2);

    // the echoed config reproduces the run
    let echo = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echo.contains("memory_budget") && echo.contains("split_index"));
    std::fs::write(dir.path().join("echo.toml"), echo.replace("out_dir = \"run\"", "out_dir = \"again\"")).unwrap();
    let o = mrtl(&["train", "--config", "echo.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read(run.join("factors.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("again/factors.csv")).unwrap());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = setup(CONFIG);
    assert!(mrtl(&["train", "--config", "c.toml"], dir.path()).status.success());
    let first = std::fs::read(dir.path().join("run/factors.csv")).unwrap();
    std::fs::rename(dir.path().join("run"), dir.path().join("first")).unwrap();
    let o = mrtl(&["train", "--config", "c.toml", "--resume", "first/seg02_init.ckpt"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(first, std::fs::read(dir.path().join("run/factors.csv")).unwrap());
}

#[test]
fn config_errors_exit_1_and_name_the_field() {
    let dir = setup(&CONFIG.replace("learning_rate = 0.05\n", ""));
    let o = mrtl(&["train", "--config", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let dir = setup(&CONFIG.replace(
        "tau_s = 1e-3\np_frac = 0.1\ncheck_every = 25\nwindow = 25\n\n[bench]",
        "p_frac = 0.1\ncheck_every = 25\nwindow = 25\n\n[bench]",
    ));
    let o = mrtl(&["train", "--config", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tau_s"), "{}", stderr(&o));

    let dir = setup(CONFIG);
    let o = mrtl(&["train", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_mrtl"))
        .args(["train", "--config", "c.toml"])
        .current_dir(dir.path())
        .env("MRTL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("MRTL_THREADS"));
}

#[test]
fn bench_counts_runs_and_sweep_rows() {
    let dir = setup(CONFIG);
    let o = mrtl(
        &["bench", "--config", "c.toml", "--methods", "fixed,entropy", "--seeds", "5", "--threshold", "0.68"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("run/bench");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["comparison"]["runs"].as_array().unwrap().len(), 10);
    let curves = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().next(), Some("method,seed,cost,val_loss"));

    let o = mrtl(
        &["bench", "--config", "c.toml", "--sweep", "entropy", "--draws", "20", "--threshold", "0.68"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = std::fs::read_to_string(out.join("sweep_entropy_threshold.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 21);
}

#[test]
fn unknown_method_lists_valid_ones() {
    let dir = setup(CONFIG);
    let o = mrtl(&["bench", "--config", "c.toml", "--methods", "fixed,annealing"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("annealing") && e.contains("mrtl_entropy") && e.contains("fixed_resolution"), "{e}");
}

#[test]
fn bench_needs_a_configured_criterion_for_each_method() {
    let dir = setup(CONFIG);
    let o = mrtl(&["bench", "--config", "c.toml", "--methods", "sigma", "--threshold", "0.6"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("sigma"), "{}", stderr(&o));
}

#[test]
fn export_factors_exit_codes() {
    let dir = setup(CONFIG);
    assert!(mrtl(&["train", "--config", "c.toml"], dir.path()).status.success());
    let o = mrtl(&["export-factors", "run/final.ckpt", "--out", "exported"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(dir.path().join("exported/factors.csv")).unwrap(),
        std::fs::read(dir.path().join("run/factors.csv")).unwrap()
    );
    assert!(dir.path().join("exported/layout_B.csv").is_file());

    let o = mrtl(&["export-factors", "run/seg00_trained.ckpt", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = mrtl(&["export-factors", "nope.ckpt", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let mut bytes = std::fs::read(dir.path().join("run/final.ckpt")).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(dir.path().join("bad.ckpt"), bytes).unwrap();
    let o = mrtl(&["export-factors", "bad.ckpt", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
