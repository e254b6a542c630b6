//! Surface-level checks of the `driftsel` binary: exit codes, dry runs, and
//! regeneration determinism of derived artifacts.

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[world]
num_users = 15
initial_catalog = 50
topics = 3
drift_rate = 0.3
new_items_per_month = 1
new_users_per_month = 0
events_per_user_per_month = 8.0
seed = 3

[stream]
start = "2021-07-01"

[model]
dim = 8
depth = 1
max_len = 20

[protocol]
pretrain_end = "2022-01-01"
horizon = 1
ref_size = 20
max_chunk_len = 20
seed = 3

[protocol.pretrain]
epochs = 1
learning_rate = 1e-3
negative_samples = 8
batch_size = 8
seed = 0

[protocol.update]
epochs = 1
learning_rate = 5e-4
negative_samples = 8
batch_size = 8
seed = 0

[[arms]]
name = "none"
mode = "none"

[[arms]]
name = "random"
mode = "select"
strategy = "random"

[output]
dir = "out"
"#;

fn driftsel(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftsel"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn setup() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, CONFIG).unwrap();
    (dir, path)
}

#[test]
fn validate_reports_the_plan_and_exits_zero() {
    let (dir, cfg) = setup();
    let out = driftsel(&["validate", cfg.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("config ok"));
    assert!(text.contains("none, random"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let (dir, cfg) = setup();
    // Schema violation: unknown key.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, CONFIG.replace("drift_rate", "drift_rte")).unwrap();
    let out = driftsel(&["validate", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    // Semantic violation via override.
    let out = driftsel(
        &["validate", cfg.to_str().unwrap(), "--set", "protocol.budget=1.5"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget"));
}

#[test]
fn plot_without_a_report_exits_with_code_three() {
    let (dir, _) = setup();
    let out = driftsel(&["plot", "nowhere"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn generate_twice_is_byte_identical() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    assert!(driftsel(&["generate", cfg], dir.path()).status.success());
    let first = std::fs::read(dir.path().join("out/stream.jsonl")).unwrap();
    assert!(driftsel(&["generate", cfg], dir.path()).status.success());
    let second = std::fs::read(dir.path().join("out/stream.jsonl")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn dry_run_prints_the_matrix_without_writing_reports() {
    let (dir, cfg) = setup();
    let out = driftsel(&["run", cfg.to_str().unwrap(), "--dry-run"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("pretrain:"));
    assert!(text.contains("arm none"));
    assert!(text.contains("arm random"));
    assert!(!dir.path().join("out/report.json").exists());
}

#[test]
fn plots_regenerate_byte_identically() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    assert!(driftsel(&["run", cfg], dir.path()).status.success());
    let out_dir = dir.path().join("out");
    assert!(driftsel(&["plot", out_dir.to_str().unwrap()], dir.path()).status.success());
    let plot = out_dir.join("plots/ndcg_at_50.svg");
    let first = std::fs::read(&plot).unwrap();
    assert!(driftsel(&["plot", out_dir.to_str().unwrap()], dir.path()).status.success());
    assert_eq!(first, std::fs::read(&plot).unwrap());
    // Without a full-data arm the error-reduction table is skipped.
    assert!(!out_dir.join("plots/error_reduction.csv").exists());
}

#[test]
fn flops_table_lists_every_method() {
    let (dir, _) = setup();
    let out = driftsel(&["flops", "--n", "500", "--r", "50"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for method in ["Random", "TokenBag", "RepSim", "GradSim"] {
        assert!(text.contains(method), "missing {method} row");
    }
}
