use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fairfed(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairfed"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FAIRFED_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

const SMALL: &str = r#"
name = "small"
algorithms = ["agnosticfair"]

[hyper]
kernels = 8
rounds = 2
local_epochs = 10

[[datasets]]
name = "blobs"
kind = "synthetic"
[datasets.synthetic]
n = 300

[[splits]]
name = "shift"
train_fraction_group_a = 0.8
train_fraction_group_b = 0.2
client_assignment = "by_group"
num_clients = 2
"#;

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p
}

#[test]
fn verify_passes_on_a_fresh_checkout() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fairfed(&["verify"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 3, "{out}");
}

#[test]
fn verify_filter_runs_one_check() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fairfed(&["verify", "--only", "gradient"], tmp.path());
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    assert!(out.starts_with("PASS gradient"), "{out}");
}

#[test]
fn corrupted_lp_tolerance_fails_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fairfed(&["verify", "--only", "lp", "--debug-lp-tolerance", "1000"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("FAIL lp"), "{}", stdout(&o));
}

#[test]
fn unknown_check_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(fairfed(&["verify", "--only", "bogus"], tmp.path()).status.code(), Some(2));
}

#[test]
fn unknown_algorithm_lists_valid_names() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = fairfed(&["run", "--config", cfg.to_str().unwrap(), "--algorithm", "sgd"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in ["fl", "fairfl", "afl", "agnosticfair", "agnosticfair-a", "agnosticfair-b", "localfair"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn missing_config_and_bad_flags_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(fairfed(&["run", "--config", "nope"], tmp.path()).status.code(), Some(2));
    assert_eq!(fairfed(&["run"], tmp.path()).status.code(), Some(2));
    assert_eq!(fairfed(&["frobnicate"], tmp.path()).status.code(), Some(2));
}

#[test]
fn missing_schema_file_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("broken.toml");
    fs::write(
        &cfg,
        r#"
name = "broken"
algorithms = ["fl"]
[[datasets]]
name = "adult"
kind = "csv"
path = "adult.csv"
schema = "missing_schema.toml"
"#,
    )
    .unwrap();
    fs::write(tmp.path().join("adult.csv"), "a,b\n1,2\n").unwrap();
    let o = fairfed(&["prepare", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("missing_schema.toml"));
}

#[test]
fn run_writes_results_and_summary_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("out");
    let o = fairfed(
        &["run", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap(), "--debug-lp-dump", "--seed", "4"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("algorithm=agnosticfair rounds=2 "), "{line}");
    assert!(line.contains("test_rd="));
    let dir = out.join("blobs_shift_agnosticfair_seed4");
    let rounds = fs::read_to_string(dir.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 3);
    assert!(dir.join("result.json").exists());
    assert!(fs::read_to_string(dir.join("messages.jsonl")).unwrap().contains("\"type\":\"bundle\""));
    let dump = fs::read_to_string(dir.join("lp_dump.txt")).unwrap();
    assert_eq!(dump.lines().filter(|l| l.starts_with("objective")).count(), 2);
}

#[test]
fn zero_rounds_reports_initial_model_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = fairfed(
        &["run", "--config", cfg.to_str().unwrap(), "--rounds", "0", "--output", "out"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("rounds=0 "));
    let dir = tmp.path().join("out/blobs_shift_agnosticfair_seed0");
    assert_eq!(fs::read_to_string(dir.join("rounds.csv")).unwrap().lines().count(), 1);
    let json = fs::read_to_string(dir.join("result.json")).unwrap();
    assert!(json.contains("\"per_round\": []"), "{json}");
}

#[test]
fn output_env_var_is_used_unless_flag_given() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = |extra: &[&str]| {
        let mut args = vec!["run", "--config", cfg.to_str().unwrap(), "--rounds", "0"];
        args.extend_from_slice(extra);
        Command::new(env!("CARGO_BIN_EXE_fairfed"))
            .args(&args)
            .current_dir(tmp.path())
            .env("FAIRFED_OUTPUT_DIR", tmp.path().join("from_env"))
            .output()
            .unwrap()
    };
    assert!(run(&[]).status.success());
    assert!(tmp.path().join("from_env/blobs_shift_agnosticfair_seed0").exists());
    assert!(run(&["--output", "from_flag"]).status.success());
    assert!(tmp.path().join("from_flag/blobs_shift_agnosticfair_seed0").exists());
}

#[test]
fn grid_writes_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = fairfed(&["grid", "--config", cfg.to_str().unwrap(), "--output", "g"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("g/summary.csv").exists());
    assert!(tmp.path().join("g/summary.toml").exists());
    assert!(stdout(&o).contains("agnosticfair"));
}

#[test]
fn prepare_adult_lists_two_shards_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p");
    let args = ["prepare", "--config", "adult_shift", "--output", out.to_str().unwrap()];
    let o = fairfed(&args, &repo());
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest_path = out.join("prepared/adult/shift/manifest.toml");
    let first = fs::read_to_string(&manifest_path).unwrap();
    assert_eq!(first.matches("[[shards]]").count(), 2, "{first}");
    assert!(out.join("prepared/adult/shift/shard_1.csv").exists());
    let o = fairfed(&args, &repo());
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&manifest_path).unwrap(), first);
}
