//! Exit-code and artifact contracts of the command-line surface.

use ccfa_lab::cli::{run_cli, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};
use std::path::Path;
use std::sync::{Mutex, MutexGuard};

/// `run`/`sweep` consult the output-root environment variable; tests that
/// execute them hold this lock so the env-override test cannot race them.
static ENV_LOCK: Mutex<()> = Mutex::new(());

fn env_lock() -> MutexGuard<'static, ()> {
    ENV_LOCK.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn small_config(out_dir: &Path, method: &str, extra: &str) -> String {
    format!(
        r#"
name = "{method}"
method = "{method}"
memory_per_class = 1
seed = 5
output_dir = "{}"
{extra}

[data.synthetic]
dim = 8
classes = 4
train_per_class = 20
test_per_class = 8
concentration = 8.0

[split]
initial = 2
increment = 1

[stage]
epochs = 4
batch_size = 16
finetune_epochs = 2

[stage.lr]
initial = 0.1
milestones = [3]
factor = 0.1

[stage.loss]
eta = 16.0

[stage.attack]
multiplier = 2
steps = 5
"#,
        out_dir.display()
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn cli(args: &[&str]) -> i32 {
    run_cli(std::iter::once("ccfa-lab").chain(args.iter().copied()))
}

#[test]
fn run_writes_expected_artifacts() {
    let _guard = env_lock();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "run.toml", &small_config(&out, "ccfa", ""));
    assert_eq!(cli(&["run", "--config", cfg.to_str().unwrap()]), EXIT_OK);

    let run_dir = out.join("ccfa_seed5");
    for name in [
        "config.resolved",
        "records.jsonl",
        "summary.json",
        "curves.csv",
        "timings.csv",
        "buffer.json",
    ] {
        assert!(run_dir.join(name).exists(), "{name} missing");
    }
}

#[test]
fn unknown_key_exits_2_and_names_the_key() {
    let _guard = env_lock();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let bad = small_config(&out, "ccfa", "") + "\nfoo = 1\n";
    let cfg = write_config(tmp.path(), "bad.toml", &bad);
    assert_eq!(cli(&["run", "--config", cfg.to_str().unwrap()]), EXIT_CONFIG);
    // The parse error itself names the key; verify via the library parser.
    let err = ccfa_lab::cli::ExperimentConfig::from_toml(&bad).unwrap_err();
    assert!(err.to_string().contains("foo"));
}

#[test]
fn missing_config_file_exits_2() {
    assert_eq!(cli(&["run", "--config", "/nonexistent/x.toml"]), EXIT_CONFIG);
}

#[test]
fn runtime_failure_exits_1() {
    let _guard = env_lock();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let text = format!(
        r#"
method = "ccfa"
output_dir = "{}"

[data]
feature_file = "{}/missing.bin"

[split]
initial = 2
increment = 1
"#,
        out.display(),
        tmp.path().display()
    );
    let cfg = write_config(tmp.path(), "rt.toml", &text);
    assert_eq!(cli(&["run", "--config", cfg.to_str().unwrap()]), EXIT_RUNTIME);
}

#[test]
fn baseline_equals_ccfa_with_zero_multiplier() {
    let _guard = env_lock();
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    // Identical name so the resolved configs (and hashes) can be compared
    // on everything that matters; multiplier 0 disables the attack.
    let cfg_a = write_config(
        tmp.path(),
        "baseline.toml",
        &small_config(&out_a, "baseline", ""),
    );
    let text_b = small_config(&out_b, "ccfa", "").replace("multiplier = 2", "multiplier = 0");
    let cfg_b = write_config(tmp.path(), "ccfa0.toml", &text_b);

    assert_eq!(cli(&["run", "--config", cfg_a.to_str().unwrap()]), EXIT_OK);
    assert_eq!(cli(&["run", "--config", cfg_b.to_str().unwrap()]), EXIT_OK);

    let rec_a = std::fs::read_to_string(out_a.join("baseline_seed5/records.jsonl")).unwrap();
    let rec_b = std::fs::read_to_string(out_b.join("ccfa_seed5/records.jsonl")).unwrap();
    assert_eq!(rec_a, rec_b, "ablation control must match the baseline");
}

#[test]
fn sweep_single_seed_matches_run() {
    let _guard = env_lock();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "cfg.toml", &small_config(&out, "ccfa", ""));

    assert_eq!(cli(&["run", "--config", cfg.to_str().unwrap()]), EXIT_OK);
    let keep_records = std::fs::read(out.join("ccfa_seed5/records.jsonl")).unwrap();
    let keep_summary = std::fs::read(out.join("ccfa_seed5/summary.json")).unwrap();

    assert_eq!(
        cli(&["sweep", "--config", cfg.to_str().unwrap(), "--seeds", "5"]),
        EXIT_OK
    );
    assert_eq!(
        std::fs::read(out.join("ccfa_seed5/records.jsonl")).unwrap(),
        keep_records
    );
    assert_eq!(
        std::fs::read(out.join("ccfa_seed5/summary.json")).unwrap(),
        keep_summary
    );
    assert!(out.join("aggregate.csv").exists());
}

#[test]
fn sweep_aggregate_is_order_independent() {
    let _guard = env_lock();
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    let cfg_a = write_config(tmp.path(), "a.toml", &small_config(&out_a, "ccfa", ""));
    let cfg_b = write_config(tmp.path(), "b.toml", &small_config(&out_b, "ccfa", ""));

    assert_eq!(
        cli(&["sweep", "--config", cfg_a.to_str().unwrap(), "--seeds", "1,2", "--jobs", "2"]),
        EXIT_OK
    );
    assert_eq!(
        cli(&["sweep", "--config", cfg_b.to_str().unwrap(), "--seeds", "2,1"]),
        EXIT_OK
    );
    assert_eq!(
        std::fs::read(out_a.join("aggregate.csv")).unwrap(),
        std::fs::read(out_b.join("aggregate.csv")).unwrap()
    );
}

#[test]
fn sweep_runs_multiple_methods() {
    let _guard = env_lock();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "cfg.toml", &small_config(&out, "ccfa", ""));
    assert_eq!(
        cli(&[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--seeds",
            "1",
            "--methods",
            "baseline,ccfa",
        ]),
        EXIT_OK
    );
    let agg = std::fs::read_to_string(out.join("aggregate.csv")).unwrap();
    assert!(agg.contains("baseline,average_incremental_accuracy"));
    assert!(agg.contains("ccfa,average_incremental_accuracy"));
}

#[test]
fn gradcheck_exit_codes() {
    assert_eq!(cli(&["gradcheck"]), EXIT_OK);
    assert_eq!(cli(&["gradcheck", "--corrupt", "pod_flat"]), EXIT_RUNTIME);

    // Every loss kind appears exactly once in the battery.
    let entries = ccfa_lab::losses::gradcheck_battery(1, None);
    let mut names: Vec<&str> = entries.iter().map(|e| e.name).collect();
    let total = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), total);
    assert_eq!(total, 6);
}

#[test]
fn oracle_exit_codes_and_budget() {
    assert_eq!(
        cli(&["oracle", "--b", "4", "--c", "3", "--trials", "100", "--seed", "9"]),
        EXIT_OK
    );
    // Same seed twice: deterministic instance set, same verdict.
    assert_eq!(
        cli(&["oracle", "--b", "4", "--c", "3", "--trials", "100", "--seed", "9"]),
        EXIT_OK
    );
    assert_eq!(cli(&["oracle", "--b", "7", "--c", "3"]), EXIT_CONFIG);
}

#[test]
fn report_verifies_and_detects_tampering() {
    let _guard = env_lock();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "cfg.toml", &small_config(&out, "ccfa", ""));
    assert_eq!(cli(&["run", "--config", cfg.to_str().unwrap()]), EXIT_OK);

    let run_dir = out.join("ccfa_seed5");
    assert_eq!(cli(&["report", "--dir", run_dir.to_str().unwrap()]), EXIT_OK);
    // Sweep-style report over the parent directory.
    assert_eq!(cli(&["report", "--dir", out.to_str().unwrap()]), EXIT_OK);

    // Tamper with the stored summary: report must fail.
    let summary_path = run_dir.join("summary.json");
    let tampered = std::fs::read_to_string(&summary_path)
        .unwrap()
        .replacen("\"average_incremental_accuracy\": ", "\"average_incremental_accuracy\": 9", 1);
    std::fs::write(&summary_path, tampered).unwrap();
    assert_eq!(
        cli(&["report", "--dir", run_dir.to_str().unwrap()]),
        EXIT_RUNTIME
    );
}

#[test]
fn rerun_from_resolved_config_is_byte_identical() {
    let _guard = env_lock();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "cfg.toml", &small_config(&out, "ccfa", ""));
    assert_eq!(cli(&["run", "--config", cfg.to_str().unwrap()]), EXIT_OK);

    let run_dir = out.join("ccfa_seed5");
    let first_records = std::fs::read(run_dir.join("records.jsonl")).unwrap();
    let first_summary = std::fs::read(run_dir.join("summary.json")).unwrap();

    // Re-run straight from the echoed resolved config (overwrites in place).
    let resolved = run_dir.join("config.resolved");
    assert_eq!(cli(&["run", "--config", resolved.to_str().unwrap()]), EXIT_OK);
    assert_eq!(
        std::fs::read(run_dir.join("records.jsonl")).unwrap(),
        first_records
    );
    assert_eq!(
        std::fs::read(run_dir.join("summary.json")).unwrap(),
        first_summary
    );
}

#[test]
fn feature_file_runs_end_to_end() {
    let _guard = env_lock();
    use ccfa_lab::data::{generate_synthetic, save_feature_file, SyntheticSpec};
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    let (train, _) = generate_synthetic(
        &SyntheticSpec {
            dim: 8,
            classes: 4,
            train_per_class: 24,
            test_per_class: 1,
            concentration: 8.0,
        },
        3,
    )
    .unwrap();
    let file = tmp.path().join("features.bin");
    save_feature_file(&train, &file).unwrap();

    let text = format!(
        r#"
method = "ccfa"
memory_per_class = 1
seed = 2
output_dir = "{}"

[data]
feature_file = "{}"

[split]
initial = 2
increment = 1

[stage]
epochs = 3
batch_size = 16
finetune_epochs = 1

[stage.lr]
initial = 0.1
milestones = []
factor = 0.1

[stage.loss]
eta = 16.0

[stage.attack]
multiplier = 1
steps = 5
"#,
        out.display(),
        file.display()
    );
    let cfg = write_config(tmp.path(), "file.toml", &text);
    assert_eq!(cli(&["run", "--config", cfg.to_str().unwrap()]), EXIT_OK);
    assert!(out.join("ccfa_seed2/summary.json").exists());
}

#[test]
fn out_root_env_var_overrides_config() {
    let _guard = env_lock();
    // The one test that touches the process environment.
    let tmp = tempfile::tempdir().unwrap();
    let override_root = tmp.path().join("override");
    let cfg_out = tmp.path().join("ignored");
    let cfg = write_config(
        tmp.path(),
        "cfg.toml",
        &small_config(&cfg_out, "ccfa", ""),
    );
    std::env::set_var(ccfa_lab::cli::OUT_ROOT_ENV, &override_root);
    let code = cli(&["run", "--config", cfg.to_str().unwrap()]);
    std::env::remove_var(ccfa_lab::cli::OUT_ROOT_ENV);
    assert_eq!(code, EXIT_OK);
    assert!(override_root.join("ccfa_seed5/summary.json").exists());
    assert!(!cfg_out.exists());
}
