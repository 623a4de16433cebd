//! Command-line surface: `run`, `sweep`, `gradcheck`, `oracle`, `report`.
//!
//! Exit codes are a stable contract: 0 success, 1 runtime failure, 2
//! configuration error. All run artifacts are written atomically
//! (temp file + rename) and, wall-clock timings aside, are byte-identical
//! across reruns with the same resolved config and seed.

mod config;

pub use config::{method_from_slug, method_slug, DataConfig, ExperimentConfig, Method, SplitConfig};

use crate::ccfa::{self, ConfidenceMatrix};
use crate::data::{
    class_order_from_seed, generate_synthetic, load_feature_csv, load_feature_file, split_stream,
    TaskStream,
};
use crate::error::{Error, Result};
use crate::eval::{curves_csv, dump_points, summarize, MetricsRecord, Summary};
use crate::losses::{gradcheck_battery, BATTERY_TOLERANCE};
use crate::numerics::{Matrix, Rng};
use crate::trainer::{run_experiment, RunOutput};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Environment variable overriding every config's output root.
pub const OUT_ROOT_ENV: &str = "CCFA_LAB_OUT";

#[derive(Parser)]
#[command(name = "ccfa-lab", version, about = "Class-incremental learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one config across many seeds and aggregate.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Methods to sweep (defaults to the config's method).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        /// Deliberately corrupt one loss gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Verify target-selection optimality on random instances.
    Oracle {
        #[arg(long)]
        b: usize,
        #[arg(long)]
        c: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute metrics from stored records and verify the summary.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Entry point shared by the binary and the tests.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version through this path as well.
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Sweep {
            config,
            seeds,
            jobs,
            methods,
        } => cmd_sweep(&config, &seeds, jobs, &methods),
        Command::Gradcheck { corrupt } => cmd_gradcheck(corrupt.as_deref()),
        Command::Oracle {
            b,
            c,
            trials,
            seed,
        } => cmd_oracle(b, c, trials, seed),
        Command::Report { dir } => cmd_report(&dir),
    }
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text)
}

fn out_root(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root),
        None => cfg.output_dir.clone(),
    }
}

pub fn cmd_run(config_path: &Path) -> i32 {
    let cfg = match load_config(config_path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let root = out_root(&cfg);
    match execute_run(&cfg, cfg.seed, &root) {
        Ok(run_dir) => {
            println!("run complete: {}", run_dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("runtime error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Build the stream, run the experiment, and write all artifacts under
/// `<root>/<run-id>/`. Returns the run directory.
pub fn execute_run(cfg: &ExperimentConfig, seed: u64, root: &Path) -> Result<PathBuf> {
    let stream = build_stream(cfg, seed)?;
    let setup = cfg.setup_for_seed(seed);
    let output = run_experiment(&stream, &setup)?;

    let run_dir = root.join(cfg.run_id(seed));
    std::fs::create_dir_all(&run_dir)?;

    // Resolved config: defaults applied, seed pinned to this run.
    let mut resolved = cfg.clone();
    resolved.seed = seed;
    let resolved_text = resolved.to_toml()?;
    write_atomic(&run_dir.join("config.resolved"), resolved_text.as_bytes())?;

    let config_hash = format!("{:016x}", fnv1a64(resolved_text.as_bytes()));
    let summary = summarize(&output.records, config_hash, seed)?;

    let mut records_text = String::new();
    for record in &output.records {
        records_text.push_str(&serde_json::to_string(record)?);
        records_text.push('\n');
    }
    write_atomic(&run_dir.join("records.jsonl"), records_text.as_bytes())?;
    write_atomic(
        &run_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    write_atomic(
        &run_dir.join("curves.csv"),
        curves_csv(&output.records).as_bytes(),
    )?;

    let mut timings = String::from("stage,wall_time_secs\n");
    for r in &output.records {
        timings.push_str(&format!("{},{}\n", r.stage, r.wall_time_secs));
    }
    write_atomic(&run_dir.join("timings.csv"), timings.as_bytes())?;

    write_atomic(
        &run_dir.join("buffer.json"),
        output.buffer.to_json()?.as_bytes(),
    )?;

    if cfg.dump_points {
        write_point_dumps(&run_dir, &stream, &output, seed)?;
    }

    Ok(run_dir)
}

fn build_stream(cfg: &ExperimentConfig, seed: u64) -> Result<TaskStream> {
    let (train, test) = match (&cfg.data.synthetic, &cfg.data.feature_file) {
        (Some(spec), None) => generate_synthetic(spec, seed)?,
        (None, Some(path)) => {
            let set = if path.extension().is_some_and(|e| e == "csv") {
                load_feature_csv(path)?
            } else {
                load_feature_file(path)?
            };
            // Deterministic per-class split: last quarter of each class's
            // rows becomes test data.
            split_loaded(set)?
        }
        _ => return Err(Error::Config("exactly one data source".into())),
    };
    let order = match &cfg.class_order {
        Some(order) => order.clone(),
        None => class_order_from_seed(train.num_classes, seed),
    };
    split_stream(&train, &test, cfg.split.initial, cfg.split.increment, &order)
}

/// Hold out the tail of each class as test data (3:1 train:test).
fn split_loaded(
    set: crate::data::LabeledFeatures,
) -> Result<(crate::data::LabeledFeatures, crate::data::LabeledFeatures)> {
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in 0..set.num_classes {
        let rows: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == class).collect();
        let cut = (rows.len() * 3).div_ceil(4);
        train_idx.extend_from_slice(&rows[..cut]);
        test_idx.extend_from_slice(&rows[cut..]);
    }
    let select = |idx: &[usize]| crate::data::LabeledFeatures {
        features: set.features.select_rows(idx),
        labels: idx.iter().map(|&i| set.labels[i]).collect(),
        num_classes: set.num_classes,
    };
    Ok((select(&train_idx), select(&test_idx)))
}

/// Dump the figure's three populations: memory-buffer features, one
/// augmentation pass over them, and all training features.
fn write_point_dumps(
    run_dir: &Path,
    stream: &TaskStream,
    output: &RunOutput,
    seed: u64,
) -> Result<()> {
    let model = &output.model;

    let mut mem_feats: Option<Matrix> = None;
    let mut mem_labels: Vec<usize> = Vec::new();
    for (&class, indices) in &output.buffer.exemplars {
        let t = stream
            .tasks
            .iter()
            .position(|t| t.classes.contains(&class))
            .expect("class has a task");
        let rows = stream.tasks[t].train.features.select_rows(indices);
        mem_feats = Some(match mem_feats {
            None => rows,
            Some(f) => f.vstack(&rows)?,
        });
        mem_labels.extend(std::iter::repeat_n(class, indices.len()));
    }
    if let Some(raw) = mem_feats {
        let z = model.extractor.forward(&raw)?;
        write_atomic(
            &run_dir.join("points_memory.csv"),
            dump_points(&z, &mem_labels, "memory").as_bytes(),
        )?;

        // One augmentation pass against the final snapshot.
        let snap = crate::model::snapshot(model, stream.stages());
        let label_cols = model.class_indices(&mem_labels)?;
        let cfg = ccfa::AttackConfig::default();
        let batch = ccfa::augment(
            &z,
            &label_cols,
            model,
            Some(&snap),
            &cfg,
            &Rng::new(seed).derive("dump"),
        )?;
        if !batch.is_empty() {
            write_atomic(
                &run_dir.join("points_augmented.csv"),
                dump_points(&batch.features, &batch.pseudo_labels, "augmented").as_bytes(),
            )?;
        }
    }

    let mut all_feats: Option<Matrix> = None;
    let mut all_labels = Vec::new();
    for task in &stream.tasks {
        let z = model.extractor.forward(&task.train.features)?;
        all_feats = Some(match all_feats {
            None => z,
            Some(f) => f.vstack(&z)?,
        });
        all_labels.extend_from_slice(&task.train.labels);
    }
    if let Some(f) = all_feats {
        write_atomic(
            &run_dir.join("points_traindata.csv"),
            dump_points(&f, &all_labels, "traindata").as_bytes(),
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub fn cmd_sweep(config_path: &Path, seeds: &[u64], jobs: usize, methods: &[String]) -> i32 {
    let cfg = match load_config(config_path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    if seeds.is_empty() {
        eprintln!("config error: at least one seed required");
        return EXIT_CONFIG;
    }
    let methods: Vec<Method> = if methods.is_empty() {
        vec![cfg.method]
    } else {
        match methods.iter().map(|m| method_from_slug(m)).collect() {
            Ok(m) => m,
            Err(e) => {
                eprintln!("config error: {e}");
                return EXIT_CONFIG;
            }
        }
    };
    let root = out_root(&cfg);
    match sweep(&cfg, seeds, jobs.max(1), &methods, &root) {
        Ok(0) => EXIT_OK,
        Ok(failures) => {
            eprintln!("{failures} run(s) failed");
            EXIT_RUNTIME
        }
        Err(e) => {
            eprintln!("runtime error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// One summary per (method, seed), collected by the sweep.
pub struct SweepResult {
    pub method: Method,
    pub seed: u64,
    pub summary: Summary,
}

/// Run the config over methods x seeds with a share-nothing worker pool.
/// Returns the number of failed runs; per-run artifacts land in
/// `<root>/<run-id>/` and the aggregate in `<root>/aggregate.csv`.
pub fn sweep(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    jobs: usize,
    methods: &[Method],
    root: &Path,
) -> Result<usize> {
    let mut work: Vec<(Method, u64)> = Vec::new();
    for &method in methods {
        for &seed in seeds {
            work.push((method, seed));
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<std::result::Result<SweepResult, String>>> =
        Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..jobs.min(work.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= work.len() {
                    break;
                }
                let (method, seed) = work[i];
                let mut run_cfg = cfg.clone();
                run_cfg.method = method;
                run_cfg.name = Some(method_slug(method).to_string());
                let outcome = execute_run(&run_cfg, seed, root)
                    .and_then(|dir| {
                        let text = std::fs::read_to_string(dir.join("summary.json"))?;
                        Ok(serde_json::from_str::<Summary>(&text)?)
                    })
                    .map(|summary| SweepResult {
                        method,
                        seed,
                        summary,
                    })
                    .map_err(|e| format!("{} seed {}: {e}", method_slug(method), seed));
                results.lock().unwrap().push(outcome);
            });
        }
    });

    let results = results.into_inner().unwrap();
    let mut failures = 0;
    let mut ok: Vec<SweepResult> = Vec::new();
    for r in results {
        match r {
            Ok(s) => ok.push(s),
            Err(msg) => {
                eprintln!("sweep failure: {msg}");
                failures += 1;
            }
        }
    }
    // Deterministic aggregate regardless of completion order.
    ok.sort_by_key(|s| (method_slug(s.method), s.seed));
    let csv = aggregate_csv(&ok);
    std::fs::create_dir_all(root)?;
    write_atomic(&root.join("aggregate.csv"), csv.as_bytes())?;
    println!("{csv}");
    Ok(failures)
}

/// Median; even-length inputs average the middle pair.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Interquartile range via medians of the lower/upper halves.
pub fn iqr(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let lower = &v[..n / 2];
    let upper = &v[n.div_ceil(2)..];
    median(upper) - median(lower)
}

fn aggregate_csv(results: &[SweepResult]) -> String {
    let mut out = String::from("method,metric,median,iqr,n\n");
    let mut methods: Vec<Method> = Vec::new();
    for r in results {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    for method in methods {
        let rows: Vec<&SweepResult> = results.iter().filter(|r| r.method == method).collect();
        let metrics: [(&str, Vec<f64>); 3] = [
            (
                "average_incremental_accuracy",
                rows.iter()
                    .map(|r| r.summary.average_incremental_accuracy)
                    .collect(),
            ),
            (
                "forgetting",
                rows.iter().filter_map(|r| r.summary.forgetting).collect(),
            ),
            (
                "average_new_accuracy",
                rows.iter()
                    .filter_map(|r| r.summary.average_new_accuracy)
                    .collect(),
            ),
        ];
        for (name, values) in metrics {
            if values.is_empty() {
                continue;
            }
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                method_slug(method),
                name,
                median(&values),
                iqr(&values),
                values.len()
            ));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub fn cmd_gradcheck(corrupt: Option<&str>) -> i32 {
    let entries = gradcheck_battery(0xCCFA, corrupt);
    let mut all_ok = true;
    for e in &entries {
        println!(
            "{} {:<22} max_rel_err {:.3e} max_abs_err {:.3e} probes {}",
            if e.passed { "PASS" } else { "FAIL" },
            e.name,
            e.report.max_rel_err,
            e.report.max_abs_err,
            e.report.probe_count
        );
        all_ok &= e.passed;
    }
    println!(
        "gradcheck: {}/{} losses within rel err {BATTERY_TOLERANCE:.0e}",
        entries.iter().filter(|e| e.passed).count(),
        entries.len()
    );
    if all_ok {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    }
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

/// Random-instance verification of the target-selection solvers:
/// (a) the exact enumerator's objective equals an independent full
/// enumeration, (b) the relaxed LP objective dominates the binary optimum,
/// (c) the K=1 path equals the row-wise argmax.
pub fn cmd_oracle(b: usize, c: usize, trials: usize, seed: u64) -> i32 {
    if b > ccfa::EXACT_MAX_B || c > ccfa::EXACT_MAX_C {
        eprintln!(
            "config error: instance b={b}, c={c} exceeds enumeration budget b<={}, c<={}",
            ccfa::EXACT_MAX_B,
            ccfa::EXACT_MAX_C
        );
        return EXIT_CONFIG;
    }
    if b == 0 || c == 0 || trials == 0 {
        eprintln!("config error: b, c, trials must be positive");
        return EXIT_CONFIG;
    }
    match oracle_trials(b, c, trials, seed) {
        Ok(()) => {
            println!("oracle: {trials} instances verified (b={b}, c={c})");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("oracle violation: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn oracle_trials(b: usize, c: usize, trials: usize, seed: u64) -> Result<()> {
    let root = Rng::new(seed);
    for trial in 0..trials {
        let mut rng = root.derive_indexed("oracle", trial as u64);
        let mut w = Matrix::zeros(b, c);
        for i in 0..b {
            for j in 0..c {
                w.set(i, j, rng.unit());
            }
        }
        let w = ConfidenceMatrix {
            w,
            excluded: vec![None; b],
            c_old: c,
        };

        let exact = ccfa::select_targets_exact(&w)?;
        let exact_obj = exact.objective(&w);

        // (a) independent enumeration
        let u = w.uniformity();
        let mut best = f64::NEG_INFINITY;
        let mut cursor = vec![0usize; b];
        'outer: loop {
            let mut value = 0.0;
            let mut counts = vec![0.0; c];
            for i in 0..b {
                value += w.w.get(i, cursor[i]);
                counts[cursor[i]] += 1.0;
            }
            value -= counts.iter().map(|&x| (x - u).abs()).sum::<f64>();
            best = best.max(value);
            let mut pos = b;
            loop {
                if pos == 0 {
                    break 'outer;
                }
                pos -= 1;
                cursor[pos] += 1;
                if cursor[pos] < c {
                    break;
                }
                cursor[pos] = 0;
                if pos == 0 {
                    break 'outer;
                }
            }
        }
        if (exact_obj - best).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "trial {trial}: exact objective {exact_obj} != enumerated maximum {best}; W = {:?}",
                w.w
            )));
        }

        // (b) relaxation bound with full support
        let mut lp_rng = rng.derive("lp-sample");
        let relaxed = ccfa::select_targets_relaxed(&w, c, &mut lp_rng)?;
        let relaxed_obj = relaxed.objective(&w);
        if relaxed_obj < exact_obj - 1e-7 {
            return Err(Error::Config(format!(
                "trial {trial}: relaxed objective {relaxed_obj} < exact {exact_obj}; W = {:?}",
                w.w
            )));
        }

        // (c) K=1 equals the row-wise argmax
        let mut k1_rng = rng.derive("k1-sample");
        let k1 = ccfa::select_targets_relaxed(&w, 1, &mut k1_rng)?;
        for i in 0..b {
            let mut argmax = 0;
            for j in 1..c {
                if w.w.get(i, j) > w.w.get(i, argmax) {
                    argmax = j;
                }
            }
            if k1.targets[i] != Some(argmax) {
                return Err(Error::Config(format!(
                    "trial {trial}: K=1 target {:?} != argmax {argmax} in row {i}; W = {:?}",
                    k1.targets[i], w.w
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub fn cmd_report(dir: &Path) -> i32 {
    match report(dir) {
        Ok(text) => {
            println!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("report error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Recompute the summary from `records.jsonl` and check it against the
/// stored `summary.json`; for sweep directories, recompute the aggregate.
pub fn report(dir: &Path) -> Result<String> {
    let records_path = dir.join("records.jsonl");
    if records_path.exists() {
        let text = std::fs::read_to_string(&records_path)?;
        let records: Vec<MetricsRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let stored: Summary =
            serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json"))?)?;
        let recomputed = summarize(&records, stored.config_hash.clone(), stored.seed)?;
        if recomputed != stored {
            return Err(Error::Config(format!(
                "summary mismatch: stored {stored:?}, recomputed {recomputed:?}"
            )));
        }
        return Ok(format!(
            "run {}: avg incremental accuracy {:.4}, forgetting {}, avg new accuracy {} \
             (recomputed from {} records, matches stored summary)",
            dir.display(),
            recomputed.average_incremental_accuracy,
            recomputed
                .forgetting
                .map_or("n/a".to_string(), |v| format!("{v:.4}")),
            recomputed
                .average_new_accuracy
                .map_or("n/a".to_string(), |v| format!("{v:.4}")),
            records.len()
        ));
    }

    // Sweep directory: collect per-run summaries from subdirectories.
    let mut results = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for sub in entries {
        let summary_path = sub.join("summary.json");
        if !summary_path.exists() {
            continue;
        }
        let summary: Summary =
            serde_json::from_str(&std::fs::read_to_string(&summary_path)?)?;
        let name = sub.file_name().unwrap().to_string_lossy().to_string();
        let method = name.rsplit_once("_seed").map(|(m, _)| m.to_string());
        let method = method
            .and_then(|m| method_from_slug(&m).ok())
            .unwrap_or(Method::Ccfa);
        results.push(SweepResult {
            method,
            seed: summary.seed,
            summary,
        });
    }
    if results.is_empty() {
        return Err(Error::Config(format!(
            "{} holds neither records.jsonl nor run subdirectories",
            dir.display()
        )));
    }
    results.sort_by_key(|s| (method_slug(s.method), s.seed));
    Ok(aggregate_csv(&results))
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

/// Write via a temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().unwrap_or_default().to_string_lossy(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
