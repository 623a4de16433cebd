//! Run a 2-D stream and dump plottable point clouds: memory exemplars,
//! augmented features, and the full training data, as points_*.csv files.
//!
//! Usage: `cargo run --release --example feature_dump [out_dir]`

use ccfa_lab::cli::{execute_run, ExperimentConfig};
use std::path::PathBuf;

fn main() {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| PathBuf::from("out/feature_dump"));

    let toml = r#"
method = "ccfa"
memory_per_class = 3
seed = 1
dump_points = true

[data.synthetic]
dim = 2
classes = 6
train_per_class = 60
test_per_class = 15
concentration = 40.0

[split]
initial = 3
increment = 1

[stage]
epochs = 15
batch_size = 30
finetune_epochs = 8

[stage.lr]
initial = 0.1
milestones = [10]
factor = 0.1

[stage.loss]
eta = 16.0
"#;
    let cfg = ExperimentConfig::from_toml(toml).unwrap();
    let run_dir = execute_run(&cfg, cfg.seed, &out).unwrap();
    println!("wrote artifacts under {}", run_dir.display());
    for name in [
        "points_memory.csv",
        "points_augmented.csv",
        "points_traindata.csv",
        "summary.json",
        "curves.csv",
    ] {
        let path = run_dir.join(name);
        println!(
            "  {name}: {}",
            if path.exists() { "ok" } else { "missing" }
        );
    }
}
