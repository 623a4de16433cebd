//! Seeded comparison of augmentation methods on the small-memory synthetic
//! stream: 10 unit-sphere classes in 16-D, 5 initial + 5 single-class
//! stages, one exemplar per class. Prints median average incremental
//! accuracy and forgetting per method.
//!
//! Usage: `cargo run --release --example sweep_compare [n_seeds]`

use ccfa_lab::cli::{median, Method};
use ccfa_lab::data::{class_order_from_seed, generate_synthetic, split_stream, SyntheticSpec};
use ccfa_lab::eval::{average_incremental_accuracy, forgetting};
use ccfa_lab::trainer::run_experiment;

mod common;
use common::small_memory_config;

fn main() {
    let n_seeds: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10);
    let methods = [
        Method::Baseline,
        Method::Ccfa,
        Method::CcfaGt,
        Method::GaussianNoise,
    ];

    println!("{:<16} {:>8} {:>10}  (over {n_seeds} seeds)", "method", "acc", "forget");
    let cfg = small_memory_config();
    for method in methods {
        let mut accs = Vec::new();
        let mut forgets = Vec::new();
        for seed in 0..n_seeds {
            let spec: &SyntheticSpec = cfg.data.synthetic.as_ref().unwrap();
            let (train, test) = generate_synthetic(spec, seed).unwrap();
            let order = class_order_from_seed(spec.classes, seed);
            let stream =
                split_stream(&train, &test, cfg.split.initial, cfg.split.increment, &order)
                    .unwrap();
            let mut run_cfg = cfg.clone();
            run_cfg.method = method;
            let out = run_experiment(&stream, &run_cfg.setup_for_seed(seed)).unwrap();
            accs.push(average_incremental_accuracy(&out.records).unwrap());
            forgets.push(forgetting(&out.records).unwrap());
        }
        println!(
            "{:<16} {:>8.4} {:>10.4}",
            format!("{method:?}"),
            median(&accs),
            median(&forgets)
        );
    }
}
