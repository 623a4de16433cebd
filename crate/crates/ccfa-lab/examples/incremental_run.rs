//! One full incremental run on the small-memory stream, printing per-stage
//! accuracy and the end-of-run summary.
//!
//! Usage: `cargo run --release --example incremental_run [method] [seed]`
//! with method one of baseline | ccfa | ccfa_gt | ccfa_random |
//! ccfa_farthest | gaussian_noise.

use ccfa_lab::cli::method_from_slug;
use ccfa_lab::data::{class_order_from_seed, generate_synthetic, split_stream};
use ccfa_lab::eval::{average_incremental_accuracy, average_new_accuracy, forgetting};
use ccfa_lab::trainer::run_experiment;

mod common;
use common::small_memory_config;

fn main() {
    let method = std::env::args().nth(1).unwrap_or_else(|| "ccfa".into());
    let seed: u64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);

    let mut cfg = small_memory_config();
    cfg.method = method_from_slug(&method).expect("valid method");

    let spec = cfg.data.synthetic.as_ref().unwrap();
    let (train, test) = generate_synthetic(spec, seed).unwrap();
    let order = class_order_from_seed(spec.classes, seed);
    let stream =
        split_stream(&train, &test, cfg.split.initial, cfg.split.increment, &order).unwrap();

    println!(
        "method {method}, seed {seed}: {} stages over {} classes\n",
        stream.stages(),
        stream.total_classes
    );
    let out = run_experiment(&stream, &cfg.setup_for_seed(seed)).unwrap();

    println!("{:>6} {:>10} {:>10} {:>10}", "stage", "acc", "new acc", "secs");
    for r in &out.records {
        println!(
            "{:>6} {:>10.4} {:>10} {:>10.2}",
            r.stage,
            r.accuracy,
            r.new_class_accuracy
                .map_or("-".to_string(), |v| format!("{v:.4}")),
            r.wall_time_secs
        );
    }
    println!(
        "\navg incremental accuracy {:.4}   forgetting {:.4}   avg new accuracy {:.4}",
        average_incremental_accuracy(&out.records).unwrap(),
        forgetting(&out.records).unwrap(),
        average_new_accuracy(&out.records).unwrap()
    );
}
