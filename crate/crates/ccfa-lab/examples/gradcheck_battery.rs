//! Finite-difference verification of every loss gradient in the crate.
//!
//! Usage: `cargo run --release --example gradcheck_battery`

use ccfa_lab::losses::{gradcheck_battery, BATTERY_TOLERANCE};

fn main() {
    let entries = gradcheck_battery(0xCCFA, None);
    println!(
        "{:<24} {:>12} {:>12} {:>8}  status",
        "loss", "max_rel_err", "max_abs_err", "probes"
    );
    let mut failures = 0;
    for e in &entries {
        println!(
            "{:<24} {:>12.3e} {:>12.3e} {:>8}  {}",
            e.name,
            e.report.max_rel_err,
            e.report.max_abs_err,
            e.report.probe_count,
            if e.passed { "ok" } else { "FAIL" }
        );
        if !e.passed {
            failures += 1;
        }
    }
    println!("\ntolerance: rel err <= {BATTERY_TOLERANCE:e}");
    std::process::exit(if failures == 0 { 0 } else { 1 });
}
