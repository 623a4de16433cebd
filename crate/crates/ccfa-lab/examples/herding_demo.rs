//! Herding exemplar selection vs random subsets: how close each exemplar
//! mean stays to the true class mean as the budget grows.
//!
//! Usage: `cargo run --release --example herding_demo`

use ccfa_lab::memory::herding_select;
use ccfa_lab::numerics::{Matrix, Rng};

fn mean_distance(features: &Matrix, idx: &[usize]) -> f64 {
    let d = features.cols();
    let n = features.rows();
    let mut dist = 0.0;
    for k in 0..d {
        let class_mean: f64 = (0..n).map(|i| features.get(i, k)).sum::<f64>() / n as f64;
        let subset_mean: f64 =
            idx.iter().map(|&i| features.get(i, k)).sum::<f64>() / idx.len() as f64;
        dist += (class_mean - subset_mean).powi(2);
    }
    dist.sqrt()
}

fn main() {
    let mut rng = Rng::new(2024);
    let features = rng.gaussian_matrix(100, 8);

    println!(
        "{:>6} {:>14} {:>20}",
        "m", "herding dist", "random dist (mean)"
    );
    for m in [1usize, 2, 5, 10, 20] {
        let herded = herding_select(&features, m).unwrap();
        let herd_dist = mean_distance(&features, &herded);

        let trials = 200;
        let mut random_total = 0.0;
        for _ in 0..trials {
            let mut idx: Vec<usize> = (0..features.rows()).collect();
            rng.shuffle(&mut idx);
            random_total += mean_distance(&features, &idx[..m]);
        }
        println!(
            "{:>6} {:>14.5} {:>20.5}",
            m,
            herd_dist,
            random_total / trials as f64
        );
    }
    println!("\nfirst 5 herding picks: {:?}", herding_select(&features, 5).unwrap());
}
