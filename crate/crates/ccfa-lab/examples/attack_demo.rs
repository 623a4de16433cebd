//! Sign-gradient feature attack against a frozen 2-class cosine classifier,
//! with the per-step trajectory printed as CSV.
//!
//! Usage: `cargo run --release --example attack_demo`

use ccfa_lab::ccfa::{pgd_attack_traced, pseudo_label, trace_to_csv};
use ccfa_lab::model::{snapshot, Classifier, FeatureExtractor, Model};
use ccfa_lab::numerics::Matrix;

fn main() {
    // Orthogonal unit prototypes in 2-D; the feature starts on class 0.
    let protos = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let model = Model::new(
        FeatureExtractor::identity(2),
        Classifier::cosine(protos, 1.0),
        vec![0, 1],
    );
    let snap = snapshot(&model, 1);

    let z0 = Matrix::from_rows(&[&[1.0, 0.0]]);
    let target = vec![1usize];
    let (z_prime, trace) = pgd_attack_traced(&z0, &target, &snap, 0.05, 50).unwrap();

    println!("start   ({:.3}, {:.3})", z0.get(0, 0), z0.get(0, 1));
    println!(
        "end     ({:.3}, {:.3})",
        z_prime.get(0, 0),
        z_prime.get(0, 1)
    );
    println!(
        "pseudo-label: {:?} (target was class 1)\n",
        pseudo_label(&z_prime, &snap).unwrap()
    );
    println!("{}", trace_to_csv(&trace));
}
