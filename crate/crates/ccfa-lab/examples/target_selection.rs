//! Target-class selection on a small random instance: the exact enumerated
//! assignment, the relaxed LP assignment, and the K=1 shortcut side by side.
//!
//! Usage: `cargo run --release --example target_selection`

use ccfa_lab::ccfa::{select_targets_exact, select_targets_relaxed, ConfidenceMatrix};
use ccfa_lab::numerics::{Matrix, Rng};

fn main() {
    let b = 5;
    let c_old = 4;
    let mut rng = Rng::new(42);
    let mut w = Matrix::zeros(b, c_old);
    for i in 0..b {
        for j in 0..c_old {
            w.set(i, j, rng.unit());
        }
    }
    let w = ConfidenceMatrix {
        w,
        excluded: vec![None; b],
        c_old,
    };

    println!("confidence matrix W ({b} samples x {c_old} old classes):");
    for i in 0..b {
        let row: Vec<String> = w.w.row(i).iter().map(|v| format!("{v:.3}")).collect();
        println!("  [{}]", row.join(", "));
    }
    println!("uniformity constant u = {:.3}\n", w.uniformity());

    let exact = select_targets_exact(&w).unwrap();
    println!(
        "exact enumeration:  targets {:?}  objective {:.4}",
        exact.targets.iter().map(|t| t.unwrap()).collect::<Vec<_>>(),
        exact.objective(&w)
    );

    let mut rng = Rng::new(7);
    let relaxed = select_targets_relaxed(&w, c_old, &mut rng).unwrap();
    println!(
        "relaxed LP (K={c_old}): sampled {:?}  objective {:.4} (>= exact optimum)",
        relaxed.targets.iter().map(|t| t.unwrap()).collect::<Vec<_>>(),
        relaxed.objective(&w)
    );
    println!("relaxed assignment rows:");
    for i in 0..b {
        let row: Vec<String> = relaxed.t.row(i).iter().map(|v| format!("{v:.3}")).collect();
        println!("  [{}]", row.join(", "));
    }

    let mut rng = Rng::new(7);
    let k1 = select_targets_relaxed(&w, 1, &mut rng).unwrap();
    println!(
        "\nK=1 shortcut:       targets {:?}  (row-wise argmax, no optimization)",
        k1.targets.iter().map(|t| t.unwrap()).collect::<Vec<_>>()
    );
}
