//! Cross-class feature augmentation: confidence matrix, target-class
//! selection, the sign-gradient feature attack, pseudo-labeling, and
//! augmented-batch assembly.
//!
//! The flow at stage `k >= 2`: confidences of old classes come from the
//! *current* classifier, each sample's ground-truth column is zeroed, a
//! target old class is selected per sample, the feature is pushed toward
//! that class by attacking the *frozen previous* classifier, and the
//! perturbed feature keeps whatever label the frozen classifier assigns it.

pub mod lp;

use crate::error::{Error, Result};
use crate::losses::cls_loss;
use crate::model::{Model, ModelSnapshot};
use crate::numerics::{Matrix, Rng};
use serde::{Deserialize, Serialize};

/// Enumeration budget for the exact Eq.-style selector.
pub const EXACT_MAX_B: usize = 6;
pub const EXACT_MAX_C: usize = 5;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Old-class confidences with ground-truth entries zeroed.
#[derive(Debug, Clone)]
pub struct ConfidenceMatrix {
    /// `b x c_old`.
    pub w: Matrix,
    /// For each row, the old-class column that is its ground truth (samples
    /// of still-current classes have none). Targets never land here.
    pub excluded: Vec<Option<usize>>,
    pub c_old: usize,
}

impl ConfidenceMatrix {
    pub fn batch_size(&self) -> usize {
        self.w.rows()
    }

    /// Per-class target mass that makes the selection perfectly even.
    pub fn uniformity(&self) -> f64 {
        self.w.rows() as f64 / self.c_old as f64
    }

    /// Columns row `i` may select.
    fn candidates(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let excl = self.excluded[i];
        (0..self.c_old).filter(move |&j| Some(j) != excl)
    }
}

/// Output of target selection: the (possibly relaxed) assignment matrix and
/// the per-row sampled target columns. `None` marks rows with no eligible
/// target class; those rows are skipped by the attack.
#[derive(Debug, Clone)]
pub struct TargetAssignment {
    /// `b x c_old`; rows are one-hot (exact / K=1) or distributions.
    pub t: Matrix,
    /// Sampled target column per row, in old-class column space.
    pub targets: Vec<Option<usize>>,
    /// `u = b / c_old`.
    pub uniformity: f64,
    pub k: usize,
}

impl TargetAssignment {
    /// Eq-style objective of the (relaxed) assignment:
    /// `sum_ij W_ij T_ij - sum_j |sum_i T_ij - u|`.
    pub fn objective(&self, w: &ConfidenceMatrix) -> f64 {
        let mut value = 0.0;
        let mut mass = vec![0.0; w.c_old];
        for i in 0..self.t.rows() {
            for j in 0..w.c_old {
                let t = self.t.get(i, j);
                value += w.w.get(i, j) * t;
                mass[j] += t;
            }
        }
        let u = self.uniformity;
        value - mass.iter().map(|&m| (m - u).abs()).sum::<f64>()
    }
}

/// How the attack initializes, per the initialization ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackInit {
    /// Start from the extracted feature.
    Feature,
    /// Start from standard-Gaussian rows.
    GaussianNoise,
}

/// Target-class selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetStrategy {
    /// Highest-confidence old class (the K=1 shortcut).
    Nearest,
    /// Top-K support with the relaxed LP assignment, then sampling.
    RelaxedLp,
    /// Uniformly random eligible old class.
    Random,
    /// Lowest-confidence old class.
    Farthest,
    /// The sample's own (old) label; new-class samples are skipped.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// PGD iteration count N.
    pub steps: usize,
    /// Step size range; each augmented copy draws one alpha uniformly.
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub init: AttackInit,
    /// Augmented copies per batch (augmented rows = multiplier * b).
    pub multiplier: usize,
    pub target_strategy: TargetStrategy,
    /// Support size for `RelaxedLp`.
    pub top_k: usize,
    /// Use raw logits instead of softmax probabilities for the confidence
    /// matrix (sensitivity flag).
    pub raw_logits: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            steps: 10,
            alpha_lo: 2.0 / 255.0,
            alpha_hi: 5.0 / 255.0,
            init: AttackInit::Feature,
            multiplier: 5,
            target_strategy: TargetStrategy::Nearest,
            top_k: 1,
            raw_logits: false,
        }
    }
}

/// Where an augmented row came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Row index in the source batch.
    pub source: usize,
    /// Attacked target column (old-class space); `None` for noise rows.
    pub target: Option<usize>,
    /// Step size used (noise rows record sigma).
    pub alpha: f64,
}

/// Perturbed features plus their pseudo-labels.
#[derive(Debug, Clone, Default)]
pub struct AugmentedBatch {
    pub features: Matrix,
    /// Pseudo-labels as old-class column indices (valid in both the snapshot
    /// and the expanded current classifier, whose first columns are the old
    /// classes).
    pub pseudo_cols: Vec<usize>,
    /// Pseudo-labels as dataset labels.
    pub pseudo_labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl AugmentedBatch {
    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    fn concat(mut self, other: AugmentedBatch) -> AugmentedBatch {
        if self.is_empty() {
            return other;
        }
        if other.is_empty() {
            return self;
        }
        self.features = self.features.vstack(&other.features).expect("same dim");
        self.pseudo_cols.extend(other.pseudo_cols);
        self.pseudo_labels.extend(other.pseudo_labels);
        self.provenance.extend(other.provenance);
        self
    }
}

// ---------------------------------------------------------------------------
// Confidence matrix (ground-truth columns zeroed)
// ---------------------------------------------------------------------------

/// Old-class confidences of the current classifier. Softmax over all current
/// classes is applied first (unless `raw_logits`), then columns are
/// restricted to the `c_old` old classes and each sample's own old-class
/// column is set to zero.
pub fn confidence_matrix(
    z: &Matrix,
    label_cols: &[usize],
    current: &Model,
    c_old: usize,
    raw_logits: bool,
) -> Result<ConfidenceMatrix> {
    if c_old == 0 {
        return Err(Error::EmptyInput("old classes"));
    }
    let logits = current.classifier.logits(z)?;
    let (b, c_total) = logits.shape();
    assert!(c_old <= c_total);
    let mut w = Matrix::zeros(b, c_old);
    let mut excluded = vec![None; b];
    for i in 0..b {
        let row = logits.row(i);
        if raw_logits {
            for j in 0..c_old {
                w.set(i, j, row[j]);
            }
        } else {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..c_old {
                w.set(i, j, exps[j] / total);
            }
        }
        if label_cols[i] < c_old {
            w.set(i, label_cols[i], 0.0);
            excluded[i] = Some(label_cols[i]);
        }
    }
    Ok(ConfidenceMatrix { w, excluded, c_old })
}

// ---------------------------------------------------------------------------
// Target selection
// ---------------------------------------------------------------------------

/// Globally optimal one-hot assignment by exhaustive enumeration over all
/// `c_old^b` candidate assignments (minus excluded ground-truth columns).
/// Assignments are visited in lexicographic order and replaced only on a
/// strict improvement, so ties resolve to the lexicographically smallest
/// assignment.
pub fn select_targets_exact(w: &ConfidenceMatrix) -> Result<TargetAssignment> {
    let b = w.batch_size();
    if b > EXACT_MAX_B || w.c_old > EXACT_MAX_C {
        return Err(Error::EnumerationBudget {
            b,
            c_old: w.c_old,
            max_b: EXACT_MAX_B,
            max_c: EXACT_MAX_C,
        });
    }
    let candidates: Vec<Vec<usize>> = (0..b).map(|i| w.candidates(i).collect()).collect();
    if candidates.iter().any(|c| c.is_empty()) {
        return Err(Error::EmptyInput("row has no eligible target class"));
    }
    let u = w.uniformity();

    let mut cursor = vec![0usize; b];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let assignment: Vec<usize> = (0..b).map(|i| candidates[i][cursor[i]]).collect();
        let mut value = 0.0;
        let mut counts = vec![0.0; w.c_old];
        for (i, &j) in assignment.iter().enumerate() {
            value += w.w.get(i, j);
            counts[j] += 1.0;
        }
        value -= counts.iter().map(|&c| (c - u).abs()).sum::<f64>();
        let better = match &best {
            None => true,
            Some((bv, _)) => value > *bv,
        };
        if better {
            best = Some((value, assignment));
        }
        // Odometer increment; the last row varies fastest so the visit
        // order is lexicographic in (row0, row1, ...).
        let mut pos = b;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            cursor[pos] += 1;
            if cursor[pos] < candidates[pos].len() {
                break;
            }
            cursor[pos] = 0;
            if pos == 0 {
                pos = usize::MAX;
                break;
            }
        }
        if pos == usize::MAX {
            break;
        }
    }

    let (_, assignment) = best.expect("at least one assignment");
    let mut t = Matrix::zeros(b, w.c_old);
    for (i, &j) in assignment.iter().enumerate() {
        t.set(i, j, 1.0);
    }
    Ok(TargetAssignment {
        t,
        targets: assignment.into_iter().map(Some).collect(),
        uniformity: u,
        k: w.c_old,
    })
}

/// Continuous relaxation with per-row support restricted to the top-K
/// confidences. `K = 1` short-circuits to the per-row argmax with no
/// optimization; rows whose confidences are all zero fall back to a uniform
/// distribution over their eligible classes. Targets are sampled from the
/// rows of the solved assignment matrix.
pub fn select_targets_relaxed(
    w: &ConfidenceMatrix,
    k: usize,
    rng: &mut Rng,
) -> Result<TargetAssignment> {
    assert!(k >= 1, "top-K needs K >= 1");
    let b = w.batch_size();
    let u = w.uniformity();

    // Top-K support per row: sort candidates by confidence, ties toward the
    // lower class index.
    let supports: Vec<Vec<usize>> = (0..b)
        .map(|i| {
            let mut cand: Vec<usize> = w.candidates(i).collect();
            cand.sort_by(|&a, &c| {
                w.w.get(i, c)
                    .partial_cmp(&w.w.get(i, a))
                    .unwrap()
                    .then(a.cmp(&c))
            });
            cand.truncate(k);
            cand
        })
        .collect();

    let mut t = Matrix::zeros(b, w.c_old);
    let mut targets: Vec<Option<usize>> = vec![None; b];

    let zero_row = |i: usize| supports[i].iter().all(|&j| w.w.get(i, j) == 0.0);

    if k == 1 {
        for i in 0..b {
            match supports[i].first() {
                None => {}
                Some(&j) => {
                    if zero_row(i) {
                        // No signal: sample uniformly over eligible classes.
                        let cand: Vec<usize> = w.candidates(i).collect();
                        let pick = cand[rng.below(cand.len())];
                        t.set(i, pick, 1.0);
                        targets[i] = Some(pick);
                    } else {
                        t.set(i, j, 1.0);
                        targets[i] = Some(j);
                    }
                }
            }
        }
        return Ok(TargetAssignment {
            t,
            targets,
            uniformity: u,
            k,
        });
    }

    // Variable layout: one T variable per (row, support slot), then one
    // auxiliary s_j per class linearizing |mass_j - u|.
    let active: Vec<usize> = (0..b).filter(|&i| !supports[i].is_empty()).collect();
    let mut var_of: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut n_vars = 0;
    for &i in &active {
        for _ in &supports[i] {
            var_of[i].push(n_vars);
            n_vars += 1;
        }
    }
    let s_base = n_vars;
    n_vars += w.c_old;

    let mut objective = vec![0.0; n_vars];
    for &i in &active {
        for (slot, &j) in supports[i].iter().enumerate() {
            objective[var_of[i][slot]] = w.w.get(i, j);
        }
    }
    for j in 0..w.c_old {
        objective[s_base + j] = -1.0;
    }

    let mut constraints = Vec::new();
    for &i in &active {
        let mut row = vec![0.0; n_vars];
        for &v in &var_of[i] {
            row[v] = 1.0;
        }
        constraints.push((row, lp::Relation::Eq, 1.0));
    }
    for j in 0..w.c_old {
        let mut mass = vec![0.0; n_vars];
        for &i in &active {
            for (slot, &jj) in supports[i].iter().enumerate() {
                if jj == j {
                    mass[var_of[i][slot]] = 1.0;
                }
            }
        }
        // s_j >= mass_j - u  and  s_j >= u - mass_j
        let mut le = mass.clone();
        le[s_base + j] = -1.0;
        constraints.push((le, lp::Relation::Le, u));
        let mut ge = mass;
        ge[s_base + j] = 1.0;
        constraints.push((ge, lp::Relation::Ge, u));
    }

    let sol = lp::solve(&lp::LinearProgram {
        objective,
        constraints,
    })?;

    for &i in &active {
        let mut weights = vec![0.0; supports[i].len()];
        for (slot, &j) in supports[i].iter().enumerate() {
            let v = sol.x[var_of[i][slot]].max(0.0);
            t.set(i, j, v);
            weights[slot] = v;
        }
        let total: f64 = weights.iter().sum();
        let slot = if zero_row(i) && total <= 0.0 {
            rng.below(supports[i].len())
        } else if total <= 0.0 {
            0
        } else {
            rng.weighted_index(&weights)
        };
        targets[i] = Some(supports[i][slot]);
    }

    Ok(TargetAssignment {
        t,
        targets,
        uniformity: u,
        k,
    })
}

/// Ablation target strategies. `Random` draws uniformly over eligible old
/// classes, `Farthest` picks the minimum-confidence eligible class, and
/// `GroundTruth` keeps the sample's own label (skipping samples whose label
/// is not an old class).
pub fn select_targets_ablation(
    strategy: TargetStrategy,
    w: &ConfidenceMatrix,
    rng: &mut Rng,
) -> Vec<Option<usize>> {
    let b = w.batch_size();
    let mut targets = vec![None; b];
    for i in 0..b {
        targets[i] = match strategy {
            TargetStrategy::Random => {
                let cand: Vec<usize> = w.candidates(i).collect();
                if cand.is_empty() {
                    None
                } else {
                    Some(cand[rng.below(cand.len())])
                }
            }
            TargetStrategy::Farthest => w
                .candidates(i)
                .min_by(|&a, &c| {
                    w.w.get(i, a)
                        .partial_cmp(&w.w.get(i, c))
                        .unwrap()
                        .then(a.cmp(&c))
                }),
            TargetStrategy::GroundTruth => w.excluded[i],
            TargetStrategy::Nearest | TargetStrategy::RelaxedLp => {
                unreachable!("handled by the selection solvers")
            }
        };
    }
    targets
}

// ---------------------------------------------------------------------------
// PGD feature attack and pseudo-labeling
// ---------------------------------------------------------------------------

/// `N` sign-gradient steps against the frozen snapshot classifier:
/// `z <- z - alpha * sign(grad_z loss(g_old(z), target))`, with the
/// snapshot's native classification loss. The perturbation magnitude is
/// unbounded; with `N = 0` or `alpha = 0` the output equals the
/// initialization (the feature itself, or Gaussian rows in noise mode).
pub fn pgd_attack(
    z0: &Matrix,
    target_cols: &[usize],
    snapshot: &ModelSnapshot,
    alpha: f64,
    steps: usize,
    init: AttackInit,
    rng: &mut Rng,
) -> Result<Matrix> {
    let mut z = match init {
        AttackInit::Feature => z0.clone(),
        AttackInit::GaussianNoise => rng.gaussian_matrix(z0.rows(), z0.cols()),
    };
    if z.rows() == 0 {
        return Ok(z);
    }
    let clf = snapshot.classifier();
    let kind = clf.native_loss();
    for step in 0..steps {
        if alpha == 0.0 {
            break;
        }
        let (_, grad, _) = cls_loss(clf, &z, target_cols, kind, false)?;
        if grad.check_finite("attack gradient").is_err() {
            return Err(Error::AttackDiverged { step });
        }
        for (zv, gv) in z.data_mut().iter_mut().zip(grad.data()) {
            *zv -= alpha * gv.signum_or_zero();
        }
    }
    Ok(z)
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// One row of the optional attack trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    /// Mean over rows of (target logit - best non-target logit).
    pub logit_gap: f64,
}

/// [`pgd_attack`] with a per-step trajectory for debugging dumps.
pub fn pgd_attack_traced(
    z0: &Matrix,
    target_cols: &[usize],
    snapshot: &ModelSnapshot,
    alpha: f64,
    steps: usize,
) -> Result<(Matrix, Vec<TraceRow>)> {
    let mut z = z0.clone();
    let clf = snapshot.classifier();
    let kind = clf.native_loss();
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (value, grad, _) = cls_loss(clf, &z, target_cols, kind, false)?;
        let logits = clf.logits(&z)?;
        let mut gap = 0.0;
        for i in 0..z.rows() {
            let t = target_cols[i];
            let target_logit = logits.get(i, t);
            let best_other = (0..logits.cols())
                .filter(|&j| j != t)
                .map(|j| logits.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            gap += target_logit - best_other;
        }
        trace.push(TraceRow {
            step,
            loss: value,
            logit_gap: gap / z.rows().max(1) as f64,
        });
        if step == steps {
            break;
        }
        if grad.check_finite("attack gradient").is_err() {
            return Err(Error::AttackDiverged { step });
        }
        for (zv, gv) in z.data_mut().iter_mut().zip(grad.data()) {
            *zv -= alpha * gv.signum_or_zero();
        }
    }
    Ok((z, trace))
}

/// CSV serialization of an attack trace (`step,loss,logit_gap`).
pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,loss,logit_gap\n");
    for row in trace {
        out.push_str(&format!("{},{},{}\n", row.step, row.loss, row.logit_gap));
    }
    out
}

/// Argmax of the frozen classifier over perturbed features; ties break
/// toward the lower column. Returns old-class column indices.
pub fn pseudo_label_cols(z_prime: &Matrix, snapshot: &ModelSnapshot) -> Result<Vec<usize>> {
    let logits = snapshot.classifier().logits(z_prime)?;
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Pseudo-labels as dataset labels (members of the old label set).
pub fn pseudo_label(z_prime: &Matrix, snapshot: &ModelSnapshot) -> Result<Vec<usize>> {
    let cols = pseudo_label_cols(z_prime, snapshot)?;
    Ok(cols
        .into_iter()
        .map(|c| snapshot.known_classes()[c])
        .collect())
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

/// Full augmentation of one feature batch: `multiplier` independent copies,
/// each with a fresh step size drawn from `[alpha_lo, alpha_hi]` and its own
/// derived RNG streams. Confidences come from the current classifier, the
/// attack runs against the frozen snapshot, and pseudo-labels are whatever
/// the snapshot assigns (matched or not). At stage 1 (no old classes) the
/// batch is empty.
pub fn augment(
    z: &Matrix,
    label_cols: &[usize],
    current: &Model,
    snapshot: Option<&ModelSnapshot>,
    cfg: &AttackConfig,
    rng: &Rng,
) -> Result<AugmentedBatch> {
    let Some(snapshot) = snapshot else {
        return Ok(AugmentedBatch::default());
    };
    let c_old = snapshot.known_classes().len();
    if c_old == 0 || z.rows() == 0 || cfg.multiplier == 0 {
        return Ok(AugmentedBatch::default());
    }

    let w = confidence_matrix(z, label_cols, current, c_old, cfg.raw_logits)?;
    let mut batch = AugmentedBatch::default();
    for copy in 0..cfg.multiplier {
        let mut alpha_rng = rng.derive_indexed("ccfa/alpha", copy as u64);
        let mut target_rng = rng.derive_indexed("ccfa/target", copy as u64);
        let mut init_rng = rng.derive_indexed("ccfa/init", copy as u64);
        let alpha = alpha_rng.uniform(cfg.alpha_lo, cfg.alpha_hi);

        let targets = match cfg.target_strategy {
            TargetStrategy::Nearest => select_targets_relaxed(&w, 1, &mut target_rng)?.targets,
            TargetStrategy::RelaxedLp => {
                select_targets_relaxed(&w, cfg.top_k, &mut target_rng)?.targets
            }
            s => select_targets_ablation(s, &w, &mut target_rng),
        };

        let kept: Vec<usize> = (0..z.rows()).filter(|&i| targets[i].is_some()).collect();
        if kept.is_empty() {
            continue;
        }
        let target_cols: Vec<usize> = kept.iter().map(|&i| targets[i].unwrap()).collect();
        let z_src = z.select_rows(&kept);
        let z_prime = pgd_attack(
            &z_src,
            &target_cols,
            snapshot,
            alpha,
            cfg.steps,
            cfg.init,
            &mut init_rng,
        )?;
        let pseudo_cols = pseudo_label_cols(&z_prime, snapshot)?;
        let pseudo_labels: Vec<usize> = pseudo_cols
            .iter()
            .map(|&c| snapshot.known_classes()[c])
            .collect();
        let provenance = kept
            .iter()
            .zip(&target_cols)
            .map(|(&source, &t)| Provenance {
                source,
                target: Some(t),
                alpha,
            })
            .collect();
        batch = batch.concat(AugmentedBatch {
            features: z_prime,
            pseudo_cols,
            pseudo_labels,
            provenance,
        });
    }
    Ok(batch)
}

/// Gaussian-noise baseline: `z + sigma * eps` with standard-normal `eps`,
/// pseudo-labeled by the snapshot. Used only as a comparison method.
pub fn gaussian_noise_augment(
    z: &Matrix,
    snapshot: Option<&ModelSnapshot>,
    sigma: f64,
    multiplier: usize,
    rng: &Rng,
) -> Result<AugmentedBatch> {
    let Some(snapshot) = snapshot else {
        return Ok(AugmentedBatch::default());
    };
    if snapshot.known_classes().is_empty() || z.rows() == 0 {
        return Ok(AugmentedBatch::default());
    }
    let mut batch = AugmentedBatch::default();
    for copy in 0..multiplier {
        let mut noise_rng = rng.derive_indexed("noise", copy as u64);
        let eps = noise_rng.gaussian_matrix(z.rows(), z.cols());
        let mut z_prime = z.clone();
        z_prime.add_scaled(&eps, sigma)?;
        let pseudo_cols = pseudo_label_cols(&z_prime, snapshot)?;
        let pseudo_labels: Vec<usize> = pseudo_cols
            .iter()
            .map(|&c| snapshot.known_classes()[c])
            .collect();
        let provenance = (0..z.rows())
            .map(|source| Provenance {
                source,
                target: None,
                alpha: sigma,
            })
            .collect();
        batch = batch.concat(AugmentedBatch {
            features: z_prime,
            pseudo_cols,
            pseudo_labels,
            provenance,
        });
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{snapshot, Classifier, FeatureExtractor, Model};
    use crate::numerics::NORM_EPS;

    fn toy_model(c: usize, d: usize, seed: u64) -> Model {
        let mut rng = Rng::new(seed);
        Model::new(
            FeatureExtractor::identity(d),
            Classifier::cosine(rng.gaussian_matrix(c, d), 1.0),
            (0..c).collect(),
        )
    }

    /// W built directly (no label exclusions), as the oracle command does.
    fn raw_w(w: Matrix) -> ConfidenceMatrix {
        let b = w.rows();
        let c_old = w.cols();
        ConfidenceMatrix {
            w,
            excluded: vec![None; b],
            c_old,
        }
    }

    #[test]
    fn confidence_zeroes_old_gt_only() {
        let model = toy_model(4, 3, 1);
        let mut rng = Rng::new(2);
        let z = rng.gaussian_matrix(3, 3).row_normalize(NORM_EPS).0;
        // labels: old class 1, old class 0, new class 3 (c_old = 2)
        let w = confidence_matrix(&z, &[1, 0, 3], &model, 2, false).unwrap();
        assert_eq!(w.w.get(0, 1), 0.0);
        assert_eq!(w.w.get(1, 0), 0.0);
        assert!(w.w.get(0, 0) > 0.0);
        assert!(w.w.get(2, 0) > 0.0 && w.w.get(2, 1) > 0.0);
        assert_eq!(w.excluded, vec![Some(1), Some(0), None]);
    }

    #[test]
    fn confidence_uniform_when_logits_equal() {
        // Identical prototypes give identical logits for every class.
        let protos = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let model = Model::new(
            FeatureExtractor::identity(2),
            Classifier::cosine(protos, 1.0),
            vec![0, 1, 2, 3],
        );
        let z = Matrix::from_rows(&[&[0.0, 1.0]]);
        let w = confidence_matrix(&z, &[3], &model, 2, false).unwrap();
        // softmax over all 4 classes -> each restricted entry = 1/4
        assert!((w.w.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((w.w.get(0, 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn exact_rejects_overbudget() {
        let w = raw_w(Matrix::zeros(7, 2));
        assert!(matches!(
            select_targets_exact(&w).unwrap_err(),
            Error::EnumerationBudget { b: 7, .. }
        ));
    }

    #[test]
    fn exact_all_zero_ties_pick_lexicographic() {
        let w = raw_w(Matrix::zeros(2, 2));
        let t = select_targets_exact(&w).unwrap();
        assert_eq!(t.targets, vec![Some(0), Some(1)]);
    }

    #[test]
    fn exact_distinct_column_maxima_give_permutation() {
        let w = raw_w(Matrix::from_rows(&[
            &[0.9, 0.0, 0.0],
            &[0.0, 0.9, 0.0],
            &[0.0, 0.0, 0.9],
        ]));
        let t = select_targets_exact(&w).unwrap();
        assert_eq!(t.targets, vec![Some(0), Some(1), Some(2)]);
        // permutation => uniformity penalty 0
        assert!((t.objective(&w) - 2.7).abs() < 1e-12);
    }

    #[test]
    fn exact_matches_full_enumeration_objective() {
        let mut rng = Rng::new(77);
        for _ in 0..20 {
            let w = raw_w(rng.gaussian_matrix(4, 3).map(f64::abs));
            let t = select_targets_exact(&w).unwrap();
            let got = t.objective(&w);

            // Independent enumeration of all 81 assignments.
            let u = w.uniformity();
            let mut best = f64::NEG_INFINITY;
            for code in 0..81 {
                let mut c = code;
                let mut counts = [0.0f64; 3];
                let mut value = 0.0;
                for i in 0..4 {
                    let j = c % 3;
                    c /= 3;
                    value += w.w.get(i, j);
                    counts[j] += 1.0;
                }
                value -= counts.iter().map(|&x| (x - u).abs()).sum::<f64>();
                best = best.max(value);
            }
            assert!((got - best).abs() < 1e-9, "{got} vs {best}");
        }
    }

    #[test]
    fn relaxed_k1_is_rowwise_argmax_with_low_index_ties() {
        let w = raw_w(Matrix::from_rows(&[
            &[0.2, 0.7, 0.1],
            &[0.4, 0.4, 0.1], // tie -> class 0
        ]));
        let mut rng = Rng::new(0);
        let t = select_targets_relaxed(&w, 1, &mut rng).unwrap();
        assert_eq!(t.targets, vec![Some(1), Some(0)]);
        assert_eq!(t.t.get(0, 1), 1.0);
    }

    #[test]
    fn relaxed_objective_bounds_exact_optimum() {
        let rng = Rng::new(5150);
        for trial in 0..30 {
            let mut gen = rng.derive_indexed("instance", trial);
            let w = raw_w(gen.gaussian_matrix(4, 3).map(f64::abs));
            let exact = select_targets_exact(&w).unwrap();
            let mut srng = gen.derive("sample");
            let relaxed = select_targets_relaxed(&w, 3, &mut srng).unwrap();
            let bound = relaxed.objective(&w);
            let opt = exact.objective(&w);
            assert!(
                bound >= opt - 1e-7,
                "trial {trial}: relaxed {bound} < exact {opt}"
            );
            // Sampled targets live inside the top-K support.
            for (i, t) in relaxed.targets.iter().enumerate() {
                let t = t.unwrap();
                assert!(w.candidates(i).any(|j| j == t));
            }
        }
    }

    #[test]
    fn relaxed_zero_row_falls_back_to_uniform_over_eligible() {
        let w = ConfidenceMatrix {
            w: Matrix::zeros(1, 3),
            excluded: vec![Some(1)],
            c_old: 3,
        };
        let mut seen = [false; 3];
        for seed in 0..40 {
            let mut rng = Rng::new(seed);
            let t = select_targets_relaxed(&w, 1, &mut rng).unwrap();
            let pick = t.targets[0].unwrap();
            assert_ne!(pick, 1, "excluded class picked");
            seen[pick] = true;
        }
        assert!(seen[0] && seen[2], "fallback not uniform: {seen:?}");
    }

    #[test]
    fn ablation_random_forced_single_class() {
        let w = ConfidenceMatrix {
            w: Matrix::zeros(1, 1),
            excluded: vec![None], // new-class sample
            c_old: 1,
        };
        let mut rng = Rng::new(3);
        let t = select_targets_ablation(TargetStrategy::Random, &w, &mut rng);
        assert_eq!(t, vec![Some(0)]);
    }

    #[test]
    fn ablation_farthest_picks_min_confidence() {
        let w = raw_w(Matrix::from_rows(&[&[0.7, 0.1, 0.2]]));
        let mut rng = Rng::new(3);
        let t = select_targets_ablation(TargetStrategy::Farthest, &w, &mut rng);
        assert_eq!(t, vec![Some(1)]);
    }

    #[test]
    fn ablation_ground_truth_skips_new_class_samples() {
        let w = ConfidenceMatrix {
            w: Matrix::zeros(2, 2),
            excluded: vec![Some(1), None],
            c_old: 2,
        };
        let mut rng = Rng::new(3);
        let t = select_targets_ablation(TargetStrategy::GroundTruth, &w, &mut rng);
        assert_eq!(t, vec![Some(1), None]);
    }

    fn two_class_snapshot() -> ModelSnapshot {
        let protos = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let model = Model::new(
            FeatureExtractor::identity(2),
            Classifier::cosine(protos, 1.0),
            vec![0, 1],
        );
        snapshot(&model, 1)
    }

    #[test]
    fn attack_identity_when_zero_steps_or_zero_alpha() {
        let snap = two_class_snapshot();
        let z0 = Matrix::from_rows(&[&[1.0, 0.0]]);
        let mut rng = Rng::new(1);
        let a = pgd_attack(&z0, &[1], &snap, 0.05, 0, AttackInit::Feature, &mut rng).unwrap();
        assert!(a.bit_eq(&z0));
        let b = pgd_attack(&z0, &[1], &snap, 0.0, 50, AttackInit::Feature, &mut rng).unwrap();
        assert!(b.bit_eq(&z0));
    }

    #[test]
    fn attack_crosses_to_target_class() {
        let snap = two_class_snapshot();
        let z0 = Matrix::from_rows(&[&[1.0, 0.0]]);
        let mut rng = Rng::new(1);
        let z = pgd_attack(&z0, &[1], &snap, 0.05, 50, AttackInit::Feature, &mut rng).unwrap();
        let logits = snap.classifier().logits(&z).unwrap();
        assert!(
            logits.get(0, 1) > logits.get(0, 0),
            "target logit {} vs source {}",
            logits.get(0, 1),
            logits.get(0, 0)
        );
    }

    #[test]
    fn successful_attack_pseudo_labels_match_targets() {
        // Well-separated prototypes (orthogonal axes) and a generous attack
        // budget: pseudo-labels equal the attacked targets almost always.
        let d = 6;
        let c_old = 4;
        let protos = Matrix::identity(d).take_rows(c_old);
        let old = Model::new(
            FeatureExtractor::identity(d),
            Classifier::cosine(protos, 1.0),
            (0..c_old).collect(),
        );
        let snap = snapshot(&old, 1);

        let mut rng = Rng::new(314);
        let n = 200;
        let z = rng.gaussian_matrix(n, d).row_normalize(NORM_EPS).0;
        let targets: Vec<usize> = (0..n).map(|i| i % c_old).collect();
        let z_prime = pgd_attack(
            &z,
            &targets,
            &snap,
            0.05,
            50,
            AttackInit::Feature,
            &mut rng,
        )
        .unwrap();
        let labels = pseudo_label_cols(&z_prime, &snap).unwrap();
        let matches = labels
            .iter()
            .zip(&targets)
            .filter(|(a, b)| a == b)
            .count();
        assert!(
            matches * 100 >= n * 95,
            "only {matches}/{n} pseudo-labels equal their targets"
        );
    }

    #[test]
    fn pseudo_label_of_prototype_is_its_class() {
        let snap = two_class_snapshot();
        let z = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(pseudo_label(&z, &snap).unwrap(), vec![1, 0]);
    }

    #[test]
    fn augment_row_counts_follow_multiplier() {
        let current = {
            let mut m = toy_model(2, 4, 11);
            let mut rng = Rng::new(12);
            m.expand_classifier(&[2, 3], &mut rng).unwrap();
            m
        };
        let snap = snapshot(&toy_model(2, 4, 11), 1);
        let mut rng = Rng::new(5);
        let z = rng.gaussian_matrix(8, 4).row_normalize(NORM_EPS).0;
        let labels = vec![2, 3, 2, 3, 2, 3, 2, 3]; // all new-class rows
        for mult in [1usize, 5] {
            let cfg = AttackConfig {
                multiplier: mult,
                ..AttackConfig::default()
            };
            let batch = augment(&z, &labels, &current, Some(&snap), &cfg, &Rng::new(9)).unwrap();
            assert_eq!(batch.len(), 8 * mult);
            for label in &batch.pseudo_labels {
                assert!(*label < 2, "pseudo-label outside old classes");
            }
        }
    }

    #[test]
    fn augment_empty_at_stage_one() {
        let current = toy_model(2, 4, 11);
        let z = Rng::new(5).gaussian_matrix(4, 4);
        let cfg = AttackConfig::default();
        let batch = augment(&z, &[0, 1, 0, 1], &current, None, &cfg, &Rng::new(9)).unwrap();
        assert!(batch.is_empty());
    }

    #[test]
    fn augment_is_seed_deterministic() {
        let current = {
            let mut m = toy_model(3, 4, 21);
            let mut rng = Rng::new(22);
            m.expand_classifier(&[3], &mut rng).unwrap();
            m
        };
        let snap = snapshot(&toy_model(3, 4, 21), 1);
        let mut rng = Rng::new(31);
        let z = rng.gaussian_matrix(6, 4).row_normalize(NORM_EPS).0;
        let labels = vec![3, 3, 0, 1, 2, 3];
        let cfg = AttackConfig {
            target_strategy: TargetStrategy::Random,
            ..AttackConfig::default()
        };
        let a = augment(&z, &labels, &current, Some(&snap), &cfg, &Rng::new(9)).unwrap();
        let b = augment(&z, &labels, &current, Some(&snap), &cfg, &Rng::new(9)).unwrap();
        assert!(a.features.bit_eq(&b.features));
        assert_eq!(a.pseudo_cols, b.pseudo_cols);
        assert_eq!(
            a.provenance
                .iter()
                .map(|p| p.alpha)
                .collect::<Vec<_>>(),
            b.provenance.iter().map(|p| p.alpha).collect::<Vec<_>>()
        );
    }

    #[test]
    fn augment_cross_class_guarantee_for_old_samples() {
        let current = {
            let mut m = toy_model(3, 4, 21);
            let mut rng = Rng::new(22);
            m.expand_classifier(&[3], &mut rng).unwrap();
            m
        };
        let snap = snapshot(&toy_model(3, 4, 21), 1);
        let mut rng = Rng::new(31);
        let z = rng.gaussian_matrix(6, 4).row_normalize(NORM_EPS).0;
        let labels = vec![0, 1, 2, 0, 1, 2]; // all old-class rows
        for strategy in [
            TargetStrategy::Nearest,
            TargetStrategy::RelaxedLp,
            TargetStrategy::Random,
            TargetStrategy::Farthest,
        ] {
            let cfg = AttackConfig {
                target_strategy: strategy,
                top_k: 2,
                ..AttackConfig::default()
            };
            let batch = augment(&z, &labels, &current, Some(&snap), &cfg, &Rng::new(9)).unwrap();
            for p in &batch.provenance {
                assert_ne!(p.target, Some(labels[p.source]), "{strategy:?}");
            }
        }
    }

    #[test]
    fn noise_augment_zero_sigma_keeps_snapshot_labels() {
        let snap = two_class_snapshot();
        let z = Matrix::from_rows(&[&[0.9, 0.1], &[0.1, 0.9]]);
        let batch = gaussian_noise_augment(&z, Some(&snap), 0.0, 1, &Rng::new(4)).unwrap();
        assert_eq!(batch.pseudo_cols, pseudo_label_cols(&z, &snap).unwrap());
    }

    #[test]
    fn noise_augment_seeded_twice_is_identical() {
        let snap = two_class_snapshot();
        let z = Rng::new(8).gaussian_matrix(5, 2);
        let a = gaussian_noise_augment(&z, Some(&snap), 1.0, 2, &Rng::new(4)).unwrap();
        let b = gaussian_noise_augment(&z, Some(&snap), 1.0, 2, &Rng::new(4)).unwrap();
        assert!(a.features.bit_eq(&b.features));
    }

    #[test]
    fn noise_augment_mostly_preserves_labels_on_separated_clusters() {
        // Well-separated clusters in 8-D with small noise relative to
        // separation: most pseudo-labels match the clean assignment.
        let mut rng = Rng::new(42);
        let d = 8;
        let protos = Matrix::identity(d).take_rows(2);
        let model = Model::new(
            FeatureExtractor::identity(d),
            Classifier::cosine(protos.clone(), 1.0),
            vec![0, 1],
        );
        let snap = snapshot(&model, 1);
        let mut rows = Vec::new();
        for i in 0..100 {
            let proto = protos.row(i % 2);
            let noise = rng.gaussian_matrix(1, d).scale(0.05);
            let mut row: Vec<f64> = proto.to_vec();
            for (r, n) in row.iter_mut().zip(noise.data()) {
                *r += n;
            }
            rows.push(row);
        }
        let flat: Vec<f64> = rows.concat();
        let z = Matrix::from_vec(100, d, flat)
            .unwrap()
            .row_normalize(NORM_EPS)
            .0;
        let clean = pseudo_label_cols(&z, &snap).unwrap();
        let batch = gaussian_noise_augment(&z, Some(&snap), 0.3, 1, &Rng::new(7)).unwrap();
        let matches = batch
            .pseudo_cols
            .iter()
            .zip(&clean)
            .filter(|(a, b)| a == b)
            .count();
        assert!(matches >= 80, "only {matches}/100 labels preserved");
    }
}
