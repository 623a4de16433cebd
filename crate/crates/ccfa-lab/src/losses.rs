//! Classification and distillation losses with analytic gradients.
//!
//! Every loss returns `(value, gradient)` so the trainer composes them
//! without autodiff. Gradients are checked against central finite
//! differences by the `gradcheck` battery (also wired to the CLI).

use crate::error::{Error, Result};
use crate::model::{Classifier, ClsKind, ModelSnapshot};
use crate::numerics::{finite_diff_check, GradCheckReport, Matrix, Rng, NORM_EPS};
use serde::{Deserialize, Serialize};

/// Which auxiliary (distillation) term the stage objective uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgKind {
    None,
    UcirLessforget,
    PodFlat,
    AfcDisc,
}

/// Which classification loss the stage objective uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsLossKind {
    CrossEntropy,
    Nca,
}

/// Weights and knobs for the full stage objective
/// `L = L_cls + lambda * L_alg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Balance between classification and auxiliary terms.
    pub lambda: f64,
    pub cls_kind: ClsLossKind,
    pub alg_kind: AlgKind,
    /// Less-forget weight (inside the UCIR auxiliary term).
    pub lambda_dis: f64,
    /// Margin-ranking weight (inside the UCIR auxiliary term).
    pub lambda_mr: f64,
    /// POD-flat weight.
    pub lambda_f: f64,
    /// AFC discrepancy weight.
    pub lambda_disc: f64,
    /// AFC per-stage weight; `None` selects the
    /// `sqrt(|known classes| / |new classes|)` schedule.
    pub lambda_t: Option<f64>,
    /// Hinge margin shared by the NCA loss and margin ranking.
    pub margin: f64,
    /// Number of nearest new-class prototypes in margin ranking.
    pub top_m: usize,
    /// Classifier temperature (applied when the classifier is built).
    pub eta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            cls_kind: ClsLossKind::CrossEntropy,
            alg_kind: AlgKind::None,
            lambda_dis: 1.0,
            lambda_mr: 1.0,
            lambda_f: 1.0,
            lambda_disc: 1.0,
            lambda_t: None,
            margin: 0.5,
            top_m: 2,
            eta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn cls_kind_resolved(&self) -> ClsKind {
        match self.cls_kind {
            ClsLossKind::CrossEntropy => ClsKind::CrossEntropy,
            ClsLossKind::Nca => ClsKind::Nca {
                margin: self.margin,
            },
        }
    }

    /// AFC stage weight for a model knowing `total` classes of which `new`
    /// are from the current task.
    pub fn lambda_t_for(&self, total: usize, new: usize) -> f64 {
        match self.lambda_t {
            Some(v) => v,
            None => {
                if new == 0 {
                    1.0
                } else {
                    (total as f64 / new as f64).sqrt()
                }
            }
        }
    }
}

/// Per-channel AFC importance over the final feature layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub weights: Vec<f64>,
    pub sample_count: usize,
}

// ---------------------------------------------------------------------------
// Elementary losses
// ---------------------------------------------------------------------------

/// Mean negative log-softmax of the true class.
/// Gradient w.r.t. logits is `(softmax - onehot) / b`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, c) = logits.shape();
    if labels.len() != b {
        return Err(Error::shape((labels.len(), 1), (b, 1)));
    }
    let mut grad = Matrix::zeros(b, c);
    let mut value = 0.0;
    for i in 0..b {
        let y = labels[i];
        if y >= c {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: c,
            });
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        value += total.ln() + m - row[y];
        for j in 0..c {
            let p = exps[j] / total;
            grad.set(i, j, (p - if j == y { 1.0 } else { 0.0 }) / b as f64);
        }
    }
    Ok((value / b as f64, grad))
}

/// Hinged NCA loss over unscaled class scores:
/// `[-log( exp(eta (s_y - delta)) / sum_{j != y} exp(eta s_j) )]_+`,
/// averaged over the batch. Gradient is zero wherever the hinge clamps.
pub fn nca_loss(scores: &Matrix, labels: &[usize], eta: f64, delta: f64) -> Result<(f64, Matrix)> {
    let (b, c) = scores.shape();
    if labels.len() != b {
        return Err(Error::shape((labels.len(), 1), (b, 1)));
    }
    let mut grad = Matrix::zeros(b, c);
    let mut value = 0.0;
    for i in 0..b {
        let y = labels[i];
        if y >= c {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: c,
            });
        }
        if c < 2 {
            continue; // no competing classes, loss vacuously zero
        }
        let row = scores.row(i);
        // log-sum-exp over the non-target classes
        let m = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &v)| eta * v)
            .fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &v)| (eta * v - m).exp())
            .sum();
        let lse = total.ln() + m;
        let raw = lse - eta * (row[y] - delta);
        if raw > 0.0 {
            value += raw;
            for j in 0..c {
                if j == y {
                    grad.set(i, y, -eta / b as f64);
                } else {
                    let p = (eta * row[j] - m).exp() / total;
                    grad.set(i, j, eta * p / b as f64);
                }
            }
        }
    }
    Ok((value / b as f64, grad))
}

/// Less-forget distillation: `mean_i (1 - <z_old_i, z_new_i>)` over
/// row-normalized features. Gradient w.r.t. `z_new` is `-z_old / b`.
pub fn ucir_lessforget(z_old: &Matrix, z_new: &Matrix) -> Result<(f64, Matrix)> {
    if z_old.shape() != z_new.shape() {
        return Err(Error::shape(z_old.shape(), z_new.shape()));
    }
    let b = z_old.rows() as f64;
    let mut value = 0.0;
    for i in 0..z_old.rows() {
        let dot: f64 = z_old
            .row(i)
            .iter()
            .zip(z_new.row(i))
            .map(|(a, b)| a * b)
            .sum();
        value += 1.0 - dot;
    }
    Ok((value / b, z_old.scale(-1.0 / b)))
}

/// Final-output distillation: mean squared L2 distance per row.
/// Gradient w.r.t. `h_new` is `2 (h_new - h_old) / b`.
pub fn pod_flat(h_old: &Matrix, h_new: &Matrix) -> Result<(f64, Matrix)> {
    if h_old.shape() != h_new.shape() {
        return Err(Error::shape(h_old.shape(), h_new.shape()));
    }
    let b = h_old.rows() as f64;
    let diff = h_new.sub(h_old)?;
    let value = diff.frobenius_sq() / b;
    Ok((value, diff.scale(2.0 / b)))
}

/// UCIR margin-ranking loss over old-class (exemplar) rows.
///
/// For each row whose label is an old class, the `top_m` new-class
/// prototypes most similar to the feature contribute
/// `max(delta - <proto_gt, z> + <proto_m, z>, 0)`; prototypes are
/// normalized, features are used as given. Returns the mean over exemplar
/// rows plus gradients w.r.t. features and (unnormalized) prototypes.
/// With no new classes the loss is zero by definition.
pub fn margin_ranking(
    z: &Matrix,
    labels: &[usize],
    prototypes: &Matrix,
    num_old: usize,
    delta: f64,
    top_m: usize,
) -> Result<(f64, Matrix, Matrix)> {
    let (b, d) = z.shape();
    let c = prototypes.rows();
    let d_z_zero = Matrix::zeros(b, d);
    let d_p_zero = Matrix::zeros(c, d);
    if num_old >= c {
        return Ok((0.0, d_z_zero, d_p_zero));
    }
    let (p_hat, _) = prototypes.row_normalize(NORM_EPS);
    let p_norms: Vec<f64> = (0..c).map(|j| prototypes.row_norm(j)).collect();
    let sims = z.matmul(&p_hat.transpose())?; // b x c

    let exemplars: Vec<usize> = (0..b).filter(|&i| labels[i] < num_old).collect();
    if exemplars.is_empty() {
        return Ok((0.0, d_z_zero, d_p_zero));
    }
    let n = exemplars.len() as f64;
    let m_count = top_m.min(c - num_old);

    let mut value = 0.0;
    // d value / d sims, accumulated per active hinge term.
    let mut d_sims = Matrix::zeros(b, c);
    for &i in &exemplars {
        let y = labels[i];
        // `top_m` most similar new-class prototypes, ties toward lower index.
        let mut new_cols: Vec<usize> = (num_old..c).collect();
        new_cols.sort_by(|&a, &b2| {
            sims.get(i, b2)
                .partial_cmp(&sims.get(i, a))
                .unwrap()
                .then(a.cmp(&b2))
        });
        for &m in new_cols.iter().take(m_count) {
            let term = delta - sims.get(i, y) + sims.get(i, m);
            if term > 0.0 {
                value += term / n;
                d_sims.set(i, y, d_sims.get(i, y) - 1.0 / n);
                d_sims.set(i, m, d_sims.get(i, m) + 1.0 / n);
            }
        }
    }

    // sims = z . p_hat^T: linear in z, cosine-normalized in prototypes.
    let d_z = d_sims.matmul(&p_hat)?;
    let mut d_p = d_sims.transpose().matmul(z)?;
    for j in 0..c {
        if p_norms[j] < NORM_EPS {
            continue;
        }
        let inner: f64 = (0..d).map(|k| d_p.get(j, k) * p_hat.get(j, k)).sum();
        for k in 0..d {
            let v = (d_p.get(j, k) - inner * p_hat.get(j, k)) / p_norms[j];
            d_p.set(j, k, v);
        }
    }
    Ok((value, d_z, d_p))
}

/// AFC channel importance over the final feature layer:
/// `I_c = mean_i (d loss_i / d z_{i,c})^2` under the snapshot's native
/// classification loss.
///
/// The derivative is taken with respect to the classifier's input features
/// (already unit-norm extractor output); prototype normalization is part of
/// the classifier, feature re-normalization is part of the extractor. A
/// channel that no prototype reads therefore has exactly zero importance.
pub fn afc_importance(
    snapshot: &ModelSnapshot,
    data: &Matrix,
    labels: &[usize],
) -> Result<ImportanceVector> {
    if data.rows() == 0 {
        return Err(Error::EmptyInput("afc_importance data"));
    }
    let clf = snapshot.classifier();
    let label_cols: Vec<usize> = labels
        .iter()
        .map(|&l| {
            snapshot
                .known_classes()
                .iter()
                .position(|&c| c == l)
                .ok_or(Error::LabelOutOfRange {
                    label: l,
                    classes: snapshot.known_classes().len(),
                })
        })
        .collect::<Result<_>>()?;

    let z = snapshot.extractor().forward(data)?;
    let kind = clf.native_loss();
    let (_, d_z, _) = cls_loss_linearized(clf, &z, &label_cols, kind)?;
    // `d_z` carries the batch mean factor; undo it for per-sample gradients.
    let b = z.rows() as f64;
    let d = z.cols();
    let mut weights = vec![0.0; d];
    for i in 0..z.rows() {
        for c in 0..d {
            let g = d_z.get(i, c) * b;
            weights[c] += g * g;
        }
    }
    for w in &mut weights {
        *w /= b;
    }
    Ok(ImportanceVector {
        weights,
        sample_count: z.rows(),
    })
}

/// Importance-weighted feature discrepancy:
/// `sum_c I_c * mean_i (z_new[i][c] - z_old[i][c])^2`.
/// Gradient w.r.t. `z_new` is `2 I_c (z_new - z_old) / b` per channel.
pub fn afc_disc(
    z_old: &Matrix,
    z_new: &Matrix,
    imp: &ImportanceVector,
) -> Result<(f64, Matrix)> {
    if z_old.shape() != z_new.shape() {
        return Err(Error::shape(z_old.shape(), z_new.shape()));
    }
    if imp.weights.len() != z_new.cols() {
        return Err(Error::shape(
            (1, imp.weights.len()),
            (1, z_new.cols()),
        ));
    }
    let b = z_old.rows() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(z_new.rows(), z_new.cols());
    for i in 0..z_new.rows() {
        for c in 0..z_new.cols() {
            let diff = z_new.get(i, c) - z_old.get(i, c);
            value += imp.weights[c] * diff * diff / b;
            grad.set(i, c, 2.0 * imp.weights[c] * diff / b);
        }
    }
    Ok((value, grad))
}

// ---------------------------------------------------------------------------
// Classification loss through a classifier
// ---------------------------------------------------------------------------

/// Classification loss of `z` under `clf`, differentiated through the
/// classifier (including feature normalization). Returns
/// `(value, d_z, d_params)`; parameter gradients are computed only when
/// `want_params` is set.
pub fn cls_loss(
    clf: &Classifier,
    z: &Matrix,
    label_cols: &[usize],
    kind: ClsKind,
    want_params: bool,
) -> Result<(f64, Matrix, Option<Matrix>)> {
    let cache = clf.score_cached(z)?;
    let (value, d_scores) = match kind {
        ClsKind::CrossEntropy => {
            let eta = clf.eta();
            let logits = cache.scores.scale(eta);
            let (v, d_logits) = cross_entropy(&logits, label_cols)?;
            (v, d_logits.scale(eta))
        }
        ClsKind::Nca { margin } => nca_loss(&cache.scores, label_cols, clf.eta(), margin)?,
    };
    let (d_z, d_params) = clf.score_backward(&cache, &d_scores, want_params)?;
    Ok((value, d_z, d_params))
}

/// Like [`cls_loss`] but differentiating with respect to the classifier's
/// input directly (no feature-normalization Jacobian). Used by the AFC
/// importance estimator.
fn cls_loss_linearized(
    clf: &Classifier,
    z: &Matrix,
    label_cols: &[usize],
    kind: ClsKind,
) -> Result<(f64, Matrix, Option<Matrix>)> {
    let cache = clf.score_cached(z)?;
    let (value, d_scores) = match kind {
        ClsKind::CrossEntropy => {
            let eta = clf.eta();
            let logits = cache.scores.scale(eta);
            let (v, d_logits) = cross_entropy(&logits, label_cols)?;
            (v, d_logits.scale(eta))
        }
        ClsKind::Nca { margin } => nca_loss(&cache.scores, label_cols, clf.eta(), margin)?,
    };
    let (d_z, _) = clf.score_backward_linear(&cache, &d_scores)?;
    Ok((value, d_z, None))
}

// ---------------------------------------------------------------------------
// Full stage objective
// ---------------------------------------------------------------------------

/// Inputs to one evaluation of the stage objective.
pub struct BatchTerms<'a> {
    pub classifier: &'a Classifier,
    /// Current features of the original rows, `b x d`.
    pub z: &'a Matrix,
    /// Classifier column indices of the original rows.
    pub label_cols: &'a [usize],
    /// Augmented features and their pseudo-label columns; folded into the
    /// classification term only.
    pub augmented: Option<(&'a Matrix, &'a [usize])>,
    /// Snapshot features of the same original rows (distillation teacher).
    pub z_old: Option<&'a Matrix>,
    /// AFC channel importance (required for `AlgKind::AfcDisc`).
    pub importance: Option<&'a ImportanceVector>,
    /// Classifier columns `0..num_old` are old classes.
    pub num_old: usize,
    /// Class counts for the AFC stage weight: (total known, new this task).
    pub class_counts: (usize, usize),
}

/// Value and gradients of the stage objective.
pub struct TotalLoss {
    pub value: f64,
    pub cls_value: f64,
    pub alg_value: f64,
    /// Gradient w.r.t. the original-feature rows.
    pub d_z: Matrix,
    /// Gradient w.r.t. classifier parameters.
    pub d_params: Matrix,
}

/// `L = L_cls + lambda * L_alg` where the classification term runs over the
/// concatenation of original and augmented rows and the auxiliary term sees
/// original rows only.
pub fn total_loss(cfg: &LossConfig, terms: &BatchTerms) -> Result<TotalLoss> {
    let clf = terms.classifier;
    let kind = cfg.cls_kind_resolved();
    let b = terms.z.rows();

    // Classification over [z; z'] with [y; y_ps].
    let (cls_value, d_z_cls, d_params) = match terms.augmented {
        Some((z_aug, aug_cols)) if z_aug.rows() > 0 => {
            let z_cat = terms.z.vstack(z_aug)?;
            let mut cols = terms.label_cols.to_vec();
            cols.extend_from_slice(aug_cols);
            let (v, d_cat, d_p) = cls_loss(clf, &z_cat, &cols, kind, true)?;
            (v, d_cat.take_rows(b), d_p)
        }
        _ => cls_loss(clf, terms.z, terms.label_cols, kind, true)?,
    };
    let mut d_params = d_params.expect("param grads requested");
    let mut d_z = d_z_cls;

    let mut alg_value = 0.0;
    if cfg.lambda != 0.0 {
        match cfg.alg_kind {
            AlgKind::None => {}
            AlgKind::UcirLessforget => {
                let z_old = terms
                    .z_old
                    .ok_or(Error::EmptyInput("snapshot features for less-forget"))?;
                let (v, g) = ucir_lessforget(z_old, terms.z)?;
                alg_value += cfg.lambda_dis * v;
                d_z.add_scaled(&g, cfg.lambda * cfg.lambda_dis)?;
                if cfg.lambda_mr > 0.0 {
                    let protos = clf.params();
                    let (v, g_z, g_p) = margin_ranking(
                        terms.z,
                        terms.label_cols,
                        protos,
                        terms.num_old,
                        cfg.margin,
                        cfg.top_m,
                    )?;
                    alg_value += cfg.lambda_mr * v;
                    d_z.add_scaled(&g_z, cfg.lambda * cfg.lambda_mr)?;
                    d_params.add_scaled(&g_p, cfg.lambda * cfg.lambda_mr)?;
                }
            }
            AlgKind::PodFlat => {
                let z_old = terms
                    .z_old
                    .ok_or(Error::EmptyInput("snapshot features for pod-flat"))?;
                let (v, g) = pod_flat(z_old, terms.z)?;
                alg_value += cfg.lambda_f * v;
                d_z.add_scaled(&g, cfg.lambda * cfg.lambda_f)?;
            }
            AlgKind::AfcDisc => {
                let z_old = terms
                    .z_old
                    .ok_or(Error::EmptyInput("snapshot features for afc-disc"))?;
                let imp = terms
                    .importance
                    .ok_or(Error::EmptyInput("importance vector for afc-disc"))?;
                let (total, new) = terms.class_counts;
                let w = cfg.lambda_disc * cfg.lambda_t_for(total, new);
                let (v, g) = afc_disc(z_old, terms.z, imp)?;
                alg_value += w * v;
                d_z.add_scaled(&g, cfg.lambda * w)?;
            }
        }
    }

    Ok(TotalLoss {
        value: cls_value + cfg.lambda * alg_value,
        cls_value,
        alg_value,
        d_z,
        d_params,
    })
}

// ---------------------------------------------------------------------------
// Gradient-check battery
// ---------------------------------------------------------------------------

/// One battery entry: loss name, merged finite-difference report, pass flag.
#[derive(Debug, Clone)]
pub struct BatteryEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub passed: bool,
}

pub const BATTERY_TOLERANCE: f64 = 1e-4;
const BATTERY_POINTS: usize = 50;
const BATTERY_H: f64 = 1e-5;

/// Run finite-difference checks for every loss in scope, >= 100 random
/// probes each. `corrupt` deliberately scales the named loss's gradient so
/// callers can verify the battery actually fails.
pub fn gradcheck_battery(seed: u64, corrupt: Option<&str>) -> Vec<BatteryEntry> {
    let root = Rng::new(seed);
    let mut entries = Vec::new();
    let corruption = |name: &str| -> f64 {
        if corrupt == Some(name) {
            1.05
        } else {
            1.0
        }
    };

    // Shared small geometry: batch 4, features 3, classes 3 (2 old + 1 new).
    let b = 4;
    let d = 3;
    let c = 3;

    {
        // cross-entropy through a cosine classifier, gradient w.r.t. features
        let name = "cross_entropy_cosine";
        let mut rng = root.derive(name);
        let bump = corruption(name);
        let mut report: Option<GradCheckReport> = None;
        for _ in 0..BATTERY_POINTS {
            let protos = rng.gaussian_matrix(c, d);
            let clf = Classifier::cosine(protos, 4.0);
            let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
            let point = rng.gaussian_matrix(b, d);
            let loss = |m: &Matrix| {
                cls_loss(&clf, m, &labels, ClsKind::CrossEntropy, false)
                    .unwrap()
                    .0
            };
            let grad = |m: &Matrix| {
                cls_loss(&clf, m, &labels, ClsKind::CrossEntropy, false)
                    .unwrap()
                    .1
                    .scale(bump)
            };
            let r = finite_diff_check(&loss, &grad, &point, BATTERY_H).unwrap();
            report = Some(match report {
                Some(prev) => prev.merge(r),
                None => r,
            });
        }
        push_entry(&mut entries, name, report.unwrap());
    }

    {
        // NCA through an LSC classifier (2 proxies per class)
        let name = "nca";
        let mut rng = root.derive(name);
        let bump = corruption(name);
        let mut report: Option<GradCheckReport> = None;
        let mut collected = 0;
        while collected < BATTERY_POINTS {
            let proxies = rng.gaussian_matrix(c * 2, d);
            let clf = Classifier::lsc(proxies, 2, 2.0, 0.3);
            let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
            let point = rng.gaussian_matrix(b, d);
            if nca_near_hinge(&clf, &point, &labels, 0.3) {
                continue; // resample away from the hinge kink
            }
            let kind = ClsKind::Nca { margin: 0.3 };
            let loss = |m: &Matrix| cls_loss(&clf, m, &labels, kind, false).unwrap().0;
            let grad = |m: &Matrix| {
                cls_loss(&clf, m, &labels, kind, false)
                    .unwrap()
                    .1
                    .scale(bump)
            };
            let r = finite_diff_check(&loss, &grad, &point, BATTERY_H).unwrap();
            report = Some(match report {
                Some(prev) => prev.merge(r),
                None => r,
            });
            collected += 1;
        }
        push_entry(&mut entries, name, report.unwrap());
    }

    {
        let name = "less_forget";
        let mut rng = root.derive(name);
        let bump = corruption(name);
        let mut report: Option<GradCheckReport> = None;
        for _ in 0..BATTERY_POINTS {
            let z_old = rng.gaussian_matrix(b, d).row_normalize(NORM_EPS).0;
            let point = rng.gaussian_matrix(b, d).row_normalize(NORM_EPS).0;
            let loss = |m: &Matrix| ucir_lessforget(&z_old, m).unwrap().0;
            let grad = |m: &Matrix| ucir_lessforget(&z_old, m).unwrap().1.scale(bump);
            let r = finite_diff_check(&loss, &grad, &point, BATTERY_H).unwrap();
            report = Some(match report {
                Some(prev) => prev.merge(r),
                None => r,
            });
        }
        push_entry(&mut entries, name, report.unwrap());
    }

    {
        let name = "pod_flat";
        let mut rng = root.derive(name);
        let bump = corruption(name);
        let mut report: Option<GradCheckReport> = None;
        for _ in 0..BATTERY_POINTS {
            let h_old = rng.gaussian_matrix(b, d);
            let point = rng.gaussian_matrix(b, d);
            let loss = |m: &Matrix| pod_flat(&h_old, m).unwrap().0;
            let grad = |m: &Matrix| pod_flat(&h_old, m).unwrap().1.scale(bump);
            let r = finite_diff_check(&loss, &grad, &point, BATTERY_H).unwrap();
            report = Some(match report {
                Some(prev) => prev.merge(r),
                None => r,
            });
        }
        push_entry(&mut entries, name, report.unwrap());
    }

    {
        // margin ranking, checked w.r.t. both features and prototypes
        let name = "margin_ranking";
        let mut rng = root.derive(name);
        let bump = corruption(name);
        let num_old = 2;
        let delta = 0.4;
        let top_m = 2;
        let mut report: Option<GradCheckReport> = None;
        let mut collected = 0;
        while collected < BATTERY_POINTS {
            let protos = rng.gaussian_matrix(c + 1, d);
            let labels: Vec<usize> = (0..b).map(|_| rng.below(c + 1)).collect();
            let point = rng.gaussian_matrix(b, d).row_normalize(NORM_EPS).0;
            if margin_near_hinge(&point, &labels, &protos, num_old, delta, top_m) {
                continue;
            }
            let loss_z = |m: &Matrix| {
                margin_ranking(m, &labels, &protos, num_old, delta, top_m)
                    .unwrap()
                    .0
            };
            let grad_z = |m: &Matrix| {
                margin_ranking(m, &labels, &protos, num_old, delta, top_m)
                    .unwrap()
                    .1
                    .scale(bump)
            };
            let r1 = finite_diff_check(&loss_z, &grad_z, &point, BATTERY_H).unwrap();
            let loss_p = |p: &Matrix| {
                margin_ranking(&point, &labels, p, num_old, delta, top_m)
                    .unwrap()
                    .0
            };
            let grad_p = |p: &Matrix| {
                margin_ranking(&point, &labels, p, num_old, delta, top_m)
                    .unwrap()
                    .2
                    .scale(bump)
            };
            let r2 = finite_diff_check(&loss_p, &grad_p, &protos, BATTERY_H).unwrap();
            let merged = r1.merge(r2);
            report = Some(match report {
                Some(prev) => prev.merge(merged),
                None => merged,
            });
            collected += 1;
        }
        push_entry(&mut entries, name, report.unwrap());
    }

    {
        let name = "afc_disc";
        let mut rng = root.derive(name);
        let bump = corruption(name);
        let mut report: Option<GradCheckReport> = None;
        for _ in 0..BATTERY_POINTS {
            let z_old = rng.gaussian_matrix(b, d);
            let point = rng.gaussian_matrix(b, d);
            let imp = ImportanceVector {
                weights: (0..d).map(|_| rng.unit() * 2.0).collect(),
                sample_count: 1,
            };
            let loss = |m: &Matrix| afc_disc(&z_old, m, &imp).unwrap().0;
            let grad = |m: &Matrix| afc_disc(&z_old, m, &imp).unwrap().1.scale(bump);
            let r = finite_diff_check(&loss, &grad, &point, BATTERY_H).unwrap();
            report = Some(match report {
                Some(prev) => prev.merge(r),
                None => r,
            });
        }
        push_entry(&mut entries, name, report.unwrap());
    }

    entries
}

fn push_entry(entries: &mut Vec<BatteryEntry>, name: &'static str, report: GradCheckReport) {
    entries.push(BatteryEntry {
        name,
        report,
        passed: report.max_rel_err <= BATTERY_TOLERANCE,
    });
}

/// True when any sample's NCA hinge argument sits too close to zero for a
/// reliable finite-difference window.
fn nca_near_hinge(clf: &Classifier, z: &Matrix, labels: &[usize], margin: f64) -> bool {
    let scores = clf.scores(z).unwrap();
    let eta = clf.eta();
    for i in 0..z.rows() {
        let y = labels[i];
        let row = scores.row(i);
        let lse = {
            let m = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &v)| eta * v)
                .fold(f64::NEG_INFINITY, f64::max);
            let t: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &v)| (eta * v - m).exp())
                .sum();
            t.ln() + m
        };
        let raw = lse - eta * (row[y] - margin);
        if raw.abs() < 1e-3 {
            return true;
        }
    }
    false
}

/// True when any margin-ranking hinge term is too close to its kink.
fn margin_near_hinge(
    z: &Matrix,
    labels: &[usize],
    protos: &Matrix,
    num_old: usize,
    delta: f64,
    top_m: usize,
) -> bool {
    let (p_hat, _) = protos.row_normalize(NORM_EPS);
    let sims = z.matmul(&p_hat.transpose()).unwrap();
    let c = protos.rows();
    for i in 0..z.rows() {
        let y = labels[i];
        if y >= num_old {
            continue;
        }
        let mut new_cols: Vec<usize> = (num_old..c).collect();
        new_cols.sort_by(|&a, &b2| {
            sims.get(i, b2)
                .partial_cmp(&sims.get(i, a))
                .unwrap()
                .then(a.cmp(&b2))
        });
        for (rank, &m) in new_cols.iter().enumerate() {
            let term = delta - sims.get(i, y) + sims.get(i, m);
            // terms inside the selection must be clearly active or inactive,
            // and selection boundaries must be clearly separated
            if rank < top_m && term.abs() < 1e-3 {
                return true;
            }
        }
        if new_cols.len() > top_m {
            let kept = sims.get(i, new_cols[top_m - 1]);
            let dropped = sims.get(i, new_cols[top_m]);
            if (kept - dropped).abs() < 1e-3 {
                return true;
            }
        }
    }
    false
}
