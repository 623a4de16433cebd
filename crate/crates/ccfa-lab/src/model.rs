//! Feature extractors, classifiers, and frozen model snapshots.
//!
//! A stage-`k` model is `(f_k, g_k)`: an extractor mapping raw inputs to
//! unit-norm feature rows and a classifier scoring features against per-class
//! prototypes (cosine) or per-class proxy sets (LSC). Snapshots are deep
//! copies used both as distillation teachers and as the frozen attack target
//! for cross-class augmentation.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, NORM_EPS};
use serde::{Deserialize, Serialize};

/// Supported classification losses. `Nca` carries its hinge margin; the
/// temperature always comes from the classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClsKind {
    CrossEntropy,
    Nca { margin: f64 },
}

// ---------------------------------------------------------------------------
// Feature extractor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `in_dim x out_dim`.
    pub weight: Matrix,
    /// `1 x out_dim`.
    pub bias: Matrix,
}

/// `identity`, `linear` (single affine layer), or `mlp` (affine layers with
/// ReLU between them). Every forward output is row-normalized to unit L2,
/// so downstream code always sees features on the sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    input_dim: usize,
    output_dim: usize,
    layers: Vec<Layer>,
}

/// Intermediate activations kept for the backward pass.
pub struct ExtractorCache {
    /// Post-activation output of each layer; `acts[0]` is the input.
    acts: Vec<Matrix>,
    /// Per-row norms of the final pre-normalization output.
    norms: Vec<f64>,
    /// Normalized output.
    pub z: Matrix,
}

impl FeatureExtractor {
    pub fn identity(dim: usize) -> Self {
        FeatureExtractor {
            input_dim: dim,
            output_dim: dim,
            layers: Vec::new(),
        }
    }

    /// Affine layers sized `dims[0] -> dims[1] -> ... -> dims.last()`, ReLU
    /// between layers, Gaussian init scaled by `1/sqrt(fan_in)`.
    pub fn mlp(dims: &[usize], rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| {
                let scale = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    weight: rng.gaussian_matrix(w[0], w[1]).scale(scale),
                    bias: Matrix::zeros(1, w[1]),
                }
            })
            .collect();
        FeatureExtractor {
            input_dim: dims[0],
            output_dim: *dims.last().unwrap(),
            layers,
        }
    }

    pub fn linear(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Self::mlp(&[in_dim, out_dim], rng)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    /// Normalized features for a batch; rows of `x` are samples.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.z)
    }

    /// Forward pass retaining activations for [`FeatureExtractor::backward`].
    pub fn forward_cached(&self, x: &Matrix) -> Result<ExtractorCache> {
        if x.cols() != self.input_dim {
            return Err(Error::shape(x.shape(), (x.rows(), self.input_dim)));
        }
        let mut acts = vec![x.clone()];
        let last = self.layers.len();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut h = acts[li].matmul(&layer.weight)?;
            for i in 0..h.rows() {
                for j in 0..h.cols() {
                    let v = h.get(i, j) + layer.bias.get(0, j);
                    // ReLU on hidden layers only.
                    let v = if li + 1 < last { v.max(0.0) } else { v };
                    h.set(i, j, v);
                }
            }
            acts.push(h);
        }
        let pre_norm = acts.last().unwrap();
        let norms: Vec<f64> = (0..pre_norm.rows()).map(|i| pre_norm.row_norm(i)).collect();
        let (z, _) = pre_norm.row_normalize(NORM_EPS);
        Ok(ExtractorCache { acts, norms, z })
    }

    /// Backpropagate `d_loss/d_z` into per-layer weight and bias gradients.
    pub fn backward(&self, cache: &ExtractorCache, dz: &Matrix) -> Result<Vec<Layer>> {
        // Through the row normalization: z = h / |h| per row, so
        // dh = (dz - (dz . z) z) / |h|; degenerate rows pass through.
        let mut dh = dz.clone();
        for i in 0..dh.rows() {
            let n = cache.norms[i];
            if n < NORM_EPS {
                continue;
            }
            let zi = cache.z.row(i).to_vec();
            let gi = dh.row_mut(i);
            let inner: f64 = gi.iter().zip(&zi).map(|(g, z)| g * z).sum();
            for (g, z) in gi.iter_mut().zip(&zi) {
                *g = (*g - inner * z) / n;
            }
        }

        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len();
        let mut upstream = dh;
        for (li, layer) in self.layers.iter().enumerate().rev() {
            // ReLU mask on hidden-layer outputs.
            if li + 1 < last {
                let out = &cache.acts[li + 1];
                for i in 0..upstream.rows() {
                    for j in 0..upstream.cols() {
                        if out.get(i, j) <= 0.0 {
                            upstream.set(i, j, 0.0);
                        }
                    }
                }
            }
            let input = &cache.acts[li];
            let dw = input.transpose().matmul(&upstream)?;
            let mut db = Matrix::zeros(1, layer.bias.cols());
            for i in 0..upstream.rows() {
                for j in 0..upstream.cols() {
                    db.set(0, j, db.get(0, j) + upstream.get(i, j));
                }
            }
            upstream = upstream.matmul(&layer.weight.transpose())?;
            grads.push(Layer {
                weight: dw,
                bias: db,
            });
        }
        grads.reverse();
        Ok(grads)
    }

    /// FNV-64 hash over the exact parameter bits; used by freezing contracts.
    pub fn param_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut feed = |m: &Matrix| {
            for v in m.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        };
        for layer in &self.layers {
            feed(&layer.weight);
            feed(&layer.bias);
        }
        h
    }
}

/// Row-normalized features `Z = f(X)`.
pub fn forward_features(extractor: &FeatureExtractor, x: &Matrix) -> Result<Matrix> {
    extractor.forward(x)
}

// ---------------------------------------------------------------------------
// Classifiers
// ---------------------------------------------------------------------------

/// Cosine-similarity classifier: logit for class `q` is
/// `eta * <prototype_q / |prototype_q|, z / |z|>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineClassifier {
    /// `c x d`, one row per class, stored unnormalized.
    pub prototypes: Matrix,
    pub eta: f64,
}

/// Local-similarity classifier: `P` proxies per class. The class score is
/// the softmax-weighted mixture of proxy cosine similarities,
/// `y_q = sum_p s_{q,p} <theta_{q,p}, z>` with `s` the softmax of the
/// similarities over the class's own proxies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LscClassifier {
    /// `(c * P) x d`; proxies of class `q` occupy rows `q*P..(q+1)*P`.
    pub proxies: Matrix,
    pub proxies_per_class: usize,
    pub eta: f64,
    /// NCA hinge margin used by the classifier's native loss.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Classifier {
    Cosine(CosineClassifier),
    Lsc(LscClassifier),
}

/// Forward state retained for the classifier backward pass.
pub struct ScoreCache {
    /// Normalized features.
    z_hat: Matrix,
    /// Per-row feature norms.
    z_norms: Vec<f64>,
    /// Normalized prototypes/proxies.
    p_hat: Matrix,
    /// Per-row prototype norms.
    p_norms: Vec<f64>,
    /// Cosine similarities, `b x (c or c*P)`.
    cos: Matrix,
    /// LSC only: softmax weights per class block, same shape as `cos`.
    lsc_weights: Option<Matrix>,
    /// Unscaled class scores, `b x c`.
    pub scores: Matrix,
}

impl Classifier {
    pub fn cosine(prototypes: Matrix, eta: f64) -> Self {
        assert!(eta > 0.0);
        Classifier::Cosine(CosineClassifier { prototypes, eta })
    }

    pub fn lsc(proxies: Matrix, proxies_per_class: usize, eta: f64, delta: f64) -> Self {
        assert!(proxies_per_class >= 1);
        assert_eq!(proxies.rows() % proxies_per_class, 0);
        Classifier::Lsc(LscClassifier {
            proxies,
            proxies_per_class,
            eta,
            delta,
        })
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Classifier::Cosine(c) => c.prototypes.rows(),
            Classifier::Lsc(l) => l.proxies.rows() / l.proxies_per_class,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Classifier::Cosine(c) => c.prototypes.cols(),
            Classifier::Lsc(l) => l.proxies.cols(),
        }
    }

    pub fn eta(&self) -> f64 {
        match self {
            Classifier::Cosine(c) => c.eta,
            Classifier::Lsc(l) => l.eta,
        }
    }

    /// The classification loss this classifier is trained with by default.
    pub fn native_loss(&self) -> ClsKind {
        match self {
            Classifier::Cosine(_) => ClsKind::CrossEntropy,
            Classifier::Lsc(l) => ClsKind::Nca { margin: l.delta },
        }
    }

    pub fn params(&self) -> &Matrix {
        match self {
            Classifier::Cosine(c) => &c.prototypes,
            Classifier::Lsc(l) => &l.proxies,
        }
    }

    pub fn params_mut(&mut self) -> &mut Matrix {
        match self {
            Classifier::Cosine(c) => &mut c.prototypes,
            Classifier::Lsc(l) => &mut l.proxies,
        }
    }

    /// Unscaled class scores (`cos` for cosine, proxy mixture for LSC).
    pub fn scores(&self, z: &Matrix) -> Result<Matrix> {
        Ok(self.score_cached(z)?.scores)
    }

    /// Temperature-scaled logits. For the cosine kind every entry lies in
    /// `[-eta, eta]`.
    pub fn logits(&self, z: &Matrix) -> Result<Matrix> {
        Ok(self.scores(z)?.scale(self.eta()))
    }

    pub fn score_cached(&self, z: &Matrix) -> Result<ScoreCache> {
        if z.cols() != self.feature_dim() {
            return Err(Error::shape(z.shape(), (z.rows(), self.feature_dim())));
        }
        let (z_hat, _) = z.row_normalize(NORM_EPS);
        let z_norms: Vec<f64> = (0..z.rows()).map(|i| z.row_norm(i)).collect();
        let params = self.params();
        let (p_hat, _) = params.row_normalize(NORM_EPS);
        let p_norms: Vec<f64> = (0..params.rows()).map(|i| params.row_norm(i)).collect();
        let cos = z_hat.matmul(&p_hat.transpose())?;

        match self {
            Classifier::Cosine(_) => Ok(ScoreCache {
                z_hat,
                z_norms,
                p_hat,
                p_norms,
                scores: cos.clone(),
                cos,
                lsc_weights: None,
            }),
            Classifier::Lsc(l) => {
                let p = l.proxies_per_class;
                let c = self.num_classes();
                let b = z.rows();
                let mut weights = Matrix::zeros(b, c * p);
                let mut scores = Matrix::zeros(b, c);
                for i in 0..b {
                    for q in 0..c {
                        let block = &cos.row(i)[q * p..(q + 1) * p];
                        let m = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = block.iter().map(|&v| (v - m).exp()).collect();
                        let total: f64 = exps.iter().sum();
                        let mut score = 0.0;
                        for (k, e) in exps.iter().enumerate() {
                            let s = e / total;
                            weights.set(i, q * p + k, s);
                            score += s * block[k];
                        }
                        scores.set(i, q, score);
                    }
                }
                Ok(ScoreCache {
                    z_hat,
                    z_norms,
                    p_hat,
                    p_norms,
                    cos,
                    lsc_weights: Some(weights),
                    scores,
                })
            }
        }
    }

    /// Backpropagate `d_loss/d_scores` to features and classifier
    /// parameters. Parameter gradients are skipped when `want_params` is
    /// false (the attack only needs feature gradients).
    pub fn score_backward(
        &self,
        cache: &ScoreCache,
        upstream: &Matrix,
        want_params: bool,
    ) -> Result<(Matrix, Option<Matrix>)> {
        let b = cache.z_hat.rows();
        let c = self.num_classes();
        if upstream.shape() != (b, c) {
            return Err(Error::shape(upstream.shape(), (b, c)));
        }

        let dcos = self.dcos_from_upstream(cache, upstream);

        // Cosine backward: cos_ij = z_hat_i . p_hat_j.
        // dz_i  = sum_j dcos_ij (p_hat_j - cos_ij z_hat_i) / |z_i|
        // dp_j  = sum_i dcos_ij (z_hat_i - cos_ij p_hat_j) / |p_j|
        let d = self.feature_dim();
        let mut dz = dcos.matmul(&cache.p_hat)?;
        for i in 0..b {
            let inner: f64 = (0..d).map(|k| dz.get(i, k) * cache.z_hat.get(i, k)).sum();
            let n = cache.z_norms[i];
            let scale = if n < NORM_EPS { 1.0 } else { 1.0 / n };
            for k in 0..d {
                let v = (dz.get(i, k) - inner * cache.z_hat.get(i, k)) * scale;
                dz.set(i, k, v);
            }
        }

        let dparams = if want_params {
            let mut dp = dcos.transpose().matmul(&cache.z_hat)?;
            for j in 0..dp.rows() {
                let inner: f64 = (0..d).map(|k| dp.get(j, k) * cache.p_hat.get(j, k)).sum();
                let n = cache.p_norms[j];
                let scale = if n < NORM_EPS { 1.0 } else { 1.0 / n };
                for k in 0..d {
                    let v = (dp.get(j, k) - inner * cache.p_hat.get(j, k)) * scale;
                    dp.set(j, k, v);
                }
            }
            Some(dp)
        } else {
            None
        };

        Ok((dz, dparams))
    }

    /// Like [`Classifier::score_backward`] but treating the feature rows as
    /// the classifier's direct input: the feature-normalization Jacobian is
    /// skipped, so a channel no prototype reads gets exactly zero gradient.
    pub fn score_backward_linear(
        &self,
        cache: &ScoreCache,
        upstream: &Matrix,
    ) -> Result<(Matrix, Option<Matrix>)> {
        let b = cache.z_hat.rows();
        let c = self.num_classes();
        if upstream.shape() != (b, c) {
            return Err(Error::shape(upstream.shape(), (b, c)));
        }
        let dcos = self.dcos_from_upstream(cache, upstream);
        let dz = dcos.matmul(&cache.p_hat)?;
        Ok((dz, None))
    }

    /// Map `d_loss/d_scores` back to `d_loss/d_cos`. For the cosine kind
    /// this is the identity; for LSC it goes through the proxy softmax
    /// mixture: `d y_q / d c_{q,k} = s_k (1 + c_k - y_q)`.
    fn dcos_from_upstream(&self, cache: &ScoreCache, upstream: &Matrix) -> Matrix {
        match self {
            Classifier::Cosine(_) => upstream.clone(),
            Classifier::Lsc(l) => {
                let b = cache.z_hat.rows();
                let c = self.num_classes();
                let p = l.proxies_per_class;
                let w = cache.lsc_weights.as_ref().unwrap();
                let mut dcos = Matrix::zeros(b, c * p);
                for i in 0..b {
                    for q in 0..c {
                        let g = upstream.get(i, q);
                        if g == 0.0 {
                            continue;
                        }
                        let score = cache.scores.get(i, q);
                        for k in 0..p {
                            let col = q * p + k;
                            let s = w.get(i, col);
                            let cv = cache.cos.get(i, col);
                            dcos.set(i, col, g * s * (1.0 + cv - score));
                        }
                    }
                }
                dcos
            }
        }
    }

    /// Append freshly initialized rows for `n_new` classes; existing rows are
    /// untouched bit for bit. Initialization is Gaussian scaled by
    /// `1/sqrt(d)` so new prototypes match the unit-feature geometry.
    pub fn expand(&mut self, n_new: usize, rng: &mut Rng) {
        if n_new == 0 {
            return;
        }
        let d = self.feature_dim();
        let per_class = match self {
            Classifier::Cosine(_) => 1,
            Classifier::Lsc(l) => l.proxies_per_class,
        };
        let fresh = rng
            .gaussian_matrix(n_new * per_class, d)
            .scale(1.0 / (d as f64).sqrt());
        let params = self.params_mut();
        *params = params.vstack(&fresh).expect("same feature dim");
    }

    pub fn param_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for v in self.params().data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

// ---------------------------------------------------------------------------
// Model and snapshots
// ---------------------------------------------------------------------------

/// Live `(f_k, g_k)` pair plus the ordered list of labels seen so far.
/// Classifier column `j` scores class `known_classes[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub extractor: FeatureExtractor,
    pub classifier: Classifier,
    pub known_classes: Vec<usize>,
}

impl Model {
    pub fn new(extractor: FeatureExtractor, classifier: Classifier, classes: Vec<usize>) -> Self {
        assert_eq!(classifier.num_classes(), classes.len());
        Model {
            extractor,
            classifier,
            known_classes: classes,
        }
    }

    pub fn class_index(&self, label: usize) -> Option<usize> {
        self.known_classes.iter().position(|&c| c == label)
    }

    /// Map data labels to classifier column indices.
    pub fn class_indices(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&l| {
                self.class_index(l).ok_or(Error::LabelOutOfRange {
                    label: l,
                    classes: self.known_classes.len(),
                })
            })
            .collect()
    }

    /// Grow the classifier for a new task's classes.
    pub fn expand_classifier(&mut self, new_classes: &[usize], rng: &mut Rng) -> Result<()> {
        for &c in new_classes {
            if self.known_classes.contains(&c) {
                return Err(Error::ClassOverlap { class: c });
            }
        }
        self.classifier.expand(new_classes.len(), rng);
        self.known_classes.extend_from_slice(new_classes);
        Ok(())
    }

    pub fn param_hash(&self) -> u64 {
        self.extractor.param_hash() ^ self.classifier.param_hash().rotate_left(1)
    }
}

/// Immutable copy of the model at the end of stage `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub stage: usize,
    model: Model,
}

impl ModelSnapshot {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.model.extractor
    }

    pub fn classifier(&self) -> &Classifier {
        &self.model.classifier
    }

    pub fn known_classes(&self) -> &[usize] {
        &self.model.known_classes
    }

    pub fn param_hash(&self) -> u64 {
        self.model.param_hash()
    }
}

/// Deep-copy the live model; later training never touches the copy.
pub fn snapshot(model: &Model, stage: usize) -> ModelSnapshot {
    ModelSnapshot {
        stage,
        model: model.clone(),
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: Model,
}

/// JSON checkpoint; `f64` values round-trip bit-exactly through the
/// shortest-representation encoding.
pub fn save_checkpoint(model: &Model, path: &std::path::Path) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
    };
    let text = serde_json::to_string_pretty(&ckpt)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {} unsupported (expected {})",
            ckpt.version, CHECKPOINT_VERSION
        )));
    }
    Ok(ckpt.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn unit_rows(m: &Matrix) -> Matrix {
        m.row_normalize(NORM_EPS).0
    }

    #[test]
    fn identity_extractor_passes_normalized_input_through() {
        let ex = FeatureExtractor::identity(2);
        let x = unit_rows(&Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 2.0]]));
        let z = ex.forward(&x).unwrap();
        assert!(z.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn identity_extractor_normalizes() {
        let ex = FeatureExtractor::identity(2);
        let z = ex.forward(&Matrix::from_rows(&[&[3.0, 4.0]])).unwrap();
        assert!((z.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((z.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn mlp_forward_matches_hand_composition() {
        let mut rng = Rng::new(3);
        let ex = FeatureExtractor::mlp(&[4, 6, 3], &mut rng);
        let x = rng.gaussian_matrix(5, 4);

        // Layer-by-layer composition with separate code.
        let l0 = &ex.layers()[0];
        let mut h = x.matmul(&l0.weight).unwrap();
        for i in 0..h.rows() {
            for j in 0..h.cols() {
                h.set(i, j, (h.get(i, j) + l0.bias.get(0, j)).max(0.0));
            }
        }
        let l1 = &ex.layers()[1];
        let mut out = h.matmul(&l1.weight).unwrap();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) + l1.bias.get(0, j));
            }
        }
        let expected = unit_rows(&out);

        let z = ex.forward(&x).unwrap();
        assert!(z.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn extractor_dimension_mismatch() {
        let ex = FeatureExtractor::identity(3);
        assert!(ex.forward(&Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn cosine_logits_hit_eta_on_own_prototype() {
        let protos = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 5.0]]);
        let clf = Classifier::cosine(protos, 3.0);
        let z = Matrix::from_rows(&[&[1.0, 0.0]]);
        let logits = clf.logits(&z).unwrap();
        assert!((logits.get(0, 0) - 3.0).abs() < 1e-12);
        assert!(logits.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_feature_gets_zero_logits() {
        let protos = Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let clf = Classifier::cosine(protos, 1.0);
        let z = Matrix::from_rows(&[&[0.0, 0.0, 1.0]]);
        let logits = clf.logits(&z).unwrap();
        assert!(logits.get(0, 0).abs() < 1e-12);
        assert!(logits.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn lsc_with_one_proxy_equals_cosine() {
        let mut rng = Rng::new(17);
        let protos = rng.gaussian_matrix(4, 6);
        let cos = Classifier::cosine(protos.clone(), 2.5);
        let lsc = Classifier::lsc(protos, 1, 2.5, 0.4);
        let z = rng.gaussian_matrix(7, 6);
        let a = cos.logits(&z).unwrap();
        let b = lsc.logits(&z).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn expand_preserves_existing_rows_and_is_deterministic() {
        let mut rng = Rng::new(5);
        let protos = rng.gaussian_matrix(4, 3);
        let mut a = Classifier::cosine(protos.clone(), 1.0);
        let mut b = Classifier::cosine(protos.clone(), 1.0);

        let mut r1 = Rng::new(99);
        let mut r2 = Rng::new(99);
        a.expand(2, &mut r1);
        b.expand(2, &mut r2);
        assert_eq!(a.num_classes(), 6);
        assert!(a.params().take_rows(4).bit_eq(&protos));
        assert!(a.params().bit_eq(b.params()));

        let mut c = Classifier::cosine(protos.clone(), 1.0);
        c.expand(0, &mut r1);
        assert!(c.params().bit_eq(&protos));
    }

    #[test]
    fn expand_preserves_old_class_logits() {
        let mut rng = Rng::new(21);
        let protos = rng.gaussian_matrix(3, 5);
        let clf = Classifier::cosine(protos.clone(), 1.7);
        let z = rng.gaussian_matrix(4, 5);
        let before = clf.logits(&z).unwrap();

        let mut grown = clf.clone();
        grown.expand(2, &mut rng);
        let after = grown.logits(&z).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(before.get(i, j).to_bits(), after.get(i, j).to_bits());
            }
        }
    }

    #[test]
    fn model_expand_rejects_overlap() {
        let mut rng = Rng::new(1);
        let protos = rng.gaussian_matrix(2, 3);
        let mut model = Model::new(
            FeatureExtractor::identity(3),
            Classifier::cosine(protos, 1.0),
            vec![10, 11],
        );
        let err = model.expand_classifier(&[11], &mut rng).unwrap_err();
        assert!(matches!(err, Error::ClassOverlap { class: 11 }));
    }

    #[test]
    fn snapshot_is_isolated_from_later_updates() {
        let mut rng = Rng::new(2);
        let protos = rng.gaussian_matrix(2, 3);
        let mut model = Model::new(
            FeatureExtractor::identity(3),
            Classifier::cosine(protos, 1.0),
            vec![0, 1],
        );
        let snap = snapshot(&model, 1);
        let hash_before = snap.param_hash();
        let z = rng.gaussian_matrix(2, 3);
        let logits_before = snap.classifier().logits(&z).unwrap();

        // "Train" by stomping the live parameters.
        for _ in 0..10 {
            let noise = rng.gaussian_matrix(2, 3);
            model.classifier.params_mut().add_scaled(&noise, 0.1).unwrap();
        }

        assert_eq!(snap.param_hash(), hash_before);
        assert!(snap.classifier().logits(&z).unwrap().bit_eq(&logits_before));
        assert_eq!(snap.known_classes(), &[0, 1]);

        let snap2 = snapshot(snap.model(), 1);
        assert_eq!(snap2, snap);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut rng = Rng::new(13);
        let model = Model::new(
            FeatureExtractor::mlp(&[4, 5, 3], &mut rng),
            Classifier::lsc(rng.gaussian_matrix(6, 3), 2, 1.3, 0.25),
            vec![3, 1, 4],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.known_classes, model.known_classes);
        assert!(loaded.classifier.params().bit_eq(model.classifier.params()));
        assert_eq!(loaded.extractor.param_hash(), model.extractor.param_hash());
    }

    proptest! {
        /// Cosine-style logits ignore positive rescaling of feature rows.
        #[test]
        fn logits_scale_invariant(seed in 0u64..300, scale in 0.05f64..20.0) {
            let mut rng = Rng::new(seed);
            let protos = rng.gaussian_matrix(3, 4);
            let z = rng.gaussian_matrix(2, 4);
            for clf in [
                Classifier::cosine(protos.clone(), 1.5),
                Classifier::lsc(protos.clone(), 1, 1.5, 0.2),
            ] {
                let a = clf.logits(&z).unwrap();
                let b = clf.logits(&z.scale(scale)).unwrap();
                prop_assert!(a.max_abs_diff(&b) < 1e-12);
            }
        }
    }
}
