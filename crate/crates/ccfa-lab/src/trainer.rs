//! The incremental training loop: per-stage SGD on the union of task data
//! and memory, augmented-feature injection into the classification loss,
//! snapshotting, memory update, and balanced classifier fine-tuning.
//!
//! Stage `k` trains on `D_k ∪ M_{k-1}`. For `k >= 2` every batch is
//! augmented by attacking the frozen stage-`k-1` snapshot; augmented rows
//! enter only the classification term. After training, the new task is
//! herded into the buffer and the classifier alone is fine-tuned on the
//! class-balanced buffer (augmentation still active).

use crate::ccfa::{augment, gaussian_noise_augment, AttackConfig};
use crate::data::TaskStream;
use crate::error::{Error, Result};
use crate::eval::{evaluate_stage, MetricsRecord};
use crate::losses::{afc_importance, total_loss, AlgKind, BatchTerms, ImportanceVector, LossConfig};
use crate::memory::{update_buffer, MemoryBuffer};
use crate::model::{snapshot, Classifier, FeatureExtractor, Layer, Model, ModelSnapshot};
use crate::numerics::{Matrix, Rng};
use serde::{Deserialize, Serialize};
use std::time::Instant;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Step decay schedule: multiply the rate by `factor` at each milestone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.1,
            milestones: vec![25, 35],
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.initial * self.factor.powi(decays as i32)
    }
}

/// Per-stage optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub loss: LossConfig,
    pub attack: AttackConfig,
    pub finetune_epochs: usize,
    /// Gaussian-noise baseline scale (PASS-style augmentation).
    pub noise_sigma: f64,
    /// Duplication factor for memory exemplars in the stage union
    /// (sensitivity knob; 1 = plain union).
    pub memory_oversample: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: 40,
            batch_size: 64,
            lr: LrSchedule::default(),
            momentum: 0.9,
            loss: LossConfig::default(),
            attack: AttackConfig::default(),
            finetune_epochs: 10,
            noise_sigma: 1.0,
            memory_oversample: 1,
        }
    }
}

/// Feature-extractor architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExtractorConfig {
    Identity,
    Linear { out_dim: usize },
    Mlp { hidden: Vec<usize>, out_dim: usize },
}

/// Classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClassifierConfig {
    Cosine,
    Lsc { proxies_per_class: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub classifier: ClassifierConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            extractor: ExtractorConfig::Identity,
            classifier: ClassifierConfig::Cosine,
        }
    }
}

/// Which augmentation the trainer injects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationMode {
    None,
    Ccfa,
    GaussianNoise,
}

/// Everything a single experiment needs besides the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSetup {
    pub model: ModelConfig,
    pub stage: StageConfig,
    pub memory_per_class: usize,
    pub mode: AugmentationMode,
    /// When set, fine-tuning attacks a snapshot of the just-trained model
    /// instead of the previous-stage snapshot.
    pub finetune_attacks_current: bool,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// State and audit types
// ---------------------------------------------------------------------------

/// Training phase tag for step statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Finetune,
}

/// Classification-batch composition of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub stage: usize,
    pub phase: Phase,
    pub orig_rows: usize,
    pub aug_rows: usize,
}

/// Hashes recorded around each stage for the freezing/isolation contracts.
#[derive(Debug, Clone, Copy)]
pub struct StageAudit {
    pub stage: usize,
    /// Previous-stage snapshot hash before any stage-k updates.
    pub snapshot_hash_before: Option<u64>,
    /// Same snapshot hashed after stage-k training and fine-tuning.
    pub snapshot_hash_after: Option<u64>,
    pub extractor_hash_before_finetune: u64,
    pub extractor_hash_after_finetune: u64,
}

/// Live experiment state across stages. Serializes for checkpoint/resume;
/// step statistics and audit hashes are in-memory diagnostics only.
#[derive(Serialize, Deserialize)]
pub struct RunState {
    pub model: Model,
    pub snapshot: Option<ModelSnapshot>,
    pub buffer: MemoryBuffer,
    /// Last completed stage (0 = nothing trained yet).
    pub stage: usize,
    pub records: Vec<MetricsRecord>,
    #[serde(skip)]
    pub step_stats: Vec<StepStats>,
    #[serde(skip)]
    pub audits: Vec<StageAudit>,
}

/// Fresh state for a stream: initial model built from the first task's
/// classes, empty buffer, nothing trained.
pub fn initial_state(stream: &TaskStream, setup: &ExperimentSetup) -> Result<RunState> {
    let root = Rng::new(setup.seed);
    let mut init_rng = root.derive("model-init");
    let model = build_initial_model(stream, setup, &mut init_rng)?;
    Ok(RunState {
        model,
        snapshot: None,
        buffer: MemoryBuffer::new(setup.memory_per_class),
        stage: 0,
        records: Vec::new(),
        step_stats: Vec::new(),
        audits: Vec::new(),
    })
}

pub fn save_run_state(state: &RunState, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string(state)?)?;
    Ok(())
}

pub fn load_run_state(path: &std::path::Path) -> Result<RunState> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Everything a finished run hands back.
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub step_stats: Vec<StepStats>,
    pub audits: Vec<StageAudit>,
    pub model: Model,
    pub buffer: MemoryBuffer,
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

/// One SGD-with-momentum update: `v <- momentum v + g; p <- p - lr v`.
pub fn sgd_step(
    param: &mut Matrix,
    grad: &Matrix,
    velocity: &mut Matrix,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::shape(param.shape(), grad.shape()));
    }
    for ((v, &g), p) in velocity
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(param.data_mut())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers matching the model's parameter tensors.
struct Velocity {
    classifier: Matrix,
    extractor: Vec<Layer>,
}

impl Velocity {
    fn for_model(model: &Model) -> Velocity {
        Velocity {
            classifier: Matrix::zeros(
                model.classifier.params().rows(),
                model.classifier.params().cols(),
            ),
            extractor: model
                .extractor
                .layers()
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: Matrix::zeros(l.bias.rows(), l.bias.cols()),
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Stage training
// ---------------------------------------------------------------------------

/// Materialized union `D_k ∪ M_{k-1}` in raw input space.
fn stage_union(
    stream: &TaskStream,
    stage_idx: usize,
    buffer: &MemoryBuffer,
    oversample: usize,
) -> (Matrix, Vec<usize>) {
    let task = &stream.tasks[stage_idx];
    let mut features = task.train.features.clone();
    let mut labels = task.train.labels.clone();
    for (&class, indices) in &buffer.exemplars {
        // Find the task that introduced this class.
        let t = stream
            .tasks
            .iter()
            .position(|t| t.classes.contains(&class))
            .expect("buffer class comes from some task");
        let rows = stream.tasks[t].train.features.select_rows(indices);
        for _ in 0..oversample.max(1) {
            features = features.vstack(&rows).expect("same dim");
            labels.extend(std::iter::repeat_n(class, indices.len()));
        }
    }
    (features, labels)
}

/// Batch index lists for one epoch: full batches when the set is large
/// enough (partial tail dropped), otherwise one batch with everything.
fn epoch_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    if order.len() <= batch_size {
        return vec![order.to_vec()];
    }
    order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// AFC importance estimated over the memory buffer under the snapshot.
fn stage_importance(
    cfg: &LossConfig,
    snapshot: Option<&ModelSnapshot>,
    stream: &TaskStream,
    buffer: &MemoryBuffer,
) -> Result<Option<ImportanceVector>> {
    if cfg.alg_kind != AlgKind::AfcDisc {
        return Ok(None);
    }
    let Some(snap) = snapshot else {
        return Ok(None);
    };
    let mut features: Option<Matrix> = None;
    let mut labels = Vec::new();
    for (&class, indices) in &buffer.exemplars {
        let t = stream
            .tasks
            .iter()
            .position(|t| t.classes.contains(&class))
            .expect("buffer class comes from some task");
        let rows = stream.tasks[t].train.features.select_rows(indices);
        features = Some(match features {
            None => rows,
            Some(f) => f.vstack(&rows)?,
        });
        labels.extend(std::iter::repeat_n(class, indices.len()));
    }
    match features {
        Some(f) if !labels.is_empty() => Ok(Some(afc_importance(snap, &f, &labels)?)),
        _ => Ok(None),
    }
}

struct BatchContext<'a> {
    setup: &'a ExperimentSetup,
    snapshot: Option<&'a ModelSnapshot>,
    importance: Option<&'a ImportanceVector>,
    num_old: usize,
    new_count: usize,
    stage: usize,
    lr: f64,
    phase: Phase,
    /// Fine-tuning freezes the extractor and trains the classifier alone on
    /// the classification term.
    classifier_only: bool,
}

/// Forward, augment, compute the stage objective, and apply one SGD update.
fn train_batch(
    model: &mut Model,
    velocity: &mut Velocity,
    x: &Matrix,
    label_cols: &[usize],
    ctx: &BatchContext,
    batch_rng: &Rng,
    stats: &mut Vec<StepStats>,
) -> Result<f64> {
    let cache = model.extractor.forward_cached(x)?;
    let z = cache.z.clone();

    // Cross-class (or noise) augmentation against the frozen snapshot.
    let aug = match ctx.setup.mode {
        AugmentationMode::None => Default::default(),
        AugmentationMode::Ccfa => augment(
            &z,
            label_cols,
            model,
            ctx.snapshot,
            &ctx.setup.stage.attack,
            batch_rng,
        )?,
        AugmentationMode::GaussianNoise => gaussian_noise_augment(
            &z,
            ctx.snapshot,
            ctx.setup.stage.noise_sigma,
            ctx.setup.stage.attack.multiplier,
            batch_rng,
        )?,
    };

    // Distillation teacher features for the same raw inputs. Stage 1 has no
    // snapshot, so its objective is classification only; fine-tuning also
    // drops the auxiliary term (the extractor is frozen).
    let strip_alg = ctx.classifier_only || ctx.snapshot.is_none();
    let needs_teacher = !strip_alg && ctx.setup.stage.loss.alg_kind != AlgKind::None;
    let z_old = match (needs_teacher, ctx.snapshot) {
        (true, Some(snap)) => Some(snap.extractor().forward(x)?),
        _ => None,
    };

    let loss_cfg = if strip_alg {
        LossConfig {
            alg_kind: AlgKind::None,
            ..ctx.setup.stage.loss.clone()
        }
    } else {
        ctx.setup.stage.loss.clone()
    };
    let terms = BatchTerms {
        classifier: &model.classifier,
        z: &z,
        label_cols,
        augmented: if aug.is_empty() {
            None
        } else {
            Some((&aug.features, &aug.pseudo_cols))
        },
        z_old: z_old.as_ref(),
        importance: ctx.importance,
        num_old: ctx.num_old,
        class_counts: (model.known_classes.len(), ctx.new_count),
    };
    let out = total_loss(&loss_cfg, &terms)?;

    stats.push(StepStats {
        stage: ctx.stage,
        phase: ctx.phase,
        orig_rows: z.rows(),
        aug_rows: aug.len(),
    });

    sgd_step(
        model.classifier.params_mut(),
        &out.d_params,
        &mut velocity.classifier,
        ctx.lr,
        ctx.setup.stage.momentum,
    )?;
    if !ctx.classifier_only && !model.extractor.is_identity() {
        let layer_grads = model.extractor.backward(&cache, &out.d_z)?;
        for (layer, (grad, vel)) in model
            .extractor
            .layers_mut()
            .iter_mut()
            .zip(layer_grads.iter().zip(velocity.extractor.iter_mut()))
        {
            sgd_step(
                &mut layer.weight,
                &grad.weight,
                &mut vel.weight,
                ctx.lr,
                ctx.setup.stage.momentum,
            )?;
            sgd_step(
                &mut layer.bias,
                &grad.bias,
                &mut vel.bias,
                ctx.lr,
                ctx.setup.stage.momentum,
            )?;
        }
    }
    Ok(out.value)
}

/// Train stage `k` (1-based) on `D_k ∪ M_{k-1}`. Returns the mean objective
/// value per epoch (useful for convergence checks).
pub fn train_stage(
    state: &mut RunState,
    stream: &TaskStream,
    setup: &ExperimentSetup,
    root: &Rng,
) -> Result<Vec<f64>> {
    let k = state.stage;
    let stage_idx = k - 1;
    if k >= 2 && state.snapshot.is_none() {
        return Err(Error::EmptyInput("snapshot required for stages >= 2"));
    }
    let (features, labels) = stage_union(
        stream,
        stage_idx,
        &state.buffer,
        setup.stage.memory_oversample,
    );
    let label_cols = state.model.class_indices(&labels)?;
    let num_old = state.model.known_classes.len() - stream.tasks[stage_idx].classes.len();
    let importance = stage_importance(
        &setup.stage.loss,
        state.snapshot.as_ref(),
        stream,
        &state.buffer,
    )?;

    let mut velocity = Velocity::for_model(&state.model);
    let mut epoch_losses = Vec::with_capacity(setup.stage.epochs);
    for epoch in 0..setup.stage.epochs {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        let mut shuffle_rng = root.derive_indexed("train/shuffle", (k * 10_000 + epoch) as u64);
        shuffle_rng.shuffle(&mut order);
        let lr = setup.stage.lr.rate_at(epoch);

        let mut epoch_loss = 0.0;
        let batches = epoch_batches(&order, setup.stage.batch_size);
        let n_batches = batches.len();
        for (bi, batch) in batches.into_iter().enumerate() {
            let x = features.select_rows(&batch);
            let cols: Vec<usize> = batch.iter().map(|&i| label_cols[i]).collect();
            let batch_rng = root.derive_indexed(
                "train/augment",
                (k * 1_000_000 + epoch * 1_000 + bi) as u64,
            );
            let ctx = BatchContext {
                setup,
                snapshot: state.snapshot.as_ref(),
                importance: importance.as_ref(),
                num_old,
                new_count: stream.tasks[stage_idx].classes.len(),
                stage: k,
                lr,
                phase: Phase::Train,
                classifier_only: false,
            };
            epoch_loss += train_batch(
                &mut state.model,
                &mut velocity,
                &x,
                &cols,
                &ctx,
                &batch_rng,
                &mut state.step_stats,
            )?;
        }
        epoch_losses.push(epoch_loss / n_batches.max(1) as f64);
    }
    Ok(epoch_losses)
}

/// Fine-tune the classifier on the class-balanced buffer with the extractor
/// frozen. Augmentation stays active (for `k >= 2`); by default the attack
/// still targets the previous-stage snapshot.
pub fn finetune_classifier(
    state: &mut RunState,
    stream: &TaskStream,
    setup: &ExperimentSetup,
    root: &Rng,
) -> Result<()> {
    if setup.stage.finetune_epochs == 0 {
        return Ok(());
    }
    if state.buffer.exemplars.is_empty() {
        return Err(Error::EmptyInput("memory buffer for fine-tuning"));
    }
    let k = state.stage;

    // Exemplar features under the frozen extractor, balanced by
    // construction: every class contributes its full exemplar set.
    let mut raw: Option<Matrix> = None;
    let mut labels = Vec::new();
    for (&class, indices) in &state.buffer.exemplars {
        let t = stream
            .tasks
            .iter()
            .position(|t| t.classes.contains(&class))
            .expect("buffer class comes from some task");
        let rows = stream.tasks[t].train.features.select_rows(indices);
        raw = Some(match raw {
            None => rows,
            Some(f) => f.vstack(&rows)?,
        });
        labels.extend(std::iter::repeat_n(class, indices.len()));
    }
    let raw = raw.unwrap();
    let label_cols = state.model.class_indices(&labels)?;

    let finetune_snapshot;
    let attack_snapshot: Option<&ModelSnapshot> = if setup.finetune_attacks_current {
        finetune_snapshot = Some(snapshot(&state.model, k));
        finetune_snapshot.as_ref()
    } else {
        state.snapshot.as_ref()
    };

    let num_old = state.model.known_classes.len() - stream.tasks[k - 1].classes.len();
    let mut velocity = Velocity::for_model(&state.model);
    for epoch in 0..setup.stage.finetune_epochs {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        let mut shuffle_rng =
            root.derive_indexed("finetune/shuffle", (k * 10_000 + epoch) as u64);
        shuffle_rng.shuffle(&mut order);
        let lr = setup.stage.lr.rate_at(setup.stage.epochs + epoch);

        // Keep the partial tail so each epoch visits every exemplar: the
        // per-epoch per-class counts stay exactly equal.
        let batches: Vec<Vec<usize>> = order
            .chunks(setup.stage.batch_size)
            .map(|c| c.to_vec())
            .collect();
        for (bi, batch) in batches.into_iter().enumerate() {
            let x = raw.select_rows(&batch);
            let cols: Vec<usize> = batch.iter().map(|&i| label_cols[i]).collect();
            let batch_rng = root.derive_indexed(
                "finetune/augment",
                (k * 1_000_000 + epoch * 1_000 + bi) as u64,
            );
            let ctx = BatchContext {
                setup,
                snapshot: attack_snapshot,
                importance: None,
                num_old,
                new_count: stream.tasks[k - 1].classes.len(),
                stage: k,
                lr,
                phase: Phase::Finetune,
                classifier_only: true,
            };
            train_batch(
                &mut state.model,
                &mut velocity,
                &x,
                &cols,
                &ctx,
                &batch_rng,
                &mut state.step_stats,
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Full experiment
// ---------------------------------------------------------------------------

fn build_initial_model(
    stream: &TaskStream,
    setup: &ExperimentSetup,
    rng: &mut Rng,
) -> Result<Model> {
    let input_dim = stream.dim;
    let extractor = match &setup.model.extractor {
        ExtractorConfig::Identity => FeatureExtractor::identity(input_dim),
        ExtractorConfig::Linear { out_dim } => FeatureExtractor::linear(input_dim, *out_dim, rng),
        ExtractorConfig::Mlp { hidden, out_dim } => {
            let mut dims = vec![input_dim];
            dims.extend_from_slice(hidden);
            dims.push(*out_dim);
            FeatureExtractor::mlp(&dims, rng)
        }
    };
    let d = extractor.output_dim();
    let classes = stream.tasks[0].classes.clone();
    let scale = 1.0 / (d as f64).sqrt();
    let loss = &setup.stage.loss;
    let classifier = match &setup.model.classifier {
        ClassifierConfig::Cosine => {
            Classifier::cosine(rng.gaussian_matrix(classes.len(), d).scale(scale), loss.eta)
        }
        ClassifierConfig::Lsc { proxies_per_class } => Classifier::lsc(
            rng.gaussian_matrix(classes.len() * proxies_per_class, d)
                .scale(scale),
            *proxies_per_class,
            loss.eta,
            loss.margin,
        ),
    };
    Ok(Model::new(extractor, classifier, classes))
}

/// Advance the state through stages `state.stage + 1 ..= through_stage`:
/// per stage, train, herd the new task into the buffer, fine-tune the
/// classifier, snapshot, and evaluate on the cumulative test set.
///
/// Every random stream is derived from the seed by (purpose, stage) path,
/// so resuming a deserialized state reproduces an uninterrupted run bit for
/// bit.
pub fn run_stages(
    state: &mut RunState,
    stream: &TaskStream,
    setup: &ExperimentSetup,
    through_stage: usize,
) -> Result<()> {
    assert!(through_stage <= stream.stages());
    let root = Rng::new(setup.seed);

    for k in (state.stage + 1)..=through_stage {
        let started = Instant::now();
        state.stage = k;
        if k >= 2 {
            let mut expand_rng = root.derive_indexed("expand", k as u64);
            let new_classes = stream.tasks[k - 1].classes.clone();
            state.model.expand_classifier(&new_classes, &mut expand_rng)?;
        }
        let snapshot_hash_before = state.snapshot.as_ref().map(|s| s.param_hash());

        train_stage(state, stream, setup, &root)?;

        state.buffer = update_buffer(
            &state.buffer,
            &stream.tasks[k - 1].train.features,
            &stream.tasks[k - 1].train.labels,
            &state.model.extractor,
            setup.memory_per_class,
            k,
        )?;

        let extractor_hash_before_finetune = state.model.extractor.param_hash();
        finetune_classifier(state, stream, setup, &root)?;
        let extractor_hash_after_finetune = state.model.extractor.param_hash();

        let snapshot_hash_after = state.snapshot.as_ref().map(|s| s.param_hash());
        state.audits.push(StageAudit {
            stage: k,
            snapshot_hash_before,
            snapshot_hash_after,
            extractor_hash_before_finetune,
            extractor_hash_after_finetune,
        });

        state.snapshot = Some(snapshot(&state.model, k));

        let test = stream.cumulative_test(k - 1);
        let new_classes = if k >= 2 {
            Some(stream.tasks[k - 1].classes.as_slice())
        } else {
            None
        };
        let mut record = evaluate_stage(&state.model, &test, new_classes, k)?;
        record.wall_time_secs = started.elapsed().as_secs_f64();
        state.records.push(record);
    }
    Ok(())
}

fn into_output(state: RunState) -> RunOutput {
    RunOutput {
        records: state.records,
        step_stats: state.step_stats,
        audits: state.audits,
        model: state.model,
        buffer: state.buffer,
    }
}

/// Run the full protocol over a task stream.
pub fn run_experiment(stream: &TaskStream, setup: &ExperimentSetup) -> Result<RunOutput> {
    let mut state = initial_state(stream, setup)?;
    run_stages(&mut state, stream, setup, stream.stages())?;
    Ok(into_output(state))
}

/// Continue a checkpointed state through the remaining stages.
pub fn resume_experiment(
    mut state: RunState,
    stream: &TaskStream,
    setup: &ExperimentSetup,
) -> Result<RunOutput> {
    run_stages(&mut state, stream, setup, stream.stages())?;
    Ok(into_output(state))
}
