//! End-to-end experiment execution for the two strategies: fine-tuning with
//! SGD, prefix freezing and early stopping, and embedding extraction with a
//! linear SVM. Both emit one [`ExperimentRecord`] per run.

use std::time::Instant;

use chrono::{SecondsFormat, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::backbone::{LayeredBackbone, SourceTag};
use crate::error::{Error, Result};
use crate::fne::{build_fne, FnEmbedding, Thresholds};
use crate::footprint::{co2_of, integrate_energy, PowerSampler, DEFAULT_INTENSITY_G_PER_KWH};
use crate::metrics::balanced_accuracy;
use crate::svm::{self, train_linear_svm, LinearSvmModel};
use crate::task::{ten_crop, Sample, TaskDataset};
use crate::tensor::{Matrix, Tensor3};

pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_MIN_EPOCHS: u32 = 10;
pub const DEFAULT_MAX_EPOCHS: u32 = 25;
pub const DEFAULT_PATIENCE: u32 = 3;
pub const DEFAULT_TIME_LIMIT_HOURS: f64 = 24.0;

/// Fine-tuning configuration. The search grid varies the first four fields;
/// the loop constants are fixed but overridable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtConfig {
    pub frozen_fraction: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_min_epochs")]
    pub min_epochs: u32,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: u32,
    #[serde(default = "default_patience")]
    pub patience: u32,
    pub seed: u64,
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_min_epochs() -> u32 {
    DEFAULT_MIN_EPOCHS
}
fn default_max_epochs() -> u32 {
    DEFAULT_MAX_EPOCHS
}
fn default_patience() -> u32 {
    DEFAULT_PATIENCE
}

impl FtConfig {
    pub fn new(frozen_fraction: f64, learning_rate: f64, weight_decay: f64, momentum: f64) -> Self {
        FtConfig {
            frozen_fraction,
            learning_rate,
            weight_decay,
            momentum,
            batch_size: DEFAULT_BATCH_SIZE,
            min_epochs: DEFAULT_MIN_EPOCHS,
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            seed: 0,
        }
    }

    /// Whether every searched field sits in its standard grid domain.
    pub fn in_grid_domains(&self) -> bool {
        [0.25, 0.5, 0.75].contains(&self.frozen_fraction)
            && [0.01, 0.001].contains(&self.learning_rate)
            && [0.001, 0.0001].contains(&self.weight_decay)
            && [0.75, 0.9].contains(&self.momentum)
    }
}

/// Feature-extraction configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeConfig {
    pub extract_fraction: f64,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_c")]
    pub svm_c: f64,
    #[serde(default = "default_tol")]
    pub svm_tol: f64,
    #[serde(default = "default_max_iter")]
    pub svm_max_iter: usize,
    pub seed: u64,
}

fn default_c() -> f64 {
    svm::DEFAULT_C
}
fn default_tol() -> f64 {
    svm::DEFAULT_TOL
}
fn default_max_iter() -> usize {
    svm::DEFAULT_MAX_ITER
}

impl FeConfig {
    pub fn new(extract_fraction: f64) -> Self {
        FeConfig {
            extract_fraction,
            thresholds: Thresholds::default(),
            svm_c: svm::DEFAULT_C,
            svm_tol: svm::DEFAULT_TOL,
            svm_max_iter: svm::DEFAULT_MAX_ITER,
            seed: 0,
        }
    }

    pub fn in_grid_domains(&self) -> bool {
        [0.25, 0.5, 0.75, 1.0].contains(&self.extract_fraction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Approach {
    FE,
    FT,
}

impl std::fmt::Display for Approach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Approach::FE => write!(f, "FE"),
            Approach::FT => write!(f, "FT"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Timeout,
    Failed,
}

/// One ledger row. Field names are the stable on-disk JSON schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub id: String,
    pub approach: Approach,
    pub source_tag: SourceTag,
    pub task: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub v_acc: f64,
    pub t_acc: f64,
    pub overfit_gap: f64,
    pub wall_time_hours: f64,
    pub energy_kwh: f64,
    pub e_co2_kg: f64,
    pub p_avg_watts: f64,
    pub intensity_g_per_kwh: f64,
    pub epochs_run: u32,
    pub status: RunStatus,
    pub started_at: String,
    pub finished_at: String,
    /// Instances per class, set by the few-shot and re-selection protocols.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ic: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub subset_idx: Option<usize>,
    /// Position in the enumerated grid, the model-selection tie-breaker.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grid_idx: Option<usize>,
    /// Content hash identifying (source, task, approach, config, protocol
    /// slot); the resume key.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

impl ExperimentRecord {
    pub fn check_invariants(&self) -> Result<()> {
        for (name, v) in [("v_acc", self.v_acc), ("t_acc", self.t_acc)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Metric(format!("{name} out of range: {v}")));
            }
        }
        if (self.overfit_gap - (self.v_acc - self.t_acc)).abs() > 1e-9 {
            return Err(Error::Metric("overfit_gap is not v_acc - t_acc".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// early stopping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopState {
    pub best_val_loss: f64,
    pub epochs_since_improvement: u32,
    pub epoch: u32,
}

impl EarlyStopState {
    pub fn new() -> Self {
        EarlyStopState {
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            epoch: 0,
        }
    }
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Consumes one epoch's validation loss. A loss is improving only if it is
/// strictly below the best so far. The counter may accumulate before
/// `min_epochs`; stopping is deferred until the epoch floor, and `max_epochs`
/// always stops.
pub fn early_stop_decision(
    state: EarlyStopState,
    new_val_loss: f64,
    min_epochs: u32,
    max_epochs: u32,
    patience: u32,
) -> (StopDecision, EarlyStopState) {
    let mut next = state;
    next.epoch += 1;
    if new_val_loss < next.best_val_loss {
        next.best_val_loss = new_val_loss;
        next.epochs_since_improvement = 0;
    } else {
        next.epochs_since_improvement += 1;
    }
    let stop = (next.epoch >= min_epochs && next.epochs_since_improvement >= patience)
        || next.epoch >= max_epochs;
    (
        if stop {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        },
        next,
    )
}

// ---------------------------------------------------------------------------
// crop aggregation
// ---------------------------------------------------------------------------

/// Majority vote over the ten per-crop predictions. Ties break by the
/// highest summed per-class score across crops, then by lowest class index.
pub fn aggregate_crops(per_crop: &[(usize, Vec<f64>)]) -> Result<usize> {
    if per_crop.len() != 10 {
        return Err(Error::Shape(format!(
            "crop aggregation needs exactly 10 votes, got {}",
            per_crop.len()
        )));
    }
    let n_classes = per_crop[0].1.len();
    let mut votes = vec![0usize; n_classes];
    let mut score_sum = vec![0.0f64; n_classes];
    for (label, scores) in per_crop {
        if *label >= n_classes || scores.len() != n_classes {
            return Err(Error::Shape("inconsistent vote widths".into()));
        }
        votes[*label] += 1;
        for (c, &s) in scores.iter().enumerate() {
            score_sum[c] += s;
        }
    }
    let mut best = 0usize;
    for c in 1..n_classes {
        if votes[c] > votes[best]
            || (votes[c] == votes[best] && score_sum[c] > score_sum[best])
        {
            best = c;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// fine-tuning
// ---------------------------------------------------------------------------

/// Expanded training rows: every crop of every sample, with labels.
fn crop_rows(samples: &[Sample], crop_side: usize) -> Result<(Vec<Tensor3>, Vec<usize>, Vec<String>)> {
    let mut images = Vec::with_capacity(samples.len() * 10);
    let mut labels = Vec::with_capacity(samples.len() * 10);
    let mut origins = Vec::with_capacity(samples.len() * 10);
    for s in samples {
        for crop in ten_crop(&s.image, crop_side)? {
            images.push(crop);
            labels.push(s.label);
            origins.push(s.id.clone());
        }
    }
    Ok((images, labels, origins))
}

/// Mean cross-entropy over every crop of every sample in a split.
fn split_loss(b: &LayeredBackbone, images: &[Tensor3], labels: &[usize]) -> Result<f64> {
    let batch: Vec<(&Tensor3, usize)> = images.iter().zip(labels.iter().copied()).collect();
    b.loss_on_batch(&batch)
}

/// Majority-vote balanced accuracy of a logits model over a split.
fn vote_accuracy(b: &LayeredBackbone, samples: &[Sample], crop_side: usize) -> Result<f64> {
    let n_classes = b.n_classes();
    let mut y_true = Vec::with_capacity(samples.len());
    let mut y_pred = Vec::with_capacity(samples.len());
    for s in samples {
        let mut per_crop = Vec::with_capacity(10);
        for crop in ten_crop(&s.image, crop_side)? {
            let probs = b.predict_probs(&crop)?;
            let mut label = 0usize;
            for (c, &p) in probs.iter().enumerate() {
                if p > probs[label] {
                    label = c;
                }
            }
            per_crop.push((label, probs));
        }
        y_true.push(s.label);
        y_pred.push(aggregate_crops(&per_crop)?);
    }
    balanced_accuracy(&y_true, &y_pred, n_classes)
}

/// Result of the fine-tuning loop proper, before footprint accounting.
pub struct FtOutcome {
    /// Weights of the best-validation-loss epoch.
    pub model: LayeredBackbone,
    pub epochs_run: u32,
    pub val_losses: Vec<f64>,
    pub timed_out: bool,
    pub diverged: bool,
}

/// SGD with momentum over the trainable suffix. Freezing and head
/// reinitialization happen inside; the returned model carries the
/// best-validation-epoch weights.
pub fn train_ft(
    b: &LayeredBackbone,
    ds: &TaskDataset,
    cfg: &FtConfig,
    time_limit_hours: f64,
) -> Result<FtOutcome> {
    let clock = Instant::now();
    let over_limit = |clock: &Instant| clock.elapsed().as_secs_f64() / 3600.0 >= time_limit_hours;

    let crop_side = b.input_shape.0.min(b.input_shape.1);
    let mut model = b
        .freeze_prefix(cfg.frozen_fraction)?
        .reinit_last_two(ds.classes.len(), cfg.seed)?;
    let (train_images, train_labels, _) = crop_rows(&ds.train, crop_side)?;
    let (val_images, val_labels, _) = crop_rows(&ds.val, crop_side)?;
    if train_images.is_empty() || val_images.is_empty() {
        return Err(Error::Train("empty train or val split".into()));
    }

    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = model
        .layers
        .iter()
        .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5be5_84f0_13ab_2c01);
    let mut order: Vec<usize> = (0..train_images.len()).collect();

    let mut state = EarlyStopState::new();
    let mut best_model = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut val_losses = Vec::new();
    let mut timed_out = over_limit(&clock);
    let mut diverged = false;

    while !timed_out && !diverged {
        order.shuffle(&mut rng);
        'epoch: for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Tensor3, usize)> = chunk
                .iter()
                .map(|&i| (&train_images[i], train_labels[i]))
                .collect();
            let (loss, grads) = model.loss_and_gradients(&batch)?;
            if !loss.is_finite() {
                diverged = true;
                break 'epoch;
            }
            for (li, layer) in model.layers.iter_mut().enumerate() {
                if layer.frozen {
                    continue;
                }
                let (vw, vb) = &mut velocity[li];
                for (k, w) in layer.weights.iter_mut().enumerate() {
                    let g = grads.dw[li][k] + cfg.weight_decay * *w;
                    vw[k] = cfg.momentum * vw[k] - cfg.learning_rate * g;
                    *w += vw[k];
                }
                for (k, bias) in layer.bias.iter_mut().enumerate() {
                    let g = grads.db[li][k] + cfg.weight_decay * *bias;
                    vb[k] = cfg.momentum * vb[k] - cfg.learning_rate * g;
                    *bias += vb[k];
                }
            }
            if over_limit(&clock) {
                timed_out = true;
                break 'epoch;
            }
        }
        if timed_out || diverged {
            break;
        }
        let val_loss = split_loss(&model, &val_images, &val_labels)?;
        if !val_loss.is_finite() {
            diverged = true;
            break;
        }
        val_losses.push(val_loss);
        if val_loss < best_loss {
            best_loss = val_loss;
            best_model = model.clone();
        }
        let (decision, next) = early_stop_decision(
            state,
            val_loss,
            cfg.min_epochs,
            cfg.max_epochs,
            cfg.patience,
        );
        state = next;
        if decision == StopDecision::Stop {
            break;
        }
        if over_limit(&clock) {
            timed_out = true;
        }
    }

    if val_losses.is_empty() {
        // No epoch finished; evaluate whatever the model currently is.
        best_model = model;
    }
    Ok(FtOutcome {
        model: best_model,
        epochs_run: state.epoch,
        val_losses,
        timed_out,
        diverged,
    })
}

fn timestamp() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

struct RecordShell {
    id: String,
    started_at: String,
}

fn open_record() -> RecordShell {
    RecordShell {
        id: Uuid::new_v4().to_string(),
        started_at: timestamp(),
    }
}

#[allow(clippy::too_many_arguments)]
fn close_record(
    shell: RecordShell,
    approach: Approach,
    b: &LayeredBackbone,
    ds: &TaskDataset,
    config: serde_json::Value,
    seed: u64,
    accuracies: Option<(f64, f64)>,
    epochs_run: u32,
    status: RunStatus,
    sampler: &mut dyn PowerSampler,
    time_limit_hours: f64,
    warning: Option<String>,
) -> Result<ExperimentRecord> {
    let samples = sampler.finish()?;
    let (energy_kwh, p_avg_watts, duration_hours) = integrate_energy(&samples)?;
    let intensity = DEFAULT_INTENSITY_G_PER_KWH;
    let (v_acc, t_acc) = accuracies.unwrap_or((0.0, 0.0));
    let record = ExperimentRecord {
        id: shell.id,
        approach,
        source_tag: b.source_tag.clone(),
        task: ds.name.clone(),
        config,
        seed,
        v_acc,
        t_acc,
        overfit_gap: v_acc - t_acc,
        // A timed-out run is accounted at exactly the configured limit.
        wall_time_hours: if status == RunStatus::Timeout {
            time_limit_hours
        } else {
            duration_hours
        },
        energy_kwh,
        e_co2_kg: co2_of(energy_kwh, intensity)?,
        p_avg_watts,
        intensity_g_per_kwh: intensity,
        epochs_run,
        status,
        started_at: shell.started_at,
        finished_at: timestamp(),
        ic: None,
        subset_idx: None,
        grid_idx: None,
        key: None,
        warning,
    };
    record.check_invariants()?;
    Ok(record)
}

/// Full fine-tuning experiment: train, evaluate by majority vote, account
/// footprint, emit the record.
pub fn run_ft_experiment(
    b: &LayeredBackbone,
    ds: &TaskDataset,
    cfg: &FtConfig,
    sampler: &mut dyn PowerSampler,
    time_limit_hours: f64,
) -> Result<ExperimentRecord> {
    let shell = open_record();
    sampler.start();
    let config = serde_json::to_value(cfg)?;
    let crop_side = b.input_shape.0.min(b.input_shape.1);
    match train_ft(b, ds, cfg, time_limit_hours) {
        Ok(outcome) => {
            let status = if outcome.diverged {
                RunStatus::Failed
            } else if outcome.timed_out {
                RunStatus::Timeout
            } else {
                RunStatus::Completed
            };
            let accuracies = if outcome.diverged {
                None
            } else {
                let v = vote_accuracy(&outcome.model, &ds.val, crop_side)?;
                let t = vote_accuracy(&outcome.model, &ds.test, crop_side)?;
                Some((v, t))
            };
            close_record(
                shell,
                Approach::FT,
                b,
                ds,
                config,
                cfg.seed,
                accuracies,
                outcome.epochs_run,
                status,
                sampler,
                time_limit_hours,
                if outcome.diverged {
                    Some("training loss diverged".into())
                } else {
                    None
                },
            )
        }
        Err(e) => close_record(
            shell,
            Approach::FT,
            b,
            ds,
            config,
            cfg.seed,
            None,
            0,
            RunStatus::Failed,
            sampler,
            time_limit_hours,
            Some(format!("{e}")),
        ),
    }
}

/// Embedding rows of one split grouped per origin sample, for voting.
fn split_votes(
    model: &LinearSvmModel,
    emb: &FnEmbedding,
    n_classes: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    let mut i = 0usize;
    while i < emb.matrix.rows {
        let origin = &emb.origins[i];
        let label = emb.labels[i];
        let mut per_crop = Vec::new();
        let mut j = i;
        while j < emb.matrix.rows && &emb.origins[j] == origin {
            let scores = model.scores(emb.matrix.row(j))?;
            let mut padded = vec![f64::NEG_INFINITY; n_classes];
            let mut best = 0usize;
            for (k, &s) in scores.iter().enumerate() {
                padded[model.classes[k]] = s;
                if s > scores[best] {
                    best = k;
                }
            }
            per_crop.push((model.classes[best], padded));
            j += 1;
        }
        y_true.push(label);
        y_pred.push(aggregate_crops(&per_crop)?);
        i = j;
    }
    Ok((y_true, y_pred))
}

/// Feature-extraction experiment: embedding, SVM fit on train rows,
/// majority-vote evaluation, record emission. Deterministic given inputs
/// and seed.
pub fn run_fe_experiment(
    b: &LayeredBackbone,
    ds: &TaskDataset,
    cfg: &FeConfig,
    sampler: &mut dyn PowerSampler,
    time_limit_hours: f64,
) -> Result<ExperimentRecord> {
    let shell = open_record();
    sampler.start();
    let config = serde_json::to_value(cfg)?;
    let clock = Instant::now();
    let n_classes = ds.classes.len();

    let run = || -> Result<(Option<(f64, f64)>, Option<String>, RunStatus)> {
        let triple = build_fne(b, ds, cfg.extract_fraction, cfg.thresholds)?;
        if clock.elapsed().as_secs_f64() / 3600.0 >= time_limit_hours {
            return Ok((None, Some("embedding exceeded the time limit".into()), RunStatus::Timeout));
        }
        let model = train_linear_svm(
            &triple.train.matrix,
            &triple.train.labels,
            cfg.svm_c,
            cfg.svm_tol,
            cfg.svm_max_iter,
        )?;
        if clock.elapsed().as_secs_f64() / 3600.0 >= time_limit_hours {
            return Ok((None, Some("classifier exceeded the time limit".into()), RunStatus::Timeout));
        }
        let warning = if model.converged {
            None
        } else {
            Some(format!(
                "svm stopped at the {} iteration cap",
                model.iterations
            ))
        };
        let (vt, vp) = split_votes(&model, &triple.val, n_classes)?;
        let (tt, tp) = split_votes(&model, &triple.test, n_classes)?;
        let v = balanced_accuracy(&vt, &vp, n_classes)?;
        let t = balanced_accuracy(&tt, &tp, n_classes)?;
        Ok((Some((v, t)), warning, RunStatus::Completed))
    };

    match run() {
        Ok((accuracies, warning, status)) => close_record(
            shell,
            Approach::FE,
            b,
            ds,
            config,
            cfg.seed,
            accuracies,
            0,
            status,
            sampler,
            time_limit_hours,
            warning,
        ),
        Err(e) => close_record(
            shell,
            Approach::FE,
            b,
            ds,
            config,
            cfg.seed,
            None,
            0,
            RunStatus::Failed,
            sampler,
            time_limit_hours,
            Some(format!("{e}")),
        ),
    }
}

/// Validation accuracy of the frozen, reinitialized, untrained model: the
/// no-training baseline the trained run must clear.
pub fn random_baseline_vacc(b: &LayeredBackbone, ds: &TaskDataset, cfg: &FtConfig) -> Result<f64> {
    let crop_side = b.input_shape.0.min(b.input_shape.1);
    let model = b
        .freeze_prefix(cfg.frozen_fraction)?
        .reinit_last_two(ds.classes.len(), cfg.seed)?;
    vote_accuracy(&model, &ds.val, crop_side)
}
