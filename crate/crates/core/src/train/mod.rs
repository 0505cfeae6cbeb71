//! Optimization and the leave-one-subject-out protocol.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, ParamEntry,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, ParamStore};
use crate::experts::{update_running_stats, Mode, BN_MOMENTUM};
use crate::losses::{focal_loss, joint_loss, LossConfig};
use crate::moe::{BiMoe, ModelConfig, ModelError, PreparedSample};
use crate::pipeline::Window;
use crate::topology::RegionPartition;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            weight_decay: 5e-4,
            batch_size: 128,
            max_epochs: 100,
            patience: 25,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [self.learning_rate, self.eps, self.beta1, self.beta2];
        if positive.iter().any(|v| !(*v > 0.0)) || self.weight_decay < 0.0 {
            return Err(TrainError::Config("rates and Adam constants must be positive".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(TrainError::Config("Adam betas must be below 1".into()));
        }
        if self.batch_size < 2 || self.max_epochs == 0 || self.patience == 0 {
            return Err(TrainError::Config(
                "batch size ≥ 2, epochs and patience ≥ 1 required".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(TrainError::Config("validation fraction must be in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter in a store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Classic Adam with L2 decay folded into the gradient
/// (`g ← g + wd·p`), bias-corrected. Non-trainable entries are skipped.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) {
    if state.m.len() != store.len() {
        state.m = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        state.v = state.m.clone();
        state.step = 0;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let grads = p.grad.data().to_vec();
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grads[i] + cfg.weight_decay * *w;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            *w -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold: usize,
    pub test_subject: u32,
    pub train_subjects: Vec<u32>,
}

/// One fold per subject, in ascending subject order.
pub fn make_loso_folds(subjects: &[u32]) -> Result<Vec<FoldSpec>, TrainError> {
    let mut ids = subjects.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(TrainError::Data(format!(
            "leave-one-subject-out needs at least 2 subjects, got {}",
            ids.len()
        )));
    }
    Ok(ids
        .iter()
        .enumerate()
        .map(|(fold, &test_subject)| FoldSpec {
            fold,
            test_subject,
            train_subjects: ids.iter().copied().filter(|&s| s != test_subject).collect(),
        })
        .collect())
}

/// A prepared window with its subject and binary label.
#[derive(Clone, Debug)]
pub struct Example {
    pub subject: u32,
    pub sample: PreparedSample,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub fold: usize,
    pub epoch: usize,
    pub cls: f64,
    pub el: f64,
    #[serde(rename = "edr_meanKL")]
    pub edr_mean_kl: f64,
    pub total: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// Subjects that appeared in at least one training batch, ascending.
    pub batch_subjects: Vec<u32>,
}

/// Splits off the last `fraction` of each subject's shuffled windows (at
/// least one when the subject has two or more). Returns `(train, val)`
/// indices into `examples`.
pub fn validation_split(examples: &[&Example], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects: Vec<u32> = examples.iter().map(|e| e.subject).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in subjects {
        let mut idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].subject == s).collect();
        idx.shuffle(&mut rng);
        let n_val = if fraction == 0.0 || idx.len() < 2 {
            0
        } else {
            ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1)
        };
        let cut = idx.len() - n_val;
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    (train, val)
}

fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    // Batch statistics need two samples; fold a lone straggler into the
    // previous batch.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Focal loss and accuracy of eval-mode predictions.
pub fn evaluate_examples(
    model: &BiMoe,
    store: &ParamStore,
    examples: &[&Example],
    loss: &LossConfig,
) -> Result<(f64, f64), TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Data("cannot evaluate an empty set".into()));
    }
    let samples: Vec<PreparedSample> = examples.iter().map(|e| e.sample.clone()).collect();
    let bundles = model.infer(store, &samples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let fused: Vec<f64> = bundles.iter().flat_map(|b| b.fused).collect();
    let mut g = Graph::new();
    let logits = g.constant(crate::diff::Tensor::new(vec![labels.len(), 2], fused)?);
    let l = focal_loss(&mut g, logits, &labels, loss.gamma, loss.alpha)?;
    let preds: Vec<usize> = bundles.iter().map(|b| b.predicted_class()).collect();
    Ok((g.item(l), accuracy(&preds, &labels)?))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, TrainError> {
    if predictions.len() != labels.len() {
        return Err(TrainError::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(TrainError::Data("cannot score an empty set".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Trains `store` in place on `examples` and restores the parameters of the
/// epoch with the lowest validation loss. `on_epoch` sees every epoch's
/// metrics as they are produced.
pub fn train_fold(
    model: &BiMoe,
    store: &mut ParamStore,
    examples: &[&Example],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    fold: usize,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<FoldOutcome, TrainError> {
    cfg.validate()?;
    if examples.len() < 2 {
        return Err(TrainError::Data("training needs at least 2 windows".into()));
    }
    let seed = cfg.seed.wrapping_add(fold as u64);
    let (train_idx, val_idx) = validation_split(examples, cfg.validation_fraction, seed);
    let val: Vec<&Example> = val_idx.iter().map(|&i| examples[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut adam = AdamState::default();
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut order = train_idx.clone();
    let mut seen = std::collections::BTreeSet::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for batch in batches(&order, cfg.batch_size) {
            let refs: Vec<&PreparedSample> = batch.iter().map(|&i| &examples[i].sample).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| examples[i].label).collect();
            seen.extend(batch.iter().map(|&i| examples[i].subject));
            let inputs = model.assemble(&refs)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, store, &inputs, Mode::Train)?;
            let vars = joint_loss(
                &mut g,
                out.fused,
                out.expert_logits,
                out.router_weights,
                &labels,
                loss_cfg,
            )?;
            let b = vars.breakdown(&g, loss_cfg);
            g.backward(vars.total)?;
            store.zero_grad();
            g.accumulate_param_grads(store);
            adam_step(store, &mut adam, cfg);
            update_running_stats(store, g.observed_stats(), BN_MOMENTUM);
            let w = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([b.cls, b.el, b.edr_mean_kl, b.total]) {
                *s += w * v;
            }
        }
        let n = order.len() as f64;
        let [cls, el, kl, total] = sums.map(|s| s / n);
        let (val_loss, val_acc) = if val.is_empty() {
            let train: Vec<&Example> = order.iter().map(|&i| examples[i]).collect();
            evaluate_examples(model, store, &train, loss_cfg)?
        } else {
            evaluate_examples(model, store, &val, loss_cfg)?
        };
        let m = EpochMetrics {
            fold,
            epoch,
            cls,
            el,
            edr_mean_kl: kl,
            total,
            val_loss,
            val_acc,
        };
        on_epoch(&m);
        metrics.push(m);
        if best.as_ref().is_none_or(|(v, _, _)| val_loss < *v) {
            best = Some((val_loss, epoch, store.clone()));
        } else if epoch - best.as_ref().expect("set").1 >= cfg.patience {
            break;
        }
    }
    let (best_val_loss, best_epoch, snapshot) = best.expect("at least one epoch");
    *store = snapshot;
    store.zero_grad();
    Ok(FoldOutcome {
        metrics,
        best_epoch,
        best_val_loss,
        train_indices: train_idx,
        val_indices: val_idx,
        batch_subjects: seen.into_iter().collect(),
    })
}

/// Prepares every window once; preparation depends only on the partition
/// and model configuration, not on weights, so all folds share it.
pub fn prepare_examples(model: &BiMoe, windows: &[Window], labels: &[usize]) -> Result<Vec<Example>, TrainError> {
    if windows.len() != labels.len() {
        return Err(TrainError::Data(format!(
            "{} windows for {} labels",
            windows.len(),
            labels.len()
        )));
    }
    windows
        .iter()
        .zip(labels)
        .map(|(w, &label)| {
            Ok(Example {
                subject: w.subject,
                sample: model.prepare(&w.data)?,
                label,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub spec: FoldSpec,
    pub train_acc: f64,
    pub test_acc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub batch_subjects: Vec<u32>,
    /// Mean router utilization over the training windows, in expert order.
    pub utilization: Vec<f64>,
}

/// Everything one fold produces, including the trained weights.
pub struct TrainedFold {
    pub result: FoldResult,
    pub metrics: Vec<EpochMetrics>,
    pub model: BiMoe,
    pub store: ParamStore,
}

/// Builds a freshly initialized model for `spec`, trains it on the other
/// subjects and scores it on the held-out one.
#[allow(clippy::too_many_arguments)]
pub fn run_fold(
    spec: &FoldSpec,
    partition: &RegionPartition,
    time: usize,
    model_cfg: &ModelConfig,
    examples: &[Example],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainedFold, TrainError> {
    let train: Vec<&Example> = examples.iter().filter(|e| e.subject != spec.test_subject).collect();
    let test: Vec<&Example> = examples.iter().filter(|e| e.subject == spec.test_subject).collect();
    if train.is_empty() {
        return Err(TrainError::Data(format!("fold {}: empty training set", spec.fold)));
    }
    if test.is_empty() {
        return Err(TrainError::Data(format!(
            "fold {}: subject {} has no windows",
            spec.fold, spec.test_subject
        )));
    }
    let mut store = ParamStore::new();
    let init_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(spec.fold as u64);
    let model = BiMoe::new(partition, time, model_cfg, &mut store, init_seed)?;
    let outcome = train_fold(&model, &mut store, &train, cfg, loss_cfg, spec.fold, on_epoch)?;
    let train_bundles = model.infer(&store, &train.iter().map(|e| &e.sample).collect::<Vec<_>>())?;
    let preds: Vec<usize> = train_bundles.iter().map(|b| b.predicted_class()).collect();
    let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
    let train_acc = accuracy(&preds, &labels)?;
    let mut utilization = vec![0.0; model.expert_count()];
    for b in &train_bundles {
        for (u, v) in utilization.iter_mut().zip(b.router_weights.utilization()) {
            *u += v / train_bundles.len() as f64;
        }
    }
    let (_, test_acc) = evaluate_examples(&model, &store, &test, loss_cfg)?;
    Ok(TrainedFold {
        result: FoldResult {
            spec: spec.clone(),
            train_acc,
            test_acc,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.metrics.len(),
            batch_subjects: outcome.batch_subjects,
            utilization,
        },
        metrics: outcome.metrics,
        model,
        store,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub folds: Vec<FoldResult>,
    pub mean_train_acc: f64,
    pub mean_test_acc: f64,
}

impl LosoReport {
    pub fn from_folds(mut folds: Vec<FoldResult>) -> Self {
        folds.sort_by_key(|f| f.spec.fold);
        let n = folds.len().max(1) as f64;
        Self {
            mean_train_acc: folds.iter().map(|f| f.train_acc).sum::<f64>() / n,
            mean_test_acc: folds.iter().map(|f| f.test_acc).sum::<f64>() / n,
            folds,
        }
    }

    /// Variance of the utilization vector, averaged over folds.
    pub fn mean_utilization_variance(&self) -> f64 {
        let n = self.folds.len().max(1) as f64;
        self.folds
            .iter()
            .map(|f| utilization_variance(&f.utilization))
            .sum::<f64>()
            / n
    }
}

/// Population variance of a utilization vector.
pub fn utilization_variance(u: &[f64]) -> f64 {
    let n = u.len() as f64;
    let mean = u.iter().sum::<f64>() / n;
    u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Sequential leave-one-subject-out run. `on_fold` receives each trained
/// fold (e.g. to write a checkpoint) before the next one starts.
#[allow(clippy::too_many_arguments)]
pub fn run_loso(
    partition: &RegionPartition,
    time: usize,
    model_cfg: &ModelConfig,
    examples: &[Example],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
    mut on_fold: impl FnMut(&TrainedFold) -> Result<(), TrainError>,
) -> Result<LosoReport, TrainError> {
    let subjects: Vec<u32> = examples.iter().map(|e| e.subject).collect();
    let folds = make_loso_folds(&subjects)?;
    let mut results = Vec::with_capacity(folds.len());
    for spec in &folds {
        let trained = run_fold(spec, partition, time, model_cfg, examples, cfg, loss_cfg, &mut on_epoch)?;
        on_fold(&trained)?;
        results.push(trained.result);
    }
    Ok(LosoReport::from_folds(results))
}
