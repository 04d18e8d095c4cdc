//! Reptile meta-training with one or two meta step sizes, the outlier-filtering
//! initialisation that precedes it, and the pooled transfer-learning baseline.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::{sample_k_per_class_indices, split_test_indices, SubjectDataset};
use crate::error::{Error, Result};
use crate::fsio;
use crate::nn::{
    accuracy, loss_and_grad, train_full_batch, Group, LabeledBatch, ModelSpec, OptimizerKind, OptimizerState,
    ParamVector, PerGroup,
};
use crate::scalar::Real;
use crate::seed;

/// Fraction of every training subject held back to monitor meta-training.
pub const VALIDATION_FRACTION: f64 = 0.2;

pub const CONFIG_FILE: &str = "config.json";
pub const THETA_FILE: &str = "theta.eprm";
pub const HISTORY_FILE: &str = "history.csv";
pub const FILTER_FILE: &str = "filter.json";

// Stream labels for seed derivation.
const STREAM_INIT: u64 = 0x11;
const STREAM_TASKS: u64 = 0x12;
const STREAM_INNER: u64 = 0x13;
const STREAM_BASELINE: u64 = 0x14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MetaStep {
    SingleBeta { beta: f64 },
    /// `feature` applies to the FEATURE span, `classifier` to the CLASSIFIER span.
    DualBeta { feature: f64, classifier: f64 },
}

impl MetaStep {
    pub fn rates<T: Real>(self) -> PerGroup<T> {
        match self {
            MetaStep::SingleBeta { beta } => PerGroup::uniform(T::lit(beta)),
            MetaStep::DualBeta { feature, classifier } => {
                PerGroup { feature: T::lit(feature), classifier: T::lit(classifier) }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MetaOptimizer {
    Plain,
    Adam,
}

/// How the initialisation filter scores a task's deviation from the mean model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DistanceMetric {
    /// `|mean(theta' - theta_i)|`
    #[default]
    SignedMean,
    /// `mean(|theta' - theta_i|)`
    MeanAbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub meta_epochs: usize,
    pub tasks_per_batch: usize,
    /// Data points sampled from a task for each inner loop.
    pub k_points: usize,
    pub inner_epochs: usize,
    pub inner_lr: f64,
    pub inner_optimizer: OptimizerKind,
    pub meta_step: MetaStep,
    pub meta_optimizer: MetaOptimizer,
    pub gamma: f64,
    pub init_epochs: usize,
    #[serde(default)]
    pub distance: DistanceMetric,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            meta_epochs: 100,
            tasks_per_batch: 4,
            k_points: 32,
            inner_epochs: 5,
            inner_lr: 1e-2,
            inner_optimizer: OptimizerKind::Adam,
            meta_step: MetaStep::SingleBeta { beta: 0.5 },
            meta_optimizer: MetaOptimizer::Plain,
            gamma: 0.2,
            init_epochs: 20,
            distance: DistanceMetric::SignedMean,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn inner_loop(&self) -> InnerLoop {
        InnerLoop { k: self.k_points, epochs: self.inner_epochs, lr: self.inner_lr, optimizer: self.inner_optimizer }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadConfig(m.to_string()));
        if self.tasks_per_batch == 0 {
            return bad("tasks_per_batch must be at least 1");
        }
        if self.k_points == 0 {
            return bad("k_points must be at least 1");
        }
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return bad("inner_lr must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        let betas = match self.meta_step {
            MetaStep::SingleBeta { beta } => vec![beta],
            MetaStep::DualBeta { feature, classifier } => vec![feature, classifier],
        };
        if betas.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return bad("meta step sizes must be non-negative numbers");
        }
        Ok(())
    }
}

/// Settings of one per-task adaptation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLoop {
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

/// Indices of the `k` points used for one inner loop: `k / n_classes` per
/// class when that divides evenly, otherwise a plain draw without replacement.
pub fn sample_task_points(task: &SubjectDataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InsufficientData("k must be at least 1".into()));
    }
    if task.len() < k {
        return Err(Error::InsufficientData(format!(
            "task {} has {} points, need {k}",
            task.subject_id(),
            task.len()
        )));
    }
    let n_classes = task.n_classes();
    if k.is_multiple_of(n_classes) {
        return sample_k_per_class_indices(task, k / n_classes, seed);
    }
    let mut rng = seed::rng(seed, &[0x005a_3b1f]);
    let mut idx = index::sample(&mut rng, task.len(), k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Adapts `theta` to one task: `epochs` full-batch steps on `k` sampled points.
pub fn inner_train<T: Real>(
    spec: &ModelSpec,
    theta: &ParamVector<T>,
    task: &SubjectDataset,
    inner: &InnerLoop,
    seed: u64,
) -> Result<ParamVector<T>> {
    let idx = sample_task_points(task, inner.k, seed)?;
    if inner.epochs == 0 || inner.lr == 0.0 {
        return Ok(theta.clone());
    }
    let data = LabeledBatch::from_dataset(task, &idx);
    train_full_batch(spec, theta, &data, inner.epochs, inner.optimizer, PerGroup::uniform(T::lit(inner.lr)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome<T> {
    /// Mean of the kept task models.
    pub theta: ParamVector<T>,
    /// Task ids in input order.
    pub task_ids: Vec<String>,
    /// Distance of each task model from the all-task mean, in input order.
    pub distances: Vec<f64>,
    pub kept_ids: Vec<String>,
    pub removed_ids: Vec<String>,
}

/// Number of tasks dropped at removal rate `gamma`.
pub fn removal_count(n_tasks: usize, gamma: f64) -> usize {
    // The epsilon keeps products like 0.3 * 10 from rounding down to 2.
    ((gamma * n_tasks as f64) + 1e-9).floor() as usize
}

/// Trains one model per task from a shared random start, averages them, and
/// drops the `floor(gamma * N)` tasks whose models lie farthest from the average.
#[allow(clippy::too_many_arguments)]
pub fn init_filter<T: Real>(
    tasks: &[SubjectDataset],
    spec: &ModelSpec,
    gamma: f64,
    init_epochs: usize,
    lr: f64,
    optimizer: OptimizerKind,
    distance: DistanceMetric,
    seed: u64,
) -> Result<FilterOutcome<T>> {
    if tasks.is_empty() {
        return Err(Error::EmptyTasks);
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::BadConfig(format!("gamma {gamma} outside [0, 1)")));
    }
    let n = tasks.len();
    let n_remove = removal_count(n, gamma);
    if n_remove >= n {
        return Err(Error::AllRemoved(n));
    }
    let start: ParamVector<T> = spec.init_params(&mut seed::rng(seed, &[STREAM_INIT]));
    let rates = PerGroup::uniform(T::lit(lr));
    let mut models = Vec::with_capacity(n);
    for task in tasks {
        let data = LabeledBatch::all(task);
        models.push(train_full_batch(spec, &start, &data, init_epochs, optimizer, rates)?);
    }
    let all: Vec<usize> = (0..n).collect();
    let mean = average(&models, &all);
    let distances: Vec<f64> = models
        .iter()
        .map(|m| {
            let diffs = mean.values().iter().zip(m.values()).map(|(a, b)| (*a - *b).to_f64_lossy());
            let len = m.len().max(1) as f64;
            match distance {
                DistanceMetric::SignedMean => (diffs.sum::<f64>() / len).abs(),
                DistanceMetric::MeanAbs => diffs.map(f64::abs).sum::<f64>() / len,
            }
        })
        .collect();
    // Largest distance first; ties resolved by subject id so the outcome does
    // not depend on the order of the input list.
    let mut order = all.clone();
    order.sort_by(|&a, &b| {
        distances[b].total_cmp(&distances[a]).then_with(|| tasks[a].subject_id().cmp(tasks[b].subject_id()))
    });
    let mut removed = vec![false; n];
    for &i in &order[..n_remove] {
        removed[i] = true;
    }
    let kept: Vec<usize> = all.iter().copied().filter(|&i| !removed[i]).collect();
    let theta = if n_remove == 0 { mean } else { average(&models, &kept) };
    let ids = |pick: bool| -> Vec<String> {
        (0..n).filter(|&i| removed[i] == pick).map(|i| tasks[i].subject_id().to_string()).collect()
    };
    Ok(FilterOutcome {
        theta,
        task_ids: tasks.iter().map(|t| t.subject_id().to_string()).collect(),
        distances,
        kept_ids: ids(false),
        removed_ids: ids(true),
    })
}

/// Elementwise mean of the selected models.
fn average<T: Real>(models: &[ParamVector<T>], pick: &[usize]) -> ParamVector<T> {
    let mut out = ParamVector::zeros_like(&models[pick[0]]);
    for &i in pick {
        for (o, v) in out.values_mut().iter_mut().zip(models[i].values()) {
            *o += *v;
        }
    }
    let scale = T::lit(pick.len() as f64);
    for o in out.values_mut() {
        *o /= scale;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaState<T> {
    pub theta: ParamVector<T>,
    pub filter: FilterOutcome<T>,
    /// Present when the meta-optimizer is Adam.
    pub meta_optimizer: Option<OptimizerState<T>>,
    /// Mean validation accuracy before the first meta epoch and after each one.
    pub history: Vec<f64>,
}

impl<T: Real> MetaState<T> {
    /// State right after the initialisation filter.
    pub fn from_filter(filter: FilterOutcome<T>, cfg: &MetaConfig) -> Self {
        let meta_optimizer = match cfg.meta_optimizer {
            MetaOptimizer::Plain => None,
            MetaOptimizer::Adam => Some(OptimizerState::adam(T::one(), filter.theta.len())),
        };
        MetaState { theta: filter.theta.clone(), filter, meta_optimizer, history: Vec::new() }
    }

    pub fn kept_ids(&self) -> &[String] {
        &self.filter.kept_ids
    }
}

/// Moves `state.theta` toward the adapted models.
///
/// PLAIN: `theta += (beta / N) * sum(theta_i' - theta)` per group.
/// ADAM: `theta - mean(theta_i')` is fed to Adam as a gradient with rate `beta`.
pub fn reptile_update<T: Real>(state: &mut MetaState<T>, adapted: &[ParamVector<T>], cfg: &MetaConfig) -> Result<()> {
    if adapted.is_empty() {
        return Err(Error::EmptyTasks);
    }
    if adapted.len() != cfg.tasks_per_batch {
        return Err(Error::BadConfig(format!(
            "meta batch has {} adapted models, tasks_per_batch is {}",
            adapted.len(),
            cfg.tasks_per_batch
        )));
    }
    if let MetaStep::DualBeta { .. } = cfg.meta_step {
        for g in Group::ALL {
            if state.theta.span(g).len == 0 {
                return Err(Error::GroupMissing(g));
            }
        }
    }
    for a in adapted {
        state.theta.check_compatible(a)?;
    }
    let rates: PerGroup<T> = cfg.meta_step.rates();
    let n = T::lit(adapted.len() as f64);
    match cfg.meta_optimizer {
        MetaOptimizer::Plain => {
            for g in Group::ALL {
                let scale = rates.get(g) / n;
                let span = state.theta.span(g).range();
                for j in span {
                    let theta_j = state.theta.values()[j];
                    let mut sum = T::zero();
                    for a in adapted {
                        sum += a.values()[j] - theta_j;
                    }
                    state.theta.values_mut()[j] = theta_j + scale * sum;
                }
            }
        }
        MetaOptimizer::Adam => {
            let mut pseudo = ParamVector::zeros_like(&state.theta);
            for a in adapted {
                for (p, v) in pseudo.values_mut().iter_mut().zip(a.values()) {
                    *p += *v;
                }
            }
            for (p, t) in pseudo.values_mut().iter_mut().zip(state.theta.values()) {
                *p = *t - *p / n;
            }
            let theta_len = state.theta.len();
            let opt = state.meta_optimizer.get_or_insert_with(|| OptimizerState::adam(T::one(), theta_len));
            opt.step_grouped(&mut state.theta, &pseudo, rates)?;
        }
    }
    Ok(())
}

/// One meta step: adapt to each sampled task, then apply [`reptile_update`].
/// Inner-loop seeds are keyed by `(cfg.seed, meta_epoch, subject id)`.
pub fn reptile_step<T: Real>(
    state: &mut MetaState<T>,
    spec: &ModelSpec,
    sampled: &[&SubjectDataset],
    cfg: &MetaConfig,
    meta_epoch: usize,
) -> Result<()> {
    let inner = cfg.inner_loop();
    let mut adapted = Vec::with_capacity(sampled.len());
    for task in sampled {
        let s = seed::derive(cfg.seed, &[STREAM_INNER, meta_epoch as u64, seed::hash_str(task.subject_id())]);
        adapted.push(inner_train(spec, &state.theta, task, &inner, s)?);
    }
    reptile_update(state, &adapted, cfg)
}

/// A training subject split into the part used for learning and its validation tail.
#[derive(Debug, Clone)]
pub struct TaskSplit {
    pub train: SubjectDataset,
    pub val: SubjectDataset,
}

pub fn split_tasks(tasks: &[SubjectDataset]) -> Result<Vec<TaskSplit>> {
    tasks
        .iter()
        .map(|t| {
            let (tr, va) = split_test_indices(t, VALIDATION_FRACTION)?;
            Ok(TaskSplit { train: t.subset(&tr)?, val: t.subset(&va)? })
        })
        .collect()
}

/// Tasks drawn for one meta epoch: a seeded shuffle of the kept tasks, first `n`.
pub fn sample_meta_batch(n_kept: usize, n: usize, seed: u64, meta_epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_kept).collect();
    order.shuffle(&mut seed::rng(seed, &[STREAM_TASKS, meta_epoch as u64]));
    order.truncate(n);
    order
}

/// Checkpoint hook: called with `(meta_epoch, theta, mean_val_accuracy)` after
/// each meta epoch (epoch 0 is the initialisation). Returning an error stops training.
pub type EpochHook<'a, T> = dyn FnMut(usize, &ParamVector<T>, f64) -> Result<()> + 'a;

pub fn meta_train<T: Real>(tasks: &[SubjectDataset], spec: &ModelSpec, cfg: &MetaConfig) -> Result<MetaState<T>> {
    meta_train_with(tasks, spec, cfg, &mut |_, _, _| Ok(()))
}

/// Reptile meta-training preceded by the initialisation filter. Each task is split into a
/// training part and a validation tail; only training parts feed the updates.
pub fn meta_train_with<T: Real>(
    tasks: &[SubjectDataset],
    spec: &ModelSpec,
    cfg: &MetaConfig,
    hook: &mut EpochHook<'_, T>,
) -> Result<MetaState<T>> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::EmptyTasks);
    }
    let splits = split_tasks(tasks)?;
    let train: Vec<SubjectDataset> = splits.iter().map(|s| s.train.clone()).collect();
    let filter = init_filter(
        &train,
        spec,
        cfg.gamma,
        cfg.init_epochs,
        cfg.inner_lr,
        cfg.inner_optimizer,
        cfg.distance,
        cfg.seed,
    )?;
    let kept: Vec<usize> =
        (0..tasks.len()).filter(|&i| filter.kept_ids.iter().any(|k| k == tasks[i].subject_id())).collect();
    if cfg.tasks_per_batch > kept.len() {
        return Err(Error::BadConfig(format!(
            "tasks_per_batch {} exceeds the {} tasks left after filtering",
            cfg.tasks_per_batch,
            kept.len()
        )));
    }
    let val: Vec<LabeledBatch<T>> = kept.iter().map(|&i| LabeledBatch::all(&splits[i].val)).collect();
    let val_accuracy = |theta: &ParamVector<T>| -> Result<f64> {
        let mut sum = 0.0;
        for v in &val {
            sum += accuracy(spec, theta, v)?;
        }
        Ok(sum / val.len() as f64)
    };

    let mut state = MetaState::from_filter(filter, cfg);
    let acc = val_accuracy(&state.theta)?;
    state.history.push(acc);
    hook(0, &state.theta, acc)?;
    for epoch in 1..=cfg.meta_epochs {
        let pick = sample_meta_batch(kept.len(), cfg.tasks_per_batch, cfg.seed, epoch);
        let sampled: Vec<&SubjectDataset> = pick.iter().map(|&j| &splits[kept[j]].train).collect();
        reptile_step(&mut state, spec, &sampled, cfg, epoch)?;
        let acc = val_accuracy(&state.theta)?;
        state.history.push(acc);
        hook(epoch, &state.theta, acc)?;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub task_ids: Vec<String>,
    pub distances: Vec<f64>,
    pub kept_ids: Vec<String>,
    pub removed_ids: Vec<String>,
    pub gamma: f64,
    pub distance: DistanceMetric,
}

impl FilterRecord {
    pub fn new<T>(f: &FilterOutcome<T>, cfg: &MetaConfig) -> Self {
        FilterRecord {
            task_ids: f.task_ids.clone(),
            distances: f.distances.clone(),
            kept_ids: f.kept_ids.clone(),
            removed_ids: f.removed_ids.clone(),
            gamma: cfg.gamma,
            distance: cfg.distance,
        }
    }
}

pub fn history_csv(history: &[f64]) -> String {
    let mut out = String::from("meta_epoch,mean_val_accuracy\n");
    for (i, a) in history.iter().enumerate() {
        let _ = writeln!(out, "{i},{a}");
    }
    out
}

/// Writes config.json, theta.eprm, history.csv and filter.json into `dir`.
pub fn write_meta_artifacts<T: Real>(dir: &Path, state: &MetaState<T>, cfg: &MetaConfig) -> Result<()> {
    fsio::write_json(&dir.join(CONFIG_FILE), cfg)?;
    state.theta.cast::<f64>().save(&dir.join(THETA_FILE))?;
    fsio::write_atomic(&dir.join(HISTORY_FILE), history_csv(&state.history).as_bytes())?;
    fsio::write_json(&dir.join(FILTER_FILE), &FilterRecord::new(&state.filter, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Minibatch size; `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { epochs: 30, lr: 1e-3, batch_size: Some(32), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutcome<T> {
    pub theta: ParamVector<T>,
    /// Mean minibatch loss of each training epoch.
    pub losses: Vec<f64>,
}

/// Pools every task's epochs and trains one model with Adam. Minibatches are a
/// fresh seeded permutation of the pool each epoch.
pub fn baseline_train<T: Real>(
    tasks: &[SubjectDataset],
    spec: &ModelSpec,
    cfg: &BaselineConfig,
) -> Result<BaselineOutcome<T>> {
    if tasks.is_empty() {
        return Err(Error::EmptyTasks);
    }
    if cfg.batch_size == Some(0) {
        return Err(Error::BadConfig("batch_size must be at least 1".into()));
    }
    let parts: Vec<LabeledBatch<T>> = tasks.iter().map(LabeledBatch::all).collect();
    let pool = LabeledBatch::concat(&parts)?;
    let mut theta: ParamVector<T> = spec.init_params(&mut seed::rng(cfg.seed, &[STREAM_INIT]));
    let mut opt = OptimizerState::adam(T::lit(cfg.lr), theta.len());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        match cfg.batch_size {
            None => {
                let (loss, grad) = loss_and_grad(spec, &theta, &pool.batch, &pool.labels)?;
                opt.step(&mut theta, &grad)?;
                loss_sum += loss.to_f64_lossy();
                n_batches += 1;
            }
            Some(bs) => {
                let mut order: Vec<usize> = (0..pool.len()).collect();
                order.shuffle(&mut seed::rng(cfg.seed, &[STREAM_BASELINE, epoch as u64]));
                for chunk in order.chunks(bs) {
                    let mb = pool.select(chunk);
                    let (loss, grad) = loss_and_grad(spec, &theta, &mb.batch, &mb.labels)?;
                    opt.step(&mut theta, &grad)?;
                    loss_sum += loss.to_f64_lossy();
                    n_batches += 1;
                }
            }
        }
        losses.push(loss_sum / n_batches as f64);
    }
    Ok(BaselineOutcome { theta, losses })
}

/// Random initialisation used by [`baseline_train`] for the given seed.
pub fn baseline_init<T: Real>(spec: &ModelSpec, seed: u64) -> ParamVector<T> {
    spec.init_params(&mut seed::rng(seed, &[STREAM_INIT]))
}
