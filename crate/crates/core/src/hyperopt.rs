//! Random-search hyperparameter tuning with median pruning and a JSON study store.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{split_test, SubjectDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, finetune, finetune_seed, FineTuneConfig, TEST_FRACTION};
use crate::fsio;
use crate::meta::{meta_train_with, split_tasks, MetaConfig, MetaState, MetaStep};
use crate::nn::{accuracy, LabeledBatch, ModelSpec, ParamVector};
use crate::scalar::Real;
use crate::seed;

pub const STUDY_FILE: &str = "study.json";

/// Meta epochs between two pruning checkpoints.
pub const CHECKPOINT_EVERY: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum Dimension {
    LogUniform { lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Inclusive on both ends.
    IntUniform { lo: i64, hi: i64 },
    Choice { values: Vec<Value> },
}

impl Dimension {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            Dimension::LogUniform { lo, hi } => *lo > 0.0 && lo < hi && hi.is_finite(),
            Dimension::Uniform { lo, hi } => lo < hi && lo.is_finite() && hi.is_finite(),
            Dimension::IntUniform { lo, hi } => lo < hi,
            Dimension::Choice { values } => !values.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::BadConfig(format!("search dimension `{name}` is invalid: {self:?}")))
        }
    }

    fn sample(&self, rng: &mut seed::Rng) -> Value {
        match self {
            Dimension::LogUniform { lo, hi } => Value::from(rng.random_range(lo.ln()..hi.ln()).exp()),
            Dimension::Uniform { lo, hi } => Value::from(rng.random_range(*lo..*hi)),
            Dimension::IntUniform { lo, hi } => Value::from(rng.random_range(*lo..=*hi)),
            Dimension::Choice { values } => values[rng.random_range(0..values.len())].clone(),
        }
    }
}

/// Named dimensions; `BTreeMap` keeps iteration order stable.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace(pub BTreeMap<String, Dimension>);

impl SearchSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, dim: Dimension) -> Self {
        self.0.insert(name.to_string(), dim);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::EmptySpace);
        }
        self.0.iter().try_for_each(|(n, d)| d.validate(n))
    }
}

/// One sampled point of a search space.
pub type Config = BTreeMap<String, Value>;

pub fn config_f64(cfg: &Config, name: &str) -> Option<f64> {
    cfg.get(name).and_then(Value::as_f64)
}

pub fn config_usize(cfg: &Config, name: &str) -> Option<usize> {
    cfg.get(name).and_then(|v| v.as_u64().or_else(|| v.as_f64().filter(|f| f.fract() == 0.0 && *f >= 0.0).map(|f| f as u64)))
        .map(|v| v as usize)
}

/// Draws every dimension from its own stream keyed by `(seed, trial_id, name)`.
pub fn sample_config(space: &SearchSpace, seed: u64, trial_id: usize) -> Result<Config> {
    space.validate()?;
    Ok(space
        .0
        .iter()
        .map(|(name, dim)| {
            let mut rng = seed::rng(seed, &[trial_id as u64, seed::hash_str(name)]);
            (name.clone(), dim.sample(&mut rng))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrialStatus {
    Complete,
    Pruned,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: usize,
    pub config: Config,
    /// Objective reported at each checkpoint, in order.
    pub history: Vec<f64>,
    pub final_objective: Option<f64>,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    Maximize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Study {
    pub space: SearchSpace,
    pub direction: Direction,
    pub seed: u64,
    pub prune_after: usize,
    pub trials: Vec<Trial>,
}

impl Study {
    pub fn new(space: SearchSpace, seed: u64, prune_after: usize) -> Result<Self> {
        space.validate()?;
        Ok(Study { space, direction: Direction::Maximize, seed, prune_after, trials: Vec::new() })
    }

    /// The COMPLETE trial with the largest objective; ties go to the lowest id.
    pub fn best_trial(&self) -> Option<&Trial> {
        let mut best: Option<&Trial> = None;
        for t in &self.trials {
            if t.status != TrialStatus::Complete {
                continue;
            }
            let v = t.final_objective.expect("complete trials carry an objective");
            if best.is_none_or(|b| v > b.final_objective.unwrap()) {
                best = Some(t);
            }
        }
        best
    }

    pub fn n_complete(&self) -> usize {
        self.trials.iter().filter(|t| t.status == TrialStatus::Complete).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        fsio::read_json(path)
    }
}

/// Median of the values prior trials reported at `checkpoint`, if any did.
fn prior_median(trials: &[Trial], checkpoint: usize) -> Option<f64> {
    let mut vals: Vec<f64> = trials.iter().filter_map(|t| t.history.get(checkpoint).copied()).collect();
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(f64::total_cmp);
    let m = vals.len();
    Some(if m % 2 == 1 { vals[m / 2] } else { 0.5 * (vals[m / 2 - 1] + vals[m / 2]) })
}

/// Handed to the objective so it can report intermediate values.
pub struct Reporter<'a> {
    prior: &'a [Trial],
    pruning: bool,
    history: Vec<f64>,
}

impl Reporter<'_> {
    /// Records the value of the next checkpoint. Fails with `Pruned` when the
    /// value is strictly below the median of earlier trials at that checkpoint.
    pub fn report(&mut self, value: f64) -> Result<()> {
        let checkpoint = self.history.len();
        self.history.push(value);
        if self.pruning {
            if let Some(median) = prior_median(self.prior, checkpoint) {
                if value < median {
                    return Err(Error::Pruned(checkpoint));
                }
            }
        }
        Ok(())
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }
}

fn run_trial<F>(study: &Study, trial_id: usize, objective: &mut F) -> Trial
where
    F: FnMut(&Config, &mut Reporter<'_>) -> Result<f64>,
{
    let config = match sample_config(&study.space, study.seed, trial_id) {
        Ok(c) => c,
        Err(e) => {
            return Trial {
                trial_id,
                config: Config::new(),
                history: vec![],
                final_objective: None,
                status: TrialStatus::Failed,
                error: Some(e.to_string()),
            }
        }
    };
    let mut reporter =
        Reporter { prior: &study.trials, pruning: study.n_complete() >= study.prune_after, history: Vec::new() };
    let outcome = objective(&config, &mut reporter);
    let history = reporter.history;
    match outcome {
        Ok(v) if v.is_finite() => {
            Trial { trial_id, config, history, final_objective: Some(v), status: TrialStatus::Complete, error: None }
        }
        Ok(v) => Trial {
            trial_id,
            config,
            history,
            final_objective: None,
            status: TrialStatus::Failed,
            error: Some(format!("objective returned {v}")),
        },
        Err(Error::Pruned(_)) => {
            Trial { trial_id, config, history, final_objective: None, status: TrialStatus::Pruned, error: None }
        }
        Err(e) => Trial {
            trial_id,
            config,
            history,
            final_objective: None,
            status: TrialStatus::Failed,
            error: Some(e.to_string()),
        },
    }
}

/// Runs trials until the study holds `n_trials`, saving it to `store` (if
/// given) after each one. Continues from however many trials `study` already has.
pub fn continue_study<F>(study: &mut Study, n_trials: usize, store: Option<&Path>, mut objective: F) -> Result<()>
where
    F: FnMut(&Config, &mut Reporter<'_>) -> Result<f64>,
{
    while study.trials.len() < n_trials {
        let trial = run_trial(study, study.trials.len(), &mut objective);
        study.trials.push(trial);
        if let Some(path) = store {
            study.save(path)?;
        }
    }
    Ok(())
}

pub fn run_study<F>(
    space: &SearchSpace,
    objective: F,
    n_trials: usize,
    prune_after: usize,
    seed: u64,
    store: Option<&Path>,
) -> Result<Study>
where
    F: FnMut(&Config, &mut Reporter<'_>) -> Result<f64>,
{
    if n_trials == 0 {
        return Err(Error::BadConfig("n_trials must be at least 1".into()));
    }
    let mut study = Study::new(space.clone(), seed, prune_after)?;
    continue_study(&mut study, n_trials, store, objective)?;
    Ok(study)
}

/// Loads the study at `store` and runs it up to `n_trials` total trials.
pub fn resume_study<F>(store: &Path, n_trials: usize, objective: F) -> Result<Study>
where
    F: FnMut(&Config, &mut Reporter<'_>) -> Result<f64>,
{
    let mut study = Study::load(store)?;
    continue_study(&mut study, n_trials, Some(store), objective)?;
    Ok(study)
}

/// Default search space for meta-training. `dual` selects the two-rate variant.
pub fn default_meta_space(dual: bool) -> SearchSpace {
    let space = SearchSpace::new()
        .with("meta_epochs", Dimension::IntUniform { lo: 10, hi: 200 })
        .with("inner_epochs", Dimension::IntUniform { lo: 1, hi: 10 })
        .with("inner_lr", Dimension::LogUniform { lo: 1e-4, hi: 1e-1 })
        .with("k_points", Dimension::Choice { values: vec![8.into(), 16.into(), 32.into(), 64.into()] })
        .with("gamma", Dimension::Choice { values: vec![0.0.into(), 0.1.into(), 0.2.into()] });
    if dual {
        space
            .with("beta_feature", Dimension::LogUniform { lo: 1e-3, hi: 1.0 })
            .with("beta_classifier", Dimension::LogUniform { lo: 1e-3, hi: 1.0 })
    } else {
        space.with("beta", Dimension::LogUniform { lo: 1e-3, hi: 1.0 })
    }
}

pub fn default_finetune_space() -> SearchSpace {
    SearchSpace::new()
        .with("lr", Dimension::LogUniform { lo: 1e-5, hi: 1e-2 })
        .with("a", Dimension::Uniform { lo: 0.0, hi: 2.0 })
        .with("b", Dimension::Uniform { lo: 0.0, hi: 30.0 })
}

/// Path of the study store inside a run directory.
pub fn study_path(dir: &Path) -> PathBuf {
    dir.join(STUDY_FILE)
}

/// Meta-training settings with the sampled values substituted. Recognised
/// keys: `meta_epochs`, `tasks_per_batch`, `k_points`, `inner_epochs`,
/// `inner_lr`, `init_epochs`, `gamma`, `beta` (single step size) and
/// `beta_feature` / `beta_classifier` (two step sizes).
pub fn apply_meta_params(base: &MetaConfig, sampled: &Config) -> Result<MetaConfig> {
    let mut cfg = base.clone();
    let (mut beta, mut beta_f, mut beta_c) = (None, None, None);
    for (key, value) in sampled {
        let bad = || Error::BadConfig(format!("sampled `{key}` has unusable value {value}"));
        let as_usize = || config_usize(sampled, key).ok_or_else(bad);
        let as_f64 = || value.as_f64().ok_or_else(bad);
        match key.as_str() {
            "meta_epochs" => cfg.meta_epochs = as_usize()?,
            "tasks_per_batch" => cfg.tasks_per_batch = as_usize()?,
            "k_points" => cfg.k_points = as_usize()?,
            "inner_epochs" => cfg.inner_epochs = as_usize()?,
            "init_epochs" => cfg.init_epochs = as_usize()?,
            "inner_lr" => cfg.inner_lr = as_f64()?,
            "gamma" => cfg.gamma = as_f64()?,
            "beta" => beta = Some(as_f64()?),
            "beta_feature" => beta_f = Some(as_f64()?),
            "beta_classifier" => beta_c = Some(as_f64()?),
            _ => return Err(Error::BadConfig(format!("unknown meta hyperparameter `{key}`"))),
        }
    }
    if let Some(beta) = beta {
        if beta_f.is_some() || beta_c.is_some() {
            return Err(Error::BadConfig("search space mixes `beta` with per-group step sizes".into()));
        }
        cfg.meta_step = MetaStep::SingleBeta { beta };
    } else if beta_f.is_some() || beta_c.is_some() {
        let (f0, c0) = match base.meta_step {
            MetaStep::SingleBeta { beta } => (beta, beta),
            MetaStep::DualBeta { feature, classifier } => (feature, classifier),
        };
        cfg.meta_step = MetaStep::DualBeta { feature: beta_f.unwrap_or(f0), classifier: beta_c.unwrap_or(c0) };
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Fine-tuning settings with sampled `lr`, `a` and `b` substituted.
pub fn apply_finetune_params(base: &FineTuneConfig, sampled: &Config) -> Result<FineTuneConfig> {
    let mut cfg = base.clone();
    for (key, value) in sampled {
        let v = value.as_f64().ok_or_else(|| Error::BadConfig(format!("sampled `{key}` is not a number")))?;
        match key.as_str() {
            "lr" => cfg.lr = v,
            "a" => cfg.a = v,
            "b" => cfg.b = v,
            _ => return Err(Error::BadConfig(format!("unknown fine-tuning hyperparameter `{key}`"))),
        }
    }
    Ok(cfg)
}

/// Mean validation accuracy of `theta` over the validation tails of all tasks.
fn validation_accuracy<T: Real>(spec: &ModelSpec, theta: &ParamVector<T>, val: &[LabeledBatch<T>]) -> Result<f64> {
    let mut sum = 0.0;
    for v in val {
        sum += accuracy(spec, theta, v)?;
    }
    Ok(sum / val.len() as f64)
}

/// Meta-trains on `tasks` and scores the result on every task's validation
/// tail, including tasks the initialisation filter dropped. Intermediate
/// scores go to `reporter` every [`CHECKPOINT_EVERY`] meta epochs.
pub fn meta_objective<T: Real>(
    cfg: &MetaConfig,
    tasks: &[SubjectDataset],
    spec: &ModelSpec,
    holdout_subject: &str,
    reporter: Option<&mut Reporter<'_>>,
) -> Result<f64> {
    if tasks.iter().any(|t| t.subject_id() == holdout_subject) {
        return Err(Error::BadConfig(format!("held-out subject {holdout_subject} is among the tuning tasks")));
    }
    let val: Vec<LabeledBatch<T>> =
        split_tasks(tasks)?.iter().map(|s| LabeledBatch::all(&s.val)).collect();
    let mut reporter = reporter;
    let state: MetaState<T> = meta_train_with(tasks, spec, cfg, &mut |epoch, theta, _| {
        if epoch > 0 && epoch % CHECKPOINT_EVERY == 0 && epoch < cfg.meta_epochs {
            if let Some(r) = reporter.as_deref_mut() {
                r.report(validation_accuracy(spec, theta, &val)?)?;
            }
        }
        Ok(())
    })?;
    validation_accuracy(spec, &state.theta, &val)
}

/// Mean accuracy on the proxy's test tail after fine-tuning `theta` at every
/// subset size of `grid` (one draw per size, keyed by `seed`).
pub fn finetune_objective<T: Real>(
    cfg: &FineTuneConfig,
    theta: &ParamVector<T>,
    spec: &ModelSpec,
    proxy: &SubjectDataset,
    grid: &[usize],
    seed: u64,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::BadConfig("fine-tuning grid is empty".into()));
    }
    let (train, test) = split_test(proxy, TEST_FRACTION)?;
    let mut sum = 0.0;
    for &s in grid {
        let theta_ft = finetune(spec, theta, &train, s, cfg, finetune_seed(seed, proxy.subject_id(), s, 0))?;
        sum += evaluate(spec, &theta_ft, &test)?;
    }
    Ok(sum / grid.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_choice_and_determinism() {
        let space = SearchSpace::new()
            .with("x", Dimension::Choice { values: vec![Value::from("only")] })
            .with("y", Dimension::Uniform { lo: 0.0, hi: 1.0 });
        for t in 0..20 {
            let c = sample_config(&space, 3, t).unwrap();
            assert_eq!(c["x"], Value::from("only"));
            assert_eq!(c, sample_config(&space, 3, t).unwrap());
        }
        assert!(matches!(sample_config(&SearchSpace::new(), 0, 0), Err(Error::EmptySpace)));
    }

    #[test]
    fn invalid_dimensions_rejected() {
        let space = SearchSpace::new().with("x", Dimension::Uniform { lo: 1.0, hi: 1.0 });
        assert!(space.validate().is_err());
        let space = SearchSpace::new().with("x", Dimension::Choice { values: vec![] });
        assert!(space.validate().is_err());
    }

    #[test]
    fn int_uniform_covers_both_ends() {
        let space = SearchSpace::new().with("n", Dimension::IntUniform { lo: 1, hi: 3 });
        let seen: std::collections::BTreeSet<usize> =
            (0..200).map(|t| config_usize(&sample_config(&space, 1, t).unwrap(), "n").unwrap()).collect();
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn single_trial_is_best() {
        let space = SearchSpace::new().with("x", Dimension::Uniform { lo: 0.0, hi: 1.0 });
        let study = run_study(&space, |c, _| Ok(config_f64(c, "x").unwrap()), 1, 0, 7, None).unwrap();
        assert_eq!(study.trials.len(), 1);
        assert_eq!(study.best_trial().unwrap().trial_id, 0);
    }

    #[test]
    fn constant_objective_never_prunes() {
        let space = SearchSpace::new().with("x", Dimension::Uniform { lo: 0.0, hi: 1.0 });
        let study = run_study(
            &space,
            |_, r| {
                for _ in 0..3 {
                    r.report(0.5)?;
                }
                Ok(0.5)
            },
            10,
            1,
            0,
            None,
        )
        .unwrap();
        assert!(study.trials.iter().all(|t| t.status == TrialStatus::Complete));
        assert_eq!(study.best_trial().unwrap().trial_id, 0);
    }

    #[test]
    fn failures_are_recorded_and_study_continues() {
        let space = SearchSpace::new().with("x", Dimension::Uniform { lo: 0.0, hi: 1.0 });
        let mut n = 0;
        let study = run_study(
            &space,
            |c, _| {
                n += 1;
                if n == 2 {
                    Err(Error::ObjectiveFailed("boom".into()))
                } else {
                    Ok(config_f64(c, "x").unwrap())
                }
            },
            3,
            0,
            0,
            None,
        )
        .unwrap();
        assert_eq!(study.trials[1].status, TrialStatus::Failed);
        assert!(study.trials[1].final_objective.is_none());
        assert_eq!(study.n_complete(), 2);
    }
}
