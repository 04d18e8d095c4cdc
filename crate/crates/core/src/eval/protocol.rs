//! Leave-one-subject-out experiment: for every test subject, tune and train
//! both methods on the remaining subjects, tune fine-tuning on a proxy
//! subject, then evaluate zero-shot and few-shot accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{split_test, SubjectDataset};
use crate::error::{Error, Result};
use crate::eval::report::{Cell, EvalReport};
use crate::eval::{evaluate, finetune, finetune_seed, FineTuneConfig, TEST_FRACTION};
use crate::hyperopt::{
    apply_finetune_params, apply_meta_params, finetune_objective, meta_objective, run_study, SearchSpace, Study,
};
use crate::meta::{baseline_train, meta_train, BaselineConfig, MetaConfig, MetaState};
use crate::nn::{ModelSpec, ParamVector};
use crate::seed;

pub const METHOD_META: &str = "meta";
pub const METHOD_BASELINE: &str = "baseline";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Fine-tuning subset sizes, in points per class. Zero-shot is always evaluated.
    pub grid: Vec<usize>,
    pub repetitions: usize,
    /// Test subjects to run; all subjects when absent.
    #[serde(default)]
    pub test_subjects: Option<Vec<String>>,
    pub meta: MetaConfig,
    /// Tuned with `meta_trials` random-search trials when present.
    #[serde(default)]
    pub meta_space: Option<SearchSpace>,
    #[serde(default)]
    pub meta_trials: usize,
    pub finetune: FineTuneConfig,
    #[serde(default)]
    pub finetune_space: Option<SearchSpace>,
    #[serde(default)]
    pub finetune_trials: usize,
    pub baseline: BaselineConfig,
    /// Completed trials required before median pruning starts.
    pub prune_after: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            grid: vec![1, 2, 4, 8, 16],
            repetitions: 5,
            test_subjects: None,
            meta: MetaConfig::default(),
            meta_space: None,
            meta_trials: 0,
            finetune: FineTuneConfig::default(),
            finetune_space: None,
            finetune_trials: 0,
            baseline: BaselineConfig::default(),
            prune_after: 3,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::BadConfig("repetitions must be at least 1".into()));
        }
        if self.grid.contains(&0) {
            return Err(Error::BadConfig("grid sizes must be positive; zero-shot is implicit".into()));
        }
        if self.meta_trials > 0 && self.meta_space.is_none() {
            return Err(Error::BadConfig("meta_trials > 0 needs a meta_space".into()));
        }
        if self.finetune_trials > 0 && self.finetune_space.is_none() {
            return Err(Error::BadConfig("finetune_trials > 0 needs a finetune_space".into()));
        }
        self.meta.validate()
    }

    /// Seed shared by everything that happens inside one fold.
    pub fn fold_seed(&self, subject: &str) -> u64 {
        seed::derive(self.seed, &[seed::hash_str(subject)])
    }
}

/// The data layout of one test subject's experiment.
#[derive(Debug, Clone)]
pub struct Fold {
    pub subject: String,
    /// Training part and test tail of the test subject.
    pub test_train: SubjectDataset,
    pub test_test: SubjectDataset,
    /// Subject used only to tune fine-tuning.
    pub proxy: SubjectDataset,
    /// Subjects that train both methods.
    pub pool: Vec<SubjectDataset>,
}

/// Builds the folds. The proxy is the non-test subject with the most epochs,
/// the earliest such subject on ties.
pub fn make_folds(datasets: &[SubjectDataset], cfg: &ProtocolConfig) -> Result<Vec<Fold>> {
    if datasets.len() < 3 {
        return Err(Error::InsufficientData(format!("protocol needs at least 3 subjects, got {}", datasets.len())));
    }
    let tests: Vec<String> = match &cfg.test_subjects {
        Some(ids) => {
            for id in ids {
                if !datasets.iter().any(|d| d.subject_id() == id) {
                    return Err(Error::BadConfig(format!("unknown test subject `{id}`")));
                }
            }
            ids.clone()
        }
        None => datasets.iter().map(|d| d.subject_id().to_string()).collect(),
    };
    tests
        .into_iter()
        .map(|subject| {
            let test = datasets.iter().find(|d| d.subject_id() == subject).expect("checked above");
            let others: Vec<&SubjectDataset> = datasets.iter().filter(|d| d.subject_id() != subject).collect();
            let mut proxy_i = 0;
            for (i, d) in others.iter().enumerate() {
                if d.len() > others[proxy_i].len() {
                    proxy_i = i;
                }
            }
            let (test_train, test_test) = split_test(test, TEST_FRACTION)?;
            Ok(Fold {
                subject,
                test_train,
                test_test,
                proxy: others[proxy_i].clone(),
                pool: others.iter().enumerate().filter(|(i, _)| *i != proxy_i).map(|(_, d)| (*d).clone()).collect(),
            })
        })
        .collect()
}

/// What was chosen and learned for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject: String,
    pub proxy: String,
    pub pool: Vec<String>,
    pub meta_config: MetaConfig,
    pub removed_ids: Vec<String>,
    pub finetune: BTreeMap<String, FineTuneConfig>,
}

/// Meta configuration for a fold, tuned when a search space is configured.
pub fn tune_meta(fold: &Fold, spec: &ModelSpec, cfg: &ProtocolConfig) -> Result<(MetaConfig, Option<Study>)> {
    let base = MetaConfig { seed: seed::derive(cfg.meta.seed, &[seed::hash_str(&fold.subject)]), ..cfg.meta.clone() };
    let Some(space) = cfg.meta_space.as_ref().filter(|_| cfg.meta_trials > 0) else {
        return Ok((base, None));
    };
    let study = run_study(
        space,
        |sampled, reporter| {
            let mc = apply_meta_params(&base, sampled)?;
            meta_objective::<f64>(&mc, &fold.pool, spec, &fold.subject, Some(reporter))
        },
        cfg.meta_trials,
        cfg.prune_after,
        cfg.fold_seed(&fold.subject),
        None,
    )?;
    chosen_meta(&base, &study).map(|c| (c, Some(study)))
}

/// Best trial's configuration, or `base` when no trial completed.
pub fn chosen_meta(base: &MetaConfig, study: &Study) -> Result<MetaConfig> {
    match study.best_trial() {
        Some(t) => apply_meta_params(base, &t.config),
        None => Ok(base.clone()),
    }
}

pub fn chosen_finetune(base: &FineTuneConfig, study: &Study) -> Result<FineTuneConfig> {
    match study.best_trial() {
        Some(t) => apply_finetune_params(base, &t.config),
        None => Ok(base.clone()),
    }
}

pub fn train_meta_fold(fold: &Fold, spec: &ModelSpec, meta: &MetaConfig) -> Result<MetaState<f64>> {
    meta_train(&fold.pool, spec, meta)
}

/// Baseline trained on the same training parts meta-training learns from.
pub fn train_baseline_fold(fold: &Fold, spec: &ModelSpec, cfg: &ProtocolConfig) -> Result<ParamVector<f64>> {
    let train: Vec<SubjectDataset> =
        crate::meta::split_tasks(&fold.pool)?.into_iter().map(|s| s.train).collect();
    let bc = BaselineConfig { seed: seed::derive(cfg.baseline.seed, &[seed::hash_str(&fold.subject)]), ..cfg.baseline.clone() };
    Ok(baseline_train(&train, spec, &bc)?.theta)
}

/// Fine-tuning configuration for one method, tuned on the fold's proxy.
pub fn tune_finetune(
    fold: &Fold,
    spec: &ModelSpec,
    theta: &ParamVector<f64>,
    method: &str,
    cfg: &ProtocolConfig,
) -> Result<(FineTuneConfig, Option<Study>)> {
    let base = cfg.finetune.clone();
    let Some(space) = cfg.finetune_space.as_ref().filter(|_| cfg.finetune_trials > 0 && !cfg.grid.is_empty()) else {
        return Ok((base, None));
    };
    let fold_seed = cfg.fold_seed(&fold.subject);
    let study = run_study(
        space,
        |sampled, _| {
            let fc = apply_finetune_params(&base, sampled)?;
            finetune_objective(&fc, theta, spec, &fold.proxy, &cfg.grid, fold_seed)
        },
        cfg.finetune_trials,
        cfg.prune_after,
        seed::derive(fold_seed, &[seed::hash_str(method)]),
        None,
    )?;
    chosen_finetune(&base, &study).map(|c| (c, Some(study)))
}

/// Zero-shot cells (one per repetition, all equal) and few-shot cells for one
/// method. Failed cells are reported as strings instead of aborting.
pub fn evaluate_fold(
    fold: &Fold,
    spec: &ModelSpec,
    method: &str,
    theta: &ParamVector<f64>,
    ft: &FineTuneConfig,
    cfg: &ProtocolConfig,
) -> (Vec<Cell>, Vec<String>) {
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    let fold_seed = cfg.fold_seed(&fold.subject);
    let cell = |size: usize, rep: usize, accuracy: f64| Cell {
        method: method.to_string(),
        subject: fold.subject.clone(),
        subset_size: size,
        repetition: rep,
        accuracy,
    };
    match evaluate(spec, theta, &fold.test_test) {
        Ok(acc) => cells.extend((0..cfg.repetitions).map(|rep| cell(0, rep, acc))),
        Err(e) => failures.push(format!("{method}/{}/0: {e}", fold.subject)),
    }
    for &s in &cfg.grid {
        for rep in 0..cfg.repetitions {
            let sample_seed = finetune_seed(fold_seed, &fold.subject, s, rep);
            let outcome = finetune(spec, theta, &fold.test_train, s, ft, sample_seed)
                .and_then(|t| evaluate(spec, &t, &fold.test_test));
            match outcome {
                Ok(acc) => cells.push(cell(s, rep, acc)),
                Err(e) => failures.push(format!("{method}/{}/{s}/{rep}: {e}", fold.subject)),
            }
        }
    }
    (cells, failures)
}

/// Runs every stage of one fold in memory.
pub fn run_fold(fold: &Fold, spec: &ModelSpec, cfg: &ProtocolConfig) -> Result<(Vec<Cell>, Vec<String>, SubjectRecord)> {
    let (meta_cfg, _) = tune_meta(fold, spec, cfg)?;
    let state = train_meta_fold(fold, spec, &meta_cfg)?;
    let baseline = train_baseline_fold(fold, spec, cfg)?;
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    let mut ft_record = BTreeMap::new();
    for (method, theta) in [(METHOD_META, &state.theta), (METHOD_BASELINE, &baseline)] {
        let (ft, _) = tune_finetune(fold, spec, theta, method, cfg)?;
        let (c, f) = evaluate_fold(fold, spec, method, theta, &ft, cfg);
        cells.extend(c);
        failures.extend(f);
        ft_record.insert(method.to_string(), ft);
    }
    let record = SubjectRecord {
        subject: fold.subject.clone(),
        proxy: fold.proxy.subject_id().to_string(),
        pool: fold.pool.iter().map(|d| d.subject_id().to_string()).collect(),
        meta_config: meta_cfg,
        removed_ids: state.filter.removed_ids.clone(),
        finetune: ft_record,
    };
    Ok((cells, failures, record))
}

/// The full experiment over all (or the configured) test subjects. A fold
/// that fails is recorded and the report is marked `INCOMPLETE`.
pub fn run_protocol(datasets: &[SubjectDataset], spec: &ModelSpec, cfg: &ProtocolConfig) -> Result<EvalReport> {
    cfg.validate()?;
    spec.validate()?;
    let folds = make_folds(datasets, cfg)?;
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    let mut records = Vec::new();
    for fold in &folds {
        match run_fold(fold, spec, cfg) {
            Ok((c, f, r)) => {
                cells.extend(c);
                failures.extend(f);
                records.push(r);
            }
            Err(e) => failures.push(format!("fold {}: {e}", fold.subject)),
        }
    }
    Ok(EvalReport::from_cells(
        cells,
        cfg.grid.clone(),
        cfg.repetitions,
        Some((METHOD_META, METHOD_BASELINE)),
        records,
        failures,
    ))
}
