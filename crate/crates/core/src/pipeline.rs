//! File-checkpointed version of the experiment protocol.
//!
//! A run directory holds a copy of the run configuration, one subdirectory per
//! test subject under `folds/`, and the final report:
//!
//! ```text
//! run.json
//! folds/<subject>/study.json          meta-training search (when tuning)
//! folds/<subject>/meta_choice.json    meta configuration used
//! folds/<subject>/config.json, theta.eprm, history.csv, filter.json
//! folds/<subject>/baseline.eprm
//! folds/<subject>/ft_study_<method>.json, finetune.json
//! folds/<subject>/cells.json
//! report.csv, report.json
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset_dir, SubjectDataset};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_fold, make_folds, train_baseline_fold, train_meta_fold, tune_finetune, tune_meta, Cell,
    EvalReport, FineTuneConfig, Fold, ProtocolConfig, SubjectRecord, METHOD_BASELINE, METHOD_META,
};
use crate::fsio;
use crate::hyperopt::{Study, STUDY_FILE};
use crate::meta::{write_meta_artifacts, FilterRecord, MetaConfig, FILTER_FILE, THETA_FILE};
use crate::nn::{ModelSpec, ParamVector};

pub const RUN_CONFIG_FILE: &str = "run.json";
pub const LOCK_FILE: &str = ".lock";
pub const FOLDS_DIR: &str = "folds";
pub const META_CHOICE_FILE: &str = "meta_choice.json";
pub const BASELINE_FILE: &str = "baseline.eprm";
pub const FINETUNE_FILE: &str = "finetune.json";
pub const CELLS_FILE: &str = "cells.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest, or the directory that contains it.
    pub dataset: PathBuf,
    /// Where artifacts go; falls back to the caller's default when absent.
    #[serde(default)]
    pub run_dir: Option<PathBuf>,
    /// Network to train; the default compact convolutional net when absent.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    pub protocol: ProtocolConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = fsio::read_json(path)?;
        // Relative paths are resolved against the config file's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.dataset.is_relative() {
            cfg.dataset = base.join(&cfg.dataset);
        }
        if let Some(dir) = cfg.run_dir.as_mut() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset.exists() {
            return Err(Error::BadConfig(format!("dataset path {} does not exist", self.dataset.display())));
        }
        if let Some(m) = &self.model {
            m.validate()?;
        }
        self.protocol.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TuneMeta,
    Meta,
    Baseline,
    TuneFt,
    Eval,
    All,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tune-meta" => Stage::TuneMeta,
            "meta" => Stage::Meta,
            "baseline" => Stage::Baseline,
            "tune-ft" => Stage::TuneFt,
            "eval" => Stage::Eval,
            "all" => Stage::All,
            _ => return Err(Error::BadConfig(format!("unknown stage `{s}`"))),
        })
    }
}

/// Exclusive hold on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Loaded data plus everything derived from the configuration.
pub struct Run {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub spec: ModelSpec,
    pub datasets: Vec<SubjectDataset>,
    pub folds: Vec<Fold>,
}

impl Run {
    /// Validates the configuration, loads the data and records the
    /// configuration in the run directory. A directory created for a
    /// different configuration is refused.
    pub fn open(cfg: RunConfig, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let (_, datasets) = load_dataset_dir(&cfg.dataset)?;
        let first = datasets.first().ok_or_else(|| Error::InvalidDataset("dataset has no subjects".into()))?;
        let spec = cfg
            .model
            .clone()
            .unwrap_or_else(|| ModelSpec::default_conv(first.channels(), first.times(), first.n_classes()));
        spec.validate()?;
        let folds = make_folds(&datasets, &cfg.protocol)?;
        let record = dir.join(RUN_CONFIG_FILE);
        let stored = RunConfig { run_dir: None, ..cfg.clone() };
        if record.exists() {
            let previous: RunConfig = fsio::read_json(&record)?;
            if previous != stored {
                return Err(Error::BadConfig(format!(
                    "{} was created with a different configuration",
                    dir.display()
                )));
            }
        } else {
            fsio::write_json(&record, &stored)?;
        }
        Ok(Run { dir: dir.to_path_buf(), cfg, spec, datasets, folds })
    }

    pub fn fold_dir(&self, fold: &Fold) -> PathBuf {
        self.dir.join(FOLDS_DIR).join(&fold.subject)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<Option<EvalReport>> {
        match stage {
            Stage::All => {
                for fold in &self.folds {
                    let dir = self.fold_dir(fold);
                    if !valid_json::<MetaConfig>(&dir.join(META_CHOICE_FILE)) {
                        self.tune_meta(fold)?;
                    }
                    if !(valid_theta(&dir.join(THETA_FILE)) && valid_json::<FilterRecord>(&dir.join(FILTER_FILE))) {
                        self.meta(fold)?;
                    }
                    if !valid_theta(&dir.join(BASELINE_FILE)) {
                        self.baseline(fold)?;
                    }
                    if !valid_json::<BTreeMap<String, FineTuneConfig>>(&dir.join(FINETUNE_FILE)) {
                        self.tune_ft(fold)?;
                    }
                    if !valid_json::<FoldCells>(&dir.join(CELLS_FILE)) {
                        self.eval_fold(fold)?;
                    }
                }
                self.write_report().map(Some)
            }
            Stage::Eval => {
                for fold in &self.folds {
                    self.eval_fold(fold)?;
                }
                self.write_report().map(Some)
            }
            single => {
                for fold in &self.folds {
                    match single {
                        Stage::TuneMeta => self.tune_meta(fold)?,
                        Stage::Meta => self.meta(fold)?,
                        Stage::Baseline => self.baseline(fold)?,
                        Stage::TuneFt => self.tune_ft(fold)?,
                        _ => unreachable!(),
                    }
                }
                Ok(None)
            }
        }
    }

    fn tune_meta(&self, fold: &Fold) -> Result<()> {
        let dir = self.fold_dir(fold);
        let (chosen, study) = tune_meta(fold, &self.spec, &self.cfg.protocol)?;
        if let Some(study) = study {
            study.save(&dir.join(STUDY_FILE))?;
        }
        fsio::write_json(&dir.join(META_CHOICE_FILE), &chosen)
    }

    fn meta(&self, fold: &Fold) -> Result<()> {
        let dir = self.fold_dir(fold);
        let chosen: MetaConfig = require_json(&dir.join(META_CHOICE_FILE), "tune-meta")?;
        let state = train_meta_fold(fold, &self.spec, &chosen)?;
        write_meta_artifacts(&dir, &state, &chosen)
    }

    fn baseline(&self, fold: &Fold) -> Result<()> {
        let theta = train_baseline_fold(fold, &self.spec, &self.cfg.protocol)?;
        theta.save(&self.fold_dir(fold).join(BASELINE_FILE))
    }

    fn thetas(&self, fold: &Fold) -> Result<[(&'static str, ParamVector<f64>); 2]> {
        let dir = self.fold_dir(fold);
        Ok([
            (METHOD_META, require_theta(&dir.join(THETA_FILE), "meta")?),
            (METHOD_BASELINE, require_theta(&dir.join(BASELINE_FILE), "baseline")?),
        ])
    }

    fn tune_ft(&self, fold: &Fold) -> Result<()> {
        let dir = self.fold_dir(fold);
        let mut chosen = BTreeMap::new();
        for (method, theta) in self.thetas(fold)? {
            let (ft, study) = tune_finetune(fold, &self.spec, &theta, method, &self.cfg.protocol)?;
            if let Some(study) = study {
                study.save(&dir.join(format!("ft_study_{method}.json")))?;
            }
            chosen.insert(method.to_string(), ft);
        }
        fsio::write_json(&dir.join(FINETUNE_FILE), &chosen)
    }

    fn eval_fold(&self, fold: &Fold) -> Result<()> {
        let dir = self.fold_dir(fold);
        let thetas = self.thetas(fold)?;
        let ft: BTreeMap<String, FineTuneConfig> = require_json(&dir.join(FINETUNE_FILE), "tune-ft")?;
        let meta_cfg: MetaConfig = require_json(&dir.join(META_CHOICE_FILE), "tune-meta")?;
        let filter: FilterRecord = require_json(&dir.join(FILTER_FILE), "meta")?;
        let mut out = FoldCells { cells: vec![], failures: vec![], record: None };
        for (method, theta) in &thetas {
            let cfg = ft
                .get(*method)
                .ok_or_else(|| Error::MissingStage(format!("{} has no entry for {method}", FINETUNE_FILE)))?;
            let (cells, failures) = evaluate_fold(fold, &self.spec, method, theta, cfg, &self.cfg.protocol);
            out.cells.extend(cells);
            out.failures.extend(failures);
        }
        out.record = Some(SubjectRecord {
            subject: fold.subject.clone(),
            proxy: fold.proxy.subject_id().to_string(),
            pool: fold.pool.iter().map(|d| d.subject_id().to_string()).collect(),
            meta_config: meta_cfg,
            removed_ids: filter.removed_ids,
            finetune: ft,
        });
        fsio::write_json(&dir.join(CELLS_FILE), &out)
    }

    /// Merges every fold's cells into report.csv / report.json.
    fn write_report(&self) -> Result<EvalReport> {
        let mut cells = Vec::new();
        let mut failures = Vec::new();
        let mut records = Vec::new();
        for fold in &self.folds {
            let fc: FoldCells = require_json(&self.fold_dir(fold).join(CELLS_FILE), "eval")?;
            cells.extend(fc.cells);
            failures.extend(fc.failures);
            records.extend(fc.record);
        }
        let p = &self.cfg.protocol;
        let report = EvalReport::from_cells(
            cells,
            p.grid.clone(),
            p.repetitions,
            Some((METHOD_META, METHOD_BASELINE)),
            records,
            failures,
        );
        crate::eval::write_report(&self.dir, &report)?;
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FoldCells {
    cells: Vec<Cell>,
    failures: Vec<String>,
    record: Option<SubjectRecord>,
}

fn valid_json<T: serde::de::DeserializeOwned>(path: &Path) -> bool {
    path.exists() && fsio::read_json::<T>(path).is_ok()
}

fn valid_theta(path: &Path) -> bool {
    path.exists() && ParamVector::<f64>::load(path).is_ok()
}

fn require_json<T: serde::de::DeserializeOwned>(path: &Path, stage: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingStage(format!("{} (run stage `{stage}` first)", path.display())));
    }
    fsio::read_json(path)
}

fn require_theta(path: &Path, stage: &str) -> Result<ParamVector<f64>> {
    if !path.exists() {
        return Err(Error::MissingStage(format!("{} (run stage `{stage}` first)", path.display())));
    }
    ParamVector::load(path)
}

/// Loads the study written by the meta-tuning stage of one fold.
pub fn load_fold_study(run_dir: &Path, subject: &str) -> Result<Study> {
    Study::load(&run_dir.join(FOLDS_DIR).join(subject).join(STUDY_FILE))
}
