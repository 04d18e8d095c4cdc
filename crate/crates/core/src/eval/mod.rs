//! Fine-tuning, zero-/few-shot evaluation, the leave-one-subject-out protocol
//! and the statistics used to compare methods.

mod protocol;
mod report;
mod stats;

use serde::{Deserialize, Serialize};

use crate::data::{sample_k_per_class_indices, SubjectDataset};
use crate::error::{Error, Result};
use crate::nn::{accuracy, train_full_batch, LabeledBatch, ModelSpec, OptimizerKind, ParamVector, PerGroup};
use crate::scalar::Real;

pub use protocol::{
    chosen_finetune, chosen_meta, evaluate_fold, make_folds, run_fold, run_protocol, train_baseline_fold,
    train_meta_fold, tune_finetune, tune_meta, Fold, ProtocolConfig, SubjectRecord, METHOD_BASELINE, METHOD_META,
};
pub use report::{
    aggregate, read_report_csv, report_csv, write_report, Aggregate, Cell, EvalReport, PairedTest, ReportStatus,
    REPORT_CSV, REPORT_JSON,
};
pub use stats::{
    confidence_interval, wilcoxon_signed_rank, wilcoxon_signed_rank_with, WilcoxonMethod, WilcoxonResult, EXACT_MAX_N,
};

/// Share of each subject held out (as a class-balanced tail) for testing.
pub const TEST_FRACTION: f64 = 0.2;

/// Seed of the fine-tuning draw for `(subject, s_per_class, repetition)`. Both
/// methods use the same draw, so their cells are paired.
pub fn finetune_seed(seed: u64, subject: &str, s_per_class: usize, repetition: usize) -> u64 {
    crate::seed::derive(seed, &[0x46_54, crate::seed::hash_str(subject), s_per_class as u64, repetition as u64])
}

/// Which group, if any, keeps its meta-learned values during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Freeze {
    #[default]
    None,
    Feature,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneConfig {
    pub lr: f64,
    /// Epoch schedule `max(0, round(a * s_total + b))`.
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub freeze: Freeze,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig { lr: 1e-3, a: 0.5, b: 10.0, freeze: Freeze::None, optimizer: OptimizerKind::Adam, seed: 0 }
    }
}

impl FineTuneConfig {
    /// Training steps for a fine-tuning set of `s_total` points.
    pub fn epochs(&self, s_total: usize) -> usize {
        (self.a * s_total as f64 + self.b).round().max(0.0) as usize
    }

    fn rates<T: Real>(&self) -> PerGroup<T> {
        let lr = T::lit(self.lr);
        match self.freeze {
            Freeze::None => PerGroup::uniform(lr),
            Freeze::Feature => PerGroup { feature: T::zero(), classifier: lr },
            Freeze::Classifier => PerGroup { feature: lr, classifier: T::zero() },
        }
    }
}

/// Adapts `theta` to one subject: draws `s_per_class` points of every class
/// (keyed by `sample_seed`) and runs `cfg.epochs(s_total)` full-batch steps.
pub fn finetune<T: Real>(
    spec: &ModelSpec,
    theta: &ParamVector<T>,
    subject_train: &SubjectDataset,
    s_per_class: usize,
    cfg: &FineTuneConfig,
    sample_seed: u64,
) -> Result<ParamVector<T>> {
    let idx = finetune_indices(subject_train, s_per_class, sample_seed)?;
    let epochs = cfg.epochs(idx.len());
    if epochs == 0 {
        return Ok(theta.clone());
    }
    let data = LabeledBatch::from_dataset(subject_train, &idx);
    train_full_batch(spec, theta, &data, epochs, cfg.optimizer, cfg.rates())
}

/// The points [`finetune`] trains on for the given subset size and seed.
pub fn finetune_indices(subject_train: &SubjectDataset, s_per_class: usize, sample_seed: u64) -> Result<Vec<usize>> {
    sample_k_per_class_indices(subject_train, s_per_class, sample_seed)
}

/// Argmax accuracy on `test`; ties between logits go to the lowest class id.
pub fn evaluate<T: Real>(spec: &ModelSpec, theta: &ParamVector<T>, test: &SubjectDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTest);
    }
    accuracy(spec, theta, &LabeledBatch::all(test))
}
