//! Full-batch training loops shared by the meta-learner, the baseline and
//! fine-tuning.

use crate::data::SubjectDataset;
use crate::error::{Error, Result};
use crate::nn::model::{loss_and_grad, predict, Batch, ModelSpec};
use crate::nn::optim::{OptimizerKind, OptimizerState};
use crate::nn::param::{ParamVector, PerGroup};
use crate::scalar::Real;

/// Epochs converted to the working scalar type together with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch<T> {
    pub batch: Batch<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> LabeledBatch<T> {
    pub fn from_dataset(ds: &SubjectDataset, indices: &[usize]) -> Self {
        LabeledBatch { batch: Batch::from_dataset(ds, indices), labels: indices.iter().map(|&i| ds.labels()[i]).collect() }
    }

    pub fn all(ds: &SubjectDataset) -> Self {
        let idx: Vec<usize> = (0..ds.len()).collect();
        Self::from_dataset(ds, &idx)
    }

    /// Concatenates several batches with identical epoch shape.
    pub fn concat(parts: &[LabeledBatch<T>]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyTasks)?;
        let (c, t) = (first.batch.channels(), first.batch.times());
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.batch.channels() != c || p.batch.times() != t {
                return Err(Error::ShapeMismatch("batches have different epoch shapes".into()));
            }
            data.extend_from_slice(p.batch.raw());
            labels.extend_from_slice(&p.labels);
        }
        Ok(LabeledBatch { batch: Batch::new(data, labels.len(), c, t)?, labels })
    }

    /// The epochs at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.batch.channels() * self.batch.times());
        for &i in indices {
            data.extend_from_slice(self.batch.sample(i));
        }
        LabeledBatch {
            batch: Batch::new(data, indices.len(), self.batch.channels(), self.batch.times())
                .expect("selection keeps the epoch shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `steps` optimizer updates, each on the gradient of the whole batch. A fresh
/// optimizer state is used, so Adam moments start at zero.
pub fn train_full_batch<T: Real>(
    spec: &ModelSpec,
    params: &ParamVector<T>,
    data: &LabeledBatch<T>,
    steps: usize,
    kind: OptimizerKind,
    lr: PerGroup<T>,
) -> Result<ParamVector<T>> {
    let mut out = params.clone();
    let mut opt = OptimizerState::new(kind, lr.classifier, params.len());
    for _ in 0..steps {
        let (_, grad) = loss_and_grad(spec, &out, &data.batch, &data.labels)?;
        opt.step_grouped(&mut out, &grad, lr)?;
    }
    Ok(out)
}

/// Fraction of correctly classified epochs.
pub fn accuracy<T: Real>(spec: &ModelSpec, params: &ParamVector<T>, data: &LabeledBatch<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyTest);
    }
    let pred = predict(spec, params, &data.batch)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}
