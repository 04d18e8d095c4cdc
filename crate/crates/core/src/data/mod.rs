//! Per-subject labeled epoch datasets: storage, ingestion and preprocessing.

mod filter;
mod io;
mod preprocess;
mod split;

pub use filter::{butterworth_bandpass, Biquad, SosFilter};
pub use io::{
    load_dataset_dir, read_epochs, save_dataset_dir, write_epochs, DatasetManifest, EmsRecord, ManifestEntry,
    PreprocessingRecord, MANIFEST_FILE,
};
pub use preprocess::{
    bandpass, downsample, ems, ems_signal, preprocess, select_channels, PreprocessConfig, BUTTERWORTH_ORDER,
    EMS_EPS, EMS_FACTOR_NEW, EMS_INIT_BLOCK,
};
pub use split::{sample_k_per_class, sample_k_per_class_indices, split_test, split_test_indices};

use crate::error::{Error, Result};

/// Labeled epochs `[E, C, T]` recorded from one subject; one meta-learning task.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDataset {
    subject_id: String,
    epochs: Vec<f32>,
    n_epochs: usize,
    channels: usize,
    times: usize,
    labels: Vec<usize>,
    sample_rate_hz: f64,
    class_names: Vec<String>,
}

impl SubjectDataset {
    pub fn new(
        subject_id: impl Into<String>,
        epochs: Vec<f32>,
        shape: (usize, usize, usize),
        labels: Vec<usize>,
        sample_rate_hz: f64,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let (n_epochs, channels, times) = shape;
        let invalid = |m: String| Err(Error::InvalidDataset(m));
        if n_epochs == 0 || channels == 0 || times == 0 {
            return invalid(format!("empty shape {n_epochs}x{channels}x{times}"));
        }
        if epochs.len() != n_epochs * channels * times {
            return invalid(format!("{} values do not fill {n_epochs}x{channels}x{times}", epochs.len()));
        }
        if labels.len() != n_epochs {
            return invalid(format!("{} labels for {n_epochs} epochs", labels.len()));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return invalid(format!("sample rate {sample_rate_hz}"));
        }
        let n_classes = class_names.len();
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return invalid(format!("label {bad} with {n_classes} classes"));
        }
        let mut present = vec![false; n_classes];
        for &y in &labels {
            present[y] = true;
        }
        if let Some(missing) = present.iter().position(|&p| !p) {
            return invalid(format!("class {missing} has no epochs"));
        }
        if epochs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(SubjectDataset {
            subject_id: subject_id.into(),
            epochs,
            n_epochs,
            channels,
            times,
            labels,
            sample_rate_hz,
            class_names,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn len(&self) -> usize {
        self.n_epochs
    }

    pub fn is_empty(&self) -> bool {
        self.n_epochs == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn times(&self) -> usize {
        self.times
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn data(&self) -> &[f32] {
        &self.epochs
    }

    pub fn epoch(&self, i: usize) -> &[f32] {
        let stride = self.channels * self.times;
        &self.epochs[i * stride..(i + 1) * stride]
    }

    /// Indices of each class's epochs, in recording order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_indices().iter().map(Vec::len).collect()
    }

    /// New dataset holding the given epochs in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let stride = self.channels * self.times;
        let mut epochs = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n_epochs {
                return Err(Error::InvalidDataset(format!("epoch index {i} out of range")));
            }
            epochs.extend_from_slice(self.epoch(i));
            labels.push(self.labels[i]);
        }
        SubjectDataset::new(
            self.subject_id.clone(),
            epochs,
            (indices.len(), self.channels, self.times),
            labels,
            self.sample_rate_hz,
            self.class_names.clone(),
        )
    }

    pub fn with_subject_id(mut self, id: impl Into<String>) -> Self {
        self.subject_id = id.into();
        self
    }

    /// Applies `f` to every `(epoch, channel)` series, producing `new_times`
    /// samples each, at `new_rate` Hz.
    pub(crate) fn map_series(
        &self,
        new_times: usize,
        new_rate: f64,
        mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(self.n_epochs * self.channels * new_times);
        let mut buf = vec![0.0f64; self.times];
        for e in 0..self.n_epochs {
            let ep = self.epoch(e);
            for c in 0..self.channels {
                for (b, v) in buf.iter_mut().zip(&ep[c * self.times..(c + 1) * self.times]) {
                    *b = f64::from(*v);
                }
                let y = f(&buf)?;
                debug_assert_eq!(y.len(), new_times);
                out.extend(y.into_iter().map(|v| v as f32));
            }
        }
        SubjectDataset::new(
            self.subject_id.clone(),
            out,
            (self.n_epochs, self.channels, new_times),
            self.labels.clone(),
            new_rate,
            self.class_names.clone(),
        )
    }

    pub(crate) fn with_channels(&self, picks: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(self.n_epochs * picks.len() * self.times);
        for e in 0..self.n_epochs {
            let ep = self.epoch(e);
            for &c in picks {
                out.extend_from_slice(&ep[c * self.times..(c + 1) * self.times]);
            }
        }
        SubjectDataset::new(
            self.subject_id.clone(),
            out,
            (self.n_epochs, picks.len(), self.times),
            self.labels.clone(),
            self.sample_rate_hz,
            self.class_names.clone(),
        )
    }
}
