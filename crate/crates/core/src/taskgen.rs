//! Synthetic multi-subject task families with known ground truth.
//!
//! Every subject observes the same class-conditional oscillatory sources
//! through its own orthogonal mixing matrix, a random rotation at most
//! `angle_spread` radians (geodesic distance) away from a shared base
//! rotation. Class `c` raises the amplitude of source `c`; all class sources
//! oscillate at the subject's rhythm frequency. Planted outliers either have
//! their labels cyclically shifted or their rhythm moved to a disjoint band.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{save_dataset_dir, DatasetManifest, PreprocessingRecord, SubjectDataset};
use crate::error::{Error, Result};
use crate::fsio;
use crate::seed;

pub const FAMILY_TRUTH_FILE: &str = "family_truth.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutlierMode {
    None,
    LabelPermuted,
    FreqShifted,
}

/// Which corruption planted outliers receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutlierPolicy {
    LabelPermuted,
    FreqShifted,
    /// Alternates, starting with `LABEL_PERMUTED`.
    Alternate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub n_subjects: usize,
    pub n_outliers: usize,
    pub channels: usize,
    pub times: usize,
    pub sample_rate_hz: f64,
    pub n_classes: usize,
    pub epochs_per_class: usize,
    /// Maximum geodesic distance (radians) of a subject's mixing from the base rotation.
    pub angle_spread: f64,
    pub noise_std: f64,
    /// Amplitude of the source belonging to the epoch's class.
    pub active_amplitude: f64,
    /// Amplitude of the other class sources.
    pub rest_amplitude: f64,
    pub rhythm_hz: f64,
    /// Per-subject rhythm frequency is drawn from `rhythm_hz ± freq_jitter_hz`.
    pub freq_jitter_hz: f64,
    /// Offset applied to every class frequency of a `FREQ_SHIFTED` outlier.
    pub freq_shift_hz: f64,
    pub outlier_policy: OutlierPolicy,
    pub seed: u64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            n_subjects: 10,
            n_outliers: 2,
            channels: 8,
            times: 256,
            sample_rate_hz: 250.0,
            n_classes: 2,
            epochs_per_class: 60,
            angle_spread: 0.6,
            noise_std: 0.5,
            active_amplitude: 1.0,
            rest_amplitude: 0.3,
            rhythm_hz: 11.0,
            freq_jitter_hz: 1.0,
            freq_shift_hz: 14.0,
            outlier_policy: OutlierPolicy::LabelPermuted,
            seed: 0,
        }
    }
}

impl FamilyConfig {
    /// Mean per-sensor signal power over noise power, in dB.
    pub fn snr_db(&self) -> f64 {
        let per_class =
            (self.active_amplitude.powi(2) + (self.n_classes - 1) as f64 * self.rest_amplitude.powi(2)) / 2.0;
        let signal = per_class / self.channels as f64;
        10.0 * (signal / self.noise_std.powi(2)).log10()
    }

    /// Noise level giving the requested SNR.
    pub fn with_snr_db(mut self, snr_db: f64) -> Self {
        let per_class =
            (self.active_amplitude.powi(2) + (self.n_classes - 1) as f64 * self.rest_amplitude.powi(2)) / 2.0;
        let signal = per_class / self.channels as f64;
        self.noise_std = (signal / 10f64.powf(snr_db / 10.0)).sqrt();
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.n_subjects == 0 || self.n_outliers >= self.n_subjects {
            return bad(format!(
                "need n_outliers < n_subjects, got {} outliers for {} subjects",
                self.n_outliers, self.n_subjects
            ));
        }
        if self.n_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.n_classes > self.channels {
            return bad("each class needs its own source channel".into());
        }
        if self.times == 0 || self.epochs_per_class == 0 {
            return bad("times and epochs_per_class must be positive".into());
        }
        if !(self.angle_spread >= 0.0 && self.angle_spread <= PI) {
            return bad(format!("angle_spread {} outside [0, pi]", self.angle_spread));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be non-negative".into());
        }
        let nyquist = self.sample_rate_hz / 2.0;
        let lo = self.rhythm_hz - self.freq_jitter_hz;
        let hi = self.rhythm_hz + self.freq_jitter_hz.max(0.0) + self.freq_shift_hz.max(0.0);
        if !(lo > 0.0 && hi < nyquist) {
            return bad(format!("class frequencies [{lo}, {hi}] Hz not within (0, {nyquist})"));
        }
        if self.freq_shift_hz <= 2.0 * self.freq_jitter_hz {
            return bad("freq_shift_hz must exceed twice the jitter so shifted bands are disjoint".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSource {
    pub frequency_hz: f64,
    pub source_channel: usize,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectModel {
    pub subject_id: String,
    pub channels: usize,
    /// Orthogonal `C x C` matrix, row-major; sensors = mixing * sources.
    pub mixing: Vec<f64>,
    /// Geodesic distance from the family's base rotation.
    pub mixing_angle: f64,
    /// Sources of each generated class, indexed by generating class.
    pub class_sources: Vec<Vec<ClassSource>>,
    pub noise_std: f64,
    pub outlier: bool,
    pub outlier_mode: OutlierMode,
}

impl SubjectModel {
    /// Label recorded for an epoch generated from `class`.
    pub fn label_for(&self, class: usize) -> usize {
        let n = self.class_sources.len();
        match self.outlier_mode {
            OutlierMode::LabelPermuted => (class + 1) % n,
            _ => class,
        }
    }

    pub fn mixing_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.channels, self.channels, &self.mixing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyTruth {
    pub config: FamilyConfig,
    pub base_mixing: Vec<f64>,
    pub subjects: Vec<SubjectModel>,
}

impl FamilyTruth {
    pub fn outlier_ids(&self) -> Vec<String> {
        self.subjects.iter().filter(|m| m.outlier).map(|m| m.subject_id.clone()).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        fsio::read_json(path)
    }
}

#[derive(Debug, Clone)]
pub struct Family {
    pub datasets: Vec<SubjectDataset>,
    pub truth: FamilyTruth,
}

impl Family {
    pub fn models(&self) -> &[SubjectModel] {
        &self.truth.subjects
    }

    /// Writes the datasets, manifest and `family_truth.json` into `dir`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<DatasetManifest> {
        let record = PreprocessingRecord {
            channels: (0..self.truth.config.channels).map(|c| format!("ch{c}")).collect(),
            ..Default::default()
        };
        let manifest = save_dataset_dir(dir, name, &self.datasets, record)?;
        fsio::write_json(&dir.join(FAMILY_TRUTH_FILE), &self.truth)?;
        Ok(manifest)
    }
}

fn gaussian_matrix<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng))
}

/// Uniformly distributed rotation (det = +1) from the QR of a Gaussian matrix.
fn random_rotation<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let qr = gaussian_matrix(n, rng).qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

/// Largest principal rotation angle between two rotations.
pub fn rotation_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let m = a.transpose() * b;
    let sym = (&m + m.transpose()) * 0.5;
    let min_cos = SymmetricEigen::new(sym).eigenvalues.min();
    min_cos.clamp(-1.0, 1.0).acos()
}

fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.transpose() * a).eigenvalues.max().max(0.0).sqrt()
}

/// Walks `angle` radians along a random geodesic starting at `base`.
fn perturb_rotation<R: Rng>(base: &DMatrix<f64>, angle: f64, rng: &mut R) -> DMatrix<f64> {
    let n = base.nrows();
    if angle == 0.0 || n < 2 {
        return base.clone();
    }
    let g = gaussian_matrix(n, rng);
    let skew = (&g - g.transpose()) * 0.5;
    let generator = &skew * (angle / spectral_norm(&skew));
    base * generator.exp()
}

/// Generates a subject family and its ground truth; deterministic under `cfg.seed`.
pub fn make_family(cfg: &FamilyConfig) -> Result<Family> {
    cfg.validate()?;
    let n_classes = cfg.n_classes;
    let c = cfg.channels;
    let t_len = cfg.times;
    let class_names: Vec<String> = (0..n_classes).map(|k| format!("class{k}")).collect();

    let mut base_rng = seed::rng(cfg.seed, &[1]);
    let base = random_rotation(c, &mut base_rng);

    let mut pick_rng = seed::rng(cfg.seed, &[2]);
    let mut outlier_idx = index::sample(&mut pick_rng, cfg.n_subjects, cfg.n_outliers).into_vec();
    outlier_idx.sort_unstable();

    let mut datasets = Vec::with_capacity(cfg.n_subjects);
    let mut models = Vec::with_capacity(cfg.n_subjects);
    for s in 0..cfg.n_subjects {
        let subject_id = format!("S{:02}", s + 1);
        let mut rng = seed::rng(cfg.seed, &[3, s as u64]);
        let angle = cfg.angle_spread * (1.0 - rng.random::<f64>());
        let mixing = perturb_rotation(&base, angle, &mut rng);
        let rhythm = cfg.rhythm_hz + cfg.freq_jitter_hz * (2.0 * rng.random::<f64>() - 1.0);

        let outlier_mode = match outlier_idx.iter().position(|&i| i == s) {
            None => OutlierMode::None,
            Some(rank) => match cfg.outlier_policy {
                OutlierPolicy::LabelPermuted => OutlierMode::LabelPermuted,
                OutlierPolicy::FreqShifted => OutlierMode::FreqShifted,
                OutlierPolicy::Alternate if rank % 2 == 0 => OutlierMode::LabelPermuted,
                OutlierPolicy::Alternate => OutlierMode::FreqShifted,
            },
        };
        let freq = if outlier_mode == OutlierMode::FreqShifted { rhythm + cfg.freq_shift_hz } else { rhythm };
        let class_sources: Vec<Vec<ClassSource>> = (0..n_classes)
            .map(|k| {
                (0..n_classes)
                    .map(|j| ClassSource {
                        frequency_hz: freq,
                        source_channel: j,
                        amplitude: if j == k { cfg.active_amplitude } else { cfg.rest_amplitude },
                    })
                    .collect()
            })
            .collect();
        let model = SubjectModel {
            subject_id: subject_id.clone(),
            channels: c,
            mixing: mixing.transpose().as_slice().to_vec(),
            mixing_angle: rotation_distance(&base, &mixing),
            class_sources,
            noise_std: cfg.noise_std,
            outlier: outlier_mode != OutlierMode::None,
            outlier_mode,
        };

        let n_epochs = n_classes * cfg.epochs_per_class;
        let mut data = Vec::with_capacity(n_epochs * c * t_len);
        let mut labels = Vec::with_capacity(n_epochs);
        let mut noise_rng = seed::rng(cfg.seed, &[4, s as u64]);
        let mut sources = vec![0.0f64; c * t_len];
        for e in 0..n_epochs {
            let class = e % n_classes;
            // Phases depend only on the epoch index, so identically mixed,
            // noise-free subjects produce identical epochs.
            let mut phase_rng = seed::rng(cfg.seed, &[5, e as u64]);
            sources.fill(0.0);
            for src in &model.class_sources[class] {
                let phase = phase_rng.random::<f64>() * 2.0 * PI;
                let w = 2.0 * PI * src.frequency_hz / cfg.sample_rate_hz;
                let row = &mut sources[src.source_channel * t_len..(src.source_channel + 1) * t_len];
                for (t, v) in row.iter_mut().enumerate() {
                    *v += src.amplitude * (w * t as f64 + phase).sin();
                }
            }
            for i in 0..c {
                for t in 0..t_len {
                    let mut x = 0.0;
                    for j in 0..n_classes {
                        x += model.mixing[i * c + j] * sources[j * t_len + t];
                    }
                    if cfg.noise_std > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut noise_rng);
                        x += cfg.noise_std * z;
                    }
                    data.push(x as f32);
                }
            }
            labels.push(model.label_for(class));
        }
        datasets.push(SubjectDataset::new(
            subject_id,
            data,
            (n_epochs, c, t_len),
            labels,
            cfg.sample_rate_hz,
            class_names.clone(),
        )?);
        models.push(model);
    }

    Ok(Family {
        datasets,
        truth: FamilyTruth { config: cfg.clone(), base_mixing: base.transpose().as_slice().to_vec(), subjects: models },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub n_subjects: usize,
    pub counts: BTreeMap<OutlierMode, usize>,
    pub angle_min: f64,
    pub angle_mean: f64,
    pub angle_max: f64,
}

pub fn family_report(models: &[SubjectModel]) -> Result<FamilyReport> {
    if models.is_empty() {
        return Err(Error::EmptyTasks);
    }
    let mut counts = BTreeMap::new();
    for m in models {
        *counts.entry(m.outlier_mode).or_insert(0) += 1;
    }
    let angles: Vec<f64> = models.iter().map(|m| m.mixing_angle).collect();
    Ok(FamilyReport {
        n_subjects: models.len(),
        counts,
        angle_min: angles.iter().copied().fold(f64::INFINITY, f64::min),
        angle_mean: angles.iter().sum::<f64>() / angles.len() as f64,
        angle_max: angles.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}
