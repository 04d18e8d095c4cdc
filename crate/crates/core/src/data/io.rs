//! `EEPO` epoch files and the `manifest.json` that indexes them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SubjectDataset;
use crate::error::{Error, Result};
use crate::fsio::{self, Reader};

pub const MANIFEST_FILE: &str = "manifest.json";
const EPOCH_MAGIC: &[u8; 4] = b"EEPO";
const EPOCH_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmsRecord {
    pub factor_new: f64,
    pub init_block: usize,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PreprocessingRecord {
    pub band_hz: Option<[f64; 2]>,
    pub filter_order: Option<usize>,
    pub ems: Option<EmsRecord>,
    pub resampled_from_hz: Option<f64>,
    pub channels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject_id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub epochs: usize,
    pub channels: usize,
    pub times: usize,
    pub sample_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub preprocessing: PreprocessingRecord,
    pub subjects: Vec<ManifestEntry>,
}

/// Serializes epochs and labels; subject id and class names live in the manifest.
pub fn epochs_to_bytes(ds: &SubjectDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(48 + 4 * ds.data().len() + 2 * ds.len());
    out.extend_from_slice(EPOCH_MAGIC);
    out.extend_from_slice(&EPOCH_VERSION.to_le_bytes());
    for n in [ds.len(), ds.channels(), ds.times()] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    out.extend_from_slice(&ds.sample_rate_hz().to_le_bytes());
    for v in ds.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in ds.labels() {
        out.extend_from_slice(&(y as u16).to_le_bytes());
    }
    out
}

pub fn write_epochs(path: &Path, ds: &SubjectDataset) -> Result<()> {
    if ds.n_classes() > usize::from(u16::MAX) {
        return Err(Error::InvalidDataset("too many classes for u16 labels".into()));
    }
    fsio::write_atomic(path, &epochs_to_bytes(ds))
}

pub fn read_epochs(path: &Path, subject_id: &str, class_names: &[String]) -> Result<SubjectDataset> {
    let bytes = fsio::read_bytes(path)?;
    let mut r = Reader::new(&bytes, path);
    if r.take(4)? != EPOCH_MAGIC {
        return Err(Error::format(path, "bad magic, expected EEPO"));
    }
    let version = r.u32()?;
    if version != EPOCH_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let e = r.u64()? as usize;
    let c = r.u64()? as usize;
    let t = r.u64()? as usize;
    let rate = r.f64()?;
    let n = e.checked_mul(c).and_then(|v| v.checked_mul(t)).ok_or_else(|| Error::format(path, "shape overflow"))?;
    if bytes.len() != 40 + 4 * n + 2 * e {
        return Err(Error::format(path, "header shape does not match file size"));
    }
    let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let labels = (0..e).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    SubjectDataset::new(subject_id, data, (e, c, t), labels, rate, class_names.to_vec())
        .map_err(|err| Error::format(path, err.to_string()))
}

fn file_name_for(subject_id: &str) -> String {
    let clean: String =
        subject_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{clean}.eepo")
}

/// Writes one `EEPO` file per subject plus `manifest.json` into `dir`.
pub fn save_dataset_dir(
    dir: &Path,
    name: &str,
    datasets: &[SubjectDataset],
    preprocessing: PreprocessingRecord,
) -> Result<DatasetManifest> {
    let first = datasets.first().ok_or(Error::EmptyTasks)?;
    let class_names = first.class_names().to_vec();
    let mut subjects = Vec::with_capacity(datasets.len());
    for ds in datasets {
        if ds.class_names() != class_names.as_slice() {
            return Err(Error::InvalidDataset(format!("subject {} has different class names", ds.subject_id())));
        }
        let rel = PathBuf::from(file_name_for(ds.subject_id()));
        write_epochs(&dir.join(&rel), ds)?;
        subjects.push(ManifestEntry {
            subject_id: ds.subject_id().to_owned(),
            path: rel,
            epochs: ds.len(),
            channels: ds.channels(),
            times: ds.times(),
            sample_rate_hz: ds.sample_rate_hz(),
        });
    }
    let manifest = DatasetManifest { name: name.to_owned(), class_names, preprocessing, subjects };
    fsio::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads every subject listed in a manifest, checking each header against its entry.
pub fn load_dataset_dir(manifest_path: &Path) -> Result<(DatasetManifest, Vec<SubjectDataset>)> {
    let manifest_path = if manifest_path.is_dir() { manifest_path.join(MANIFEST_FILE) } else { manifest_path.to_owned() };
    let manifest: DatasetManifest = fsio::read_json(&manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let path = base.join(&entry.path);
        let ds = read_epochs(&path, &entry.subject_id, &manifest.class_names)?;
        let matches = ds.len() == entry.epochs
            && ds.channels() == entry.channels
            && ds.times() == entry.times
            && ds.sample_rate_hz() == entry.sample_rate_hz;
        if !matches {
            return Err(Error::format(&path, "header does not match manifest entry"));
        }
        out.push(ds);
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let names = vec!["left".to_string(), "right".to_string()];
        let a = SubjectDataset::new("S01", vec![0.1, -2.5, 3.25, 1e-7], (2, 1, 2), vec![1, 0], 250.0, names.clone())
            .unwrap();
        let b = SubjectDataset::new("S/02", vec![f32::MIN_POSITIVE; 6], (2, 3, 1), vec![0, 1], 125.0, names).unwrap();
        let record = PreprocessingRecord { band_hz: Some([4.0, 38.0]), channels: vec!["C3".into()], ..Default::default() };
        let written = save_dataset_dir(dir.path(), "toy", &[a.clone(), b.clone()], record).unwrap();
        let (manifest, loaded) = load_dataset_dir(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest, written);
        assert_eq!(loaded, vec![a, b]);
    }

    #[test]
    fn header_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let names = vec!["x".to_string()];
        let a = SubjectDataset::new("a", vec![1.0; 4], (2, 1, 2), vec![0, 0], 100.0, names).unwrap();
        let mut m = save_dataset_dir(dir.path(), "toy", &[a], PreprocessingRecord::default()).unwrap();
        m.subjects[0].epochs = 3;
        fsio::write_json(&dir.path().join(MANIFEST_FILE), &m).unwrap();
        assert!(load_dataset_dir(dir.path()).is_err());
    }
}
