use rand::seq::index;

use crate::data::SubjectDataset;
use crate::error::{Error, Result};
use crate::seed;

/// Indices `(train, test)` of the class-balanced tail split.
///
/// Each class contributes its last `m` epochs in recording order, where `m`
/// is the smallest `floor(frac * count)` over the classes.
pub fn split_test_indices(ds: &SubjectDataset, frac: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::BadConfig(format!("test fraction {frac} outside (0, 1)")));
    }
    let per_class = ds.class_indices();
    let mut m = usize::MAX;
    for (class, idx) in per_class.iter().enumerate() {
        let n = (frac * idx.len() as f64 + 1e-9).floor() as usize;
        if n == 0 {
            return Err(Error::ClassTooSmall { class });
        }
        m = m.min(n);
    }
    let mut is_test = vec![false; ds.len()];
    for idx in &per_class {
        for &i in &idx[idx.len() - m..] {
            is_test[i] = true;
        }
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| is_test[i]);
    Ok((train, test))
}

pub fn split_test(ds: &SubjectDataset, frac: f64) -> Result<(SubjectDataset, SubjectDataset)> {
    let (train, test) = split_test_indices(ds, frac)?;
    Ok((ds.subset(&train)?, ds.subset(&test)?))
}

/// `k` epochs of every class drawn without replacement, returned in recording order.
pub fn sample_k_per_class_indices(ds: &SubjectDataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::BadConfig("k must be at least 1".into()));
    }
    let mut rng = seed::rng(seed, &[0x005a_3b1e]);
    let mut out = Vec::with_capacity(k * ds.n_classes());
    for (class, idx) in ds.class_indices().iter().enumerate() {
        if idx.len() < k {
            return Err(Error::InsufficientData(format!("class {class} has {} epochs, need {k}", idx.len())));
        }
        out.extend(index::sample(&mut rng, idx.len(), k).into_iter().map(|j| idx[j]));
    }
    out.sort_unstable();
    Ok(out)
}

pub fn sample_k_per_class(ds: &SubjectDataset, k: usize, seed: u64) -> Result<SubjectDataset> {
    ds.subset(&sample_k_per_class_indices(ds, k, seed)?)
}
