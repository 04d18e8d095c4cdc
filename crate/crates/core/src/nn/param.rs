use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::{self, Reader};
use crate::scalar::Real;

/// The two layer groups a model's parameters are split into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Group {
    /// Feature extractor (everything before the output layer).
    Feature,
    /// The final dense layer.
    Classifier,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::Feature, Group::Classifier];
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Feature => "FEATURE",
            Group::Classifier => "CLASSIFIER",
        })
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FEATURE" => Ok(Group::Feature),
            "CLASSIFIER" => Ok(Group::Classifier),
            _ => Err(Error::UnknownGroup(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Per-group scalar, e.g. a learning rate or meta step size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerGroup<T> {
    pub feature: T,
    pub classifier: T,
}

impl<T: Copy> PerGroup<T> {
    pub fn uniform(v: T) -> Self {
        PerGroup { feature: v, classifier: v }
    }

    pub fn get(&self, group: Group) -> T {
        match group {
            Group::Feature => self.feature,
            Group::Classifier => self.classifier,
        }
    }
}

/// Flat model parameters partitioned into a FEATURE and a CLASSIFIER span.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    values: Vec<T>,
    feature: Span,
    classifier: Span,
}

impl<T: Real> ParamVector<T> {
    /// Builds a vector, checking that the two spans partition `values`.
    pub fn new(values: Vec<T>, feature: Span, classifier: Span) -> Result<Self> {
        let n = values.len();
        let (a, b) = if feature.start <= classifier.start { (feature, classifier) } else { (classifier, feature) };
        let ok = a.start == 0 && a.start + a.len == b.start && b.start + b.len == n;
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "spans {feature:?} and {classifier:?} do not partition {n} values"
            )));
        }
        Ok(ParamVector { values, feature, classifier })
    }

    pub fn zeros_like(other: &Self) -> Self {
        ParamVector { values: vec![T::zero(); other.len()], feature: other.feature, classifier: other.classifier }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn span(&self, group: Group) -> Span {
        match group {
            Group::Feature => self.feature,
            Group::Classifier => self.classifier,
        }
    }

    pub fn group_of(&self, index: usize) -> Group {
        if self.feature.range().contains(&index) {
            Group::Feature
        } else {
            Group::Classifier
        }
    }

    pub fn group_view(&self, group: Group) -> &[T] {
        &self.values[self.span(group).range()]
    }

    pub fn group_view_mut(&mut self, group: Group) -> &mut [T] {
        let r = self.span(group).range();
        &mut self.values[r]
    }

    /// Same layout check used before combining two vectors elementwise.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch { expected: self.len(), got: other.len() });
        }
        if self.feature != other.feature || self.classifier != other.classifier {
            return Err(Error::ShapeMismatch("parameter group spans differ".into()));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamVector<U> {
        ParamVector {
            values: self.values.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            feature: self.feature,
            classifier: self.classifier,
        }
    }

    /// Encodes in the `EPRM` little-endian binary layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 + 8 * 5 + 8 * self.len());
        out.extend_from_slice(b"EPRM");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for span in [self.feature, self.classifier] {
            out.extend_from_slice(&(span.start as u64).to_le_bytes());
            out.extend_from_slice(&(span.len as u64).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4)? != b"EPRM" {
            return Err(Error::format(path, "bad magic, expected EPRM"));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let feature = Span { start: r.u64()? as usize, len: r.u64()? as usize };
        let classifier = Span { start: r.u64()? as usize, len: r.u64()? as usize };
        if bytes.len() != 48 + 8 * len {
            return Err(Error::format(path, "length field does not match file size"));
        }
        let values = (0..len).map(|_| r.f64().map(T::lit)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        ParamVector::new(values, feature, classifier).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsio::read_bytes(path)?, path)
    }
}
