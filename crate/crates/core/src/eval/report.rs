//! Evaluation records, their aggregation, and the report.csv / report.json files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::protocol::SubjectRecord;
use crate::eval::stats::{confidence_interval, wilcoxon_signed_rank};
use crate::fsio;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
const CSV_HEADER: &str = "method,subject,subset_size,repetition,accuracy";

/// Accuracy of one method on one test subject for one fine-tuning draw.
/// `subset_size` counts points per class; 0 is zero-shot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    pub subject: String,
    pub subset_size: usize,
    pub repetition: usize,
    pub accuracy: f64,
}

impl Cell {
    fn key(&self) -> (&str, usize, &str, usize) {
        (&self.method, self.subset_size, &self.subject, self.repetition)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub subset_size: usize,
    pub n: usize,
    pub mean: f64,
    /// 95% Student-t half-width; absent with fewer than two cells.
    pub ci_half_width: Option<f64>,
}

/// Wilcoxon comparison of `method_a - method_b`, paired on (subject, repetition).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub subset_size: usize,
    pub method_a: String,
    pub method_b: String,
    pub n_pairs: usize,
    pub mean_difference: f64,
    pub ci_half_width: Option<f64>,
    pub w: Option<f64>,
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReportStatus {
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub status: ReportStatus,
    pub grid: Vec<usize>,
    pub repetitions: usize,
    pub cells: Vec<Cell>,
    pub aggregates: Vec<Aggregate>,
    pub tests: Vec<PairedTest>,
    #[serde(default)]
    pub subjects: Vec<SubjectRecord>,
    #[serde(default)]
    pub failures: Vec<String>,
}

impl EvalReport {
    /// Builds a report from cells, deriving aggregates and `a - b` tests.
    pub fn from_cells(
        mut cells: Vec<Cell>,
        grid: Vec<usize>,
        repetitions: usize,
        pair: Option<(&str, &str)>,
        subjects: Vec<SubjectRecord>,
        failures: Vec<String>,
    ) -> Self {
        sort_cells(&mut cells);
        let (aggregates, tests) = aggregate(&cells, pair);
        let status = if failures.is_empty() { ReportStatus::Complete } else { ReportStatus::Incomplete };
        EvalReport { status, grid, repetitions, cells, aggregates, tests, subjects, failures }
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = self.cells.iter().map(|c| c.method.clone()).collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn aggregate_for(&self, method: &str, subset_size: usize) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method && a.subset_size == subset_size)
    }

    pub fn test_for(&self, subset_size: usize) -> Option<&PairedTest> {
        self.tests.iter().find(|t| t.subset_size == subset_size)
    }

    pub fn load(path: &Path) -> Result<Self> {
        fsio::read_json(path)
    }
}

fn sort_cells(cells: &mut [Cell]) {
    cells.sort_by(|a, b| a.key().cmp(&b.key()));
}

/// Per-(method, size) means and CIs, plus per-size paired tests when `pair`
/// names two methods. Depends only on the multiset of cells.
pub fn aggregate(cells: &[Cell], pair: Option<(&str, &str)>) -> (Vec<Aggregate>, Vec<PairedTest>) {
    let mut sorted = cells.to_vec();
    sort_cells(&mut sorted);
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for c in &sorted {
        groups.entry((c.method.clone(), c.subset_size)).or_default().push(c.accuracy);
    }
    let aggregates = groups
        .iter()
        .map(|((method, size), vals)| {
            let (mean, hw) = match confidence_interval(vals) {
                Ok((m, h)) => (m, Some(h)),
                Err(_) => (vals.iter().sum::<f64>() / vals.len() as f64, None),
            };
            Aggregate { method: method.clone(), subset_size: *size, n: vals.len(), mean, ci_half_width: hw }
        })
        .collect();

    let mut tests = Vec::new();
    if let Some((a, b)) = pair {
        let index: BTreeMap<(&str, usize, &str, usize), f64> =
            sorted.iter().map(|c| (c.key(), c.accuracy)).collect();
        let mut sizes: Vec<usize> = sorted.iter().map(|c| c.subset_size).collect();
        sizes.sort_unstable();
        sizes.dedup();
        for size in sizes {
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for c in sorted.iter().filter(|c| c.method == a && c.subset_size == size) {
                if let Some(y) = index.get(&(b, size, c.subject.as_str(), c.repetition)) {
                    xs.push(c.accuracy);
                    ys.push(*y);
                }
            }
            if xs.is_empty() {
                continue;
            }
            let diffs: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| x - y).collect();
            let mean_difference = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let ci_half_width = confidence_interval(&diffs).ok().map(|(_, h)| h);
            let (w, p, note) = match wilcoxon_signed_rank(&xs, &ys) {
                Ok(r) => (Some(r.w), Some(r.p), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            tests.push(PairedTest {
                subset_size: size,
                method_a: a.to_string(),
                method_b: b.to_string(),
                n_pairs: xs.len(),
                mean_difference,
                ci_half_width,
                w,
                p,
                note,
            });
        }
    }
    (aggregates, tests)
}

pub fn report_csv(cells: &[Cell]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for c in cells {
        let _ = writeln!(out, "{},{},{},{},{}", c.method, c.subject, c.subset_size, c.repetition, c.accuracy);
    }
    out
}

pub fn read_report_csv(path: &Path) -> Result<Vec<Cell>> {
    let text = String::from_utf8(fsio::read_bytes(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::format(path, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::format(path, format!("line {}: cannot parse `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(Cell {
                method: f[0].to_string(),
                subject: f[1].to_string(),
                subset_size: f[2].parse().map_err(|_| bad())?,
                repetition: f[3].parse().map_err(|_| bad())?,
                accuracy: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Writes report.csv and report.json into `dir`, each atomically.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fsio::write_atomic(&dir.join(REPORT_CSV), report_csv(&report.cells).as_bytes())?;
    fsio::write_json(&dir.join(REPORT_JSON), report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(method: &str, subject: &str, size: usize, rep: usize, acc: f64) -> Cell {
        Cell { method: method.into(), subject: subject.into(), subset_size: size, repetition: rep, accuracy: acc }
    }

    #[test]
    fn aggregation_ignores_cell_order() {
        let mut cells = vec![];
        for rep in 0..6 {
            cells.push(cell("meta", "S01", 2, rep, 0.5 + 0.05 * rep as f64));
            cells.push(cell("baseline", "S01", 2, rep, 0.4 + 0.01 * rep as f64));
        }
        let (a1, t1) = aggregate(&cells, Some(("meta", "baseline")));
        cells.reverse();
        let (a2, t2) = aggregate(&cells, Some(("meta", "baseline")));
        assert_eq!(a1, a2);
        assert_eq!(t1, t2);
        assert_eq!(t1.len(), 1);
        assert_eq!(t1[0].p, Some(0.03125));
    }

    #[test]
    fn too_few_pairs_is_noted_not_fatal() {
        let cells = vec![cell("meta", "S01", 0, 0, 0.5), cell("baseline", "S01", 0, 0, 0.5)];
        let (_, tests) = aggregate(&cells, Some(("meta", "baseline")));
        assert!(tests[0].p.is_none() && tests[0].note.is_some());
    }
}
