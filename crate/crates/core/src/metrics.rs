//! Append-only metrics CSV with a fixed schema.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt::sig9;

pub const HEADER: &str = "step,stage,loss,grad_similarity,grad_conflict,expert_id,mean_normalized_score,seed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Backbone,
    Experts,
    Router,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Backbone => "1",
            Stage::Experts => "2",
            Stage::Router => "3",
            Stage::Eval => "eval",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stage::Backbone),
            "2" => Ok(Stage::Experts),
            "3" => Ok(Stage::Router),
            "eval" => Ok(Stage::Eval),
            _ => Err(Error::SchemaDrift(format!("unknown stage `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub stage: Stage,
    pub loss: Option<f64>,
    pub grad_similarity: Option<f64>,
    pub grad_conflict: Option<f64>,
    pub expert_id: Option<usize>,
    pub mean_normalized_score: Option<f64>,
    pub seed: u64,
}

impl MetricsRow {
    pub fn new(stage: Stage, step: u64, seed: u64) -> Self {
        Self {
            step,
            stage,
            loss: None,
            grad_similarity: None,
            grad_conflict: None,
            expert_id: None,
            mean_normalized_score: None,
            seed,
        }
    }

    /// Set similarity and the matching conflict `1 - similarity`.
    pub fn with_similarity(mut self, similarity: Option<f64>) -> Self {
        self.grad_similarity = similarity;
        self.grad_conflict = similarity.map(|s| 1.0 - s);
        self
    }

    pub fn to_csv(&self) -> String {
        let num = |v: Option<f64>| v.map(sig9).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.stage,
            num(self.loss),
            num(self.grad_similarity),
            num(self.grad_conflict),
            self.expert_id.map(|e| e.to_string()).unwrap_or_default(),
            num(self.mean_normalized_score),
            self.seed
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::SchemaDrift(format!("expected 8 fields, got {}: `{line}`", f.len())));
        }
        let bad = |what: &str| Error::SchemaDrift(format!("bad {what} in `{line}`"));
        let num = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(what))
            }
        };
        Ok(Self {
            step: f[0].parse().map_err(|_| bad("step"))?,
            stage: f[1].parse()?,
            loss: num(f[2], "loss")?,
            grad_similarity: num(f[3], "grad_similarity")?,
            grad_conflict: num(f[4], "grad_conflict")?,
            expert_id: if f[5].is_empty() {
                None
            } else {
                Some(f[5].parse().map_err(|_| bad("expert_id"))?)
            },
            mean_normalized_score: num(f[6], "mean_normalized_score")?,
            seed: f[7].parse().map_err(|_| bad("seed"))?,
        })
    }
}

/// Destination for metrics rows.
pub trait MetricsSink {
    fn emit(&mut self, row: MetricsRow) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRow> {
    fn emit(&mut self, row: MetricsRow) -> Result<()> {
        self.push(row);
        Ok(())
    }
}

/// Discards rows.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn emit(&mut self, _: MetricsRow) -> Result<()> {
        Ok(())
    }
}

/// Single writer for one CSV file. Opening an existing file checks its header
/// and resumes after its last row; `(stage, step)` must strictly increase.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
    last: Option<(Stage, u64)>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut last = None;
        if path.exists() {
            let rows = read_metrics(path)?;
            last = rows.last().map(|r| (r.stage, r.step));
        } else {
            fs::write(path, format!("{HEADER}\n")).map_err(|e| Error::io(path, e))?;
        }
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            last,
        })
    }

    /// The next unused step number for `stage`.
    pub fn next_step(&self, stage: Stage) -> u64 {
        match self.last {
            Some((s, step)) if s == stage => step + 1,
            _ => 0,
        }
    }

    pub fn last(&self) -> Option<(Stage, u64)> {
        self.last
    }
}

impl MetricsSink for MetricsWriter {
    fn emit(&mut self, row: MetricsRow) -> Result<()> {
        let key = (row.stage, row.step);
        if let Some(prev) = self.last {
            if key <= prev {
                return Err(Error::SchemaDrift(format!(
                    "{}: row (stage {}, step {}) does not follow (stage {}, step {})",
                    self.path.display(),
                    row.stage,
                    row.step,
                    prev.0,
                    prev.1
                )));
            }
        }
        writeln!(self.file, "{}", row.to_csv()).map_err(|e| Error::io(&self.path, e))?;
        self.last = Some(key);
        Ok(())
    }
}

/// Drop the rows of `stage` and every later stage so that stage can be
/// re-run. A missing file is left missing.
pub fn truncate_from(path: &Path, stage: Stage) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut text = format!("{HEADER}\n");
    for row in read_metrics(path)?.into_iter().filter(|r| r.stage < stage) {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => {
            return Err(Error::SchemaDrift(format!(
                "{}: header `{}` differs from `{HEADER}`",
                path.display(),
                other.unwrap_or("")
            )))
        }
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::from_csv).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_run_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        MetricsWriter::open(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), format!("{HEADER}\n"));
    }

    #[test]
    fn rows_round_trip_and_eval_rows_have_blank_loss() {
        let row = MetricsRow {
            mean_normalized_score: Some(42.5),
            ..MetricsRow::new(Stage::Eval, 3, 7)
        };
        assert_eq!(row.to_csv(), "3,eval,,,,,42.5,7");
        assert_eq!(MetricsRow::from_csv(&row.to_csv()).unwrap(), row);
        let train = MetricsRow {
            loss: Some(0.125),
            expert_id: Some(2),
            ..MetricsRow::new(Stage::Experts, 10, 1)
        }
        .with_similarity(Some(0.75));
        assert_eq!(train.to_csv(), "10,2,0.125,0.75,0.25,2,,1");
    }

    #[test]
    fn ordering_is_enforced_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut w = MetricsWriter::open(&p).unwrap();
        w.emit(MetricsRow::new(Stage::Backbone, 5, 0)).unwrap();
        assert!(w.emit(MetricsRow::new(Stage::Backbone, 5, 0)).is_err());
        w.emit(MetricsRow::new(Stage::Experts, 1, 0)).unwrap();
        drop(w);
        let mut w = MetricsWriter::open(&p).unwrap();
        assert!(w.emit(MetricsRow::new(Stage::Backbone, 9, 0)).is_err());
        assert_eq!(w.next_step(Stage::Experts), 2);
        w.emit(MetricsRow::new(Stage::Eval, 0, 0)).unwrap();
        assert_eq!(read_metrics(&p).unwrap().len(), 3);
    }

    #[test]
    fn truncation_keeps_earlier_stages() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut w = MetricsWriter::open(&p).unwrap();
        for stage in [Stage::Backbone, Stage::Experts, Stage::Router, Stage::Eval] {
            w.emit(MetricsRow::new(stage, 1, 0)).unwrap();
        }
        drop(w);
        truncate_from(&p, Stage::Experts).unwrap();
        let rows = read_metrics(&p).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].stage, Stage::Backbone);
        MetricsWriter::open(&p).unwrap().emit(MetricsRow::new(Stage::Experts, 0, 0)).unwrap();
    }

    #[test]
    fn foreign_header_is_schema_drift() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "step,loss\n").unwrap();
        assert!(matches!(MetricsWriter::open(&p), Err(Error::SchemaDrift(_))));
    }
}
