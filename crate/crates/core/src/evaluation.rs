//! Classification and midline metrics, with clear/obstructed breakdowns.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::class::LightClass;
use crate::error::{Error, Result};
use crate::training::Endpoints;

/// One evaluated frame. Endpoints are normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub predicted: LightClass,
    pub actual: LightClass,
    pub predicted_endpoints: Endpoints,
    /// `None` for frames without a crossing; they count towards class
    /// metrics only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual_endpoints: Option<Endpoints>,
    #[serde(default)]
    pub obstructed: bool,
}

pub fn parse_records(text: &str) -> Result<Vec<EvalRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .enumerate()
        .map(|(index, (line_no, line))| {
            serde_json::from_str(line).map_err(|e| Error::Record {
                index,
                message: format!("line {}: {e}", line_no + 1),
            })
        })
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text)
}

pub fn records_to_jsonl(records: &[EvalRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

/// `m[actual][predicted]`.
pub fn confusion_matrix(records: &[EvalRecord]) -> [[usize; 5]; 5] {
    let mut m = [[0; 5]; 5];
    for r in records {
        m[r.actual.index()][r.predicted.index()] += 1;
    }
    m
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no records"));
    }
    let m = confusion_matrix(records);
    let trace: usize = (0..5).map(|i| m[i][i]).sum();
    Ok(trace as f64 / records.len() as f64)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: LightClass,
    /// Records whose true class is this one.
    pub support: usize,
    /// Records predicted as this class.
    pub predicted: usize,
    /// Undefined when nothing was predicted as this class.
    pub precision: Option<f64>,
    /// Undefined when the class has no support.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// One-vs-rest precision, recall and F1 for each class.
pub fn precision_recall_f1(records: &[EvalRecord]) -> Result<Vec<ClassMetrics>> {
    if records.is_empty() {
        return Err(Error::invalid("no records"));
    }
    let m = confusion_matrix(records);
    Ok(LightClass::ALL
        .into_iter()
        .map(|class| {
            let i = class.index();
            let tp = m[i][i];
            let support: usize = m[i].iter().sum();
            let predicted: usize = m.iter().map(|row| row[i]).sum();
            let precision = (predicted > 0).then(|| tp as f64 / predicted as f64);
            let recall = (support > 0).then(|| tp as f64 / support as f64);
            let f1 = precision.zip(recall).map(|(p, r)| f1_score(p, r));
            ClassMetrics {
                class,
                support,
                predicted,
                precision,
                recall,
                f1,
            }
        })
        .collect())
}

/// Angle in degrees between two midlines treated as undirected lines, in
/// `[0, 90]`.
pub fn angle_error(predicted: &Endpoints, actual: &Endpoints) -> Result<f64> {
    let dir = |e: &Endpoints| {
        let (dx, dy) = (e.x2 - e.x1, e.y2 - e.y1);
        let n = dx.hypot(dy);
        if n == 0.0 {
            Err(Error::ZeroLengthDirection)
        } else {
            Ok((dx / n, dy / n))
        }
    };
    let (a, b) = (dir(predicted)?, dir(actual)?);
    let cos = (a.0 * b.0 + a.1 * b.1).abs().min(1.0);
    Ok(cos.acos().to_degrees())
}

/// Euclidean distance between start points and between end points.
pub fn endpoint_errors(predicted: &Endpoints, actual: &Endpoints) -> (f64, f64) {
    (
        (predicted.x1 - actual.x1).hypot(predicted.y1 - actual.y1),
        (predicted.x2 - actual.x2).hypot(predicted.y2 - actual.y2),
    )
}

/// Metrics over one subset of records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub accuracy: f64,
    pub classes: Vec<ClassMetrics>,
    /// Records with a true midline, over which the errors below are means.
    pub midline_count: usize,
    pub angle_error: Option<f64>,
    pub start_error: Option<f64>,
    pub end_error: Option<f64>,
}

pub fn summarize(records: &[EvalRecord]) -> Result<Summary> {
    let classes = precision_recall_f1(records)?;
    let mut angles = 0.0;
    let mut starts = 0.0;
    let mut ends = 0.0;
    let mut n = 0usize;
    for (index, r) in records.iter().enumerate() {
        let Some(actual) = &r.actual_endpoints else { continue };
        angles += angle_error(&r.predicted_endpoints, actual).map_err(|e| Error::Record {
            index,
            message: e.to_string(),
        })?;
        let (s, e) = endpoint_errors(&r.predicted_endpoints, actual);
        starts += s;
        ends += e;
        n += 1;
    }
    let mean = |total: f64| (n > 0).then(|| total / n as f64);
    Ok(Summary {
        count: records.len(),
        accuracy: accuracy(records)?,
        classes,
        midline_count: n,
        angle_error: mean(angles),
        start_error: mean(starts),
        end_error: mean(ends),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "json" => Ok(Self::Json),
            other => Err(Error::invalid(format!("unknown report format {other:?} (expected text or json)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub all: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clear: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obstructed: Option<Summary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub fn report(records: &[EvalRecord]) -> Result<Report> {
    let all = summarize(records)?;
    let (obstructed, clear): (Vec<EvalRecord>, Vec<EvalRecord>) = records.iter().cloned().partition(|r| r.obstructed);
    let mut notes = Vec::new();
    let mut subset = |name: &str, set: &[EvalRecord]| -> Result<Option<Summary>> {
        if set.is_empty() {
            notes.push(format!("no {name} records; {name} row omitted"));
            Ok(None)
        } else {
            summarize(set).map(Some)
        }
    };
    let clear = subset("clear", &clear)?;
    let obstructed = subset("obstructed", &obstructed)?;
    Ok(Report {
        all,
        clear,
        obstructed,
        notes,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", v * 100.0))
}

fn fixed(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

impl Report {
    /// Rows present in the report, labelled.
    pub fn rows(&self) -> Vec<(&'static str, &Summary)> {
        let mut rows = Vec::new();
        if let Some(s) = &self.clear {
            rows.push(("clear", s));
        }
        if let Some(s) = &self.obstructed {
            rows.push(("obstructed", s));
        }
        rows.push(("all", &self.all));
        rows
    }

    /// Aligned tables: percentages to two decimals, normalized errors to four,
    /// angles to two.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>10} {:>12} {:>13} {:>11}",
            "subset", "count", "accuracy", "angle (deg)", "start error", "end error"
        );
        for (name, s) in self.rows() {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>10} {:>12} {:>13} {:>11}",
                name,
                s.count,
                pct(Some(s.accuracy)),
                fixed(s.angle_error, 2),
                fixed(s.start_error, 4),
                fixed(s.end_error, 4)
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>10} {:>10} {:>8}",
            "class", "support", "precision", "recall", "f1"
        );
        for c in &self.all.classes {
            let _ = writeln!(
                out,
                "{:<16} {:>8} {:>10} {:>10} {:>8}",
                c.class.name(),
                c.support,
                pct(c.precision),
                pct(c.recall),
                pct(c.f1)
            );
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Text => self.to_text(),
            ReportFormat::Json => self.to_json(),
        }
    }
}
