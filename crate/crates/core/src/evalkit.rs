//! Interval metrics: IoU, R@1 at IoU thresholds and mIoU, plus report output.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::Interval;
use crate::error::{Error, Result};

pub const EVAL_VERSION: &str = "cu-eval/1";
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// `|a ∩ b| / |a ∪ b|`, zero when the union is empty.
pub fn iou(a: &Interval, b: &Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.end.max(b.end) - a.start.min(b.start);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tag: String,
    pub thresholds: Vec<f64>,
    /// percent of samples with IoU strictly above each threshold
    pub recall: Vec<f64>,
    /// percent
    pub miou: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn recall_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.recall[i])
    }
}

/// Scores `preds` against `gts`. Every prediction needs a ground truth.
pub fn evaluate(
    preds: &[(String, Interval)],
    gts: &[(String, Interval)],
    thresholds: &[f64],
    tag: &str,
) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Invalid("no predictions to evaluate".into()));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::Config(format!("thresholds must lie in (0, 1): {thresholds:?}")));
    }
    let gt: HashMap<&str, &Interval> = gts.iter().map(|(id, iv)| (id.as_str(), iv)).collect();
    let mut hits = vec![0usize; thresholds.len()];
    let mut total = 0.0;
    for (id, pred) in preds {
        let g = gt
            .get(id.as_str())
            .ok_or_else(|| Error::Invalid(format!("no ground truth for `{id}`")))?;
        let v = iou(pred, g);
        total += v;
        for (h, &t) in hits.iter_mut().zip(thresholds) {
            if v > t {
                *h += 1;
            }
        }
    }
    let n = preds.len();
    Ok(EvalReport {
        tag: tag.to_owned(),
        thresholds: thresholds.to_vec(),
        recall: hits.iter().map(|&h| 100.0 * h as f64 / n as f64).collect(),
        miou: 100.0 * total / n as f64,
        n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Records,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Self::Table),
            "records" => Ok(Self::Records),
            other => Err(Error::Invalid(format!(
                "unknown report format `{other}` (expected table or records)"
            ))),
        }
    }
}

fn fmt_threshold(t: f64) -> String {
    format!("R@{t}")
}

/// Fixed-width table with one row per report, percentages to 2 decimals.
pub fn render_table(reports: &[EvalReport]) -> Result<String> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Invalid("no reports to emit".into()))?;
    if reports.iter().any(|r| r.thresholds != first.thresholds) {
        return Err(Error::Invalid("table rows must share thresholds".into()));
    }
    let width = reports.iter().map(|r| r.tag.len()).max().unwrap_or(0).max(3);
    let mut out = format!("{:<width$}", "tag");
    for &t in &first.thresholds {
        write!(out, " {:>8}", fmt_threshold(t)).expect("string write");
    }
    out.push_str(&format!(" {:>8} {:>6}\n", "mIoU", "n"));
    for r in reports {
        write!(out, "{:<width$}", r.tag).expect("string write");
        for v in &r.recall {
            write!(out, " {v:>8.2}").expect("string write");
        }
        writeln!(out, " {:>8.2} {:>6}", r.miou, r.n).expect("string write");
    }
    Ok(out)
}

/// `cu-eval/1` lines: `tag threshold value`, `tag miou value`, `tag n count`.
pub fn render_records(reports: &[EvalReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Invalid("no reports to emit".into()));
    }
    let mut out = format!("{EVAL_VERSION}\n");
    for r in reports {
        if r.tag.is_empty() || r.tag.contains(char::is_whitespace) {
            return Err(Error::Invalid(format!("report tag `{}` must be one non-empty word", r.tag)));
        }
        for (t, v) in r.thresholds.iter().zip(&r.recall) {
            writeln!(out, "{} {t} {v}", r.tag).expect("string write");
        }
        writeln!(out, "{} miou {}", r.tag, r.miou).expect("string write");
        writeln!(out, "{} n {}", r.tag, r.n).expect("string write");
    }
    Ok(out)
}

/// Inverse of [`render_records`]; reports come back in first-seen tag order.
pub fn parse_records(text: &str, origin: &Path) -> Result<Vec<EvalReport>> {
    let mut lines = text.lines();
    if lines.next() != Some(EVAL_VERSION) {
        return Err(Error::format(origin, format!("missing `{EVAL_VERSION}` header")));
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let bad = || Error::format(origin, format!("malformed record `{line}`"));
        let mut parts = line.split_whitespace();
        let (Some(tag), Some(key), Some(value), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let idx = match reports.iter().position(|r| r.tag == tag) {
            Some(i) => i,
            None => {
                reports.push(EvalReport {
                    tag: tag.to_owned(),
                    thresholds: Vec::new(),
                    recall: Vec::new(),
                    miou: f64::NAN,
                    n: 0,
                });
                reports.len() - 1
            }
        };
        let r = &mut reports[idx];
        match key {
            "miou" => r.miou = value.parse().map_err(|_| bad())?,
            "n" => r.n = value.parse().map_err(|_| bad())?,
            t => {
                r.thresholds.push(t.parse().map_err(|_| bad())?);
                r.recall.push(value.parse().map_err(|_| bad())?);
            }
        }
    }
    if let Some(r) = reports.iter().find(|r| r.miou.is_nan()) {
        return Err(Error::format(origin, format!("report `{}` has no miou record", r.tag)));
    }
    Ok(reports)
}

/// Writes `reports` to `path` in the chosen format.
pub fn emit_report(reports: &[EvalReport], format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Table => render_table(reports)?,
        ReportFormat::Records => render_records(reports)?,
    };
    crate::write_atomic(path, text.as_bytes())
}

pub fn load_records(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, path)
}
