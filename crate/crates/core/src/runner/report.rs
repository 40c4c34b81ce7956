//! Scenario reports: one row per evaluated model, written as an aggregate
//! CSV, one JSON document per checkpoint and a plain-text summary table.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::eval::EvalReport;

/// Outcome of the run that produced a row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Diverged,
}

/// Identifies one evaluated model inside a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub seed: u64,
    pub method: String,
    /// Free-form qualifier such as `unlearned` or `relearned`.
    pub phase: String,
    pub stage: Option<usize>,
    pub epoch: Option<usize>,
    pub alpha: Option<f64>,
    pub eta: Option<f64>,
    pub beta: Option<f64>,
    pub forget_ratio: f64,
    pub status: RowStatus,
    /// Checkpoint path relative to the scenario directory; empty when the
    /// row was not persisted.
    pub checkpoint: String,
    pub metrics: Option<EvalReport>,
}

impl ReportRow {
    pub fn new(scenario: &str, seed: u64, method: &str, forget_ratio: f64) -> Self {
        Self {
            scenario: scenario.to_string(),
            seed,
            method: method.to_string(),
            phase: String::new(),
            stage: None,
            epoch: None,
            alpha: None,
            eta: None,
            beta: None,
            forget_ratio,
            status: RowStatus::Ok,
            checkpoint: String::new(),
            metrics: None,
        }
    }

    pub fn metric(&self) -> &EvalReport {
        self.metrics.as_ref().expect("row was evaluated")
    }

    /// Identifier used for checkpoint and JSON file names.
    pub fn slug(&self) -> String {
        let mut s = format!("{}-s{}", self.method.to_lowercase(), self.seed);
        if !self.phase.is_empty() {
            s.push_str(&format!("-{}", self.phase));
        }
        for (tag, v) in [("stage", self.stage), ("ep", self.epoch)] {
            if let Some(v) = v {
                s.push_str(&format!("-{tag}{v}"));
            }
        }
        for (tag, v) in [("a", self.alpha), ("eta", self.eta), ("b", self.beta)] {
            if let Some(v) = v {
                s.push_str(&format!("-{tag}{v}"));
            }
        }
        s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
    }
}

pub const KEY_COLUMNS: [&str; 12] =
    ["scenario", "seed", "method", "phase", "stage", "epoch", "alpha", "eta", "beta", "forget_ratio", "status", "checkpoint"];

pub fn columns() -> Vec<&'static str> {
    KEY_COLUMNS.iter().chain(EvalReport::COLUMNS.iter()).copied().collect()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_aggregate_csv<W: Write>(rows: &[ReportRow], w: W) -> Result<()> {
    let err = |e: csv::Error| Error::Serde(e.to_string());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(columns()).map_err(err)?;
    for r in rows {
        let mut rec = vec![
            r.scenario.clone(),
            r.seed.to_string(),
            r.method.clone(),
            r.phase.clone(),
            opt(r.stage),
            opt(r.epoch),
            opt(r.alpha),
            opt(r.eta),
            opt(r.beta),
            r.forget_ratio.to_string(),
            serde_json::to_value(r.status)?.as_str().unwrap_or_default().to_string(),
            r.checkpoint.clone(),
        ];
        match &r.metrics {
            Some(m) => rec.extend(m.values().iter().map(|v| v.to_string())),
            None => rec.extend(EvalReport::COLUMNS.iter().map(|_| String::new())),
        }
        out.write_record(&rec).map_err(err)?;
    }
    out.flush().map_err(|e| Error::Serde(e.to_string()))
}

pub fn save_aggregate_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_aggregate_csv(rows, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn save_row_json(row: &ReportRow, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(row)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Fixed-width text table of the headline metrics.
pub fn summary_table(rows: &[ReportRow]) -> String {
    let mut out = format!(
        "{:<22} {:>4} {:>10} {:>6} {:>6} {:>6} {:>10} {:>7} {:>7} {:>7} {:>7}\n",
        "method", "seed", "phase", "stage", "epoch", "alpha", "fq", "mu", "f_rl", "r_rl", "held_u"
    );
    let num = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "-".into());
    for r in rows {
        let phase = if r.phase.is_empty() { "-" } else { &r.phase };
        out.push_str(&format!(
            "{:<22} {:>4} {:>10} {:>6} {:>6} {:>6} ",
            r.method,
            r.seed,
            phase,
            r.stage.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
            r.epoch.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
            num(r.alpha.or(r.eta).or(r.beta)),
        ));
        match &r.metrics {
            Some(m) => out.push_str(&format!(
                "{:>10.3e} {:>7.3} {:>7.3} {:>7.3} {:>7.3}\n",
                m.fq, m.mu, m.f_rl, m.r_rl, m.heldout_utility
            )),
            None => out.push_str(&format!("{:>10} {:>7} {:>7} {:>7} {:>7}\n", "diverged", "-", "-", "-", "-")),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(x: f64) -> EvalReport {
        let mut v = serde_json::to_value(EvalReport::COLUMNS.iter().map(|c| (c.to_string(), serde_json::Value::from(0.0))).collect::<serde_json::Map<_, _>>()).unwrap();
        v["fq"] = x.into();
        serde_json::from_value(v).unwrap()
    }

    #[test]
    fn empty_aggregate_has_header_only() {
        let mut buf = Vec::new();
        write_aggregate_csv(&[], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(text.trim_end().split(',').collect::<Vec<_>>(), columns());
    }

    #[test]
    fn rows_keep_column_order() {
        let mut r = ReportRow::new("mox_alpha_sweep", 0, "MOX", 0.1);
        r.alpha = Some(4.0);
        r.metrics = Some(report(0.25));
        let mut d = ReportRow::new("mox_alpha_sweep", 0, "GA", 0.1);
        d.status = RowStatus::Diverged;
        let mut buf = Vec::new();
        write_aggregate_csv(&[r.clone(), d], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields.len(), columns().len());
        assert_eq!(fields[6], "4");
        assert_eq!(fields[KEY_COLUMNS.len()], "0.25");
        assert!(lines[2].contains(",diverged,"));
        assert_eq!(r.slug(), "mox-s0-a4");
        let json: ReportRow = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(json, r);
        assert!(summary_table(&[r]).lines().nth(1).unwrap().starts_with("MOX"));
    }
}
