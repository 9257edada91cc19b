//! Completion-rate and quality-gain measures over an interaction log.
//!
//! CR-family values are rates (divided by the number of timestamps);
//! QG-family values are raw cumulative sums.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::Minutes;
use crate::error::{Error, Result};

/// Base of the rank discount `1 / log(1 + r)`.
pub const LOG_BASE: f64 = 2.0;

/// Length of a reporting bucket: 30 days in minutes.
pub const MONTH_MINUTES: Minutes = 30 * 1440;

/// One recommendation and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub time: Minutes,
    /// Length of the shown list (1 in single-task mode).
    pub list_len: usize,
    /// 1-based rank of the completed task.
    pub completed_rank: Option<usize>,
    /// Quality gain of the completion (0 without one).
    pub gain: f64,
    pub pool_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub entries: Vec<Interaction>,
}

impl InteractionLog {
    pub fn push(&mut self, e: Interaction) {
        self.entries.push(e);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn completions(&self) -> usize {
        self.entries.iter().filter(|e| e.completed_rank.is_some()).count()
    }
}

pub fn discount(rank: usize) -> f64 {
    1.0 / (1.0 + rank as f64).log(LOG_BASE)
}

fn timestamps(log: &InteractionLog, what: &'static str) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::UndefinedMetric(what));
    }
    Ok(log.len() as f64)
}

fn sum_over<F: Fn(usize, f64) -> f64>(log: &InteractionLog, f: F) -> f64 {
    // `+ 0.0` turns the empty sum's -0.0 into 0.0.
    log.entries.iter().filter_map(|e| e.completed_rank.map(|r| f(r, e.gain))).sum::<f64>() + 0.0
}

pub fn cr(log: &InteractionLog) -> Result<f64> {
    let n = timestamps(log, "cr")?;
    Ok(sum_over(log, |_, _| 1.0) / n)
}

pub fn ndcg_cr(log: &InteractionLog) -> Result<f64> {
    let n = timestamps(log, "ndcg_cr")?;
    Ok(sum_over(log, |r, _| discount(r)) / n)
}

pub fn kcr(log: &InteractionLog, k: usize) -> Result<f64> {
    let n = timestamps(log, "kcr")?;
    Ok(sum_over(log, |r, _| if r <= k { discount(r) } else { 0.0 }) / n)
}

pub fn qg(log: &InteractionLog) -> f64 {
    sum_over(log, |_, g| g)
}

pub fn ndcg_qg(log: &InteractionLog) -> f64 {
    sum_over(log, |r, g| g * discount(r))
}

pub fn kqg(log: &InteractionLog, k: usize) -> f64 {
    sum_over(log, |r, g| if r <= k { g * discount(r) } else { 0.0 })
}

/// All six measures for one slice of the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Bucket index from the stream start, or `all`.
    pub month: String,
    pub policy: String,
    pub cr: f64,
    pub kcr: f64,
    pub ndcg_cr: f64,
    pub qg: f64,
    pub kqg: f64,
    pub ndcg_qg: f64,
}

impl MetricsRow {
    pub fn compute(log: &InteractionLog, month: impl Into<String>, policy: &str, k: usize) -> Result<Self> {
        Ok(Self {
            month: month.into(),
            policy: policy.to_string(),
            cr: cr(log)?,
            kcr: kcr(log, k)?,
            ndcg_cr: ndcg_cr(log)?,
            qg: qg(log),
            kqg: kqg(log, k),
            ndcg_qg: ndcg_qg(log),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

pub const CSV_HEADER: &str = "month,policy,cr,kcr,ndcg_cr,qg,kqg,ndcg_qg";

impl MetricsReport {
    /// The cumulative row.
    pub fn total(&self) -> &MetricsRow {
        self.rows.last().expect("report always has a cumulative row")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        self.append_rows(&mut s);
        s
    }

    /// Rows without the header, for concatenating several policies.
    pub fn append_rows(&self, s: &mut String) {
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{},{},{}", r.month, r.policy, r.cr, r.kcr, r.ndcg_cr, r.qg, r.kqg, r.ndcg_qg);
        }
    }
}

/// Per-30-day-bucket rows counted from `start`, then a cumulative `all`
/// row. Empty buckets are skipped.
pub fn report(log: &InteractionLog, policy: &str, start: Minutes, k: usize) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    let mut bucket = InteractionLog::default();
    let mut current = None;
    for e in &log.entries {
        let m = (e.time - start).div_euclid(MONTH_MINUTES);
        if current != Some(m) {
            if let Some(prev) = current {
                rows.push(MetricsRow::compute(&bucket, prev.to_string(), policy, k)?);
            }
            bucket.entries.clear();
            current = Some(m);
        }
        bucket.push(e.clone());
    }
    if let Some(prev) = current {
        rows.push(MetricsRow::compute(&bucket, prev.to_string(), policy, k)?);
    }
    rows.push(MetricsRow::compute(log, "all", policy, k)?);
    Ok(MetricsReport { rows })
}
