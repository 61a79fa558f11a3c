use std::fmt::Write;

use super::metrics::{Prf, RankingMetrics};
use crate::error::{Error, Result};

/// Named metric values plus run metadata, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub task: String,
    pub meta: Vec<(String, String)>,
    pub values: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            ..Self::default()
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.push((key.into(), value.to_string()));
        self
    }

    pub fn push(&mut self, key: impl Into<String>, value: f64) {
        self.values.push((key.into(), value));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    pub fn ranking(task: &str, m: &RankingMetrics) -> Self {
        let mut r = Self::new(task).with_meta("protocol", "filtered");
        r.push("mr", m.mr);
        r.push("mrr", m.mrr);
        r.push("hits@1", m.hits1);
        r.push("hits@3", m.hits3);
        r.push("hits@10", m.hits10);
        r.push("queries", m.queries as f64);
        r
    }

    pub fn prf(task: &str, p: &Prf) -> Self {
        let mut r = Self::new(task);
        r.push("precision", p.precision);
        r.push("recall", p.recall);
        r.push("f1", p.f1);
        r
    }

    /// `key=value` lines: `task`, metadata, then metrics.
    pub fn to_kv(&self) -> String {
        let mut out = format!("task={}\n", self.task);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "{k}={v}");
        }
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn tsv_header(&self) -> String {
        self.values.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join("\t")
    }

    pub fn tsv_row(&self) -> String {
        self.values.iter().map(|(_, v)| v.to_string()).collect::<Vec<_>>().join("\t")
    }

    /// Element-wise mean of reports sharing the same metric keys.
    pub fn average(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Input("no reports to average".into()))?;
        let mut out = Self::new(first.task.clone()).with_meta("runs", reports.len());
        for (i, (k, _)) in first.values.iter().enumerate() {
            let mut sum = 0.0;
            for r in reports {
                match r.values.get(i) {
                    Some((rk, v)) if rk == k => sum += v,
                    _ => return Err(Error::Input(format!("reports disagree on metric `{k}`"))),
                }
            }
            out.push(k.clone(), sum / reports.len() as f64);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_and_tsv() {
        let r = MetricsReport::prf("re", &Prf::from_counts(1, 1, 0)).with_meta("seed", 3);
        let kv = r.to_kv();
        assert!(kv.starts_with("task=re\nseed=3\nprecision=0.5\n"));
        assert_eq!(r.tsv_header(), "precision\trecall\tf1");
        assert_eq!(r.get("recall"), Some(1.0));
    }

    #[test]
    fn averaging() {
        let a = MetricsReport::prf("re", &Prf::from_counts(1, 0, 0));
        let b = MetricsReport::prf("re", &Prf::from_counts(0, 1, 1));
        let m = MetricsReport::average(&[a.clone(), b]).unwrap();
        assert_eq!(m.get("f1"), Some(0.5));
        let link = MetricsReport::ranking("link", &RankingMetrics::from_ranks(&[1]).unwrap());
        assert!(MetricsReport::average(&[a, link]).is_err());
        assert!(MetricsReport::average(&[]).is_err());
    }
}
