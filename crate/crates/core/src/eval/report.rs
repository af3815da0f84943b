use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

/// One scalar result with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub metric: String,
    pub split: String,
    pub value: f64,
    pub params: BTreeMap<String, String>,
}

/// Ordered metric records, written as TSV or JSON lines.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub records: Vec<MetricRecord>,
}

pub const REPORT_HEADER: &str = "metric\tsplit\tvalue\tparams";

impl EvalReport {
    pub fn push(&mut self, metric: &str, split: &str, value: f64, params: &[(&str, String)]) {
        self.records.push(MetricRecord {
            metric: metric.to_string(),
            split: split.to_string(),
            value,
            params: params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.records.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    /// Params render as `k=v` pairs joined by `,`.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.records {
            let params: Vec<String> = r.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{}", r.metric, r.split, r.value, params.join(","));
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("metric records serialize") + "\n")
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_and_jsonl() {
        let mut r = EvalReport::default();
        r.push("top1", "eval", 0.5, &[("frames", "8".into())]);
        assert_eq!(r.to_tsv(), "metric\tsplit\tvalue\tparams\ntop1\teval\t0.500000\tframes=8\n");
        let line: serde_json::Value = serde_json::from_str(r.to_jsonl().trim()).unwrap();
        assert_eq!(line["params"]["frames"], "8");
        assert_eq!(r.get("top1"), Some(0.5));
    }
}
