use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::HotaResult;

pub const REPORT_COLUMNS: [&str; 8] = ["HOTA", "DetA", "AssA", "DetRe", "DetPr", "AssRe", "AssPr", "LocA"];

/// Header printed above every text report.
pub const REPORT_NOTE: &str = "\
# Approximate HOTA: frames are matched independently at each alpha by maximum-cardinality,
# maximum-IoU assignment instead of the reference two-pass global alignment.
# All components, LocA included, are averaged over alpha in {0.05, ..., 0.95}.
# Values in percent.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionResult {
    pub sequence_id: String,
    pub expression_id: String,
    /// No prediction file was found; scored as an empty prediction.
    pub missing: bool,
    pub result: HotaResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub entries: Vec<ExpressionResult>,
    /// Mean over entries; `None` when there are none.
    pub aggregate: Option<HotaResult>,
}

fn metric_object(r: &HotaResult) -> serde_json::Map<String, serde_json::Value> {
    REPORT_COLUMNS
        .iter()
        .zip(r.columns())
        .map(|(k, v)| (k.to_string(), json!(v)))
        .collect()
}

impl BenchmarkReport {
    pub fn new(entries: Vec<ExpressionResult>) -> Self {
        let results: Vec<HotaResult> = entries.iter().map(|e| e.result.clone()).collect();
        Self {
            aggregate: HotaResult::mean(&results),
            entries,
        }
    }

    pub fn n_missing(&self) -> usize {
        self.entries.iter().filter(|e| e.missing).count()
    }

    /// Aligned table, one row per expression plus the aggregate.
    pub fn to_text(&self) -> String {
        let name = |e: &ExpressionResult| format!("{}/{}", e.sequence_id, e.expression_id);
        let width = self
            .entries
            .iter()
            .map(|e| name(e).len())
            .chain(["expression".len(), "aggregate".len()])
            .max()
            .unwrap_or(0);
        let mut s = String::new();
        s.push_str(REPORT_NOTE);
        s.push('\n');
        let _ = write!(s, "{:<width$}", "expression");
        for c in REPORT_COLUMNS {
            let _ = write!(s, " {c:>7}");
        }
        s.push('\n');
        let row = |s: &mut String, label: &str, r: &HotaResult, flag: &str| {
            let _ = write!(s, "{label:<width$}");
            for v in r.columns() {
                let _ = write!(s, " {:>7.2}", 100.0 * v);
            }
            let _ = writeln!(s, "{flag}");
        };
        for e in &self.entries {
            row(&mut s, &name(e), &e.result, if e.missing { "  [missing]" } else { "" });
        }
        match &self.aggregate {
            Some(a) => row(&mut s, "aggregate", a, ""),
            None => s.push_str("aggregate: no expressions\n"),
        }
        let missing = self.n_missing();
        if missing > 0 {
            let _ = writeln!(s, "# {missing} prediction file(s) missing, scored as empty");
        }
        s
    }

    /// One JSON object per expression, then the aggregate. Metrics are
    /// fractions in `[0, 1]`.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let mut obj = metric_object(&e.result);
            obj.insert("sequence".into(), json!(e.sequence_id));
            obj.insert("expression".into(), json!(e.expression_id));
            obj.insert("missing".into(), json!(e.missing));
            s.push_str(&serde_json::Value::Object(obj).to_string());
            s.push('\n');
        }
        let mut obj = match &self.aggregate {
            Some(a) => metric_object(a),
            None => Default::default(),
        };
        obj.insert("aggregate".into(), json!(true));
        obj.insert("count".into(), json!(self.entries.len()));
        obj.insert("missing".into(), json!(self.n_missing()));
        s.push_str(&serde_json::Value::Object(obj).to_string());
        s.push('\n');
        s
    }
}
