//! Markdown and CSV rendering of result documents.

use std::fmt::Write as _;
use std::str::FromStr;

use serde_json::Value;
use thiserror::Error;

use crate::retrieval::{reports_to_csv, RetrievalReport};
use crate::validate::ValidationReport;

pub const KIND_RETRIEVAL: &str = "retrieval";
pub const KIND_VALIDATION: &str = "validation";

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("unknown report format `{0}` (expected markdown or csv)")]
    UnknownFormat(String),
    #[error("malformed result document: {0}")]
    Malformed(String),
    #[error("{0} documents have no {1} rendering")]
    Unsupported(String, &'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            _ => Err(ReportError::UnknownFormat(s.into())),
        }
    }
}

fn field<'a>(doc: &'a Value, key: &str) -> Result<&'a Value, ReportError> {
    doc.get(key).ok_or_else(|| ReportError::Malformed(format!("missing `{key}`")))
}

fn parse<T: serde::de::DeserializeOwned>(v: &Value, what: &str) -> Result<T, ReportError> {
    serde_json::from_value(v.clone()).map_err(|e| ReportError::Malformed(format!("{what}: {e}")))
}

/// Renders a result document; the output depends only on the document.
pub fn render_report(doc: &Value, format: ReportFormat) -> Result<String, ReportError> {
    let kind = field(doc, "kind")?
        .as_str()
        .ok_or_else(|| ReportError::Malformed("`kind` must be a string".into()))?;
    match kind {
        KIND_RETRIEVAL => {
            let reports: Vec<RetrievalReport> = parse(field(doc, "reports")?, "reports")?;
            Ok(match format {
                ReportFormat::Markdown => retrieval_markdown(&reports),
                ReportFormat::Csv => reports_to_csv(&reports),
            })
        }
        KIND_VALIDATION => {
            let report: ValidationReport = parse(field(doc, "report")?, "report")?;
            Ok(match format {
                ReportFormat::Markdown => validation_markdown(&report),
                ReportFormat::Csv => validation_csv(&report),
            })
        }
        other => match format {
            ReportFormat::Markdown => Ok(generic_markdown(other, doc)),
            ReportFormat::Csv => Err(ReportError::Unsupported(other.into(), "csv")),
        },
    }
}

pub fn retrieval_markdown(reports: &[RetrievalReport]) -> String {
    let mut out = String::from("| Task | N | R@1 | R@5 | R@10 | mAP |\n|---|---:|---:|---:|---:|---:|\n");
    for r in reports {
        let _ = writeln!(out, "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |", r.task, r.n, r.r1, r.r5, r.r10, r.map);
    }
    out
}

pub fn validation_markdown(r: &ValidationReport) -> String {
    let mut rows: Vec<(&str, String)> = Vec::new();
    let f = |v: f64| format!("{v:.4}");
    if let Some(l1) = &r.layer1 {
        rows.push(("MAE", f(l1.mae)));
        rows.push(("MSE", f(l1.mse)));
        rows.push(("Expert Similarity", f(l1.expert_similarity)));
    }
    if let Some(l2) = &r.layer2 {
        rows.push(("Action Diff Mean", f(l2.action_diff_mean)));
        rows.push(("Jerk Mean", f(l2.jerk_mean)));
        rows.push(("Smoothness Score", f(l2.smoothness_score)));
    }
    if let Some(l3) = &r.layer3 {
        rows.push(("Final Error", f(l3.final_error)));
        rows.push(("Error Growth", f(l3.error_growth)));
    }
    if let Some(l4) = &r.layer4 {
        rows.push(("Mean Variance", format!("{:.6}", l4.mean_variance)));
        rows.push(("Consistency", l4.classification.to_string()));
    }
    if let Some(s) = &r.score {
        rows.push(("Overall Score", f(s.overall)));
        rows.push(("Grade", format!("{:?}", s.grade)));
    }
    let mut out = format!("| Metric | {} |\n|---|---:|\n", r.policy);
    for (name, value) in rows {
        let _ = writeln!(out, "| {name} | {value} |");
    }
    out
}

/// The rollout error curve when present, otherwise per-dimension statistics.
pub fn validation_csv(r: &ValidationReport) -> String {
    let mut out = String::new();
    if let Some(l3) = &r.layer3 {
        out.push_str("t,E_t\n");
        for (t, e) in l3.error_curve.iter().enumerate() {
            let _ = writeln!(out, "{t},{e}");
        }
        return out;
    }
    out.push_str("dim,mae,mean,std,variance\n");
    let dims = [
        r.layer1.as_ref().map(|l| l.per_dim_mae.len()),
        r.layer2.as_ref().map(|l| l.mean.len()),
        r.layer4.as_ref().map(|l| l.per_dim_variance.len()),
    ]
    .into_iter()
    .flatten()
    .max()
    .unwrap_or(0);
    let cell = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for d in 0..dims {
        let _ = writeln!(
            out,
            "{d},{},{},{},{}",
            cell(r.layer1.as_ref().and_then(|l| l.per_dim_mae.get(d))),
            cell(r.layer2.as_ref().and_then(|l| l.mean.get(d))),
            cell(r.layer2.as_ref().and_then(|l| l.std.get(d))),
            cell(r.layer4.as_ref().and_then(|l| l.per_dim_variance.get(d))),
        );
    }
    out
}

fn generic_markdown(kind: &str, doc: &Value) -> String {
    let mut out = format!("## {kind}\n\n| Field | Value |\n|---|---|\n");
    if let Some(map) = doc.as_object() {
        for (k, v) in map {
            if k == "kind" {
                continue;
            }
            let shown = match v {
                Value::String(s) => s.clone(),
                Value::Array(a) => format!("{} items", a.len()),
                Value::Object(o) => format!("{} fields", o.len()),
                other => other.to_string(),
            };
            let _ = writeln!(out, "| {k} | {shown} |");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::chance_baseline;
    use crate::validate::{linear_expert_demo, validate, ReplayExpert, ValidationConfig};
    use serde_json::json;

    #[test]
    fn retrieval_markdown_has_metric_columns() {
        let doc = json!({"kind": "retrieval", "reports": [chance_baseline(100)]});
        let md = render_report(&doc, ReportFormat::Markdown).unwrap();
        let header = md.lines().next().unwrap();
        for col in ["R@1", "R@5", "R@10", "mAP"] {
            assert!(header.contains(col));
        }
        assert!(md.contains("| chance | 100 | 1.0000 | 5.0000 | 10.0000 | 5.1874 |"));
        let csv = render_report(&doc, ReportFormat::Csv).unwrap();
        assert!(csv.starts_with("task,N,r1,r5,r10,map\n"));
    }

    #[test]
    fn layer3_csv_series() {
        let demos = vec![linear_expert_demo("a", 40)];
        let report = validate(&mut ReplayExpert::new(&demos), &demos, &ValidationConfig { n_samples: 20, horizon: 5, ..Default::default() }).unwrap();
        let doc = json!({"kind": "validation", "report": report});
        let csv = render_report(&doc, ReportFormat::Csv).unwrap();
        assert_eq!(csv, "t,E_t\n0,0\n1,0\n2,0\n3,0\n4,0\n5,0\n");
        let md = render_report(&doc, ReportFormat::Markdown).unwrap();
        assert!(md.contains("| Overall Score | 1.0000 |"));
        // rendering is a pure function of the serialized document
        let reparsed: Value = serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
        assert_eq!(render_report(&reparsed, ReportFormat::Markdown).unwrap(), md);
    }

    #[test]
    fn bad_inputs() {
        assert_eq!("pdf".parse::<ReportFormat>(), Err(ReportError::UnknownFormat("pdf".into())));
        assert!(matches!(render_report(&json!({"reports": []}), ReportFormat::Csv), Err(ReportError::Malformed(_))));
        assert!(matches!(
            render_report(&json!({"kind": "retrieval", "reports": [{"task": 3}]}), ReportFormat::Markdown),
            Err(ReportError::Malformed(_))
        ));
        assert!(render_report(&json!({"kind": "scan", "events": 3}), ReportFormat::Markdown).unwrap().contains("| events | 3 |"));
        assert!(matches!(render_report(&json!({"kind": "scan"}), ReportFormat::Csv), Err(ReportError::Unsupported(..))));
    }
}
