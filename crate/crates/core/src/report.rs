//! Report serialization: canonical JSON (sorted keys) and CSV.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::EvalReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

pub const CSV_HEADER: [&str; 10] = [
    "method",
    "kept",
    "kept_ratio",
    "dual_weight_rel_error",
    "dual_weight_rel_error_per_head",
    "attn_output_cosine",
    "attn_output_l2_rel",
    "oracle_iou",
    "wall_time_ms",
    "duplication_cells_evaluated",
];

/// Pretty JSON with object keys in lexicographic order.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value maps are BTreeMaps, so a round trip sorts the keys
    let tree = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&tree)? + "\n")
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn to_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for row in &report.rows {
        let per_head = row
            .dual_weight_rel_error
            .per_head
            .iter()
            .map(|&x| format_f64(x))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            row.method.clone(),
            row.kept.to_string(),
            format_f64(row.kept_ratio),
            format_f64(row.dual_weight_rel_error.mean),
            per_head,
            format_f64(row.attn_output_cosine),
            format_f64(row.attn_output_l2_rel),
            format_f64(row.oracle_iou),
            row.wall_time_ms.map(format_f64).unwrap_or_default(),
            row.duplication_cells_evaluated.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv: {e}")))
}

pub fn render(report: &EvalReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => to_canonical_json(report),
        ReportFormat::Csv => to_csv(report),
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = render(report, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!("unknown report format '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate, Candidate, EvalConfig, Method};
    use crate::synth::{generate_synthetic_batch, SynthSpec};

    fn report() -> EvalReport {
        let b = generate_synthetic_batch(&SynthSpec::default()).unwrap().batch;
        let cands = [Candidate::Builtin(Method::Iwp), Candidate::Builtin(Method::Random)];
        evaluate(&b, &cands, &EvalConfig::default(), 1).unwrap()
    }

    #[test]
    fn json_reparse_is_byte_identical() {
        let r = report();
        let text = to_canonical_json(&r).unwrap();
        let parsed: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, r);
        assert_eq!(to_canonical_json(&parsed).unwrap(), text);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(to_canonical_json(&value).unwrap(), text);
    }

    #[test]
    fn csv_has_fixed_header_and_one_row_per_method() {
        let r = report();
        let text = to_csv(&r).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(lines.count(), r.rows.len());
    }

    #[test]
    fn seventeen_digit_floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, 8.925e-1, f64::MIN_POSITIVE, 12345.678901234567] {
            let s = format_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn unknown_format_is_config_error() {
        assert!(matches!("xml".parse::<ReportFormat>(), Err(Error::Config(_))));
    }
}
