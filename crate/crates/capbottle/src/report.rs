//! Result tables: per-run rows, the per-regime summary with its AVG line,
//! and bar-chart data, all as plain CSV.

use crate::train::Regime;
use std::io::Write;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("no report rows")]
    Empty,
    #[error("bad report row: {0}")]
    Parse(String),
}

/// One evaluated checkpoint: held-out test loss plus controller metrics, all
/// computed from the same trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub regime: String,
    pub test_loss: f64,
    pub mean_capped_distance: f64,
    pub success_rate: f64,
    pub seed: u64,
    pub dataset_fingerprint: String,
}

pub const ROW_HEADER: &str =
    "regime,test_loss,mean_capped_distance,success_rate,seed,dataset_fingerprint";

pub fn write_rows_csv(rows: &[ReportRow], w: &mut impl Write) -> Result<(), ReportError> {
    writeln!(w, "{ROW_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.regime, r.test_loss, r.mean_capped_distance, r.success_rate, r.seed,
            r.dataset_fingerprint
        )?;
    }
    Ok(())
}

pub fn read_rows_csv(text: &str) -> Result<Vec<ReportRow>, ReportError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == ROW_HEADER => {}
        other => {
            return Err(ReportError::Parse(format!(
                "expected header `{ROW_HEADER}`, got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(ReportError::Parse(format!("expected 6 fields, got: `{line}`")));
        }
        let num = |i: usize| -> Result<f64, ReportError> {
            fields[i]
                .parse()
                .map_err(|e| ReportError::Parse(format!("field {i} of `{line}`: {e}")))
        };
        rows.push(ReportRow {
            regime: fields[0].to_string(),
            test_loss: num(1)?,
            mean_capped_distance: num(2)?,
            success_rate: num(3)?,
            seed: fields[4]
                .parse()
                .map_err(|e| ReportError::Parse(format!("seed of `{line}`: {e}")))?,
            dataset_fingerprint: fields[5].to_string(),
        });
    }
    Ok(rows)
}

/// Aggregated metrics for one regime (or the AVG line).
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub runs: usize,
    pub test_loss: f64,
    pub mean_capped_distance: f64,
    pub success_rate: f64,
}

fn mean_of(rows: &[&ReportRow], label: &str) -> SummaryRow {
    let n = rows.len() as f64;
    SummaryRow {
        label: label.to_string(),
        runs: rows.len(),
        test_loss: rows.iter().map(|r| r.test_loss).sum::<f64>() / n,
        mean_capped_distance: rows.iter().map(|r| r.mean_capped_distance).sum::<f64>() / n,
        success_rate: rows.iter().map(|r| r.success_rate).sum::<f64>() / n,
    }
}

/// Per-regime means (seeds averaged) in the canonical regime order, with
/// unknown regime labels appended alphabetically, followed by an AVG row over
/// all input rows.
pub fn summarize(rows: &[ReportRow]) -> Result<Vec<SummaryRow>, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut labels: Vec<String> = Regime::ALL
        .iter()
        .map(|r| r.name().to_string())
        .filter(|name| rows.iter().any(|r| &r.regime == name))
        .collect();
    let mut extra: Vec<String> = rows
        .iter()
        .map(|r| r.regime.clone())
        .filter(|name| Regime::from_str(name).is_err())
        .collect();
    extra.sort();
    extra.dedup();
    labels.extend(extra);

    let mut out = Vec::with_capacity(labels.len() + 1);
    for label in &labels {
        let group: Vec<&ReportRow> = rows.iter().filter(|r| &r.regime == label).collect();
        out.push(mean_of(&group, label));
    }
    let all: Vec<&ReportRow> = rows.iter().collect();
    out.push(mean_of(&all, "AVG"));
    Ok(out)
}

pub fn write_summary_csv(summary: &[SummaryRow], w: &mut impl Write) -> Result<(), ReportError> {
    writeln!(w, "regime,runs,test_loss,mean_capped_distance,success_rate")?;
    for s in summary {
        writeln!(
            w,
            "{},{},{},{},{}",
            s.label, s.runs, s.test_loss, s.mean_capped_distance, s.success_rate
        )?;
    }
    Ok(())
}

/// Bar-chart data: one bar per regime (AVG excluded), success rate and capped
/// distance side by side, consumable by any plotting tool.
pub fn write_barchart_csv(summary: &[SummaryRow], w: &mut impl Write) -> Result<(), ReportError> {
    writeln!(w, "label,success_rate,mean_capped_distance")?;
    for s in summary.iter().filter(|s| s.label != "AVG") {
        writeln!(w, "{},{},{}", s.label, s.success_rate, s.mean_capped_distance)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn row(regime: &str, test_loss: f64, dist: f64, success: f64, seed: u64) -> ReportRow {
        ReportRow {
            regime: regime.to_string(),
            test_loss,
            mean_capped_distance: dist,
            success_rate: success,
            seed,
            dataset_fingerprint: "deadbeefdeadbeef".to_string(),
        }
    }

    #[test]
    fn rows_round_trip() {
        let rows = vec![
            row("sim-only", 0.012, 0.021, 0.55, 1),
            row("sim-real-pairwise", 0.008, 0.015, 0.8, 1),
        ];
        let mut buf = Vec::new();
        write_rows_csv(&rows, &mut buf).unwrap();
        let parsed = read_rows_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(rows, parsed);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(matches!(read_rows_csv("nope\n"), Err(ReportError::Parse(_))));
    }

    #[test]
    fn single_row_avg_equals_it() {
        let rows = vec![row("sim-only", 0.01, 0.02, 0.6, 3)];
        let summary = summarize(&rows).unwrap();
        assert_eq!(summary.len(), 2);
        assert_eq!(summary[0].label, "sim-only");
        let avg = summary.last().unwrap();
        assert_eq!(avg.label, "AVG");
        assert_eq!(avg.test_loss, 0.01);
        assert_eq!(avg.success_rate, 0.6);
    }

    #[test]
    fn avg_is_arithmetic_mean() {
        let rows = vec![
            row("sim-only", 0.010, 0.020, 0.5, 1),
            row("sim-real-pairwise", 0.006, 0.010, 0.9, 1),
        ];
        let summary = summarize(&rows).unwrap();
        let avg = summary.last().unwrap();
        assert_relative_eq!(avg.test_loss, 0.008, epsilon = 1e-15);
        assert_relative_eq!(avg.success_rate, 0.7, epsilon = 1e-15);
        assert_relative_eq!(avg.mean_capped_distance, 0.015, epsilon = 1e-15);
    }

    #[test]
    fn seeds_average_within_regime_and_order_is_canonical() {
        let rows = vec![
            row("sim-real-pairwise", 0.008, 0.014, 0.8, 2),
            row("sim-only", 0.012, 0.022, 0.5, 1),
            row("sim-only", 0.014, 0.024, 0.6, 2),
        ];
        let summary = summarize(&rows).unwrap();
        assert_eq!(summary[0].label, "sim-only");
        assert_eq!(summary[0].runs, 2);
        assert_relative_eq!(summary[0].test_loss, 0.013, epsilon = 1e-15);
        assert_eq!(summary[1].label, "sim-real-pairwise");
        assert_eq!(summary[2].label, "AVG");
        assert_eq!(summary[2].runs, 3);
    }

    #[test]
    fn empty_input_errors() {
        assert!(matches!(summarize(&[]), Err(ReportError::Empty)));
    }

    #[test]
    fn barchart_excludes_avg() {
        let rows = vec![row("sim-only", 0.01, 0.02, 0.6, 1)];
        let summary = summarize(&rows).unwrap();
        let mut buf = Vec::new();
        write_barchart_csv(&summary, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.contains("AVG"));
    }
}
