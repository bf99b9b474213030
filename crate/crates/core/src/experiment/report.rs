//! Deterministic text renderings of a sweep report.

use std::fmt::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::sweep::SweepReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Csv,
    Plotdata,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(Self::Table),
            "csv" => Ok(Self::Csv),
            "plotdata" => Ok(Self::Plotdata),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

const CSV_HEADER: &str =
    "series,kappa,accuracy,correct,kept_think_tokens,original_think_tokens,token_usage_ratio,n_samples,config_hash,seed,input_digest";
const PLOT_HEADER: &str = "curve,series,x,y";

pub fn render(report: &SweepReport, format: ReportFormat) -> String {
    let p = &report.provenance;
    let mut out = String::new();
    match format {
        ReportFormat::Table => {
            writeln!(
                out,
                "# config_hash={} seed={} input_digest={} backend={}",
                p.config_hash, p.seed, p.input_digest, p.backend
            )
            .unwrap();
            writeln!(
                out,
                "{:<18} {:>6} {:>9} {:>18} {:>12} {:>9}",
                "series", "kappa", "accuracy", "kept_think_tokens", "token_usage", "samples"
            )
            .unwrap();
            for r in &report.rows {
                writeln!(
                    out,
                    "{:<18} {:>6.3} {:>9.4} {:>18} {:>12.4} {:>9}",
                    r.series, r.kappa, r.accuracy, r.kept_think_tokens, r.token_usage_ratio, r.n_samples
                )
                .unwrap();
            }
        }
        ReportFormat::Csv => {
            writeln!(out, "{CSV_HEADER}").unwrap();
            for r in &report.rows {
                writeln!(
                    out,
                    "{},{},{:.6},{},{},{},{:.6},{},{},{},{}",
                    r.series,
                    r.kappa,
                    r.accuracy,
                    r.correct,
                    r.kept_think_tokens,
                    r.original_think_tokens,
                    r.token_usage_ratio,
                    r.n_samples,
                    p.config_hash,
                    p.seed,
                    p.input_digest
                )
                .unwrap();
            }
        }
        ReportFormat::Plotdata => {
            writeln!(out, "{PLOT_HEADER}").unwrap();
            for r in &report.rows {
                writeln!(out, "accuracy_vs_kappa,{},{},{:.6}", r.series, r.kappa, r.accuracy).unwrap();
            }
            for r in &report.rows {
                writeln!(out, "accuracy_vs_token_usage,{},{:.6},{:.6}", r.series, r.token_usage_ratio, r.accuracy)
                    .unwrap();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::sweep::{Provenance, SweepRow};

    fn report(rows: usize) -> SweepReport {
        SweepReport {
            rows: (0..rows)
                .map(|i| SweepRow {
                    series: "low-entropy".into(),
                    kappa: i as f64 / 10.0,
                    accuracy: 0.5,
                    correct: 5,
                    kept_think_tokens: 100 - i,
                    original_think_tokens: 100,
                    token_usage_ratio: (100 - i) as f64 / 100.0,
                    n_samples: 10,
                })
                .collect(),
            provenance: Provenance { config_hash: "h".into(), seed: 1, input_digest: "d".into(), backend: "b".into() },
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(render(&report(0), ReportFormat::Csv), format!("{CSV_HEADER}\n"));
        assert_eq!(render(&report(0), ReportFormat::Plotdata), format!("{PLOT_HEADER}\n"));
        assert_eq!(render(&report(0), ReportFormat::Table).lines().count(), 2);
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let text = render(&report(7), ReportFormat::Csv);
        assert_eq!(text.lines().count(), 8);
        assert!(text.lines().nth(1).unwrap().starts_with("low-entropy,0,0.500000,5,100,100,1.000000,10,h,1,d"));
    }

    #[test]
    fn plotdata_has_two_curves() {
        let text = render(&report(3), ReportFormat::Plotdata);
        assert_eq!(text.lines().filter(|l| l.starts_with("accuracy_vs_kappa,")).count(), 3);
        assert_eq!(text.lines().filter(|l| l.starts_with("accuracy_vs_token_usage,")).count(), 3);
    }

    #[test]
    fn rendering_is_deterministic() {
        for f in [ReportFormat::Table, ReportFormat::Csv, ReportFormat::Plotdata] {
            assert_eq!(render(&report(4), f), render(&report(4), f));
        }
    }
}
