//! CSV reports: one row per (regime, σ_d) cell.
//!
//! Floats are written with Rust's shortest round-trip formatting, which never
//! depends on locale and always uses `.` as the decimal point.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{convergence_stats, summarize, EvalReport, NONCONVERGED_MARGIN};
use crate::training::Regime;

pub const HEADER: [&str; 8] = [
    "regime",
    "sigma_d",
    "runs",
    "mean_acc",
    "std_acc",
    "ci95",
    "mean_ekl",
    "nonconverged",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub regime: Regime,
    pub sigma_d: f64,
    pub runs: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub ci95: f64,
    /// Empty in the CSV when undefined.
    pub mean_ekl: Option<f64>,
    pub nonconverged: usize,
}

impl ReportRow {
    pub fn from_eval(regime: Regime, report: &EvalReport, nonconverged: usize) -> Self {
        Self {
            regime,
            sigma_d: report.sigma_d,
            runs: report.runs,
            mean_acc: report.mean_accuracy,
            std_acc: report.std_accuracy,
            ci95: report.ci95_halfwidth,
            mean_ekl: report.mean_ekl,
            nonconverged,
        }
    }
}

/// One row from the Monte Carlo reports of several independently trained
/// models (one per seed) at the same `σ_d`.
///
/// Accuracy statistics pool the per-run accuracies of all models, EKL is the
/// mean of the per-model EKLs, and `nonconverged` counts models whose training
/// diverged or whose mean accuracy lies more than 5 points below the mean over
/// models.
pub fn aggregate(regime: Regime, sigma_d: f64, cells: &[(EvalReport, bool)]) -> Result<ReportRow> {
    if cells.is_empty() {
        return Err(Error::invalid("aggregate needs at least one report"));
    }
    let pooled: Vec<f64> = cells
        .iter()
        .flat_map(|(r, _)| r.per_run_accuracy.iter().copied())
        .collect();
    let summary = summarize(&pooled);
    let ekls: Option<Vec<f64>> = cells.iter().map(|(r, _)| r.mean_ekl).collect();
    let mut flagged: Vec<usize> = cells
        .iter()
        .enumerate()
        .filter(|(_, (_, converged))| !converged)
        .map(|(i, _)| i)
        .collect();
    if cells.len() > 1 {
        let means: Vec<f64> = cells.iter().map(|(r, _)| r.mean_accuracy).collect();
        flagged.extend(convergence_stats(&means, NONCONVERGED_MARGIN)?.nonconverged);
    }
    flagged.sort_unstable();
    flagged.dedup();
    Ok(ReportRow {
        regime,
        sigma_d,
        runs: pooled.len(),
        mean_acc: summary.mean,
        std_acc: summary.std,
        ci95: summary.ci95,
        mean_ekl: ekls.map(|e| e.iter().sum::<f64>() / e.len() as f64),
        nonconverged: flagged.len(),
    })
}

pub fn write_report<W: Write>(out: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record([
            r.regime.as_str().to_string(),
            r.sigma_d.to_string(),
            r.runs.to_string(),
            r.mean_acc.to_string(),
            r.std_acc.to_string(),
            r.ci95.to_string(),
            r.mean_ekl.map(|v| v.to_string()).unwrap_or_default(),
            r.nonconverged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut records = r.records();
    match records.next() {
        Some(header) => {
            let header = header?;
            if header.iter().ne(HEADER) {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header {}", HEADER.join(",")),
                });
            }
        }
        None => return Err(Error::Parse { line: 1, message: "missing header".into() }),
    }
    let mut rows = Vec::new();
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let fail = |message: String| Error::Parse { line, message };
        if record.len() != HEADER.len() {
            return Err(fail(format!("expected {} fields, found {}", HEADER.len(), record.len())));
        }
        let float = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|_| fail(format!("{}: not a number: {:?}", HEADER[i], &record[i])))
        };
        let int = |i: usize| -> Result<usize> {
            record[i]
                .parse()
                .map_err(|_| fail(format!("{}: not an integer: {:?}", HEADER[i], &record[i])))
        };
        rows.push(ReportRow {
            regime: record[0].parse().map_err(|e: Error| fail(e.to_string()))?,
            sigma_d: float(1)?,
            runs: int(2)?,
            mean_acc: float(3)?,
            std_acc: float(4)?,
            ci95: float(5)?,
            mean_ekl: if record[6].is_empty() { None } else { Some(float(6)?) },
            nonconverged: int(7)?,
        });
    }
    Ok(rows)
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_report(std::fs::File::create(path)?, rows)
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    read_report(std::fs::File::open(path)?)
}

/// Plain-text table of a report, one line per row.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<16} {:>7} {:>5} {:>9} {:>9} {:>9} {:>9} {:>6}\n",
        "regime", "sigma_d", "runs", "mean_acc", "std_acc", "ci95", "mean_ekl", "nonconv"
    );
    for r in rows {
        let ekl = r.mean_ekl.map_or("undef".to_string(), |v| format!("{v:.4}"));
        s.push_str(&format!(
            "{:<16} {:>7.3} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>9} {:>6}\n",
            r.regime.as_str(),
            r.sigma_d,
            r.runs,
            r.mean_acc,
            r.std_acc,
            r.ci95,
            ekl,
            r.nonconverged
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<ReportRow> {
        vec![
            ReportRow {
                regime: Regime::Ovf,
                sigma_d: 0.3,
                runs: 200,
                mean_acc: 0.912_345_678_901_234_5,
                std_acc: 1.0 / 3.0,
                ci95: 1.234e-9,
                mean_ekl: Some(0.1),
                nonconverged: 0,
            },
            ReportRow {
                regime: Regime::NoiseInjection,
                sigma_d: 0.0,
                runs: 1,
                mean_acc: 0.0,
                std_acc: 0.0,
                ci95: 0.0,
                mean_ekl: None,
                nonconverged: 6,
            },
        ]
    }

    fn eval(accs: &[f64], ekl: Option<f64>) -> EvalReport {
        let s = summarize(accs);
        EvalReport {
            sigma_d: 0.3,
            runs: accs.len(),
            mean_accuracy: s.mean,
            std_accuracy: s.std,
            ci95_halfwidth: s.ci95,
            ci_defined: s.ci_defined,
            mean_ekl: ekl,
            per_run_accuracy: accs.to_vec(),
            convergence: convergence_stats(accs, NONCONVERGED_MARGIN).unwrap(),
        }
    }

    #[test]
    fn aggregate_over_seeds() {
        let cells = [
            (eval(&[0.9, 0.8], Some(0.2)), true),
            (eval(&[0.7, 0.6], Some(0.4)), true),
            (eval(&[0.8, 0.8], None), false),
        ];
        let row = aggregate(Regime::Ovf, 0.3, &cells).unwrap();
        assert_eq!(row.runs, 6);
        assert!((row.mean_acc - 0.7666666666666667).abs() < 1e-12);
        assert_eq!(row.mean_ekl, None);
        // Seed 1 sits 11.7 points below the mean, seed 2 diverged.
        assert_eq!(row.nonconverged, 2);
        let row = aggregate(Regime::Ovf, 0.3, &cells[..2]).unwrap();
        assert!((row.mean_ekl.unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(row.nonconverged, 1);
        assert!(aggregate(Regime::Ovf, 0.3, &[]).is_err());
    }

    #[test]
    fn round_trip() {
        let mut buf = Vec::new();
        write_report(&mut buf, &rows()).unwrap();
        assert_eq!(read_report(buf.as_slice()).unwrap(), rows());
    }

    #[test]
    fn empty_report_is_header_only() {
        let mut buf = Vec::new();
        write_report(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), format!("{}\n", HEADER.join(",")));
        assert!(read_report(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn decimal_point_fixture() {
        let mut buf = Vec::new();
        write_report(&mut buf, &rows()[..1]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "ovf,0.3,200,0.9123456789012345,0.3333333333333333,0.000000001234,0.1,0"
        );
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let text = format!("{}\novf,0.1,200,0.9,0.01,0.001,0.2,0\novf,0.2,abc,0.9,0.01,0.001,0.2,0\n", HEADER.join(","));
        match read_report(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("runs"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_report("a,b\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
        let short = format!("{}\novf,0.1\n", HEADER.join(","));
        assert!(read_report(short.as_bytes()).is_err());
    }
}
