//! CSV emission for run and certification artifacts.
//!
//! Everything here is byte-stable: fixed column orders, fixed row orders,
//! `\n` line endings, and floats printed with 17 significant digits so a
//! round-trip loses nothing. Re-running the same config and seed must
//! reproduce these files exactly — the determinism tests diff them — so no
//! timestamps, hostnames or wall-clock figures belong in any of them.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::bound::CertificationReport;
use crate::harness::{CvFitRow, RunReport};

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// 17 significant digits — enough to reproduce any f64 exactly.
fn sig17(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_file(path: &Path, contents: &str) -> Result<(), OutputError> {
    let io_err = |source| OutputError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(contents.as_bytes()).map_err(io_err)
}

/// One estimate per replicate, coordinate and strategy.
pub fn write_estimates(report: &RunReport, path: &Path) -> Result<(), OutputError> {
    let mut out = String::from("replicate,coordinate,strategy,estimate,tau\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.replicate,
            row.coordinate,
            row.strategy,
            sig17(row.estimate),
            row.tau
        ));
    }
    write_file(path, &out)
}

pub fn write_summary(report: &RunReport, path: &Path) -> Result<(), OutputError> {
    let mut out = String::from("coordinate,strategy,mean,variance,vr_factor\n");
    for s in &report.summaries {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.coordinate,
            s.strategy,
            sig17(s.mean),
            sig17(s.variance),
            sig17(s.vr_factor)
        ));
    }
    write_file(path, &out)
}

pub fn write_cv_fits(rows: &[CvFitRow], path: &Path) -> Result<(), OutputError> {
    let mut out = String::from("coordinate,approach,objective_before,objective_after,theta_norm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.coordinate,
            r.approach,
            sig17(r.objective_before),
            sig17(r.objective_after),
            sig17(r.theta_norm)
        ));
    }
    write_file(path, &out)
}

/// `(replicate, tau)` pairs; also used to flush partial results when some
/// replicates failed to meet.
pub fn write_meeting_times(pairs: &[(usize, usize)], path: &Path) -> Result<(), OutputError> {
    let mut out = String::from("replicate,tau\n");
    for (replicate, tau) in pairs {
        out.push_str(&format!("{replicate},{tau}\n"));
    }
    write_file(path, &out)
}

pub fn write_certification(report: &CertificationReport, path: &Path) -> Result<(), OutputError> {
    let mut out = String::from("check,index,empirical,se,bound,margin,status\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.check,
            row.index,
            sig17(row.empirical),
            sig17(row.se),
            sig17(row.bound),
            sig17(row.margin()),
            row.status
        ));
    }
    write_file(path, &out)
}

/// Writes the full set of run artifacts into `out_dir` and returns the paths,
/// in a fixed order: estimates, summary, cvfit, meeting_times.
pub fn write_run_report(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>, OutputError> {
    let estimates = out_dir.join("estimates.csv");
    write_estimates(report, &estimates)?;
    let summary = out_dir.join("summary.csv");
    write_summary(report, &summary)?;
    let cvfit = out_dir.join("cvfit.csv");
    write_cv_fits(&report.cv_fits, &cvfit)?;
    let meeting = out_dir.join("meeting_times.csv");
    let pairs: Vec<(usize, usize)> =
        report.meeting_times.iter().copied().enumerate().collect();
    write_meeting_times(&pairs, &meeting)?;
    Ok(vec![estimates, summary, cvfit, meeting])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bound::CheckRow;
    use crate::harness::{EstimateRow, SummaryRow};

    fn tiny_report() -> RunReport {
        RunReport {
            rows: vec![
                EstimateRow {
                    replicate: 0,
                    coordinate: 0,
                    strategy: "no-cv",
                    estimate: 0.125,
                    tau: 3,
                },
                EstimateRow {
                    replicate: 1,
                    coordinate: 0,
                    strategy: "no-cv",
                    estimate: -0.5,
                    tau: 2,
                },
            ],
            summaries: vec![SummaryRow {
                coordinate: 0,
                strategy: "no-cv",
                mean: -0.1875,
                variance: 0.1953125,
                vr_factor: 1.0,
            }],
            cv_fits: vec![],
            meeting_times: vec![3, 2],
            fitting_replicates: 0..0,
            estimation_replicates: 0..2,
            wall_clock: std::time::Duration::from_millis(1),
        }
    }

    #[test]
    fn estimates_csv_has_one_row_per_estimate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("estimates.csv");
        write_estimates(&tiny_report(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "replicate,coordinate,strategy,estimate,tau");
        assert_eq!(lines[1], "0,0,no-cv,1.2500000000000000e-1,3");
        assert!(text.ends_with('\n'));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn empty_report_still_writes_headers() {
        let dir = tempfile::tempdir().unwrap();
        let report = RunReport {
            rows: vec![],
            summaries: vec![],
            cv_fits: vec![],
            meeting_times: vec![],
            fitting_replicates: 0..0,
            estimation_replicates: 0..0,
            wall_clock: std::time::Duration::ZERO,
        };
        let paths = write_run_report(&report, dir.path()).unwrap();
        assert_eq!(paths.len(), 4);
        for path in paths {
            let text = std::fs::read_to_string(&path).unwrap();
            assert_eq!(text.lines().count(), 1, "{path:?} should be header-only");
        }
    }

    #[test]
    fn seventeen_digits_round_trip() {
        for &v in &[std::f64::consts::PI, 1.0 / 3.0, 1e-300, -0.72] {
            let s = sig17(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back, v, "{s} did not round-trip");
        }
    }

    #[test]
    fn identical_reports_produce_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_estimates(&tiny_report(), &a).unwrap();
        write_estimates(&tiny_report(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn certification_csv_includes_margin_and_status() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("certification.csv");
        let report = CertificationReport {
            rows: vec![
                CheckRow::exact("meeting_tail", "t=1", 0.5, 0.5),
                CheckRow::monte_carlo("delta_sq", "t=2", 0.9, 0.01, 1.0),
            ],
        };
        write_certification(&report, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("meeting_tail,t=1,"));
        assert!(lines[1].ends_with(",certified"));
        assert!(lines[2].ends_with(",certified"));
    }
}
