//! CSV data behind the comparison figures.
//!
//! | file                        | columns                         |
//! |-----------------------------|---------------------------------|
//! | `regression_curve_<mode>.csv` | `x,mean,std,truth`            |
//! | `regression_support_<mode>.csv` | `x,y`                       |
//! | `reliability_<mode>.csv`    | `level,observed,weight`         |
//! | `calibration_errors.csv`    | `mode,ece,mce`                  |
//! | `nll_comparison.csv`        | `mode,kind,tasks,nll`           |

use std::path::{Path, PathBuf};

use super::eval::{csv_err, EvalReport};
use crate::atomic::write_atomic;
use crate::error::Result;

pub const CURVE_HEADER: [&str; 4] = ["x", "mean", "std", "truth"];
pub const SUPPORT_HEADER: [&str; 2] = ["x", "y"];
pub const CALIBRATION_HEADER: [&str; 3] = ["mode", "ece", "mce"];
pub const NLL_HEADER: [&str; 4] = ["mode", "kind", "tasks", "nll"];

fn render<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| crate::Error::InvalidArgument(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes one CSV per figure kind and returns the paths written.
pub fn emit_plot_data(reports: &[EvalReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = out_dir.join(name);
        write_atomic(&p, &bytes)?;
        written.push(p);
        Ok(())
    };
    for r in reports {
        if let Some(c) = &r.curve {
            let truth = |i: usize| c.truth.get(i).map(|t| t.to_string()).unwrap_or_default();
            let rows = (0..c.x.len()).map(|i| vec![c.x[i].to_string(), c.mean[i].to_string(), c.std[i].to_string(), truth(i)]);
            put(format!("regression_curve_{}.csv", r.mode), render(&CURVE_HEADER, rows)?)?;
            let rows = c.support_x.iter().zip(&c.support_y).map(|(x, y)| vec![x.to_string(), y.to_string()]);
            put(format!("regression_support_{}.csv", r.mode), render(&SUPPORT_HEADER, rows)?)?;
        }
        if let Some(rel) = &r.reliability {
            put(format!("reliability_{}.csv", r.mode), rel.to_csv()?.into_bytes())?;
        }
    }
    let rows = reports.iter().map(|r| vec![r.mode.to_string(), opt(r.ece), opt(r.mce)]);
    put("calibration_errors.csv".into(), render(&CALIBRATION_HEADER, rows)?)?;
    let mut rows = Vec::new();
    for r in reports {
        rows.push(vec![r.mode.to_string(), "all".into(), r.n_tasks.to_string(), opt(r.mean_nll)]);
        for k in &r.by_kind {
            let kind = serde_json::to_value(k.kind)?.as_str().unwrap_or_default().to_string();
            rows.push(vec![r.mode.to_string(), kind, k.tasks.to_string(), k.nll.to_string()]);
        }
    }
    put("nll_comparison.csv".into(), render(&NLL_HEADER, rows)?)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration_metrics::{ece_mce, ReliabilityCurve};
    use crate::cli_experiments::eval::{RegressionCurve, TaskRow};
    use crate::cli_experiments::Mode;
    use crate::task_environments::TaskKind;

    fn report() -> EvalReport {
        let rel = ReliabilityCurve::new(vec![0.15, 0.55, 0.95], vec![0.1, 0.7, 0.9], vec![0.2, 0.3, 0.5]).unwrap();
        let (e, m) = ece_mce(&rel);
        EvalReport {
            mode: Mode::Simpa,
            n_tasks: 1,
            mean_nll: Some(1.25),
            mean_mse: Some(0.5),
            accuracy: None,
            by_kind: vec![],
            ece: Some(e),
            mce: Some(m),
            reliability: Some(rel),
            bound: None,
            curve: Some(RegressionCurve { x: vec![-1.0, 0.0, 1.0], mean: vec![0.0; 3], std: vec![0.1; 3], truth: vec![], support_x: vec![0.5], support_y: vec![1.0] }),
            tasks: vec![TaskRow { task: 0, kind: TaskKind::Linear, nll: 1.25, mse: Some(0.5), accuracy: None }],
        }
    }

    #[test]
    fn reliability_csv_round_trips_through_ece_mce() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        emit_plot_data(std::slice::from_ref(&r), dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("reliability_simpa.csv")).unwrap();
        let (e, m) = ece_mce(&ReliabilityCurve::from_csv(&text).unwrap());
        assert!((e - r.ece.unwrap()).abs() < 1e-9 && (m - r.mce.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn headers_match_the_documented_schema() {
        let dir = tempfile::tempdir().unwrap();
        emit_plot_data(&[report()], dir.path()).unwrap();
        let first = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap().lines().next().unwrap().to_string();
        assert_eq!(first("regression_curve_simpa.csv"), "x,mean,std,truth");
        assert_eq!(first("regression_support_simpa.csv"), "x,y");
        assert_eq!(first("reliability_simpa.csv"), "level,observed,weight");
        assert_eq!(first("calibration_errors.csv"), "mode,ece,mce");
        assert_eq!(first("nll_comparison.csv"), "mode,kind,tasks,nll");
    }

    #[test]
    fn curve_x_column_is_monotone() {
        let dir = tempfile::tempdir().unwrap();
        emit_plot_data(&[report()], dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("regression_curve_simpa.csv")).unwrap();
        let xs: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn unwritable_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        std::fs::write(&file, b"x").unwrap();
        assert!(emit_plot_data(&[report()], &file.join("sub")).is_err());
    }
}
