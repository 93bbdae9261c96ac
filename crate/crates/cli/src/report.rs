//! Turns the CSV outputs of a run directory into SVG charts and a text
//! summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::plot::{bar_chart, line_chart, Series};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{0} is not a directory")]
    NotADirectory(PathBuf),
    #[error("no run outputs found in {0}")]
    NothingToReport(PathBuf),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: missing column {column}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: bad number {value:?} in column {column}")]
    BadNumber { path: PathBuf, column: String, value: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Rows of a CSV file keyed by column name.
struct Table {
    path: PathBuf,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Table, ReportError> {
        let csv_err = |source| ReportError::Csv { path: path.to_path_buf(), source };
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(csv_err)?;
        let headers = reader.headers().map_err(csv_err)?.iter().map(String::from).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(String::from).collect()))
            .collect::<Result<_, _>>()
            .map_err(csv_err)?;
        Ok(Table { path: path.to_path_buf(), headers, rows })
    }

    fn index(&self, column: &str) -> Result<usize, ReportError> {
        self.headers
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| ReportError::MissingColumn { path: self.path.clone(), column: column.into() })
    }

    fn text(&self, column: &str) -> Result<Vec<String>, ReportError> {
        let i = self.index(column)?;
        Ok(self.rows.iter().map(|r| r.get(i).cloned().unwrap_or_default()).collect())
    }

    fn numbers(&self, column: &str) -> Result<Vec<f64>, ReportError> {
        self.text(column)?
            .into_iter()
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| ReportError::BadNumber {
                    path: self.path.clone(),
                    column: column.into(),
                    value: v.clone(),
                })
            })
            .collect()
    }

    fn xy(&self, x: &str, y: &str) -> Result<Vec<(f64, f64)>, ReportError> {
        Ok(self.numbers(x)?.into_iter().zip(self.numbers(y)?).collect())
    }
}

fn series(name: &str, points: Vec<(f64, f64)>) -> Series {
    Series { name: name.into(), points }
}

/// What `report` wrote.
#[derive(Debug, Default)]
pub struct ReportOutput {
    pub charts: Vec<PathBuf>,
    pub summary: String,
}

/// Renders every recognised CSV in `dir`; fails when there is none.
pub fn report(dir: &Path) -> Result<ReportOutput, ReportError> {
    if !dir.is_dir() {
        return Err(ReportError::NotADirectory(dir.to_path_buf()));
    }
    let mut out = ReportOutput::default();
    let emit = |name: &str, svg: String, out: &mut ReportOutput| -> Result<(), ReportError> {
        let path = dir.join(name);
        std::fs::write(&path, svg).map_err(|source| ReportError::Io { path: path.clone(), source })?;
        out.charts.push(path);
        Ok(())
    };
    let mut summary = String::new();

    let metrics = dir.join("metrics.csv");
    if metrics.exists() {
        let t = Table::read(&metrics)?;
        let acc = t.xy("round", "test_accuracy")?;
        let loss = t.xy("round", "train_loss_avg")?;
        emit("accuracy.svg", line_chart("Test accuracy per round", "round", "accuracy", &[series("global model", acc.clone())]), &mut out)?;
        emit("loss.svg", line_chart("Average train loss per round", "round", "loss", &[series("global model", loss.clone())]), &mut out)?;
        let up = t.xy("round", "bytes_up")?;
        let down = t.xy("round", "bytes_down")?;
        emit(
            "communication.svg",
            line_chart("Bytes per round", "round", "bytes", &[series("uplink", up.clone()), series("downlink", down)]),
            &mut out,
        )?;
        if let (Some(a), Some(l)) = (acc.last(), loss.last()) {
            let _ = writeln!(summary, "rounds: {}", acc.len());
            let _ = writeln!(summary, "final test accuracy: {:.4}", a.1);
            let _ = writeln!(summary, "final train loss: {:.4}", l.1);
            let _ = writeln!(summary, "uplink bytes per round: {}", up.last().map_or(0.0, |u| u.1));
            let eps = t.text("epsilon")?;
            let _ = writeln!(summary, "epsilon after final round: {}", eps.last().cloned().unwrap_or_default());
        }
    }

    let pr = dir.join("pr_curve.csv");
    if pr.exists() {
        let t = Table::read(&pr)?;
        emit(
            "pr_curve.svg",
            line_chart(
                "Anomaly detection precision and recall",
                "threshold",
                "value",
                &[series("precision", t.xy("tau", "precision")?), series("recall", t.xy("tau", "recall")?)],
            ),
            &mut out,
        )?;
        let min_precision = t.numbers("precision")?.into_iter().fold(f64::INFINITY, f64::min);
        let _ = writeln!(summary, "minimum precision over thresholds: {min_precision:.4}");
    }

    let anomaly = dir.join("anomaly_report.csv");
    if anomaly.exists() {
        let t = Table::read(&anomaly)?;
        let flagged = t.numbers("flagged")?;
        let truth = t.numbers("truth")?;
        let hits = flagged.iter().zip(&truth).filter(|(f, t)| **f == 1.0 && **t == 1.0).count();
        let nf = flagged.iter().filter(|f| **f == 1.0).count();
        let nt = truth.iter().filter(|t| **t == 1.0).count();
        let _ = writeln!(summary, "anomalies: flagged {nf}, planted {nt}, correct {hits}");
    }

    let noise = dir.join("noise_sweep.csv");
    if noise.exists() {
        let t = Table::read(&noise)?;
        emit(
            "noise_sweep.svg",
            line_chart("Accuracy vs noise multiplier", "sigma", "final accuracy", &[series("final accuracy", t.xy("sigma", "final_accuracy")?)]),
            &mut out,
        )?;
        for (s, a) in t.xy("sigma", "final_accuracy")? {
            let _ = writeln!(summary, "sigma {s}: accuracy {a:.4}");
        }
    }

    let attack = dir.join("attack_sweep.csv");
    if attack.exists() {
        let t = Table::read(&attack)?;
        let modes = t.text("robust_mode")?;
        let points = t.xy("malicious_fraction", "final_accuracy")?;
        let mut by_mode: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for (m, p) in modes.iter().zip(points) {
            by_mode.entry(m.clone()).or_default().push(p);
            let _ = writeln!(summary, "malicious {} defense {m}: accuracy {:.4}", p.0, p.1);
        }
        let s: Vec<Series> = by_mode.into_iter().map(|(m, p)| series(&format!("defense {m}"), p)).collect();
        emit("attack_sweep.svg", line_chart("Accuracy under gradient poisoning", "malicious fraction", "final accuracy", &s), &mut out)?;
    }

    let scaling = dir.join("scaling.csv");
    if scaling.exists() {
        let t = Table::read(&scaling)?;
        let pts = t.xy("num_nodes", "wall_ms")?;
        emit("scaling.svg", line_chart("Wall time vs graph size", "nodes per client", "wall time (ms)", &[series("measured", pts.clone())]), &mut out)?;
        let fit = fedgraph::metrics::linear_fit(&pts).ok();
        if let Some(f) = fit {
            let _ = writeln!(summary, "scaling fit: {:.4} ms per node, r_squared {:.4}", f.slope, f.r_squared);
        }
    }

    let overhead = dir.join("overhead.csv");
    if overhead.exists() {
        let t = Table::read(&overhead)?;
        let names = t.text("backend")?;
        let bytes = t.numbers("bytes_per_client")?;
        let ratios = t.numbers("overhead_vs_plain")?;
        let bars: Vec<(String, f64)> = names.iter().cloned().zip(bytes.iter().copied()).collect();
        emit("overhead.svg", bar_chart("Uplink bytes per client per round", "bytes", &bars), &mut out)?;
        for ((n, b), r) in names.iter().zip(&bytes).zip(&ratios) {
            let _ = writeln!(summary, "{n}: {b} bytes per client, overhead {r:.4}");
        }
    }

    if out.charts.is_empty() && summary.is_empty() {
        return Err(ReportError::NothingToReport(dir.to_path_buf()));
    }
    let path = dir.join("report.txt");
    std::fs::write(&path, &summary).map_err(|source| ReportError::Io { path, source })?;
    out.summary = summary;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(report(dir.path()), Err(ReportError::NothingToReport(_))));
        assert!(matches!(report(&dir.path().join("missing")), Err(ReportError::NotADirectory(_))));
    }

    #[test]
    fn metrics_and_pr_curve_render() {
        let dir = tempfile::tempdir().unwrap();
        let mut csv = String::from(fedgraph::metrics::METRICS_HEADER);
        csv.push('\n');
        for r in 1..=50 {
            csv.push_str(&format!("{r},{},{},100,200,90,inf,plain,\n", 1.0 / r as f64, 0.5 + r as f64 / 200.0));
        }
        std::fs::write(dir.path().join("metrics.csv"), csv).unwrap();
        std::fs::write(dir.path().join("pr_curve.csv"), "tau,precision,recall\n0,0.5,1\n1,0.9,0.5\n").unwrap();
        let out = report(dir.path()).unwrap();
        for f in ["accuracy.svg", "loss.svg", "communication.svg", "pr_curve.svg", "report.txt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(out.charts.len(), 4);
        assert!(out.summary.contains("final test accuracy: 0.7500"));
    }

    #[test]
    fn malformed_csv_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("pr_curve.csv"), "tau,precision\n0,0.5\n").unwrap();
        assert!(matches!(report(dir.path()), Err(ReportError::MissingColumn { .. })));
    }
}
