//! Report files: `<name>.json` for everything but the per-query rows,
//! `<name>.csv` for those, plus `<name>_angle.csv` / `<name>_noise.csv`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AngleBin, EvaluationReport, NoisePoint, QueryRecord};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct CsvRow {
    query_id: usize,
    true_id: u32,
    predicted: Option<u32>,
    correct: bool,
    train_azimuth_deg: Option<f64>,
    test_azimuth_deg: f64,
    elevation_diff_deg: Option<f64>,
    textured: bool,
}

impl From<&QueryRecord> for CsvRow {
    fn from(r: &QueryRecord) -> Self {
        CsvRow {
            query_id: r.query_id,
            true_id: r.true_id,
            predicted: r.predicted,
            correct: r.correct,
            train_azimuth_deg: r.train_azimuth_deg,
            test_azimuth_deg: r.test_azimuth_deg,
            elevation_diff_deg: r.elevation_diff_deg,
            textured: r.textured,
        }
    }
}

impl From<CsvRow> for QueryRecord {
    fn from(r: CsvRow) -> Self {
        QueryRecord {
            query_id: r.query_id,
            true_id: r.true_id,
            predicted: r.predicted,
            correct: r.correct,
            train_azimuth_deg: r.train_azimuth_deg,
            test_azimuth_deg: r.test_azimuth_deg,
            elevation_diff_deg: r.elevation_diff_deg,
            textured: r.textured,
        }
    }
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let name = base
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    base.with_file_name(format!("{name}{suffix}"))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map(|p| p.line()),
        message: e.to_string(),
    }
}

pub fn write_curve_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write the report next to `base`, which is a path without extension.
/// Returns the files written.
pub fn write_report(report: &EvaluationReport, base: &Path) -> Result<Vec<PathBuf>> {
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = with_suffix(base, ".json");
    let f = File::create(&json).map_err(|e| Error::io(&json, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), report).map_err(|e| Error::Parse {
        path: json.clone(),
        line: None,
        message: e.to_string(),
    })?;
    let rows: Vec<CsvRow> = report.records.iter().map(CsvRow::from).collect();
    let csv_path = with_suffix(base, ".csv");
    write_curve_csv(&csv_path, &rows)?;
    let mut written = vec![json, csv_path];
    if let Some(bins) = &report.angle_curve {
        let p = with_suffix(base, "_angle.csv");
        write_curve_csv::<AngleBin>(&p, bins)?;
        written.push(p);
    }
    if let Some(points) = &report.noise_curve {
        let p = with_suffix(base, "_noise.csv");
        write_curve_csv::<NoisePoint>(&p, points)?;
        written.push(p);
    }
    Ok(written)
}

pub fn read_report(base: &Path) -> Result<EvaluationReport> {
    let json = with_suffix(base, ".json");
    let f = File::open(&json).map_err(|e| Error::io(&json, e))?;
    let mut report: EvaluationReport =
        serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Parse {
            path: json.clone(),
            line: Some(e.line() as u64),
            message: e.to_string(),
        })?;
    let csv_path = with_suffix(base, ".csv");
    let mut r = csv::Reader::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
    report.records = r
        .deserialize::<CsvRow>()
        .map(|row| {
            row.map(QueryRecord::from)
                .map_err(|e| csv_err(&csv_path, e))
        })
        .collect::<Result<_>>()?;
    Ok(report)
}
