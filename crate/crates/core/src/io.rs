//! CSV and JSON artifacts.
//!
//! Floats are written in Rust's shortest round-trip form, so every file reads
//! back bit-exactly and identical inputs give identical bytes.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{de::DeserializeOwned, Serialize};
use thiserror::Error;

use crate::geometry::{DataMatrix, GeometryError};
use crate::hidalgo::{HidalgoConfig, HidalgoError, McmcTraces};
use crate::posterior::CoClusteringMatrix;

pub const LABELS_FILE: &str = "labels.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const IDS_FILE: &str = "ids.csv";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IoError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Hidalgo(#[from] HidalgoError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> IoError {
    IoError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn ensure_parent(path: &Path) -> Result<(), IoError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
        }
        _ => Ok(()),
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    ensure_parent(path)?;
    let mut s = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let s = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&s).map_err(|e| parse_err(path, e.line() as u64, e.to_string()))
}

/// Writes a header and rows of pre-formatted cells.
pub fn write_csv<I, R>(path: &Path, header: &[String], rows: I) -> Result<(), IoError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(r.into_iter().collect::<Vec<_>>())
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a CSV into its header and string rows; every row must match the header width.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), IoError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec =
            rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        rows.push(rec.iter().map(|s| s.trim().to_string()).collect());
    }
    Ok((header, rows))
}

fn parse_num<T: std::str::FromStr>(path: &Path, row: usize, s: &str) -> Result<T, IoError> {
    s.parse()
        .map_err(|_| parse_err(path, row as u64 + 2, format!("cannot parse {s:?}")))
}

fn numeric_block<T: std::str::FromStr + Clone + Default>(
    path: &Path,
    rows: &[Vec<String>],
    skip: usize,
    width: usize,
) -> Result<Array2<T>, IoError> {
    let mut out = Array2::default((rows.len(), width));
    for (t, row) in rows.iter().enumerate() {
        for (j, cell) in row.iter().skip(skip).enumerate() {
            out[[t, j]] = parse_num(path, t, cell)?;
        }
    }
    Ok(out)
}

/// `id,x1,...,xD`, one row per observation.
pub fn write_matrix_csv(path: &Path, m: &DataMatrix) -> Result<(), IoError> {
    let mut header = vec!["id".to_string()];
    header.extend((1..=m.ncols()).map(|c| format!("x{c}")));
    let rows = (0..m.nrows()).map(|i| {
        std::iter::once(m.row_ids()[i].clone())
            .chain(m.row(i).iter().map(|v| v.to_string()).collect::<Vec<_>>())
    });
    write_csv(path, &header, rows)
}

pub fn read_matrix_csv(path: &Path) -> Result<DataMatrix, IoError> {
    let (header, rows) = read_csv(path)?;
    if header.first().map(String::as_str) != Some("id") {
        return Err(parse_err(path, 1, "first column must be `id`"));
    }
    let ids = rows.iter().map(|r| r[0].clone()).collect();
    let values = numeric_block(path, &rows, 1, header.len() - 1)?;
    Ok(DataMatrix::new(values, ids)?)
}

/// Writes the labels (1-based, header = observation ids), weights and ids
/// trace matrices plus the sampler configuration.
pub fn write_traces(
    dir: &Path,
    traces: &McmcTraces,
    obs_ids: &[String],
) -> Result<Vec<PathBuf>, IoError> {
    let l = traces.components();
    let labels_path = dir.join(LABELS_FILE);
    let labels = traces.labels();
    write_csv(
        &labels_path,
        obs_ids,
        labels
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>()),
    )?;
    let mut written = vec![labels_path];
    for (file, prefix, m) in [
        (WEIGHTS_FILE, "w", traces.weights()),
        (IDS_FILE, "d", traces.ids()),
    ] {
        let path = dir.join(file);
        let header: Vec<String> = (1..=l).map(|k| format!("{prefix}{k}")).collect();
        write_csv(
            &path,
            &header,
            m.rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>()),
        )?;
        written.push(path);
    }
    let cfg = dir.join(CONFIG_FILE);
    write_json(&cfg, traces.config())?;
    written.push(cfg);
    Ok(written)
}

/// Inverse of [`write_traces`]; returns the traces and the observation ids.
pub fn read_traces(dir: &Path) -> Result<(McmcTraces, Vec<String>), IoError> {
    let config: HidalgoConfig = read_json(&dir.join(CONFIG_FILE))?;
    let lp = dir.join(LABELS_FILE);
    let (ids, rows) = read_csv(&lp)?;
    let labels: Array2<u32> = numeric_block(&lp, &rows, 0, ids.len())?;
    let wp = dir.join(WEIGHTS_FILE);
    let (wh, wrows) = read_csv(&wp)?;
    let weights: Array2<f64> = numeric_block(&wp, &wrows, 0, wh.len())?;
    let dp = dir.join(IDS_FILE);
    let (dh, drows) = read_csv(&dp)?;
    let d: Array2<f64> = numeric_block(&dp, &drows, 0, dh.len())?;
    Ok((McmcTraces::new(labels, weights, d, config)?, ids))
}

/// The co-clustering matrix with observation ids as header and first column.
pub fn write_pcm_csv(
    path: &Path,
    pcm: &CoClusteringMatrix,
    obs_ids: &[String],
) -> Result<(), IoError> {
    let mut header = vec!["id".to_string()];
    header.extend(obs_ids.iter().cloned());
    let m = pcm.matrix();
    let rows = (0..m.nrows()).map(|i| {
        std::iter::once(obs_ids[i].clone())
            .chain(m.row(i).iter().map(|v| v.to_string()).collect::<Vec<_>>())
    });
    write_csv(path, &header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng::seeded(1);
        let vals = Array2::from_shape_fn((5, 4), |_| r.random::<f64>() * 1e3 - 500.0);
        let ids = (0..5).map(|i| format!("r{i}")).collect();
        let m = DataMatrix::new(vals, ids).unwrap();
        let p = dir.path().join("sub/m.csv");
        write_matrix_csv(&p, &m).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), m);
    }

    #[test]
    fn traces_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng::seeded(2);
        let labels = Array2::from_shape_fn((6, 4), |_| r.random_range(1..=3u32));
        let mut w = Array2::from_shape_fn((6, 3), |_| r.random::<f64>() + 0.01);
        for mut row in w.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let d = Array2::from_shape_fn((6, 3), |_| r.random::<f64>() * 10.0 + 0.1);
        let t = McmcTraces::new(labels, w, d, HidalgoConfig::default()).unwrap();
        let ids: Vec<String> = ["a", "b", "c", "d"].map(String::from).to_vec();
        write_traces(dir.path(), &t, &ids).unwrap();
        let (back, back_ids) = read_traces(dir.path()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back_ids, ids);
    }

    #[test]
    fn parse_errors_carry_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "id,x1\na,1\nb,zz\n").unwrap();
        assert!(matches!(
            read_matrix_csv(&p),
            Err(IoError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            read_matrix_csv(&dir.path().join("none.csv")),
            Err(IoError::Io { .. })
        ));
    }
}
