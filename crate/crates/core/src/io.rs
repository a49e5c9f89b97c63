//! File formats: ensembles, run records, Gibbs grids and payoff matrices.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::dynamics::{CheckpointRow, RunRecord};
use crate::ensemble::WeightedEnsemble;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::manifold::Manifold;
use crate::metrics::GibbsGrid;
use crate::scalar::Scalar;

pub const RECORD_HEADER: [&str; 6] = [
    "iter",
    "ni_estimate",
    "ni_exact",
    "wall_ms",
    "weight_entropy_x",
    "weight_entropy_y",
];

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn reader(path: &Path, headers: bool) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(headers)
        .trim(csv::Trim::All)
        .from_reader(f))
}

fn parse_num<F: Scalar>(s: &str, what: &str) -> Result<F> {
    s.parse::<f64>()
        .map(F::lit)
        .map_err(|_| Error::Config(format!("cannot parse {what} `{s}` as a number")))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// `particle_id,weight,coord_0,…,coord_{D-1}`.
pub fn write_ensemble_csv<F: Scalar>(path: &Path, e: &WeightedEnsemble<F>) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["particle_id".to_string(), "weight".to_string()];
    header.extend((0..e.dim()).map(|k| format!("coord_{k}")));
    w.write_record(&header)?;
    for (i, (p, wt)) in e.positions().zip(e.weights()).enumerate() {
        let mut row = vec![i.to_string(), wt.to_string()];
        row.extend(p.iter().map(|c| c.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an ensemble written by [`write_ensemble_csv`] and validates it
/// against `manifold`. Weights are renormalized.
pub fn read_ensemble_csv<F: Scalar>(path: &Path, manifold: &Manifold<F>) -> Result<WeightedEnsemble<F>> {
    let mut r = reader(path, true)?;
    let dim = r.headers()?.len().saturating_sub(2);
    if dim != manifold.coord_dim() {
        return Err(Error::DimensionMismatch {
            expected: manifold.coord_dim(),
            actual: dim,
        });
    }
    let mut positions = Vec::new();
    let mut weights = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        weights.push(parse_num::<F>(&rec[1], "weight")?);
        positions.push(
            (0..dim)
                .map(|k| parse_num::<F>(&rec[k + 2], "coordinate"))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    WeightedEnsemble::from_parts(manifold.clone(), positions, &weights)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_record_csv(path: &Path, rows: &[CheckpointRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(RECORD_HEADER)?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            r.ni_estimate.to_string(),
            r.ni_exact.map(|v| v.to_string()).unwrap_or_default(),
            r.wall_ms.to_string(),
            r.weight_entropy_x.to_string(),
            r.weight_entropy_y.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_record_csv(path: &Path) -> Result<Vec<CheckpointRow>> {
    let mut r = reader(path, true)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |k: usize| parse_num::<f64>(&rec[k], RECORD_HEADER[k]);
        rows.push(CheckpointRow {
            iter: rec[0]
                .parse()
                .map_err(|_| Error::Config(format!("bad iteration `{}`", &rec[0])))?,
            ni_estimate: num(1)?,
            ni_exact: if rec[2].is_empty() { None } else { Some(num(2)?) },
            wall_ms: num(3)?,
            weight_entropy_x: num(4)?,
            weight_entropy_y: num(5)?,
        });
    }
    Ok(rows)
}

/// Writes `record.csv`, `config.json`, `final_{x,y}.csv` and
/// `averaged_{x,y}.csv` into `dir`. `config` is the effective configuration
/// to echo.
pub fn write_run<F: Scalar, C: Serialize + ?Sized>(dir: &Path, record: &RunRecord<F>, config: &C) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_record_csv(&dir.join("record.csv"), &record.rows)?;
    write_json(&dir.join("config.json"), config)?;
    write_ensemble_csv(&dir.join("final_x.csv"), &record.final_x)?;
    write_ensemble_csv(&dir.join("final_y.csv"), &record.final_y)?;
    write_ensemble_csv(&dir.join("averaged_x.csv"), &record.averaged_x)?;
    write_ensemble_csv(&dir.join("averaged_y.csv"), &record.averaged_y)
}

/// `bin_center,rho_x,rho_y` (the two players share bin centers).
pub fn write_gibbs_csv<F: Scalar>(path: &Path, grid: &GibbsGrid<F>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["bin_center", "rho_x", "rho_y"])?;
    for ((c, a), b) in grid.centers_x.iter().zip(&grid.rho_x).zip(&grid.rho_y) {
        w.write_record([c.to_string(), a.to_string(), b.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a comma-separated payoff matrix, one row per line. A first line
/// that does not parse as numbers is treated as a header.
pub fn read_matrix_csv<F: Scalar>(path: &Path) -> Result<DenseMatrix<F>> {
    let mut r = reader(path, false)?;
    let mut rows: Vec<Vec<F>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parsed: Result<Vec<F>> = rec.iter().map(|s| parse_num(s, "matrix entry")).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Config(format!("{} line {}: {e}", path.display(), i + 1))),
        }
    }
    DenseMatrix::from_rows(&rows).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
