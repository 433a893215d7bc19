//! CSV and JSON persistence helpers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::{Domain, FieldLocation, ScalarField, StructuredMesh};

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Malformed { path: path.display().to_string(), reason: reason.into() }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    serde_json::from_reader(r).map_err(|e| malformed(path, e.to_string()))
}

/// Headerless numeric CSV, one matrix row per line.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| malformed(path, format!("line {}: {e}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(malformed(path, format!("line {} has {} columns, expected {}", i + 1, row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, |r| r.len());
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// One value per line.
pub fn write_vector_csv(path: &Path, v: &[f64]) -> Result<()> {
    write_matrix_csv(path, &DMatrix::from_column_slice(v.len(), 1, v))
}

pub fn read_vector_csv(path: &Path) -> Result<Vec<f64>> {
    let m = read_matrix_csv(path)?;
    if m.ncols() > 1 {
        return Err(malformed(path, "expected a single column"));
    }
    Ok(m.as_slice().to_vec())
}

/// Sidecar describing a field CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldManifest {
    pub nx: usize,
    pub ny: usize,
    pub domain: Domain,
    pub location: FieldLocation,
    pub role: String,
}

/// Field values as a grid CSV (one row per `y` line, `x` along the row)
/// plus a JSON sidecar next to it.
pub fn write_field(path: &Path, mesh: &StructuredMesh, field: &ScalarField, role: &str) -> Result<()> {
    let (w, h) = match field.location {
        FieldLocation::Node => (mesh.nx + 1, mesh.ny + 1),
        FieldLocation::Element => (mesh.nx, mesh.ny),
    };
    if field.len() != w * h {
        return Err(Error::DimensionMismatch { context: "field on mesh", expected: w * h, actual: field.len() });
    }
    let grid = DMatrix::from_fn(h, w, |j, i| field.values[j * w + i]);
    write_matrix_csv(path, &grid)?;
    let manifest = FieldManifest { nx: mesh.nx, ny: mesh.ny, domain: mesh.domain, location: field.location, role: role.to_string() };
    write_json(&path.with_extension("json"), &manifest)
}

pub fn read_field(path: &Path) -> Result<(StructuredMesh, ScalarField, String)> {
    let m: FieldManifest = read_json(&path.with_extension("json"))?;
    let mesh = StructuredMesh::new(m.nx, m.ny, m.domain)?;
    let grid = read_matrix_csv(path)?;
    let values: Vec<f64> = grid.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
    let field = match m.location {
        FieldLocation::Node => ScalarField::nodal(&mesh, values),
        FieldLocation::Element => ScalarField::elemental(&mesh, values),
    }
    .map_err(|e| malformed(path, e.to_string()))?;
    Ok((mesh, field, m.role))
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Sparse matrix as `row,col,value` triplets with a header line.
pub fn write_triplets(path: &Path, m: &nalgebra_sparse::CsrMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row", "col", "value"])?;
    for (r, c, v) in m.triplet_iter() {
        w.write_record([r.to_string(), c.to_string(), format!("{v:e}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_triplets(path: &Path, nrows: usize, ncols: usize) -> Result<nalgebra_sparse::CsrMatrix<f64>> {
    #[derive(Deserialize)]
    struct Row {
        row: usize,
        col: usize,
        value: f64,
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut coo = nalgebra_sparse::CooMatrix::new(nrows, ncols);
    for rec in r.deserialize::<Row>() {
        let t = rec?;
        if t.row >= nrows || t.col >= ncols {
            return Err(malformed(path, format!("entry ({}, {}) outside {nrows}x{ncols}", t.row, t.col)));
        }
        coo.push(t.row, t.col, t.value);
    }
    Ok(nalgebra_sparse::CsrMatrix::from(&coo))
}

/// Convenience for vectors stored as matrices.
pub fn dvector_from(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub gamma: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub times: Vec<f64>,
    pub nx: usize,
    pub ny: usize,
    pub domain: Domain,
}

/// Nodal trajectory as `u_{n}.csv` grids plus `trajectory.json`; returns the written paths.
pub fn write_trajectory(
    dir: &Path,
    mesh: &StructuredMesh,
    traj: &crate::caputo::Trajectory,
    gamma: f64,
    dt: f64,
) -> Result<Vec<std::path::PathBuf>> {
    let mut files = Vec::with_capacity(traj.len() + 1);
    for (n, u) in traj.states.iter().enumerate() {
        let f = dir.join(format!("u_{n}.csv"));
        let field = ScalarField::nodal(mesh, u.as_slice().to_vec())?;
        let w = mesh.nx + 1;
        write_matrix_csv(&f, &DMatrix::from_fn(mesh.ny + 1, w, |j, i| field.values[j * w + i]))?;
        files.push(f);
    }
    let man = TrajectoryManifest {
        gamma,
        dt,
        n_steps: traj.len().saturating_sub(1),
        times: traj.times.clone(),
        nx: mesh.nx,
        ny: mesh.ny,
        domain: mesh.domain,
    };
    let f = dir.join("trajectory.json");
    write_json(&f, &man)?;
    files.push(f);
    Ok(files)
}

pub fn read_trajectory(dir: &Path) -> Result<(TrajectoryManifest, crate::caputo::Trajectory)> {
    let f = dir.join("trajectory.json");
    let man: TrajectoryManifest = read_json(&f)?;
    if man.times.len() != man.n_steps + 1 {
        return Err(malformed(&f, "time list does not match n_steps"));
    }
    let mut states = Vec::with_capacity(man.times.len());
    for n in 0..=man.n_steps {
        let p = dir.join(format!("u_{n}.csv"));
        let g = read_matrix_csv(&p)?;
        if g.shape() != (man.ny + 1, man.nx + 1) {
            return Err(malformed(&p, "grid shape does not match the manifest"));
        }
        states.push(DVector::from_iterator(g.len(), g.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>())));
    }
    Ok((man.clone(), crate::caputo::Trajectory { times: man.times, states }))
}
