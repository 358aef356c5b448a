//! Matrix text format and trajectory CSV.
//!
//! Matrices are stored as JSON objects `{"rows": r, "cols": c, "data": [[...], ...]}` with
//! row-major nested arrays.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linsys::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixText {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<f64>>,
}

impl From<&DMatrix<f64>> for MatrixText {
    fn from(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }
}

impl TryFrom<MatrixText> for DMatrix<f64> {
    type Error = Error;

    fn try_from(t: MatrixText) -> Result<Self> {
        if t.data.len() != t.rows || t.data.iter().any(|r| r.len() != t.cols) {
            return Err(Error::Parse(format!("matrix data does not match declared {}x{}", t.rows, t.cols)));
        }
        let flat: Vec<f64> = t.data.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(t.rows, t.cols, &flat))
    }
}

pub fn matrix_to_string(m: &DMatrix<f64>) -> String {
    serde_json::to_string_pretty(&MatrixText::from(m)).expect("matrix serialization")
}

pub fn matrix_from_str(s: &str) -> Result<DMatrix<f64>> {
    let t: MatrixText = serde_json::from_str(s)?;
    t.try_into()
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    std::fs::write(path, matrix_to_string(m) + "\n")?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    matrix_from_str(&std::fs::read_to_string(path)?)
}

/// Header `k,x_1..x_n,u_1..u_m`; the final state row leaves the input columns empty.
pub fn write_trajectory_csv<W: Write>(out: W, traj: &Trajectory) -> Result<()> {
    let n = traj.states.first().map_or(0, |x| x.len());
    let m = traj.inputs.first().map_or(0, |u| u.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=m).map(|i| format!("u_{i}")));
    w.write_record(&header)?;
    for (k, x) in traj.states.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(x.iter().map(|v| v.to_string()));
        match traj.inputs.get(k) {
            Some(u) => rec.extend(u.iter().map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), m)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: Read>(input: R) -> Result<Trajectory> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let n = header.iter().filter(|h| h.starts_with("x_")).count();
    let m = header.iter().filter(|h| h.starts_with("u_")).count();
    if header.len() != 1 + n + m {
        return Err(Error::Parse(format!("unexpected trajectory header {:?}", header)));
    }
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
        let x: Vec<f64> = (1..=n).map(|i| num(&rec[i])).collect::<Result<_>>()?;
        states.push(DVector::from_vec(x));
        if rec.iter().skip(1 + n).all(|s| !s.trim().is_empty()) && m > 0 {
            let u: Vec<f64> = (1 + n..1 + n + m).map(|i| num(&rec[i])).collect::<Result<_>>()?;
            inputs.push(DVector::from_vec(u));
        }
    }
    if states.len() != inputs.len() + 1 {
        return Err(Error::Parse(format!("{} states but {} inputs", states.len(), inputs.len())));
    }
    Ok(Trajectory { states, inputs })
}

pub fn write_trajectory_file(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    write_trajectory_csv(std::fs::File::create(path)?, traj)
}
