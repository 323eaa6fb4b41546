//! File formats: dataset CSV, binary datasets, image CSVs and parameter
//! checkpoints. Floats use the shortest representation that round-trips.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppca::{Dataset, DatasetMeta, PpcaParams};

/// Shortest round-trip decimal form of `v`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_dataset_csv(data: &Dataset) -> String {
    let d = data.dim();
    let mut out = (1..=d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..data.len() {
        for j in 0..d {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&fmt_f64(data.rows[(i, j)]));
        }
        out.push('\n');
    }
    out
}

fn parse_rows(text: &str, skip_header: bool) -> Result<(Vec<f64>, usize, usize)> {
    let mut values = Vec::new();
    let mut width = None;
    let mut n = 0;
    for (i, line) in text.lines().enumerate().skip(usize::from(skip_header)) {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Malformed { line: i + 1, message: e.to_string() })?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Malformed { line: i + 1, message: format!("expected {w} fields, found {}", row.len()) })
            }
            _ => {}
        }
        values.extend(row);
        n += 1;
    }
    let width = width.ok_or(Error::Malformed { line: 1, message: "no data rows".into() })?;
    Ok((values, n, width))
}

/// Dataset CSV with header `x1,...,xD`.
pub fn parse_dataset_csv(text: &str) -> Result<Dataset> {
    let header = text.lines().next().unwrap_or("").trim_end_matches('\r');
    let cols: Vec<&str> = header.split(',').collect();
    let ok = !header.is_empty() && cols.iter().enumerate().all(|(i, c)| c.trim() == format!("x{}", i + 1));
    if !ok {
        return Err(Error::Malformed { line: 1, message: "expected header x1,...,xD".into() });
    }
    let (values, n, width) = parse_rows(text, true)?;
    if width != cols.len() {
        return Err(Error::Malformed { line: 2, message: format!("header has {} columns, rows have {width}", cols.len()) });
    }
    Dataset::new(DMatrix::from_row_slice(n, width, &values), DatasetMeta { seed: None, source: "csv".into() })
}

/// Binary dataset: one observation per line, each a string of `0`/`1`.
pub fn write_binary_dataset(rows: &DMatrix<f64>) -> String {
    let mut out = String::with_capacity(rows.nrows() * (rows.ncols() + 1));
    for i in 0..rows.nrows() {
        for j in 0..rows.ncols() {
            out.push(if rows[(i, j)] > 0.5 { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

pub fn parse_binary_dataset(text: &str) -> Result<DMatrix<f64>> {
    let mut values = Vec::new();
    let mut width = None;
    let mut n = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        if let Some(w) = width {
            if w != line.len() {
                return Err(Error::Malformed { line: i + 1, message: format!("expected {w} characters, found {}", line.len()) });
            }
        }
        width = Some(line.len());
        for c in line.chars() {
            values.push(match c {
                '0' => 0.0,
                '1' => 1.0,
                other => return Err(Error::Malformed { line: i + 1, message: format!("unexpected character `{other}`") }),
            });
        }
        n += 1;
    }
    let width = width.ok_or(Error::Malformed { line: 1, message: "no data rows".into() })?;
    Ok(DMatrix::from_row_slice(n, width, &values))
}

/// Flat CSV of pixel intensities in `[0, 1]` (no header), binarized at 0.5.
pub fn parse_image_csv(text: &str) -> Result<DMatrix<f64>> {
    let (values, n, width) = parse_rows(text, false)?;
    if let Some(pos) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Malformed { line: pos / width + 1, message: "intensity outside [0, 1]".into() });
    }
    Ok(DMatrix::from_row_slice(n, width, &values).map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
}

pub fn write_image_csv(pixels: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..pixels.nrows() {
        for j in 0..pixels.ncols() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", fmt_f64(pixels[(i, j)]));
        }
        out.push('\n');
    }
    out
}

/// Parameter checkpoint: `W` row-major plus shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub mu: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_sigma2: Option<f64>,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
}

impl Checkpoint {
    pub fn from_parts(w: &DMatrix<f64>, mu: &DVector<f64>, log_sigma2: Option<f64>) -> Self {
        let (d, k) = w.shape();
        let w = (0..d).flat_map(|i| (0..k).map(move |j| (i, j))).map(|ij| w[ij]).collect();
        Checkpoint { w, mu: mu.iter().copied().collect(), log_sigma2, d, k }
    }

    pub fn w_matrix(&self) -> Result<DMatrix<f64>> {
        if self.w.len() != self.d * self.k {
            return Err(Error::DimensionMismatch { expected: self.d * self.k, found: self.w.len() });
        }
        Ok(DMatrix::from_row_slice(self.d, self.k, &self.w))
    }

    pub fn from_ppca(p: &PpcaParams) -> Self {
        Self::from_parts(&p.w, &p.mu, Some(p.log_sigma2))
    }

    pub fn to_ppca(&self) -> Result<PpcaParams> {
        let ls = self.log_sigma2.ok_or_else(|| Error::InvalidParams("checkpoint lacks log_sigma2".into()))?;
        PpcaParams::new(self.w_matrix()?, DVector::from_vec(self.mu.clone()), ls)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
