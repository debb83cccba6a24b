//! Sample matrices with provenance, persisted as CSV plus a JSON sidecar.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sampler: String,
    pub schedule: Option<serde_json::Value>,
    pub seed: u64,
    pub spec_hash: Option<String>,
}

impl Provenance {
    pub fn new(sampler: impl Into<String>, seed: u64) -> Self {
        Self {
            sampler: sampler.into(),
            schedule: None,
            seed,
            spec_hash: None,
        }
    }
}

/// Row-major matrix of `n × dim` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn new(dim: usize, data: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("sample dimension must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Input(format!(
                "sample buffer of length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite sample entry at row {}", i / dim)));
        }
        Ok(Self { dim, data, provenance })
    }

    pub fn from_rows(rows: &[Vec<f64>], provenance: Provenance) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.len())
            .ok_or_else(|| Error::Input("empty sample set".into()))?;
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Input("ragged sample rows".into()));
        }
        Self::new(dim, rows.concat(), provenance)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Applies `f` to every row, producing a new set of possibly different dimension.
    pub fn map_rows<F>(&self, out_dim: usize, provenance: Provenance, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let mut data = Vec::with_capacity(self.len() * out_dim);
        for r in self.rows() {
            let y = f(r);
            if y.len() != out_dim {
                return Err(Error::DimensionMismatch { expected: out_dim, got: y.len() });
            }
            data.extend(y);
        }
        Self::new(out_dim, data, provenance)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Unbiased sample covariance, row-major `dim × dim`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let m = self.mean();
        let mut c = vec![0.0; d * d];
        for r in self.rows() {
            for i in 0..d {
                let di = r[i] - m[i];
                for j in 0..d {
                    c[i * d + j] += di * (r[j] - m[j]);
                }
            }
        }
        let denom = (self.len().max(2) - 1) as f64;
        c.iter_mut().for_each(|v| *v /= denom);
        c
    }

    /// Writes `path` (CSV, header `x0,…`) and `path.json` (provenance).
    pub fn write_csv(&self, path: &Path) -> Result<PathBuf> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        let header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        writeln!(f, "{}", header.join(","))?;
        for r in self.rows() {
            let line: Vec<String> = r.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(f, "{}", line.join(","))?;
        }
        f.flush()?;
        let sidecar = sidecar_path(path);
        fs::write(&sidecar, serde_json::to_string_pretty(&self.provenance)?)?;
        Ok(sidecar)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let dim = rdr.headers()?.len();
        let mut data = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            for field in rec.iter() {
                data.push(field.trim().parse::<f64>().map_err(|e| {
                    Error::Parse(format!("{}: bad number `{field}`: {e}", path.display()))
                })?);
            }
        }
        if data.is_empty() {
            return Err(Error::Input(format!("{}: no samples", path.display())));
        }
        let sidecar = sidecar_path(path);
        let provenance = if sidecar.exists() {
            serde_json::from_str(&fs::read_to_string(&sidecar)?)?
        } else {
            Provenance::new("unknown", 0)
        };
        Self::new(dim, data, provenance)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
