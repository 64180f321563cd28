//! Field snapshot files.
//!
//! Format, one header line then `n^d` values in row-major order (last axis
//! fastest), one per line, printed with Rust's shortest round-trip `Display`:
//!
//! ```text
//! # d=2 n=128 L=8 time=0.05 epsilon=0.2
//! 0.0001234
//! ...
//! ```
//!
//! `epsilon=0` marks the local equation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::grid::{Field, FieldRole, Grid, GridError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad header: {msg}")]
    Header { path: String, msg: String },
    #[error("{path}:{line}: cannot parse value '{text}'")]
    Value {
        path: String,
        line: usize,
        text: String,
    },
    #[error("{path}: expected {expected} values, found {found}")]
    Count {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub field: Field,
    pub time: f64,
    pub epsilon: f64,
}

pub fn format_snapshot(field: &Field, time: f64, epsilon: f64) -> String {
    let g = field.grid();
    let mut s = String::with_capacity(24 * g.size() + 64);
    let _ = writeln!(
        s,
        "# d={} n={} L={} time={} epsilon={}",
        g.dim(),
        g.n(),
        g.len(),
        time,
        epsilon
    );
    for v in field.values() {
        let _ = writeln!(s, "{v}");
    }
    s
}

pub fn write_snapshot(path: &Path, field: &Field, time: f64, epsilon: f64) -> Result<(), IoError> {
    fs::write(path, format_snapshot(field, time, epsilon)).map_err(|source| IoError::Fs {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_snapshot(text: &str, path: &str) -> Result<Snapshot, IoError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| IoError::Header {
        path: path.into(),
        msg: "empty file".into(),
    })?;
    let hdr_err = |msg: String| IoError::Header {
        path: path.into(),
        msg,
    };
    let body = header
        .strip_prefix('#')
        .ok_or_else(|| hdr_err("missing '#'".into()))?;
    let (mut d, mut n, mut l, mut time, mut eps) = (None, None, None, None, None);
    for tok in body.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| hdr_err(format!("token '{tok}' is not key=value")))?;
        let num = || {
            v.parse::<f64>()
                .map_err(|_| hdr_err(format!("'{k}' has non-numeric value '{v}'")))
        };
        match k {
            "d" => d = Some(num()? as usize),
            "n" => n = Some(num()? as usize),
            "L" => l = Some(num()?),
            "time" => time = Some(num()?),
            "epsilon" => eps = Some(num()?),
            other => return Err(hdr_err(format!("unknown key '{other}'"))),
        }
    }
    let miss = |k: &str| hdr_err(format!("missing '{k}'"));
    let grid = Grid::new(d.ok_or_else(|| miss("d"))?, n.ok_or_else(|| miss("n"))?, l.ok_or_else(|| miss("L"))?)?;
    let time = time.ok_or_else(|| miss("time"))?;
    let epsilon = eps.ok_or_else(|| miss("epsilon"))?;
    let mut values = Vec::with_capacity(grid.size());
    for (i, line) in lines.enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        values.push(t.parse::<f64>().map_err(|_| IoError::Value {
            path: path.into(),
            line: i + 2,
            text: t.into(),
        })?);
    }
    if values.len() != grid.size() {
        return Err(IoError::Count {
            path: path.into(),
            expected: grid.size(),
            found: values.len(),
        });
    }
    let field = Field::from_values(grid, FieldRole::Density, values);
    field.check_finite()?;
    Ok(Snapshot {
        field,
        time,
        epsilon,
    })
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Fs {
        path: path.display().to_string(),
        source,
    })?;
    parse_snapshot(&text, &path.display().to_string())
}
