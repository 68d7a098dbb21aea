//! Plain-text parameter checkpoints.
//!
//! Layout, one item per line:
//!
//! ```text
//! lbsguard-checkpoint 1
//! meta <key> <value...>
//! tensor <name> <rows> <cols>
//! <cols whitespace-separated values>      (repeated `rows` times)
//! ```
//!
//! Values are written with Rust's shortest round-trip `f64` formatting, so a
//! write/read cycle reproduces every parameter bit-for-bit.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::{Matrix, NumericsError, Scalar};

pub const CHECKPOINT_MAGIC: &str = "lbsguard-checkpoint 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Matrix<f64>)>,
}

impl Checkpoint {
    pub fn push<T: Scalar>(&mut self, name: &str, m: &Matrix<T>) {
        let data = m.as_slice().iter().map(|v| v.as_f64()).collect();
        let m64 = Matrix::from_vec(m.rows(), m.cols(), data).expect("same shape");
        self.tensors.push((name.to_string(), m64));
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Matrix<T>, NumericsError> {
        let (_, m) = self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| NumericsError::Checkpoint {
                line: 0,
                msg: format!("missing tensor `{name}`"),
            })?;
        let data = m.as_slice().iter().map(|&v| T::lit(v)).collect();
        Matrix::from_vec(m.rows(), m.cols(), data)
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64, NumericsError> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| NumericsError::Checkpoint {
                line: 0,
                msg: format!("missing or invalid meta `{key}`"),
            })
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ck: &Checkpoint) -> Result<(), NumericsError> {
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    for (k, v) in &ck.meta {
        writeln!(w, "meta {k} {v}")?;
    }
    for (name, m) in &ck.tensors {
        writeln!(w, "tensor {name} {} {}", m.rows(), m.cols())?;
        for r in 0..m.rows() {
            let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Checkpoint, NumericsError> {
    let bad = |line: usize, msg: &str| NumericsError::Checkpoint {
        line,
        msg: msg.to_string(),
    };
    let mut lines = r.lines().enumerate();
    match lines.next() {
        Some((_, Ok(l))) if l.trim() == CHECKPOINT_MAGIC => {}
        _ => return Err(bad(1, "missing checkpoint header")),
    }
    let mut ck = Checkpoint::default();
    while let Some((i, line)) = lines.next() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("meta") => {
                let key = parts.next().ok_or_else(|| bad(lineno, "meta without key"))?;
                let value = parts.collect::<Vec<_>>().join(" ");
                ck.meta.insert(key.to_string(), value);
            }
            Some("tensor") => {
                let name = parts.next().ok_or_else(|| bad(lineno, "tensor without name"))?;
                let rows: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(lineno, "bad row count"))?;
                let cols: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(lineno, "bad column count"))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (j, row) = lines.next().ok_or_else(|| bad(lineno, "truncated tensor"))?;
                    let row = row?;
                    let vals: Result<Vec<f64>, _> = row.split_whitespace().map(str::parse).collect();
                    let vals = vals.map_err(|_| bad(j + 1, "unparsable value"))?;
                    if vals.len() != cols {
                        return Err(bad(j + 1, "wrong number of columns"));
                    }
                    data.extend(vals);
                }
                ck.tensors.push((name.to_string(), Matrix::from_vec(rows, cols, data)?));
            }
            _ => return Err(bad(lineno, "unknown record")),
        }
    }
    Ok(ck)
}
