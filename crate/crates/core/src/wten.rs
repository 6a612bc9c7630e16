//! Tensor file I/O.
//!
//! The native format is WTEN: a one-line ASCII header followed by the
//! row-major payload as little-endian `f64`:
//!
//! ```text
//! WTEN v1 <rank> <dim0> <dim1> ...\n
//! <len-product * 8 bytes>
//! ```
//!
//! Round trips are bit-exact. CSV is accepted as a convenience for tensors of
//! rank 1 (one line) and rank 2 (one line per row); values there use Rust's
//! shortest round-trip float formatting, so CSV round trips are lossless too.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum WtenError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a WTEN file: {0}")]
    BadHeader(String),
    #[error("payload has {got} bytes, header implies {expected}")]
    PayloadSize { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("CSV supports rank 1 or 2, not rank {0}")]
    CsvRank(usize),
    #[error("CSV line {line}: cannot parse {field:?} as a number")]
    CsvNumber { line: usize, field: String },
    #[error("CSV line {line} has {got} fields, expected {expected}")]
    CsvRagged { line: usize, expected: usize, got: usize },
    #[error("CSV file is empty")]
    CsvEmpty,
}

pub fn write_wten(path: &Path, t: &Tensor) -> Result<(), WtenError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write!(f, "WTEN v1 {}", t.rank())?;
    for d in t.shape() {
        write!(f, " {d}")?;
    }
    writeln!(f)?;
    for v in t.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_wten(path: &Path) -> Result<Tensor, WtenError> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| WtenError::BadHeader("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| WtenError::BadHeader("header is not UTF-8".into()))?;
    let mut fields = header.split_whitespace();
    match (fields.next(), fields.next()) {
        (Some("WTEN"), Some("v1")) => {}
        _ => return Err(WtenError::BadHeader(header.to_string())),
    }
    let rank: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| WtenError::BadHeader(header.to_string()))?;
    let shape: Vec<usize> = fields
        .map(|s| s.parse().map_err(|_| WtenError::BadHeader(header.to_string())))
        .collect::<Result<_, _>>()?;
    if shape.len() != rank {
        return Err(WtenError::BadHeader(header.to_string()));
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[nl + 1..];
    if payload.len() != count * 8 {
        return Err(WtenError::PayloadSize { expected: count * 8, got: payload.len() });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn write_csv(path: &Path, t: &Tensor) -> Result<(), WtenError> {
    if t.rank() > 2 {
        return Err(WtenError::CsvRank(t.rank()));
    }
    let cols = *t.shape().last().unwrap();
    let mut out = String::new();
    for (i, row) in t.data().chunks(cols).enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
        }
    }
    out.push('\n');
    fs::write(path, out)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Tensor, WtenError> {
    let mut text = String::new();
    fs::File::open(path)?.read_to_string(&mut text)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|field| {
                field.trim().parse::<f64>().map_err(|_| WtenError::CsvNumber {
                    line: lineno + 1,
                    field: field.trim().to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(WtenError::CsvRagged {
                    line: lineno + 1,
                    expected: first.len(),
                    got: row.len(),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(WtenError::CsvEmpty);
    }
    let cols = rows[0].len();
    if rows.len() == 1 {
        return Ok(Tensor::new(vec![cols], rows.pop().unwrap())?);
    }
    let shape = vec![rows.len(), cols];
    Ok(Tensor::new(shape, rows.into_iter().flatten().collect())?)
}

/// Read a tensor, dispatching on the `.csv` extension.
pub fn read_tensor(path: &Path) -> Result<Tensor, WtenError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_csv(path)
    } else {
        read_wten(path)
    }
}

/// Write a tensor, dispatching on the `.csv` extension.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), WtenError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        write_csv(path, t)
    } else {
        write_wten(path, t)
    }
}
