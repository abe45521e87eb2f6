//! Matrix file formats.
//!
//! CSV: one row per line, comma-separated decimal reals, no header. Values
//! are written with 17 significant digits.
//!
//! MTXB (little-endian throughout):
//!
//! | offset | size        | content                      |
//! |--------|-------------|------------------------------|
//! | 0      | 4           | magic `MTXB`                 |
//! | 4      | 1           | version, currently `1`       |
//! | 5      | 4           | rows (`u32`)                 |
//! | 9      | 4           | cols (`u32`)                 |
//! | 13     | 8·rows·cols | `f64` entries, row-major     |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MTXB_MAGIC: &[u8; 4] = b"MTXB";
pub const MTXB_VERSION: u8 = 1;
const MTXB_HEADER: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Csv,
    Mtxb,
}

fn format_err(path: &Path, location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        location: location.into(),
        message: message.into(),
    }
}

pub fn encode_mtxb(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Invalid("too many rows for MTXB".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Invalid("too many columns for MTXB".into()))?;
    let mut out = Vec::with_capacity(MTXB_HEADER + 8 * m.data().len());
    out.extend_from_slice(MTXB_MAGIC);
    out.push(MTXB_VERSION);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mtxb(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < MTXB_HEADER {
        return Err(format_err(
            path,
            format!("offset {}", bytes.len()),
            format!("truncated header ({} of {MTXB_HEADER} bytes)", bytes.len()),
        ));
    }
    if &bytes[0..4] != MTXB_MAGIC {
        return Err(format_err(path, "offset 0", "bad magic, expected `MTXB`"));
    }
    if bytes[4] != MTXB_VERSION {
        return Err(format_err(
            path,
            "offset 4",
            format!("unsupported version {} (expected {MTXB_VERSION})", bytes[4]),
        ));
    }
    let rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let expected = MTXB_HEADER + 8 * rows * cols;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("offset {}", bytes.len().min(expected)),
            format!("payload length mismatch: file has {} bytes, {rows}x{cols} needs {expected}", bytes.len()),
        ));
    }
    let data = bytes[MTXB_HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn save_matrix_mtxb(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mtxb(m)?).map_err(|e| Error::io(path, e))
}

pub fn load_matrix_mtxb(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mtxb(&bytes, path)
}

pub fn encode_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn decode_csv(text: &str, path: &Path) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col, token) in line.split(',').enumerate() {
            let token = token.trim();
            let v: f64 = token.parse().map_err(|_| {
                format_err(
                    path,
                    format!("line {}, column {}", lineno + 1, col + 1),
                    format!("non-numeric token `{token}`"),
                )
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(format_err(
                    path,
                    format!("line {}", lineno + 1),
                    format!("ragged row: {} values, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

pub fn save_matrix_csv(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_csv(m)).map_err(|e| Error::io(path, e))
}

pub fn load_matrix_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_csv(&text, path)
}

pub fn load_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<Matrix> {
    match format {
        MatrixFormat::Csv => load_matrix_csv(path),
        MatrixFormat::Mtxb => load_matrix_mtxb(path),
    }
}

pub fn save_matrix(m: &Matrix, path: impl AsRef<Path>, format: MatrixFormat) -> Result<()> {
    match format {
        MatrixFormat::Csv => save_matrix_csv(m, path),
        MatrixFormat::Mtxb => save_matrix_mtxb(m, path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mtxb_size_and_layout() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let bytes = encode_mtxb(&m).unwrap();
        assert_eq!(bytes.len(), 45);
        assert_eq!(&bytes[0..5], b"MTXB\x01");
        assert_eq!(&bytes[5..13], &[2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[13..21], &1.0f64.to_le_bytes());
        assert_eq!(decode_mtxb(&bytes, Path::new("m")).unwrap(), m);
    }

    #[test]
    fn mtxb_errors() {
        let m = Matrix::zeros(2, 2);
        let bytes = encode_mtxb(&m).unwrap();
        let p = Path::new("x.mtxb");
        let mut bad = bytes.clone();
        bad[0] = b'N';
        assert!(decode_mtxb(&bad, p).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(decode_mtxb(&bad, p).unwrap_err().to_string().contains("version"));
        let err = decode_mtxb(&bytes[..30], p).unwrap_err().to_string();
        assert!(err.contains("offset 30"), "{err}");
        assert!(decode_mtxb(&bytes[..7], p).is_err());
    }

    #[test]
    fn csv_ragged_and_non_numeric() {
        let p = Path::new("a.csv");
        let err = decode_csv("1,2,3\n4,5\n", p).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = decode_csv("1,2\n3,abc\n", p).unwrap_err().to_string();
        assert!(err.contains("line 2, column 2") && err.contains("abc"), "{err}");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = Matrix::from_rows(&[[0.1, -1.0 / 3.0, 1e-300], [2.5e10, std::f64::consts::PI, -0.0]]).unwrap();
        let back = decode_csv(&encode_csv(&m), Path::new("m.csv")).unwrap();
        assert!(back.max_abs_diff(&m) <= 1e-15);
    }
}
