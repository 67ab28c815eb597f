//! Feature files: a row-major `N x d` matrix of little-endian reals.
//!
//! ```text
//! magic  "DSA1" (f32 payload) or "DSA8" (f64 payload)
//! u32    N  (frames, >= 1)
//! u32    d  (features per frame, >= 1)
//! N*d    reals
//! ```
//!
//! A CSV alternative holds one frame per line, comma-separated.

use std::fs;
use std::path::Path;

use dsa_core::Matrix;

use crate::CliError;

pub const MAGIC_F32: [u8; 4] = *b"DSA1";
pub const MAGIC_F64: [u8; 4] = *b"DSA8";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    /// Binary, 32-bit payload.
    F32,
    /// Binary, 64-bit payload.
    F64,
    Csv,
}

impl FeatureFormat {
    fn element_size(self) -> usize {
        match self {
            FeatureFormat::F32 => 4,
            FeatureFormat::F64 => 8,
            FeatureFormat::Csv => 0,
        }
    }
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Format(format!("{}: {msg}", path.display()))
}

pub fn encode_features(m: &Matrix, format: FeatureFormat) -> Result<Vec<u8>, CliError> {
    let (n, d) = (m.rows(), m.cols());
    if n == 0 {
        return Err(CliError::Format("feature matrix has no frames".into()));
    }
    let too_big = |_| CliError::Format(format!("{n} x {d} does not fit a feature file header"));
    let (n32, d32) = (u32::try_from(n).map_err(too_big)?, u32::try_from(d).map_err(too_big)?);
    match format {
        FeatureFormat::Csv => {
            let mut out = String::new();
            for r in 0..n {
                let line: Vec<String> = m.row(r).iter().map(|x| format!("{x:?}")).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
            Ok(out.into_bytes())
        }
        FeatureFormat::F32 | FeatureFormat::F64 => {
            let mut out = Vec::with_capacity(HEADER_LEN + n * d * format.element_size());
            out.extend_from_slice(if format == FeatureFormat::F32 {
                &MAGIC_F32
            } else {
                &MAGIC_F64
            });
            out.extend_from_slice(&n32.to_le_bytes());
            out.extend_from_slice(&d32.to_le_bytes());
            for &x in m.data() {
                if format == FeatureFormat::F32 {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Ok(out)
        }
    }
}

fn decode_binary(bytes: &[u8], path: &Path) -> Result<Matrix, CliError> {
    let format = match &bytes[..4] {
        m if m == MAGIC_F32 => FeatureFormat::F32,
        m if m == MAGIC_F64 => FeatureFormat::F64,
        _ => unreachable!("caller checked the magic"),
    };
    if bytes.len() < HEADER_LEN {
        return Err(format_err(path, "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (n, d) = (word(4), word(8));
    if n == 0 || d == 0 {
        return Err(format_err(path, format!("empty feature matrix {n} x {d}")));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(format.element_size()))
        .ok_or_else(|| format_err(path, "header dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(format_err(
            path,
            format!("payload is {} bytes, header {n} x {d} needs {expected}", payload.len()),
        ));
    }
    let data: Vec<f64> = match format {
        FeatureFormat::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Matrix::from_vec(n, d, data).map_err(|e| format_err(path, e))
}

fn decode_csv(text: &str, path: &Path) -> Result<Matrix, CliError> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| format_err(path, format!("line {}: `{}`: {e}", i + 1, f.trim())))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    if rows.is_empty() {
        return Err(format_err(path, "no frames"));
    }
    Matrix::from_rows(&rows).map_err(|e| format_err(path, e))
}

/// Parses binary feature bytes, falling back to CSV when no magic is present.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Matrix, CliError> {
    if bytes.len() >= 4 && (bytes[..4] == MAGIC_F32 || bytes[..4] == MAGIC_F64) {
        return decode_binary(bytes, path);
    }
    let text =
        std::str::from_utf8(bytes).map_err(|_| format_err(path, "neither a binary feature file nor CSV text"))?;
    decode_csv(text, path)
}

pub fn read_features(path: &Path) -> Result<Matrix, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    decode_features(&bytes, path)
}

pub fn write_features(path: &Path, m: &Matrix, format: FeatureFormat) -> Result<(), CliError> {
    let bytes = encode_features(m, format)?;
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
