//! Plain-text matrix files.
//!
//! ```text
//! rows cols
//! v11 v12 ...
//! v21 v22 ...
//! ```
//!
//! Values are whitespace separated and row-major; line breaks carry no
//! meaning after the header. The writer emits one row per line with 17
//! significant digits, which round-trips every finite `f64` bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::AttentionInstance;
use crate::tensor::Matrix;

/// File names of an instance directory, in constructor order.
pub const INSTANCE_FILES: [&str; 6] = ["A1.mat", "A2.mat", "A3.mat", "E.mat", "X.mat", "Y.mat"];
pub const META_FILE: &str = "meta.json";

/// Contents of `meta.json` in an instance directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub n: usize,
    pub d: usize,
    #[serde(rename = "B")]
    pub bound: f64,
    pub seed: u64,
    pub noise_sigma: f64,
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    parse_matrix(&text).map_err(|(line, message)| Error::Parse { path: path.to_path_buf(), line, message })
}

pub fn write_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_matrix(m)).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn format_matrix(m: &Matrix) -> String {
    let mut out = String::with_capacity(m.rows() * m.cols() * 24 + 16);
    writeln!(out, "{} {}", m.rows(), m.cols()).unwrap();
    for i in 0..m.rows() {
        let row = m.row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            write!(out, "{v:.16e}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Writes the six matrices and `meta.json` into `dir`, creating it if needed.
pub fn save_instance(inst: &AttentionInstance, meta: &InstanceMeta, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    let mats = [inst.a1(), inst.a2(), inst.a3(), inst.e(), inst.x(), inst.y()];
    for (name, m) in INSTANCE_FILES.iter().zip(mats) {
        write_matrix(m, dir.join(name))?;
    }
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&path, text + "\n").map_err(|source| Error::Io { path, source })
}

/// Reads an instance directory and validates it against the bound in `meta.json`.
pub fn load_instance(dir: impl AsRef<Path>) -> Result<(AttentionInstance, InstanceMeta)> {
    let dir = dir.as_ref();
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
    let meta: InstanceMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: path.clone(), line: e.line(), message: e.to_string() })?;
    let mut mats = Vec::with_capacity(INSTANCE_FILES.len());
    for name in INSTANCE_FILES {
        mats.push(read_matrix(dir.join(name))?);
    }
    let [a1, a2, a3, e, x, y]: [Matrix; 6] = mats.try_into().expect("six matrices");
    if a1.shape() != (meta.n, meta.d) {
        return Err(Error::InvalidInstance(format!(
            "meta.json declares n = {}, d = {} but A1 is {}x{}",
            meta.n,
            meta.d,
            a1.rows(),
            a1.cols()
        )));
    }
    let inst = AttentionInstance::new(a1, a2, a3, e, x, y, meta.bound)?;
    Ok((inst, meta))
}

/// Parses the text format; errors carry a 1-based line number.
pub fn parse_matrix(text: &str) -> std::result::Result<Matrix, (usize, String)> {
    let mut tokens = text
        .lines()
        .enumerate()
        .flat_map(|(i, line)| line.split_whitespace().map(move |t| (i + 1, t)));

    let mut header_dim = |name: &str| -> std::result::Result<usize, (usize, String)> {
        match tokens.next() {
            None => Err((1, format!("malformed header: missing {name}"))),
            Some((line, tok)) => match tok.parse::<usize>() {
                Ok(0) | Err(_) => Err((line, format!("malformed header: {name} must be a positive integer, got {tok:?}"))),
                Ok(v) => Ok(v),
            },
        }
    };
    let rows = header_dim("rows")?;
    let cols = header_dim("cols")?;
    let header_line = 1;

    let expected = rows
        .checked_mul(cols)
        .ok_or((header_line, format!("malformed header: {rows}x{cols} overflows")))?;
    let mut data = Vec::with_capacity(expected.min(1 << 24));
    let mut last_line = header_line;
    for (line, tok) in tokens {
        last_line = line;
        let v: f64 = tok
            .parse()
            .map_err(|_| (line, format!("cannot parse {tok:?} as a number")))?;
        if !v.is_finite() {
            return Err((line, format!("non-finite value {tok}")));
        }
        data.push(v);
        if data.len() > expected {
            return Err((line, format!("expected {expected} values, found more")));
        }
    }
    if data.len() != expected {
        return Err((last_line, format!("expected {expected} values, found {}", data.len())));
    }
    Matrix::new(rows, cols, data).map_err(|e| (header_line, e.to_string()))
}
