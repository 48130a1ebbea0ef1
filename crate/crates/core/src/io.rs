//! Plain-text matrix files and atomic output.
//!
//! A matrix file is a `rows cols` header line followed by `rows` lines of
//! `cols` whitespace-separated decimals. Values are written in Rust's
//! shortest round-trip form, so reading a written file restores every bit.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub fn format_matrix(m: &Matrix) -> String {
    let mut out = format!("{} {}\n", m.rows(), m.cols());
    for row in m.iter_rows() {
        for (c, x) in row.iter().enumerate() {
            if c > 0 {
                out.push(' ');
            }
            write!(out, "{x:?}").expect("writing to a String cannot fail");
        }
        out.push('\n');
    }
    out
}

pub fn parse_matrix(text: &str, path: &Path) -> Result<Matrix> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    let [rows, cols] = dims[..] else {
        return Err(err(1, format!("expected header \"rows cols\", got {header:?}")));
    };
    let parse_dim = |s: &str| -> Result<usize> {
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(err(1, format!("invalid dimension {s:?}"))),
        }
    };
    let (rows, cols) = (parse_dim(rows)?, parse_dim(cols)?);

    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if seen == rows {
            return Err(err(lineno, format!("more than {rows} data rows")));
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let x: f64 = tok
                .parse()
                .map_err(|_| err(lineno, format!("invalid number {tok:?}")))?;
            if !x.is_finite() {
                return Err(err(lineno, format!("non-finite value {tok:?}")));
            }
            data.push(x);
        }
        if data.len() - before != cols {
            return Err(err(
                lineno,
                format!("expected {cols} values, found {}", data.len() - before),
            ));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(err(
            text.lines().count().max(1),
            format!("expected {rows} data rows, found {seen}"),
        ));
    }
    Matrix::new(rows, cols, data)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_matrix(&text, path)
}

/// Reads a 1×n or n×1 matrix file as a flat vector.
pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let m = read_matrix(path)?;
    if m.rows() != 1 && m.cols() != 1 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected a vector, found a {}x{} matrix", m.rows(), m.cols()),
        });
    }
    Ok(m.into_data())
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_atomic(path, format_matrix(m).as_bytes())
}

/// Writes via a temporary file in the destination directory, then renames.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}
