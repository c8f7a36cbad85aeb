//! Matrix Market coordinate-format ingestion.
//!
//! Integer and real entries are accepted; real values quantize to signed
//! 16-bit by round-to-nearest, saturating at the type bounds, so oracles
//! and the machine share one value domain.

use super::CsrMatrix;
use std::fmt;
use std::fs;
use std::path::Path;

#[derive(Debug)]
pub enum MtxError {
    Io(std::io::Error),
    Malformed(String),
    Unsupported(String),
}

impl fmt::Display for MtxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MtxError::Io(e) => write!(f, "cannot read matrix file: {e}"),
            MtxError::Malformed(m) => write!(f, "malformed Matrix Market data: {m}"),
            MtxError::Unsupported(m) => write!(f, "unsupported Matrix Market variant: {m}"),
        }
    }
}

impl std::error::Error for MtxError {}

impl From<std::io::Error> for MtxError {
    fn from(e: std::io::Error) -> Self {
        MtxError::Io(e)
    }
}

pub fn quantize(v: f64) -> i16 {
    v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn read_mtx(path: &Path) -> Result<CsrMatrix, MtxError> {
    parse_mtx(&fs::read_to_string(path)?)
}

pub fn parse_mtx(text: &str) -> Result<CsrMatrix, MtxError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| MtxError::Malformed("empty file".into()))?;
    let header_fields: Vec<String> = header.split_whitespace().map(|s| s.to_lowercase()).collect();
    if header_fields.len() < 4 || header_fields[0] != "%%matrixmarket" || header_fields[1] != "matrix" {
        return Err(MtxError::Malformed(format!("bad header: {header}")));
    }
    if header_fields[2] != "coordinate" {
        return Err(MtxError::Unsupported(format!(
            "only coordinate format is read, got {}",
            header_fields[2]
        )));
    }
    let field = header_fields[3].as_str();
    if !matches!(field, "integer" | "real" | "pattern") {
        return Err(MtxError::Unsupported(format!("field type {field}")));
    }
    let symmetric = match header_fields.get(4).map(|s| s.as_str()) {
        None | Some("general") => false,
        Some("symmetric") => true,
        Some(other) => return Err(MtxError::Unsupported(format!("symmetry {other}"))),
    };

    let mut lines = lines.filter(|l| !l.trim_start().starts_with('%'));
    let size_line = lines
        .next()
        .ok_or_else(|| MtxError::Malformed("missing size line".into()))?;
    let dims: Vec<usize> = size_line
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| MtxError::Malformed(format!("size token {t}"))))
        .collect::<Result<_, _>>()?;
    if dims.len() != 3 {
        return Err(MtxError::Malformed(format!("size line: {size_line}")));
    }
    let (rows, cols, nnz) = (dims[0], dims[1], dims[2]);

    let mut triples = Vec::with_capacity(nnz);
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 2 {
            return Err(MtxError::Malformed(format!("entry line: {line}")));
        }
        let r: usize = toks[0]
            .parse()
            .map_err(|_| MtxError::Malformed(format!("row index {}", toks[0])))?;
        let c: usize = toks[1]
            .parse()
            .map_err(|_| MtxError::Malformed(format!("col index {}", toks[1])))?;
        if r == 0 || c == 0 || r > rows || c > cols {
            return Err(MtxError::Malformed(format!("index out of range: {line}")));
        }
        let v = match field {
            "pattern" => 1i16,
            _ => {
                let raw: f64 = toks
                    .get(2)
                    .ok_or_else(|| MtxError::Malformed(format!("missing value: {line}")))?
                    .parse()
                    .map_err(|_| MtxError::Malformed(format!("value token: {line}")))?;
                quantize(raw)
            }
        };
        triples.push((r - 1, c - 1, v));
        if symmetric && r != c {
            triples.push((c - 1, r - 1, v));
        }
    }
    if triples.len() < nnz {
        return Err(MtxError::Malformed(format!(
            "expected {nnz} entries, found {}",
            triples.len()
        )));
    }
    Ok(CsrMatrix::from_triples(rows, cols, &triples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_integer_coordinate() {
        let text = "%%MatrixMarket matrix coordinate integer general\n\
                    % comment\n\
                    3 4 3\n\
                    1 1 5\n\
                    2 3 -2\n\
                    3 4 7\n";
        let m = parse_mtx(text).unwrap();
        assert_eq!((m.rows, m.cols, m.nnz()), (3, 4, 3));
        assert_eq!(m.row_entries(1).collect::<Vec<_>>(), vec![(2, -2)]);
        assert!(m.check_invariants());
    }

    #[test]
    fn quantizes_real_values() {
        let text = "%%MatrixMarket matrix coordinate real general\n\
                    2 2 2\n\
                    1 1 1.4\n\
                    2 2 -2.6\n";
        let m = parse_mtx(text).unwrap();
        assert_eq!(m.row_entries(0).next().unwrap().1, 1);
        assert_eq!(m.row_entries(1).next().unwrap().1, -3);
        assert_eq!(quantize(1e9), i16::MAX);
        assert_eq!(quantize(-1e9), i16::MIN);
    }

    #[test]
    fn expands_symmetric_entries() {
        let text = "%%MatrixMarket matrix coordinate integer symmetric\n\
                    3 3 2\n\
                    2 1 4\n\
                    3 3 9\n";
        let m = parse_mtx(text).unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.row_entries(0).collect::<Vec<_>>(), vec![(1, 4)]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_mtx("").is_err());
        assert!(parse_mtx("%%MatrixMarket matrix array real general\n2 2\n1\n2\n3\n4\n").is_err());
        assert!(parse_mtx("%%MatrixMarket matrix coordinate integer general\n2 2 1\n5 5 1\n").is_err());
    }
}
