//! Matrix Market coordinate format (real or integer, general or symmetric).
//!
//! Indices are 1-based on disk and 0-based in memory. Symmetric files store
//! one triangle and are expanded to both on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Symmetry {
    General,
    Symmetric,
}

pub fn load_matrix_market(path: impl AsRef<Path>) -> Result<SparseMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_matrix_market(BufReader::new(file))
}

pub fn read_matrix_market<R: BufRead>(reader: R) -> Result<SparseMatrix> {
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, message: String| Error::MatrixMarket {
        line: line + 1,
        message,
    };
    let io_err = |line: usize, e: std::io::Error| parse_err(line, e.to_string());

    let (lno, header) = match lines.next() {
        Some((lno, l)) => (lno, l.map_err(|e| io_err(lno, e))?),
        None => return Err(parse_err(0, "empty file".into())),
    };
    let tokens: Vec<String> = header
        .split_whitespace()
        .map(|t| t.to_ascii_lowercase())
        .collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(parse_err(lno, format!("bad header {header:?}")));
    }
    if tokens[2] != "coordinate" {
        return Err(parse_err(
            lno,
            format!("unsupported format {:?}, only coordinate", tokens[2]),
        ));
    }
    match tokens[3].as_str() {
        "real" | "integer" | "double" => {}
        "pattern" => {
            return Err(parse_err(
                lno,
                "pattern-only files carry no values".into(),
            ))
        }
        other => return Err(parse_err(lno, format!("unsupported field {other:?}"))),
    }
    let symmetry = match tokens[4].as_str() {
        "general" => Symmetry::General,
        "symmetric" => Symmetry::Symmetric,
        other => {
            return Err(parse_err(
                lno,
                format!("unsupported symmetry {other:?}"),
            ))
        }
    };

    let mut size: Option<(usize, usize, usize)> = None;
    let mut triplets = Vec::new();
    for (lno, line) in lines {
        let line = line.map_err(|e| io_err(lno, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        match size {
            None => {
                if fields.len() != 3 {
                    return Err(parse_err(lno, "size line needs rows cols nnz".into()));
                }
                let nums: Vec<usize> = fields
                    .iter()
                    .map(|f| f.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(lno, format!("bad size line: {e}")))?;
                if nums[0] != nums[1] {
                    return Err(parse_err(
                        lno,
                        format!("matrix is {}x{}, not square", nums[0], nums[1]),
                    ));
                }
                size = Some((nums[0], nums[1], nums[2]));
                triplets.reserve(nums[2] * 2);
            }
            Some((nrows, ncols, _)) => {
                if fields.len() != 3 {
                    return Err(parse_err(lno, "entry needs row col value".into()));
                }
                let i: usize = fields[0]
                    .parse()
                    .map_err(|e| parse_err(lno, format!("bad row index: {e}")))?;
                let j: usize = fields[1]
                    .parse()
                    .map_err(|e| parse_err(lno, format!("bad column index: {e}")))?;
                let v: f64 = fields[2]
                    .parse()
                    .map_err(|e| parse_err(lno, format!("bad value: {e}")))?;
                if i == 0 || j == 0 || i > nrows || j > ncols {
                    return Err(parse_err(
                        lno,
                        format!("entry ({i}, {j}) outside {nrows}x{ncols}"),
                    ));
                }
                let (i, j) = (i - 1, j - 1);
                if symmetry == Symmetry::Symmetric && j > i {
                    return Err(parse_err(
                        lno,
                        format!("symmetric file stores upper entry ({}, {})", i + 1, j + 1),
                    ));
                }
                triplets.push((i, j, v));
                if symmetry == Symmetry::Symmetric && i != j {
                    triplets.push((j, i, v));
                }
            }
        }
    }
    let (nrows, ncols, nnz) = size.ok_or_else(|| parse_err(lno, "missing size line".into()))?;
    let stored = match symmetry {
        Symmetry::General => triplets.len(),
        Symmetry::Symmetric => triplets.iter().filter(|t| t.0 >= t.1).count(),
    };
    if stored != nnz {
        return Err(Error::MatrixMarket {
            line: 0,
            message: format!("header announces {nnz} entries, file has {stored}"),
        });
    }
    SparseMatrix::from_triplets(nrows, ncols, triplets)
}

/// Writes `a` in `general` coordinate format. Values use the shortest
/// round-tripping exponent notation, so a reload is bit-identical.
pub fn write_matrix_market<W: Write>(a: &SparseMatrix, writer: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{} {} {}", a.nrows(), a.ncols(), a.nnz())?;
    for i in 0..a.nrows() {
        let (cols, vals) = a.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            writeln!(w, "{} {} {:e}", i + 1, j + 1, v)?;
        }
    }
    w.flush()
}

pub fn save_matrix_market(a: &SparseMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_matrix_market(a, file).map_err(io)
}
