//! Deterministic CSV emission.
//!
//! Floats are written with Rust's shortest round-trip formatting, so the
//! same value always produces the same text and the text parses back to
//! the same bits. Row order is the caller's responsibility.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

/// One CSV cell. `From` impls cover the types the lab emits.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Uint(u64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}
impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Uint(v)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Uint(v as u64)
    }
}
impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}
impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}
impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Str(v.to_string())
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Str(v)
    }
}

/// Shortest text that round-trips to the same f64. NaN and infinities are
/// spelled out so a damaged run is visible in the artifact.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{x}")
    }
}

fn fmt_cell(cell: &Cell, out: &mut String) {
    match cell {
        Cell::Int(v) => {
            let _ = write!(out, "{v}");
        }
        Cell::Uint(v) => {
            let _ = write!(out, "{v}");
        }
        Cell::Float(v) => out.push_str(&fmt_f64(*v)),
        Cell::Bool(v) => out.push_str(if *v { "true" } else { "false" }),
        Cell::Str(v) => {
            // Emitted strings are identifiers; quote only when needed.
            if v.contains(',') || v.contains('"') || v.contains('\n') {
                out.push('"');
                out.push_str(&v.replace('"', "\"\""));
                out.push('"');
            } else {
                out.push_str(v);
            }
        }
    }
}

/// Writer that pins a header and enforces the column count on every row.
pub struct CsvFile {
    out: BufWriter<File>,
    columns: usize,
}

impl CsvFile {
    pub fn create<P: AsRef<Path>>(path: P, header: &[&str]) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(header.join(",").as_bytes())?;
        out.write_all(b"\n")?;
        Ok(Self { out, columns: header.len() })
    }

    pub fn row(&mut self, cells: &[Cell]) -> io::Result<()> {
        assert_eq!(
            cells.len(),
            self.columns,
            "row width {} does not match header width {}",
            cells.len(),
            self.columns
        );
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            fmt_cell(cell, &mut line);
        }
        line.push('\n');
        self.out.write_all(line.as_bytes())
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.out.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trips() {
        for &x in &[
            0.0,
            -0.0,
            1.0,
            0.1,
            1.0 / 3.0,
            f64::MIN_POSITIVE,
            1.7976931348623157e308,
            -2.5e-17,
        ] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x} -> {s}");
        }
        assert_eq!(fmt_f64(f64::NAN), "NaN");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
    }

    #[test]
    fn writes_expected_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut w = CsvFile::create(&path, &["a", "b", "c"]).unwrap();
        w.row(&[Cell::from(1u64), Cell::from(0.5), Cell::from(true)]).unwrap();
        w.row(&[Cell::from(-2i64), Cell::from("x,y"), Cell::from(false)]).unwrap();
        w.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "a,b,c\n1,0.5,true\n-2,\"x,y\",false\n");
    }

    #[test]
    #[should_panic(expected = "row width")]
    fn rejects_wrong_width() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = CsvFile::create(dir.path().join("t.csv"), &["a", "b"]).unwrap();
        let _ = w.row(&[Cell::from(1u64)]);
    }
}
