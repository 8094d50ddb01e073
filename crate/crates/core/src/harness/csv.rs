//! CSV output with a fixed header, validated on write and on read.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Int(i64),
    UInt(u64),
    Float(f64),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::UInt(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::UInt(v)
    }
}

impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::UInt(v as u64)
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::UInt(v) => write!(f, "{v}"),
            Cell::Float(v) if v.is_nan() => f.write_str("NaN"),
            Cell::Float(v) if v.is_infinite() => f.write_str(if *v > 0.0 { "inf" } else { "-inf" }),
            // 17 significant digits.
            Cell::Float(v) => write!(f, "{v:.16e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    /// Optional trailing line after the rows.
    pub footer: Option<String>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            footer: None,
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Config(format!(
                "row has {} columns, header `{}` has {}",
                row.len(),
                self.header.join(","),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn push_floats(&mut self, row: &[f64]) -> Result<()> {
        self.push(row.iter().map(|&v| Cell::Float(v)).collect())
    }

    pub fn render(&self) -> String {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        let bytes = (|| -> csv::Result<Vec<u8>> {
            w.write_record(&self.header)?;
            for row in &self.rows {
                w.write_record(row.iter().map(|c| c.to_string()))?;
            }
            if let Some(f) = &self.footer {
                w.write_record(f.split(','))?;
            }
            w.into_inner().map_err(|e| e.into_error().into())
        })()
        .expect("writing to memory cannot fail");
        String::from_utf8(bytes).expect("cells are ASCII")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}

/// Parsed CSV: header, data rows and footer lines. Rows must match the header
/// width; records of the form `key=value,...` after the data are footers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCsv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub footer: Vec<String>,
}

impl ParsedCsv {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        self.rows.iter().map(|r| r[k].parse().ok()).collect()
    }

    /// Value of `key` in the footer, if present.
    pub fn footer_value(&self, key: &str) -> Option<&str> {
        self.footer
            .iter()
            .flat_map(|l| l.split(','))
            .find_map(|kv| kv.split_once('=').filter(|(k, _)| *k == key).map(|(_, v)| v))
    }
}

pub fn read_csv(path: &Path, expected_header: &[&str]) -> Result<ParsedCsv> {
    let bad = |msg: String| Error::Config(format!("{}: {msg}", path.display()));
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != expected_header {
        return Err(bad(format!(
            "header `{}` does not match `{}`",
            header.join(","),
            expected_header.join(",")
        )));
    }
    let mut rows = Vec::new();
    let mut footer = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.get(0).is_some_and(|f| f.contains('=')) {
            footer.push(rec.iter().collect::<Vec<_>>().join(","));
            continue;
        }
        if !footer.is_empty() {
            return Err(bad(format!("data after footer on line {line}")));
        }
        if rec.len() != header.len() {
            return Err(bad(format!(
                "line {line} has {} columns, expected {}",
                rec.len(),
                header.len()
            )));
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(ParsedCsv { header, rows, footer })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(Cell::Float(0.1).to_string(), "1.0000000000000001e-1");
        assert_eq!(Cell::Float(f64::NAN).to_string(), "NaN");
        assert_eq!(Cell::Int(42).to_string(), "42");
        let v: f64 = Cell::Float(std::f64::consts::PI).to_string().parse().unwrap();
        assert_eq!(v, std::f64::consts::PI);
    }

    #[test]
    fn rejects_wrong_width() {
        let mut t = Table::new(&["a", "b"]);
        assert!(t.push_floats(&[1.0]).is_err());
        assert!(t.push_floats(&[1.0, 2.0]).is_ok());
    }

    #[test]
    fn round_trip() {
        let dir = std::env::temp_dir().join(format!("em2mlr-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        let mut t = Table::new(&["n", "x"]);
        t.push(vec![Cell::Int(3), Cell::Float(0.5)]).unwrap();
        t.footer = Some("slope=1,stderr=2".into());
        t.write(&path).unwrap();
        let p = read_csv(&path, &["n", "x"]).unwrap();
        assert_eq!(p.rows.len(), 1);
        assert_eq!(p.footer, vec!["slope=1,stderr=2".to_string()]);
        assert_eq!(p.footer_value("stderr"), Some("2"));
        assert_eq!(p.column("x").unwrap(), vec![0.5]);
        assert!(read_csv(&path, &["n", "y"]).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
