//! Headered CSV trajectories and JSON records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, Result};

pub fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("records serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// A trajectory table. Comment lines carry `key: value` metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e| CliError::io(path, e);
        let file = File::create(path).map_err(io)?;
        let mut out = BufWriter::new(file);
        for (k, v) in &self.meta {
            writeln!(out, "# {k}: {v}").map_err(io)?;
        }
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| CliError::io(path, e.into());
        w.write_record(&self.columns).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format!("{v:e}"))).map_err(csv_err)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a table; a file without a header or data rows, or with
    /// non-numeric or ragged rows, is a schema mismatch.
    pub fn read(path: &Path) -> Result<Self> {
        let mismatch = |m: String| CliError::SchemaMismatch(format!("{}: {m}", path.display()));
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut meta = Vec::new();
        let mut body = String::new();
        let mut line = String::new();
        loop {
            line.clear();
            if reader.read_line(&mut line).map_err(|e| CliError::io(path, e))? == 0 {
                break;
            }
            match line.strip_prefix('#') {
                Some(c) => {
                    if let Some((k, v)) = c.split_once(':') {
                        meta.push((k.trim().to_string(), v.trim().to_string()));
                    }
                }
                None => body.push_str(&line),
            }
        }
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
        let columns: Vec<String> =
            r.headers().map_err(|e| mismatch(e.to_string()))?.iter().map(str::to_string).collect();
        if columns.iter().all(String::is_empty) {
            return Err(mismatch("no header row".into()));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| mismatch(e.to_string()))?;
            let row = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| mismatch(format!("'{s}' is not a number"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(mismatch("no data rows".into()));
        }
        Ok(Self { meta, columns, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let t = Table {
            meta: vec![("units".into(), "t [s]; x [1]".into())],
            columns: vec!["t".into(), "x".into()],
            rows: vec![vec![0.0, 0.1], vec![1e-14, -1.0 / 3.0]],
        };
        t.write(&path).unwrap();
        assert_eq!(Table::read(&path).unwrap(), t);
    }

    #[test]
    fn empty_or_ragged_tables_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        for text in ["", "# only: comments\n", "t,x,speed\n", "t,x\n1,2\n3\n", "t,x\n1,a\n"] {
            std::fs::write(&path, text).unwrap();
            assert!(matches!(Table::read(&path), Err(CliError::SchemaMismatch(_))), "{text:?}");
        }
    }
}
