//! Headered numeric CSV input and atomic file output.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

/// A numeric table read from a CSV file with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::input(format!("{origin}: header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
            return Err(CliError::input(format!("{origin}: missing header row")));
        }
        let mut rows = Vec::new();
        for (r, record) in reader.records().enumerate() {
            // Data row r sits on line r + 2 after the header.
            let line = r + 2;
            let record = record.map_err(|e| CliError::input(format!("{origin}: line {line}: {e}")))?;
            if record.len() != headers.len() {
                return Err(CliError::input(format!(
                    "{origin}: line {line}: {} fields, header has {}",
                    record.len(),
                    headers.len()
                )));
            }
            let mut row = Vec::with_capacity(headers.len());
            for (c, field) in record.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    CliError::input(format!("{origin}: line {line}, column '{}': cannot parse '{field}'", headers[c]))
                })?;
                if !v.is_finite() {
                    return Err(CliError::input(format!("{origin}: line {line}, column '{}': non-finite value", headers[c])));
                }
                row.push(v);
            }
            rows.push(row);
        }
        Ok(Self { headers, rows })
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn column_index(&self, name: &str) -> CliResult<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::input(format!("column '{name}' not found; header is {:?}", self.headers)))
    }

    /// Columns `names` in the given order as an `n x names.len()` matrix.
    pub fn select(&self, names: &[String]) -> CliResult<DMatrix<f64>> {
        let idx: Vec<usize> = names.iter().map(|n| self.column_index(n)).collect::<CliResult<_>>()?;
        Ok(DMatrix::from_fn(self.rows.len(), idx.len(), |i, j| self.rows[i][idx[j]]))
    }
}

/// Parse `"v1,v2,..."` into numbers.
pub fn parse_list(text: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::input(format!("cannot parse '{s}' as a number"))))
        .collect()
}

/// Serialize a header and numeric rows as CSV. Floats use the shortest round-trip form.
pub fn to_csv<S: AsRef<str>>(headers: &[S], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(headers.iter().map(|h| h.as_ref())).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn numeric_rows(m: &DMatrix<f64>) -> Vec<Vec<String>> {
    (0..m.nrows()).map(|i| m.row(i).iter().map(|v| v.to_string()).collect()).collect()
}

/// Write through a temporary file in the target directory, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Write to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(p) => write_atomic(p, bytes),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes).and_then(|_| out.flush()).map_err(|e| CliError::io("<stdout>", e))
        }
    }
}
