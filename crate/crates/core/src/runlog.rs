//! Uniformly sampled time series with named columns, written as CSV plus a
//! JSON metadata sidecar.

use std::path::Path;

use serde::Serialize;

use crate::error::{EmffError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Optional trailing text column (name, one value per row).
    pub tag_column: Option<String>,
    pub tags: Vec<String>,
}

impl RunLog {
    pub fn new(columns: Vec<String>) -> Self {
        Self { columns, ..Self::default() }
    }

    pub fn with_tag(columns: Vec<String>, tag_column: &str) -> Self {
        Self { columns, tag_column: Some(tag_column.into()), ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn push_tagged(&mut self, row: Vec<f64>, tag: String) {
        self.push(row);
        self.tags.push(tag);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        let mut header = self.columns.clone();
        header.extend(self.tag_column.iter().cloned());
        w.write_record(&header).map_err(io_err)?;
        for (k, row) in self.rows.iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            if self.tag_column.is_some() {
                rec.push(self.tags[k].clone());
            }
            w.write_record(&rec).map_err(io_err)?;
        }
        w.flush().map_err(|e| EmffError::Internal(format!("writing {}: {e}", path.display())))
    }
}

pub fn write_sidecar(path: &Path, metadata: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(metadata).expect("metadata serializes");
    std::fs::write(path, text + "\n").map_err(|e| EmffError::Internal(format!("writing {}: {e}", path.display())))
}

fn io_err(e: csv::Error) -> EmffError {
    EmffError::Internal(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_tags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let mut log = RunLog::with_tag(vec!["time_s".into(), "h".into()], "argmin");
        log.push_tagged(vec![0.0, 1.5], "Q3".into());
        log.push_tagged(vec![0.01, 0.25], "R12_2".into());
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "time_s,h,argmin\n0,1.5,Q3\n0.01,0.25,R12_2\n");
        assert_eq!(log.column("h").unwrap(), vec![1.5, 0.25]);
    }
}
