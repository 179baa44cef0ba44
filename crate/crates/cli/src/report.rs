//! CSV artifacts. Each file starts with a `#` line carrying the command and
//! the resolved configuration.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

/// Incrementally written CSV file.
pub struct CsvReport {
    writer: csv::Writer<File>,
}

impl CsvReport {
    /// Creates `path` (and its directory) with a comment line and the column
    /// names of `T`.
    pub fn create(path: &Path, comment: &str, columns: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        writeln!(file, "# {comment}")?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer.write_record(columns)?;
        writer.flush()?;
        Ok(CsvReport { writer })
    }

    /// Opens an existing report for appending rows.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        let writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        Ok(CsvReport { writer })
    }

    pub fn row<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Writes all `rows` at once.
pub fn write_all<T: Serialize>(path: &Path, comment: &str, columns: &[&str], rows: &[T]) -> Result<()> {
    let mut r = CsvReport::create(path, comment, columns)?;
    for row in rows {
        r.row(row)?;
    }
    Ok(())
}

/// Data rows of a report, skipping the comment and column lines.
pub fn read_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_path(path)?;
    Ok(reader.records().collect::<Result<_, _>>()?)
}
