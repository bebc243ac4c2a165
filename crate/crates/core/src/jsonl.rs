//! JSON-lines helpers shared by the corpus and manifest formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub struct JsonlWriter {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_owned(), inner: BufWriter::new(file) })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value).expect("records serialize");
        self.inner
            .write_all(line.as_bytes())
            .and_then(|_| self.inner.write_all(b"\n"))
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub struct JsonlReader {
    path: PathBuf,
    lines: Lines<BufReader<File>>,
    line_no: usize,
}

impl JsonlReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_owned(), lines: BufReader::new(file).lines(), line_no: 0 })
    }

    pub fn line_no(&self) -> usize {
        self.line_no
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Reads the header line and checks its `format_version`.
    pub fn header<T: DeserializeOwned>(&mut self, expected_version: u64) -> Result<T> {
        let raw: serde_json::Value =
            self.next_record()?.ok_or_else(|| Error::corrupt(&self.path, 1, "missing header"))?;
        let found = raw.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0);
        if found != expected_version {
            return Err(Error::FormatVersionMismatch { path: self.path.clone(), found, expected: expected_version });
        }
        serde_json::from_value(raw).map_err(|e| Error::corrupt(&self.path, 1, e))
    }

    pub fn next_record<T: DeserializeOwned>(&mut self) -> Result<Option<T>> {
        match self.lines.next() {
            None => Ok(None),
            Some(line) => {
                self.line_no += 1;
                let line = line.map_err(|e| Error::io(&self.path, e))?;
                serde_json::from_str(&line).map(Some).map_err(|e| Error::corrupt(&self.path, self.line_no, e))
            }
        }
    }

    pub fn corrupt(&self, reason: impl ToString) -> Error {
        Error::corrupt(&self.path, self.line_no, reason)
    }
}
