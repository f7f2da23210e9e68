//! Per-step CSV logs, written under a `.partial` name until the run ends.

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pvseg_core::datasets::partial_path;

pub struct CsvLog {
    path: PathBuf,
    tmp: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let tmp = partial_path(path);
        let mut writer = csv::Writer::from_path(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        writer.write_record(header)?;
        Ok(CsvLog { path: path.to_path_buf(), tmp, writer })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.writer.write_record(fields)?;
        self.writer.flush()?;
        Ok(())
    }

    /// Move the log to its final name.
    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        std::fs::rename(&self.tmp, &self.path).with_context(|| format!("renaming to {}", self.path.display()))
    }
}
