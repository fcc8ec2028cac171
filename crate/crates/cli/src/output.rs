//! CSV, JSON and manifest writers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Scientific notation with 13 significant digits.
pub fn sci(x: f64) -> String {
    format!("{x:.12e}")
}

pub fn sci_opt(x: Option<f64>) -> String {
    x.map(sci).unwrap_or_default()
}

/// Semicolon-joined list, for pulse values inside one CSV field.
pub fn sci_list(xs: &[f64]) -> String {
    xs.iter().map(|&x| sci(x)).collect::<Vec<_>>().join(";")
}

/// Header plus rows of already formatted fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<&'static str>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| *h == name)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
        w.write_record(&self.header).map_err(|e| io_error(path, e))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| io_error(path, e))?;
        }
        w.flush().map_err(|e| io_error(path, e))?;
        Ok(())
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output(format!("{}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_error(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub cool: &'static str,
    pub pulsecool: &'static str,
    pub os: &'static str,
    pub arch: &'static str,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            cool: env!("CARGO_PKG_VERSION"),
            pulsecool: pulsecool::VERSION,
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
        }
    }
}

/// Written next to every set of results.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub experiment: &'static str,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub jobs: usize,
    pub versions: Versions,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

/// Output directory, created if missing.
pub fn ensure_dir(dir: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    Ok(dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sci_has_thirteen_significant_digits() {
        assert_eq!(sci(1.0), "1.000000000000e0");
        assert_eq!(sci(-2.5e-4), "-2.500000000000e-4");
        let back: f64 = sci(std::f64::consts::PI).parse().unwrap();
        assert!((back - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(vec!["a", "b"]);
        t.push(vec![sci(1.5), sci_list(&[1.0, 2.0])]);
        let p = dir.path().join("t.csv");
        t.write(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "a,b\n1.500000000000e0,1.000000000000e0;2.000000000000e0\n");
    }
}
