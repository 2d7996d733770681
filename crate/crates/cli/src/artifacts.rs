use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Plain table written as RFC-4180 CSV. Complex quantities occupy a `_re` and
/// an `_im` column.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &'static str, header: Vec<String>) -> Self {
        Self {
            name,
            header,
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|x| format_float(*x)))?;
        }
        w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))
    }
}

/// Shortest representation that round-trips.
fn format_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

/// Complex column pair names.
pub fn complex_columns(prefix: &str, n: usize) -> Vec<String> {
    (0..n).flat_map(|i| [format!("{prefix}{i}_re"), format!("{prefix}{i}_im")]).collect()
}

/// `sha256("blob <len>\0" ++ content)`, as git computes object ids.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

/// Writes each file and returns its manifest entry.
pub fn write_files(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<Vec<FileEntry>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    files
        .iter()
        .map(|(name, content)| {
            let path = dir.join(name);
            std::fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
            Ok(FileEntry {
                name: name.clone(),
                bytes: content.len(),
                sha256: blob_hash(content),
            })
        })
        .collect()
}
