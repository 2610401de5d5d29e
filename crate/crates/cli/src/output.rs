//! Output directory handling and the run manifest.

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

/// Everything needed to rerun a command: the resolved plan plus the files
/// it produced and their checksums.
#[derive(Debug, Serialize)]
pub struct Manifest<'a, P: Serialize> {
    pub schema_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub plan: &'a P,
    pub status: &'a str,
    pub error: Option<String>,
    pub outputs: &'a [OutputFile],
}

pub struct OutputDir {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(OutputFile {
            name: name.to_string(),
            bytes: contents.len(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }

    /// Writes `manifest.json`. On failure the manifest records the error and
    /// the files that were completed before it.
    pub fn finish<P: Serialize>(self, plan: &P, error: Option<&anyhow::Error>) -> Result<()> {
        let manifest = Manifest {
            schema_version: 1,
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            plan,
            status: if error.is_some() { "partial" } else { "complete" },
            error: error.map(|e| format!("{e:#}")),
            outputs: &self.files,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// JSON document with the same schema header information as the CSV files.
pub fn json_document<T: Serialize + ?Sized>(kind: &str, data: &T) -> Result<String> {
    #[derive(Serialize)]
    struct Doc<'a, T: ?Sized> {
        schema_version: u32,
        kind: &'a str,
        data: &'a T,
    }
    Ok(serde_json::to_string_pretty(&Doc {
        schema_version: 1,
        kind,
        data,
    })? + "\n")
}
