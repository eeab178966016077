//! JSON Lines dataset manifests.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_OPTIONS_MARKER: &str = "Options:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub image_path: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default = "default_tag")]
    pub dataset_tag: String,
}

fn default_tag() -> String {
    "default".to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub schema_version: u32,
    /// Directory relative image paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Parses a manifest and checks ids and image paths eagerly.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, root)?;
        manifest.check_images()?;
        Ok(manifest)
    }

    /// Parses without touching the filesystem.
    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| CliError::Config(format!("manifest line {}: {e}", lineno + 1)))?;
            if !seen.insert(entry.sample_id.clone()) {
                return Err(CliError::Config(format!(
                    "duplicate sample_id '{}'",
                    entry.sample_id
                )));
            }
            entries.push(entry);
        }
        Ok(Self {
            entries,
            schema_version: SCHEMA_VERSION,
            root,
        })
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn check_images(&self) -> Result<()> {
        for e in &self.entries {
            let path = self.image_path(e);
            if !path.is_file() {
                return Err(CliError::Config(format!(
                    "sample '{}': image not found at {}",
                    e.sample_id,
                    path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }
}

/// Turns a multiple-choice prompt into an open-ended one: the first line whose
/// trimmed text starts with `marker`, and every line after it, is dropped.
pub fn strip_choices(question: &str, marker: &str) -> String {
    let kept: Vec<&str> = question
        .lines()
        .take_while(|l| !l.trim_start().starts_with(marker))
        .collect();
    kept.join("\n").trim_end().to_string()
}
