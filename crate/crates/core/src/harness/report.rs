use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::config::{hex, ExperimentConfig};
use crate::io::{self, PARTIAL_SUFFIX};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the bundle root, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
    /// `false` for files left behind by an interrupted write.
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub dataset: u64,
    pub network: u64,
}

/// Integrity manifest of an experiment directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub toolkit: String,
    pub toolkit_version: String,
    pub format_version: u32,
    pub config_hash: Option<String>,
    pub seeds: Option<Seeds>,
    pub files: Vec<FileEntry>,
}

impl ReportBundle {
    pub fn incomplete(&self) -> impl Iterator<Item = &FileEntry> {
        self.files.iter().filter(|f| !f.complete)
    }

    pub fn file(&self, path: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == path)
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        let kind = entry.file_type().map_err(|e| Error::io(&path, e))?;
        if kind.is_dir() {
            collect(root, &path, out)?;
            continue;
        }
        let rel: Vec<String> = path
            .strip_prefix(root)
            .expect("walked path lies under root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        let rel = rel.join("/");
        if rel == MANIFEST_NAME || rel == format!("{MANIFEST_NAME}{PARTIAL_SUFFIX}") {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        out.push(FileEntry {
            complete: !rel.ends_with(PARTIAL_SUFFIX),
            path: rel,
            bytes: bytes.len() as u64,
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    Ok(())
}

/// Builds the manifest of `root` (without writing it).
pub fn build_report(root: &Path) -> Result<ReportBundle> {
    if !root.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", root.display())));
    }
    let mut files = Vec::new();
    collect(root, root, &mut files)?;
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let config_path = root.join("experiment.toml");
    let config = if config_path.is_file() {
        Some(ExperimentConfig::load(&config_path)?)
    } else {
        None
    };
    Ok(ReportBundle {
        toolkit: env!("CARGO_PKG_NAME").to_string(),
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        format_version: io::FORMAT_VERSION,
        config_hash: config.as_ref().map(|c| c.hash()),
        seeds: config.as_ref().map(|c| Seeds {
            dataset: c.dataset.seed,
            network: c.network.seed,
        }),
        files,
    })
}

/// Builds the manifest of `root` and writes it to `root/manifest.json`.
pub fn write_report(root: &Path) -> Result<ReportBundle> {
    let bundle = build_report(root)?;
    let mut text = serde_json::to_string_pretty(&bundle).map_err(|e| Error::Format {
        path: root.join(MANIFEST_NAME),
        reason: e.to_string(),
    })?;
    text.push('\n');
    io::write_text(&root.join(MANIFEST_NAME), &text)?;
    Ok(bundle)
}
