//! Output directories: exclusive lock, checksummed manifest.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Usage;

const LOCK_NAME: &str = ".priceform.lock";
pub const MANIFEST_NAME: &str = "manifest.json";

/// Holds the output directory's lockfile until dropped.
pub struct OutputDir {
    root: PathBuf,
    lock: PathBuf,
    files: Vec<PathBuf>,
}

impl OutputDir {
    pub fn lock(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let lock = root.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Usage(format!(
                    "{} is in use by another command (delete {} if it is stale)",
                    root.display(),
                    lock.display()
                ))
                .into())
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        }
        Ok(OutputDir {
            root: root.to_path_buf(),
            lock,
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path under the root, creating parent directories.
    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    /// Records a file written under the root for the manifest.
    pub fn record(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    pub fn write(&mut self, rel: &str, body: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel)?;
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        self.record(p.clone());
        Ok(p)
    }

    pub fn write_json(&mut self, rel: &str, value: &impl Serialize) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(rel, text.as_bytes())
    }

    /// Writes `manifest.json` listing every recorded file with its checksum.
    pub fn finish(mut self, command: &str, config: serde_json::Value, extra: serde_json::Value) -> Result<PathBuf> {
        let mut files = Vec::new();
        let mut recorded = std::mem::take(&mut self.files);
        recorded.sort();
        recorded.dedup();
        for p in &recorded {
            files.push(FileEntry::of(&self.root, p)?);
        }
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            files,
            extra,
        };
        let p = self.root.join(MANIFEST_NAME);
        std::fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileEntry {
    fn of(root: &Path, p: &Path) -> Result<Self> {
        let body = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        let rel = p.strip_prefix(root).unwrap_or(p);
        Ok(FileEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: hex::encode(Sha256::digest(&body)),
            bytes: body.len() as u64,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    /// The effective configuration, after defaults and overrides.
    pub config: serde_json::Value,
    pub files: Vec<FileEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Usage(format!("{}: not a manifest: {e}", path.display())).into())
    }

    /// Checks every listed file against its checksum.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let body = std::fs::read(dir.join(&f.path)).with_context(|| format!("reading {}", f.path))?;
            let digest = hex::encode(Sha256::digest(&body));
            if digest != f.sha256 {
                anyhow::bail!("{}: checksum {} does not match manifest {}", f.path, digest, f.sha256);
            }
        }
        Ok(())
    }
}
