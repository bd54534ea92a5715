//! Output-directory layout, stage stamps, and the writer lock.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Stage, Variant};
use crate::error::{format_err, io_err, Error, Result};

/// Paths under one output directory. Stages shared by several variants write to
/// the top level; variant-specific results live under `variants/<name>`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout {
            root: root.to_path_buf(),
        }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn dataset_manifest(&self) -> PathBuf {
        self.data().join("dataset.toml")
    }
    pub fn prep(&self) -> PathBuf {
        self.root.join("prep")
    }
    pub fn prep_meta(&self) -> PathBuf {
        self.prep().join("meta.toml")
    }
    pub fn translation(&self) -> PathBuf {
        self.root.join("translation")
    }
    pub fn seg(&self) -> PathBuf {
        self.root.join("seg")
    }
    pub fn variant(&self, v: Variant) -> PathBuf {
        self.root.join("variants").join(v.name())
    }
    pub fn variant_seg(&self, v: Variant, residual: bool) -> PathBuf {
        self.variant(v)
            .join(if residual { "seg_residual" } else { "seg" })
    }
    pub fn adapt(&self, v: Variant) -> PathBuf {
        self.variant(v).join("adapt")
    }
    pub fn select(&self, v: Variant) -> PathBuf {
        self.variant(v).join("select")
    }
    pub fn eval(&self, v: Variant) -> PathBuf {
        self.variant(v).join("eval")
    }
    pub fn report_text(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn report_table(&self) -> PathBuf {
        self.root.join("report.tsv")
    }
    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }
}

/// Completion record written last by every stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stamp {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

pub const STAMP_FILE: &str = "stage.toml";

pub fn write_stamp(dir: &Path, stamp: &Stamp) -> Result<()> {
    let p = dir.join(STAMP_FILE);
    let text = toml::to_string(stamp).map_err(|e| format_err(&p, e.to_string()))?;
    fs::write(&p, text).map_err(io_err(&p))
}

pub fn read_stamp(dir: &Path) -> Result<Option<Stamp>> {
    let p = dir.join(STAMP_FILE);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    toml::from_str(&text)
        .map(Some)
        .map_err(|e| format_err(&p, e.to_string()))
}

/// The stamp of a finished predecessor stage, checked against the current hash.
pub fn require_stamp(
    dir: &Path,
    stage: Stage,
    expected_hash: &str,
    allow_mismatch: bool,
) -> Result<Stamp> {
    let p = dir.join(STAMP_FILE);
    let Some(s) = read_stamp(dir)? else {
        return Err(Error::MissingArtifact {
            stage: stage.name().into(),
            path: p,
        });
    };
    if s.stage != stage.name() {
        return Err(format_err(
            &p,
            format!("expected a `{}` stamp, found `{}`", stage.name(), s.stage),
        ));
    }
    if s.config_hash != expected_hash && !allow_mismatch {
        return Err(Error::HashMismatch {
            path: p,
            found: s.config_hash,
            expected: expected_hash.into(),
        });
    }
    Ok(s)
}

/// Clears a stage directory before it is rewritten, so a crash never leaves a
/// stale stamp next to partial outputs.
pub fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Exclusive writer lock on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(layout: &Layout) -> Result<Self> {
        fs::create_dir_all(&layout.root).map_err(io_err(&layout.root))?;
        let path = layout.lock();
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
