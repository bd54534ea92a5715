//! Format dispatch and the dataset manifest.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cmada_core::volume::{LabelVolume, Spacing, Volume};

use crate::error::{format_err, io_err, Result};
use crate::{nifti, raw};

fn is_nifti(path: &Path) -> Result<bool> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") | Some("gz") => Ok(true),
        Some("hdr") => {
            let mut head = [0u8; 4];
            let mut f = fs::File::open(path).map_err(io_err(path))?;
            let n = f.read(&mut head).map_err(io_err(path))?;
            Ok(nifti::is_nifti_header(&head[..n]))
        }
        _ => Err(format_err(
            path,
            "unknown volume format (expected .nii or .hdr)",
        )),
    }
}

/// Reads an image from NIfTI-1 or the raw format.
pub fn load_volume(path: &Path) -> Result<Volume> {
    if is_nifti(path)? {
        let img = nifti::read_nifti(path)?;
        Ok(Volume::new(img.shape, Spacing::new(img.spacing)?, img.data)
            .map_err(|e| format_err(path, e.to_string()))?)
    } else {
        Ok(raw::read_volume(path)?.0)
    }
}

/// Reads a label grid; NIfTI voxels must be integers below `classes`.
pub fn load_labels(path: &Path, classes: u8) -> Result<LabelVolume> {
    if is_nifti(path)? {
        let img = nifti::read_nifti(path)?;
        let mut data = Vec::with_capacity(img.data.len());
        for (i, &v) in img.data.iter().enumerate() {
            if !(v >= 0.0 && v < classes as f64 && v.fract() == 0.0) {
                return Err(format_err(
                    path,
                    format!("voxel {i} holds {v}, not a label below {classes}"),
                ));
            }
            data.push(v as u8);
        }
        Ok(
            LabelVolume::new(img.shape, Spacing::new(img.spacing)?, classes, data)
                .map_err(|e| format_err(path, e.to_string()))?,
        )
    } else {
        let l = raw::read_labels(path)?.0;
        if l.classes() != classes {
            return Err(format_err(
                path,
                format!(
                    "label grid declares {} classes, expected {classes}",
                    l.classes()
                ),
            ));
        }
        Ok(l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetEntry {
    pub id: String,
    pub image: PathBuf,
    /// Reference labels, read only by evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

/// Volume paths per domain; relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub source: Vec<SourceEntry>,
    pub target: Vec<TargetEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: DatasetManifest =
            toml::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
        if m.source.is_empty() || m.target.is_empty() {
            return Err(format_err(
                path,
                "manifest needs at least one source and one target volume",
            ));
        }
        let mut ids: Vec<&str> = m.source.iter().map(|e| e.id.as_str()).collect();
        ids.extend(m.target.iter().map(|e| e.id.as_str()));
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return Err(format_err(path, "volume ids must be unique"));
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| format_err(path, e.to_string()))?;
        fs::write(path, text).map_err(io_err(path))
    }
}
