//! Repo-native grid format: a plain-text `.hdr` next to a little-endian `.raw`
//! payload in x-fastest order.
//!
//! ```text
//! cmada-raw 1
//! kind = image | labels
//! dtype = f64 | f32 | u8
//! shape = 64 64 16
//! spacing = 1 1 3
//! classes = 3            (labels only)
//! stage = preprocess     (optional)
//! config_hash = ...      (optional)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cmada_core::volume::{Dims, LabelVolume, Spacing, Triple, Volume};

use crate::error::{format_err, io_err, Result};

pub const MAGIC: &str = "cmada-raw 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawDtype {
    F64,
    F32,
    U8,
}

impl RawDtype {
    fn name(self) -> &'static str {
        match self {
            RawDtype::F64 => "f64",
            RawDtype::F32 => "f32",
            RawDtype::U8 => "u8",
        }
    }
    fn width(self) -> usize {
        match self {
            RawDtype::F64 => 8,
            RawDtype::F32 => 4,
            RawDtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawHeader {
    pub labels: bool,
    pub dtype: RawDtype,
    pub shape: Dims,
    pub spacing: Triple,
    pub classes: Option<u8>,
    pub stage: Option<String>,
    pub config_hash: Option<String>,
}

/// Payload path paired with a header path.
pub fn data_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Provenance recorded in a header.
#[derive(Debug, Clone, Copy, Default)]
pub struct Provenance<'a> {
    pub stage: Option<&'a str>,
    pub config_hash: Option<&'a str>,
}

fn header_text(h: &RawHeader) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "kind = {}", if h.labels { "labels" } else { "image" });
    let _ = writeln!(s, "dtype = {}", h.dtype.name());
    let _ = writeln!(s, "shape = {} {} {}", h.shape[0], h.shape[1], h.shape[2]);
    let _ = writeln!(
        s,
        "spacing = {} {} {}",
        h.spacing[0], h.spacing[1], h.spacing[2]
    );
    if let Some(c) = h.classes {
        let _ = writeln!(s, "classes = {c}");
    }
    if let Some(st) = &h.stage {
        let _ = writeln!(s, "stage = {st}");
    }
    if let Some(hash) = &h.config_hash {
        let _ = writeln!(s, "config_hash = {hash}");
    }
    s
}

fn parse_triple<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = v
        .split_whitespace()
        .map(|p| {
            p.parse()
                .map_err(|_| format_err(path, format!("bad {key} component {p:?}")))
        })
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| format_err(path, format!("{key} needs three components")))
}

pub fn read_header(path: &Path) -> Result<RawHeader> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MAGIC) {
        return Err(format_err(path, "not a cmada raw header"));
    }
    let (mut kind, mut dtype, mut shape, mut spacing) = (None, None, None, None);
    let (mut classes, mut stage, mut hash) = (None, None, None);
    for line in lines.map(str::trim).filter(|l| !l.is_empty()) {
        let Some((k, v)) = line.split_once('=') else {
            return Err(format_err(path, format!("malformed line {line:?}")));
        };
        let v = v.trim();
        match k.trim() {
            "kind" => {
                kind = Some(match v {
                    "image" => false,
                    "labels" => true,
                    _ => return Err(format_err(path, format!("unknown kind {v:?}"))),
                })
            }
            "dtype" => {
                dtype = Some(match v {
                    "f64" => RawDtype::F64,
                    "f32" => RawDtype::F32,
                    "u8" => RawDtype::U8,
                    _ => return Err(format_err(path, format!("unknown dtype {v:?}"))),
                })
            }
            "shape" => shape = Some(parse_triple::<usize>(path, "shape", v)?),
            "spacing" => spacing = Some(parse_triple::<f64>(path, "spacing", v)?),
            "classes" => {
                classes = Some(
                    v.parse()
                        .map_err(|_| format_err(path, format!("bad classes {v:?}")))?,
                )
            }
            "stage" => stage = Some(v.to_string()),
            "config_hash" => hash = Some(v.to_string()),
            other => return Err(format_err(path, format!("unknown key {other:?}"))),
        }
    }
    let missing = |k: &str| format_err(path, format!("header lacks `{k}`"));
    let labels = kind.ok_or_else(|| missing("kind"))?;
    let h = RawHeader {
        labels,
        dtype: dtype.ok_or_else(|| missing("dtype"))?,
        shape: shape.ok_or_else(|| missing("shape"))?,
        spacing: spacing.ok_or_else(|| missing("spacing"))?,
        classes,
        stage,
        config_hash: hash,
    };
    if labels && (h.dtype != RawDtype::U8 || h.classes.is_none()) {
        return Err(format_err(
            path,
            "label grids need dtype u8 and a class count",
        ));
    }
    Ok(h)
}

fn read_payload(path: &Path, h: &RawHeader) -> Result<Vec<u8>> {
    let dp = data_path(path);
    let bytes = fs::read(&dp).map_err(io_err(&dp))?;
    let want = h.shape.iter().product::<usize>() * h.dtype.width();
    if bytes.len() != want {
        return Err(format_err(
            &dp,
            format!(
                "expected {want} bytes for {:?} {}, found {}",
                h.shape,
                h.dtype.name(),
                bytes.len()
            ),
        ));
    }
    Ok(bytes)
}

pub fn read_volume(path: &Path) -> Result<(Volume, RawHeader)> {
    let h = read_header(path)?;
    if h.labels {
        return Err(format_err(path, "expected an image grid, found labels"));
    }
    let bytes = read_payload(path, &h)?;
    let data: Vec<f64> = match h.dtype {
        RawDtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        RawDtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        RawDtype::U8 => bytes.iter().map(|&b| b as f64).collect(),
    };
    let v = Volume::new(h.shape, Spacing::new(h.spacing)?, data)
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok((v, h))
}

pub fn read_labels(path: &Path) -> Result<(LabelVolume, RawHeader)> {
    let h = read_header(path)?;
    let Some(classes) = h.classes.filter(|_| h.labels) else {
        return Err(format_err(path, "expected a label grid"));
    };
    let bytes = read_payload(path, &h)?;
    let l = LabelVolume::new(h.shape, Spacing::new(h.spacing)?, classes, bytes)
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok((l, h))
}

fn write_pair(path: &Path, h: &RawHeader, payload: &[u8]) -> Result<()> {
    fs::write(data_path(path), payload).map_err(io_err(&data_path(path)))?;
    fs::write(path, header_text(h)).map_err(io_err(path))
}

/// `dtype` must be `F64` or `F32`; `F32` rounds each voxel.
pub fn write_volume(path: &Path, v: &Volume, dtype: RawDtype, prov: Provenance) -> Result<()> {
    let payload: Vec<u8> = match dtype {
        RawDtype::F64 => v.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
        RawDtype::F32 => v
            .data()
            .iter()
            .flat_map(|&x| (x as f32).to_le_bytes())
            .collect(),
        RawDtype::U8 => return Err(format_err(path, "images are stored as f32 or f64")),
    };
    let h = RawHeader {
        labels: false,
        dtype,
        shape: v.shape(),
        spacing: v.spacing().0,
        classes: None,
        stage: prov.stage.map(Into::into),
        config_hash: prov.config_hash.map(Into::into),
    };
    write_pair(path, &h, &payload)
}

pub fn write_labels(path: &Path, l: &LabelVolume, prov: Provenance) -> Result<()> {
    let h = RawHeader {
        labels: true,
        dtype: RawDtype::U8,
        shape: l.shape(),
        spacing: l.spacing().0,
        classes: Some(l.classes()),
        stage: prov.stage.map(Into::into),
        config_hash: prov.config_hash.map(Into::into),
    };
    write_pair(path, &h, l.data())
}
