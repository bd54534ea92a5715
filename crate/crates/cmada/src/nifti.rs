//! Uncompressed NIfTI-1 (`.nii`, or a `.hdr`/`.img` pair).
//!
//! Only 3D grids are accepted (trailing dimensions of size 1 are allowed).
//! Spacing is stored as `f32` by the format, so it round-trips to `f32` precision.

use std::fs;
use std::path::{Path, PathBuf};

use cmada_core::volume::{Dims, LabelVolume, Triple, Volume};

use crate::error::{format_err, io_err, Result};

const HEADER_LEN: usize = 348;
const SINGLE_FILE_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub shape: Dims,
    pub spacing: Triple,
    /// Scaled voxel values in storage order.
    pub data: Vec<f64>,
    pub descrip: String,
}

/// True when `bytes` start with a NIfTI-1 header in either byte order.
pub fn is_nifti_header(bytes: &[u8]) -> bool {
    bytes.len() >= 4 && {
        let raw: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        i32::from_le_bytes(raw) == HEADER_LEN as i32 || i32::from_be_bytes(raw) == HEADER_LEN as i32
    }
}

struct Fields<'a> {
    b: &'a [u8],
    le: bool,
}

impl Fields<'_> {
    fn i16(&self, at: usize) -> i16 {
        let r = [self.b[at], self.b[at + 1]];
        if self.le {
            i16::from_le_bytes(r)
        } else {
            i16::from_be_bytes(r)
        }
    }
    fn f32(&self, at: usize) -> f32 {
        let r: [u8; 4] = self.b[at..at + 4].try_into().expect("4 bytes");
        if self.le {
            f32::from_le_bytes(r)
        } else {
            f32::from_be_bytes(r)
        }
    }
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    if path.extension().is_some_and(|e| e == "gz") {
        return Err(format_err(
            path,
            "gzip-compressed NIfTI is not supported; decompress it first",
        ));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < HEADER_LEN || !is_nifti_header(&bytes) {
        return Err(format_err(path, "not a NIfTI-1 header"));
    }
    let le = i32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) == HEADER_LEN as i32;
    let h = Fields { b: &bytes, le };
    let magic = &bytes[344..348];
    let single = match magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => return Err(format_err(path, "bad NIfTI-1 magic")),
    };
    let ndim = h.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(format_err(path, format!("dim[0] = {ndim} is out of range")));
    }
    let dims: Vec<i16> = (1..=7).map(|i| h.i16(40 + 2 * i)).collect();
    let mut shape = [1usize; 3];
    for (i, &d) in dims.iter().take(ndim as usize).enumerate() {
        if d < 1 {
            return Err(format_err(path, format!("dim[{}] = {d}", i + 1)));
        }
        if i < 3 {
            shape[i] = d as usize;
        } else if d != 1 {
            return Err(format_err(path, "only 3D volumes are supported"));
        }
    }
    let spacing = [h.f32(80) as f64, h.f32(84) as f64, h.f32(88) as f64];
    let datatype = h.i16(70);
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(format_err(
                path,
                format!("unsupported datatype code {other}"),
            ))
        }
    };
    let n: usize = shape.iter().product();
    let (payload, offset, data_path): (Vec<u8>, usize, PathBuf) = if single {
        let off = h.f32(108);
        if !(off >= SINGLE_FILE_OFFSET as f32) {
            return Err(format_err(path, format!("vox_offset {off} is too small")));
        }
        (Vec::new(), off as usize, path.to_path_buf())
    } else {
        let img = path.with_extension("img");
        let b = fs::read(&img).map_err(io_err(&img))?;
        (b, h.f32(108).max(0.0) as usize, img)
    };
    let src: &[u8] = if single { &bytes } else { &payload };
    let end = offset + n * width;
    if src.len() < end {
        return Err(format_err(
            &data_path,
            format!(
                "expected {} data bytes, found {}",
                n * width,
                src.len().saturating_sub(offset)
            ),
        ));
    }
    let raw = &src[offset..end];
    let mut data = Vec::with_capacity(n);
    macro_rules! decode {
        ($t:ty, $w:expr) => {
            for c in raw.chunks_exact($w) {
                let a = c.try_into().expect("chunk");
                data.push(if le {
                    <$t>::from_le_bytes(a)
                } else {
                    <$t>::from_be_bytes(a)
                } as f64);
            }
        };
    }
    match datatype {
        DT_UINT8 => decode!(u8, 1),
        DT_INT8 => decode!(i8, 1),
        DT_INT16 => decode!(i16, 2),
        DT_UINT16 => decode!(u16, 2),
        DT_INT32 => decode!(i32, 4),
        DT_FLOAT32 => decode!(f32, 4),
        _ => decode!(f64, 8),
    }
    let slope = h.f32(112) as f64;
    let inter = h.f32(116) as f64;
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    let descrip = String::from_utf8_lossy(&bytes[148..228])
        .trim_end_matches('\0')
        .to_string();
    Ok(NiftiImage {
        shape,
        spacing,
        data,
        descrip,
    })
}

fn header(shape: Dims, spacing: Triple, datatype: i16, bitpix: i16, descrip: &str) -> Vec<u8> {
    let mut h = vec![0u8; SINGLE_FILE_OFFSET];
    let put_i16 =
        |h: &mut Vec<u8>, at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 =
        |h: &mut Vec<u8>, at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for (i, &d) in shape.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, d as i16);
    }
    for i in 3..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for (i, &s) in spacing.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, s as f32);
    }
    put_f32(&mut h, 108, SINGLE_FILE_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // mm
    let d = descrip.as_bytes();
    let d = &d[..d.len().min(79)];
    h[148..148 + d.len()].copy_from_slice(d);
    put_i16(&mut h, 254, 1);
    for (row, &s) in spacing.iter().enumerate() {
        put_f32(&mut h, 280 + 16 * row + 4 * row, s as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn check_dims(path: &Path, shape: Dims) -> Result<()> {
    if shape.iter().any(|&d| d > i16::MAX as usize) {
        return Err(format_err(
            path,
            format!("shape {shape:?} exceeds the NIfTI-1 limit"),
        ));
    }
    Ok(())
}

/// Writes `float64` voxels.
pub fn write_nifti_volume(path: &Path, v: &Volume, descrip: &str) -> Result<()> {
    check_dims(path, v.shape())?;
    let mut out = header(v.shape(), v.spacing().0, DT_FLOAT64, 64, descrip);
    out.reserve(v.len() * 8);
    for &x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Writes `uint8` labels.
pub fn write_nifti_labels(path: &Path, l: &LabelVolume, descrip: &str) -> Result<()> {
    check_dims(path, l.shape())?;
    let mut out = header(l.shape(), l.spacing().0, DT_UINT8, 8, descrip);
    out.extend_from_slice(l.data());
    fs::write(path, out).map_err(io_err(path))
}
