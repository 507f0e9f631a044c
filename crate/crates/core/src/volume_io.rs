//! Volume readers and mask export.
//!
//! Two on-disk volume formats are understood:
//!
//! * uncompressed single-file NIfTI-1 (`n+1\0`) with int16, int32 or float32
//!   voxels, used only to ingest external scans;
//! * the portable format: a `<name>.json` sidecar holding
//!   `{"dims": [D, H, W], "dtype": "f32", "order": "DHW"}` next to a
//!   `<name>.f32` payload of little-endian float32 values in row-major
//!   `(D, H, W)` order.
//!
//! Masks are exported as binary PGM (P5) images.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const NIFTI1_HEADER_LEN: usize = 348;
const NIFTI1_MIN_VOX_OFFSET: usize = 352;
const NIFTI1_MAGIC: &[u8; 4] = b"n+1\0";
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a single-file NIfTI-1 volume")]
    BadMagic,
    #[error("unsupported NIfTI datatype code {0} (expected 4, 8 or 16)")]
    UnsupportedDatatype(i16),
    #[error("truncated file: need {expected} bytes, found {actual}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("gzip-compressed input; decompress the volume before reading")]
    CompressedInput,
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("payload holds {actual} bytes but header dims require {expected}")]
    HeaderMismatch { expected: usize, actual: usize },
    #[error("missing sidecar header {0}")]
    MissingSidecar(PathBuf),
    #[error("volume contains non-finite values")]
    NonFinite,
    #[error("mask value {0} is not binary")]
    NonBinaryMask(u8),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeHeader {
    /// `(D, H, W)`: slowest to fastest varying axis.
    pub dims: [usize; 3],
    pub datatype_code: i16,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub vox_offset: usize,
}

impl VolumeHeader {
    /// Header describing an already-decoded float32 volume.
    pub fn float32(dims: [usize; 3]) -> Self {
        Self {
            dims,
            datatype_code: DT_FLOAT32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            vox_offset: NIFTI1_MIN_VOX_OFFSET,
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub header: VolumeHeader,
    pub voxels: Array3<f32>,
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct HeaderBytes<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl HeaderBytes<'_> {
    fn array<const N: usize>(&self, at: usize) -> [u8; N] {
        self.bytes[at..at + N].try_into().unwrap()
    }

    fn i16(&self, at: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.array(at)),
            Endian::Big => i16::from_be_bytes(self.array(at)),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.array(at)),
            Endian::Big => f32::from_be_bytes(self.array(at)),
        }
    }
}

/// Reads an uncompressed single-file NIfTI-1 volume.
///
/// NIfTI stores `x` fastest, so `dim[1..=3]` map to `(W, H, D)` and the
/// payload is already in row-major `(D, H, W)` order.
pub fn read_nifti1(path: impl AsRef<Path>) -> Result<RawVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_nifti1(&bytes)
}

pub fn decode_nifti1(bytes: &[u8]) -> Result<RawVolume> {
    if bytes.len() >= 2 && bytes[..2] == GZIP_MAGIC {
        return Err(VolumeError::CompressedInput);
    }
    if bytes.len() < NIFTI1_HEADER_LEN {
        return Err(VolumeError::TruncatedFile {
            expected: NIFTI1_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let size_raw: [u8; 4] = bytes[0..4].try_into().unwrap();
    let endian = if i32::from_le_bytes(size_raw) == NIFTI1_HEADER_LEN as i32 {
        Endian::Little
    } else if i32::from_be_bytes(size_raw) == NIFTI1_HEADER_LEN as i32 {
        Endian::Big
    } else {
        return Err(VolumeError::BadMagic);
    };
    if &bytes[344..348] != NIFTI1_MAGIC {
        return Err(VolumeError::BadMagic);
    }
    let hdr = HeaderBytes { bytes, endian };

    let ndim = hdr.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(VolumeError::InvalidHeader(format!("dim[0] = {ndim}")));
    }
    let mut dim = [1usize; 7];
    for (i, d) in dim.iter_mut().enumerate().take(ndim as usize) {
        let v = hdr.i16(42 + 2 * i);
        if v < 1 {
            return Err(VolumeError::InvalidHeader(format!("dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    if dim[3..].iter().any(|&d| d != 1) {
        return Err(VolumeError::InvalidHeader(
            "only 3D volumes are supported".into(),
        ));
    }
    let dims = [dim[2], dim[1], dim[0]];

    let datatype_code = hdr.i16(70);
    let width = match datatype_code {
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        other => return Err(VolumeError::UnsupportedDatatype(other)),
    };

    let vox_offset_f = hdr.f32(108);
    if !vox_offset_f.is_finite() || vox_offset_f < NIFTI1_MIN_VOX_OFFSET as f32 {
        return Err(VolumeError::InvalidHeader(format!(
            "vox_offset = {vox_offset_f}"
        )));
    }
    let vox_offset = vox_offset_f as usize;
    if vox_offset > bytes.len() {
        return Err(VolumeError::TruncatedFile {
            expected: vox_offset,
            actual: bytes.len(),
        });
    }

    let mut scl_slope = hdr.f32(112);
    let scl_inter = hdr.f32(116);
    if scl_slope == 0.0 || !scl_slope.is_finite() {
        scl_slope = 1.0;
    }
    let scl_inter = if scl_inter.is_finite() { scl_inter } else { 0.0 };

    let header = VolumeHeader {
        dims,
        datatype_code,
        scl_slope,
        scl_inter,
        vox_offset,
    };
    let n = header.n_voxels();
    let expected = vox_offset + n * width;
    if bytes.len() < expected {
        return Err(VolumeError::TruncatedFile {
            expected,
            actual: bytes.len(),
        });
    }

    let payload = &bytes[vox_offset..expected];
    let raw: Vec<f64> = match (datatype_code, endian) {
        (DT_INT16, Endian::Little) => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        (DT_INT16, Endian::Big) => payload
            .chunks_exact(2)
            .map(|c| i16::from_be_bytes([c[0], c[1]]) as f64)
            .collect(),
        (DT_INT32, Endian::Little) => payload
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        (DT_INT32, Endian::Big) => payload
            .chunks_exact(4)
            .map(|c| i32::from_be_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        (_, Endian::Little) => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        (_, Endian::Big) => payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let slope = scl_slope as f64;
    let inter = scl_inter as f64;
    let mut values = Vec::with_capacity(n);
    for v in raw {
        let scaled = (slope * v + inter) as f32;
        if !scaled.is_finite() {
            return Err(VolumeError::NonFinite);
        }
        values.push(scaled);
    }
    let voxels = Array3::from_shape_vec(dims, values).expect("length checked above");
    Ok(RawVolume { header, voxels })
}

#[derive(Debug, Serialize, Deserialize)]
struct PortableSidecar {
    dims: [usize; 3],
    dtype: String,
    order: String,
}

/// Sidecar and payload paths for a portable volume. `path` may name either
/// file or the common stem.
pub fn portable_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let path = path.as_ref();
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("f32") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut payload = stem.into_os_string();
    payload.push(".f32");
    (json.into(), payload.into())
}

pub fn read_portable(path: impl AsRef<Path>) -> Result<RawVolume> {
    let (json_path, payload_path) = portable_paths(path);
    if !json_path.is_file() {
        return Err(VolumeError::MissingSidecar(json_path));
    }
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let sidecar: PortableSidecar = serde_json::from_str(&text)
        .map_err(|e| VolumeError::InvalidHeader(format!("{}: {e}", json_path.display())))?;
    if sidecar.dtype != "f32" || sidecar.order != "DHW" {
        return Err(VolumeError::InvalidHeader(format!(
            "dtype {:?} / order {:?} (expected \"f32\" / \"DHW\")",
            sidecar.dtype, sidecar.order
        )));
    }
    if sidecar.dims.contains(&0) {
        return Err(VolumeError::InvalidHeader(format!("dims {:?}", sidecar.dims)));
    }
    let header = VolumeHeader::float32(sidecar.dims);
    let bytes = fs::read(&payload_path).map_err(io_err(&payload_path))?;
    let expected = header.n_voxels() * 4;
    if bytes.len() != expected {
        return Err(VolumeError::HeaderMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(VolumeError::NonFinite);
    }
    let voxels = Array3::from_shape_vec(sidecar.dims, values).expect("length checked above");
    Ok(RawVolume { header, voxels })
}

pub fn write_portable(volume: ArrayView3<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (json_path, payload_path) = portable_paths(path);
    let (d, h, w) = volume.dim();
    let sidecar = PortableSidecar {
        dims: [d, h, w],
        dtype: "f32".into(),
        order: "DHW".into(),
    };
    let text = serde_json::to_string(&sidecar).expect("sidecar serializes");
    fs::write(&json_path, text).map_err(io_err(&json_path))?;
    let mut bytes = Vec::with_capacity(volume.len() * 4);
    for v in volume.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&payload_path, bytes).map_err(io_err(&payload_path))
}

/// Writes a `{0,1}` mask as a binary PGM with foreground 255.
pub fn write_mask_pgm(mask: ArrayView2<u8>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(&bad) = mask.iter().find(|&&v| v > 1) {
        return Err(VolumeError::NonBinaryMask(bad));
    }
    let (h, w) = mask.dim();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(mask.iter().map(|&v| if v == 1 { 0xFF } else { 0x00 }));
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&bytes).map_err(io_err(path))
}
