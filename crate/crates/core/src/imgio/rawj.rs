//! Raw fallback format: a JSON sidecar header next to a flat binary payload.
//!
//! `vol.rawj` holds `{dims, spacing_mm, dtype, order, endian}` and the
//! payload lives in `vol.bin` (or `vol.bin.gz` next to `vol.rawj.gz`).
//! Order is always "x-fastest", endian always "little".

use crate::error::{Error, FormatErrorKind, Result};
use crate::volgrid::{BinaryMask, GridGeometry, ScalarVolume, Spacing};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use super::DataType;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawjHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    order: String,
    endian: String,
}

fn err(path: &Path, kind: FormatErrorKind) -> Error {
    Error::format(path, kind)
}

/// `vol.rawj` -> `vol.bin`; `vol.rawj.gz` -> `vol.bin.gz`.
fn payload_path(header_path: &Path) -> (PathBuf, bool) {
    let name = header_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let lower = name.to_ascii_lowercase();
    if lower.ends_with(".rawj.gz") {
        let stem = &name[..name.len() - ".rawj.gz".len()];
        (header_path.with_file_name(format!("{stem}.bin.gz")), true)
    } else {
        let stem = &name[..name.len() - ".rawj".len()];
        (header_path.with_file_name(format!("{stem}.bin")), false)
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(RawjHeader, DataType)> {
    let header: RawjHeader = serde_json::from_slice(bytes)
        .map_err(|e| err(path, FormatErrorKind::BadHeader(e.to_string())))?;
    if header.order != "x-fastest" {
        return Err(err(
            path,
            FormatErrorKind::BadHeader(format!("unsupported order '{}'", header.order)),
        ));
    }
    if header.endian != "little" {
        return Err(err(
            path,
            FormatErrorKind::BadHeader(format!("unsupported endian '{}'", header.endian)),
        ));
    }
    let datatype = match header.dtype.as_str() {
        "float32" => DataType::Float32,
        "uint8" => DataType::Uint8,
        other => {
            return Err(err(
                path,
                FormatErrorKind::BadHeader(format!("unsupported dtype '{other}'")),
            ))
        }
    };
    if header.dims.iter().any(|&d| d == 0) {
        return Err(err(
            path,
            FormatErrorKind::BadHeader(format!("dims must be >= 1, got {:?}", header.dims)),
        ));
    }
    for (axis, &v) in header.spacing_mm.iter().enumerate() {
        if !(v.is_finite() && v > 0.0) {
            return Err(err(
                path,
                FormatErrorKind::NonPositiveVoxelDim { axis, value: v },
            ));
        }
    }
    Ok((header, datatype))
}

pub(super) fn peek_datatype(path: &Path, bytes: &[u8]) -> Result<DataType> {
    parse_header(path, bytes).map(|(_, dt)| dt)
}

pub(super) fn decode(path: &Path, header_bytes: &[u8]) -> Result<ScalarVolume> {
    let (header, datatype) = parse_header(path, header_bytes)?;
    let (bin_path, compressed) = payload_path(path);
    let payload = super::read_bytes(&bin_path, compressed)?;

    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let expected = n * datatype.bytes_per_voxel();
    if payload.len() < expected {
        return Err(err(
            &bin_path,
            FormatErrorKind::TruncatedPayload {
                expected_bytes: expected as u64,
                got_bytes: payload.len() as u64,
            },
        ));
    }

    let data: Vec<f32> = match datatype {
        DataType::Uint8 => payload[..expected].iter().map(|&b| b as f32).collect(),
        DataType::Float32 => payload[..expected]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DataType::Int16 => unreachable!("rawj supports float32 and uint8 only"),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(err(&bin_path, FormatErrorKind::NonFiniteData));
    }

    let spacing = Spacing::new(
        header.spacing_mm[0],
        header.spacing_mm[1],
        header.spacing_mm[2],
    )
    .expect("validated above");
    let geometry = GridGeometry::with_dims_spacing(header.dims, spacing)
        .map_err(|e| err(path, FormatErrorKind::BadHeader(e.to_string())))?;
    ScalarVolume::new(geometry, data)
        .map_err(|e| err(path, FormatErrorKind::BadHeader(e.to_string())))
}

fn write_parts(
    geometry: &GridGeometry,
    dtype: &str,
    payload: &[u8],
    path: &Path,
    compressed: bool,
) -> Result<()> {
    let header = RawjHeader {
        dims: geometry.dims,
        spacing_mm: [geometry.spacing.sx, geometry.spacing.sy, geometry.spacing.sz],
        dtype: dtype.to_string(),
        order: "x-fastest".into(),
        endian: "little".into(),
    };
    let header_bytes =
        serde_json::to_vec_pretty(&header).expect("rawj header serialization cannot fail");
    super::write_bytes(path, &header_bytes, compressed)?;
    let (bin_path, _) = payload_path(path);
    super::write_bytes(&bin_path, payload, compressed)
}

pub(super) fn write_f32(vol: &ScalarVolume, path: &Path, compressed: bool) -> Result<()> {
    let mut payload = Vec::with_capacity(vol.data().len() * 4);
    for &v in vol.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_parts(vol.geometry(), "float32", &payload, path, compressed)
}

pub(super) fn write_mask(mask: &BinaryMask, path: &Path, compressed: bool) -> Result<()> {
    let payload: Vec<u8> = mask.data().iter().map(|&b| b as u8).collect();
    write_parts(mask.geometry(), "uint8", &payload, path, compressed)
}
