//! NIfTI-1 subset: 348-byte header, single-file "n+1" magic, little-endian,
//! datatypes uint8 (2), int16 (4), float32 (16), spacing from pixdim[1..3],
//! linear scaling from scl_slope / scl_inter (slope 0 treated as 1).
//! Orientation fields are ignored apart from the sform translation, which is
//! used as the origin when present.

use crate::error::{Error, FormatErrorKind, Result};
use crate::volgrid::{BinaryMask, GridGeometry, ScalarVolume, Spacing};
use std::path::Path;

use super::DataType;

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn err(path: &Path, kind: FormatErrorKind) -> Error {
    Error::format(path, kind)
}

fn i16_at(bytes: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([bytes[off], bytes[off + 1]])
}

fn i32_at(bytes: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

fn f32_at(bytes: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

pub(super) fn peek_datatype(path: &Path, bytes: &[u8]) -> Result<DataType> {
    let header = parse_header(path, bytes)?;
    Ok(header.datatype)
}

struct Header {
    dims: [usize; 3],
    spacing: Spacing,
    origin: [f64; 3],
    datatype: DataType,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(err(
            path,
            FormatErrorKind::BadHeader(format!(
                "file is {} bytes, shorter than the 348-byte header",
                bytes.len()
            )),
        ));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        if magic == b"ni1\0" {
            return Err(err(
                path,
                FormatErrorKind::BadHeader("detached .hdr/.img pairs are not supported".into()),
            ));
        }
        return Err(err(path, FormatErrorKind::BadMagic));
    }
    let sizeof_hdr = i32_at(bytes, 0);
    if sizeof_hdr != HEADER_LEN as i32 {
        let msg = if sizeof_hdr.swap_bytes() == HEADER_LEN as i32 {
            "big-endian NIfTI files are not supported".to_string()
        } else {
            format!("sizeof_hdr is {sizeof_hdr}, expected 348")
        };
        return Err(err(path, FormatErrorKind::BadHeader(msg)));
    }

    let ndim = i16_at(bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(err(
            path,
            FormatErrorKind::BadHeader(format!("dim[0] is {ndim}, expected 1..=7")),
        ));
    }
    let mut dims = [1usize; 3];
    for axis in 0..3 {
        let d = if (axis as i16) < ndim {
            i16_at(bytes, 40 + 2 * (axis + 1))
        } else {
            1
        };
        if d < 1 {
            return Err(err(
                path,
                FormatErrorKind::BadHeader(format!("dim[{}] is {d}, expected >= 1", axis + 1)),
            ));
        }
        dims[axis] = d as usize;
    }
    for axis in 3..ndim as usize {
        let d = i16_at(bytes, 40 + 2 * (axis + 1));
        if d > 1 {
            return Err(err(
                path,
                FormatErrorKind::BadHeader(format!(
                    "volume has {d} samples along axis {}, only 3D volumes are supported",
                    axis + 1
                )),
            ));
        }
    }

    let datatype = match i16_at(bytes, 70) {
        DT_UINT8 => DataType::Uint8,
        DT_INT16 => DataType::Int16,
        DT_FLOAT32 => DataType::Float32,
        other => return Err(err(path, FormatErrorKind::UnsupportedDatatype(other))),
    };

    let mut sp = [0.0f64; 3];
    for axis in 0..3 {
        let v = f32_at(bytes, 76 + 4 * (axis + 1)) as f64;
        if !(v.is_finite() && v > 0.0) {
            return Err(err(
                path,
                FormatErrorKind::NonPositiveVoxelDim { axis, value: v },
            ));
        }
        sp[axis] = v;
    }
    let spacing = Spacing::new(sp[0], sp[1], sp[2]).expect("validated above");

    let origin = if i16_at(bytes, 254) > 0 {
        [
            f32_at(bytes, 280 + 12) as f64,
            f32_at(bytes, 296 + 12) as f64,
            f32_at(bytes, 312 + 12) as f64,
        ]
    } else if i16_at(bytes, 252) > 0 {
        [
            f32_at(bytes, 268) as f64,
            f32_at(bytes, 272) as f64,
            f32_at(bytes, 276) as f64,
        ]
    } else {
        [0.0; 3]
    };

    let vox_offset_f = f32_at(bytes, 108);
    if !vox_offset_f.is_finite() || vox_offset_f < HEADER_LEN as f32 {
        return Err(err(
            path,
            FormatErrorKind::BadHeader(format!("vox_offset {vox_offset_f} is invalid")),
        ));
    }

    Ok(Header {
        dims,
        spacing,
        origin,
        datatype,
        vox_offset: vox_offset_f as usize,
        scl_slope: f32_at(bytes, 112),
        scl_inter: f32_at(bytes, 116),
    })
}

pub(super) fn decode(path: &Path, bytes: &[u8]) -> Result<ScalarVolume> {
    let header = parse_header(path, bytes)?;
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let expected = n * header.datatype.bytes_per_voxel();
    let avail = bytes.len().saturating_sub(header.vox_offset);
    if avail < expected {
        return Err(err(
            path,
            FormatErrorKind::TruncatedPayload {
                expected_bytes: expected as u64,
                got_bytes: avail as u64,
            },
        ));
    }
    let payload = &bytes[header.vox_offset..header.vox_offset + expected];

    let slope = if header.scl_slope.is_finite() && header.scl_slope != 0.0 {
        header.scl_slope
    } else {
        1.0
    };
    let inter = if header.scl_inter.is_finite() {
        header.scl_inter
    } else {
        0.0
    };
    let identity_scale = slope == 1.0 && inter == 0.0;

    let mut data = Vec::with_capacity(n);
    match header.datatype {
        DataType::Uint8 => {
            for &b in payload {
                data.push(scale(b as f32, slope, inter, identity_scale));
            }
        }
        DataType::Int16 => {
            for c in payload.chunks_exact(2) {
                let raw = i16::from_le_bytes([c[0], c[1]]) as f32;
                data.push(scale(raw, slope, inter, identity_scale));
            }
        }
        DataType::Float32 => {
            for c in payload.chunks_exact(4) {
                let raw = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                data.push(scale(raw, slope, inter, identity_scale));
            }
        }
    }

    if data.iter().any(|v| !v.is_finite()) {
        return Err(err(path, FormatErrorKind::NonFiniteData));
    }

    let geometry = GridGeometry::new(header.dims, header.spacing, header.origin)
        .map_err(|e| err(path, FormatErrorKind::BadHeader(e.to_string())))?;
    ScalarVolume::new(geometry, data)
        .map_err(|e| err(path, FormatErrorKind::BadHeader(e.to_string())))
}

#[inline]
fn scale(raw: f32, slope: f32, inter: f32, identity: bool) -> f32 {
    if identity {
        raw
    } else {
        slope * raw + inter
    }
}

fn encode_header(geometry: &GridGeometry, datatype: DataType) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    // dim
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    for axis in 0..3 {
        let off = 40 + 2 * (axis + 1);
        h[off..off + 2].copy_from_slice(&(geometry.dims[axis] as i16).to_le_bytes());
    }
    for axis in 4..8 {
        let off = 40 + 2 * axis;
        h[off..off + 2].copy_from_slice(&1i16.to_le_bytes());
    }
    let (code, bitpix) = match datatype {
        DataType::Uint8 => (DT_UINT8, 8i16),
        DataType::Int16 => (DT_INT16, 16i16),
        DataType::Float32 => (DT_FLOAT32, 32i16),
    };
    h[70..72].copy_from_slice(&code.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    // pixdim[0] = 1 (qfac), pixdim[1..3] = spacing
    h[76..80].copy_from_slice(&1.0f32.to_le_bytes());
    for axis in 0..3 {
        let off = 76 + 4 * (axis + 1);
        h[off..off + 4]
            .copy_from_slice(&(geometry.spacing.component(axis) as f32).to_le_bytes());
    }
    h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    h[116..120].copy_from_slice(&0.0f32.to_le_bytes()); // scl_inter
    h[123] = 2; // xyzt_units: millimeters
    // sform: diagonal spacing with the origin as translation
    h[254..256].copy_from_slice(&1i16.to_le_bytes());
    let rows = [
        (280usize, [geometry.spacing.sx as f32, 0.0, 0.0, geometry.origin[0] as f32]),
        (296usize, [0.0, geometry.spacing.sy as f32, 0.0, geometry.origin[1] as f32]),
        (312usize, [0.0, 0.0, geometry.spacing.sz as f32, geometry.origin[2] as f32]),
    ];
    for (off, row) in rows {
        for (i, v) in row.iter().enumerate() {
            h[off + 4 * i..off + 4 * i + 4].copy_from_slice(&v.to_le_bytes());
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

pub(super) fn encode_f32(vol: &ScalarVolume) -> Vec<u8> {
    let mut out = encode_header(vol.geometry(), DataType::Float32);
    out.reserve(vol.data().len() * 4);
    for &v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(super) fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    let mut out = encode_header(mask.geometry(), DataType::Uint8);
    out.extend(mask.data().iter().map(|&b| b as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> GridGeometry {
        GridGeometry::with_dims_spacing([2, 2, 2], Spacing::new(2.0, 2.0, 2.0).unwrap()).unwrap()
    }

    fn int16_fixture(scl_slope: f32, scl_inter: f32) -> Vec<u8> {
        let mut bytes = encode_header(&geometry(), DataType::Int16);
        bytes[112..116].copy_from_slice(&scl_slope.to_le_bytes());
        bytes[116..120].copy_from_slice(&scl_inter.to_le_bytes());
        for raw in 0i16..8 {
            bytes.extend_from_slice(&raw.to_le_bytes());
        }
        bytes
    }

    #[test]
    fn scale_and_intercept_are_applied() {
        // pixdim (2,2,2), int16 data 0..7, slope 0.5 -> {0, 0.5, ..., 3.5}
        let bytes = int16_fixture(0.5, 0.0);
        let vol = decode(Path::new("fix.nii"), &bytes).unwrap();
        let expect: Vec<f32> = (0..8).map(|i| i as f32 * 0.5).collect();
        assert_eq!(vol.data(), expect.as_slice());
        assert_eq!(vol.geometry().spacing, Spacing::new(2.0, 2.0, 2.0).unwrap());
    }

    #[test]
    fn zero_slope_is_treated_as_identity() {
        let bytes = int16_fixture(0.0, 0.0);
        let vol = decode(Path::new("fix.nii"), &bytes).unwrap();
        let expect: Vec<f32> = (0..8).map(|i| i as f32).collect();
        assert_eq!(vol.data(), expect.as_slice());
    }

    #[test]
    fn intercept_shifts_values() {
        let bytes = int16_fixture(1.0, -3.0);
        let vol = decode(Path::new("fix.nii"), &bytes).unwrap();
        assert_eq!(vol.data()[0], -3.0);
        assert_eq!(vol.data()[7], 4.0);
    }

    #[test]
    fn bad_magic_is_distinct() {
        let mut bytes = int16_fixture(1.0, 0.0);
        bytes[344] = b'x';
        let e = decode(Path::new("b.nii"), &bytes).unwrap_err();
        assert!(matches!(
            e,
            Error::Format {
                kind: FormatErrorKind::BadMagic,
                ..
            }
        ));
    }

    #[test]
    fn unsupported_datatype_is_distinct() {
        let mut bytes = int16_fixture(1.0, 0.0);
        bytes[70..72].copy_from_slice(&64i16.to_le_bytes()); // float64
        let e = decode(Path::new("b.nii"), &bytes).unwrap_err();
        assert!(matches!(
            e,
            Error::Format {
                kind: FormatErrorKind::UnsupportedDatatype(64),
                ..
            }
        ));
    }

    #[test]
    fn truncated_payload_is_distinct() {
        let mut bytes = int16_fixture(1.0, 0.0);
        bytes.truncate(VOX_OFFSET + 6);
        let e = decode(Path::new("b.nii"), &bytes).unwrap_err();
        assert!(matches!(
            e,
            Error::Format {
                kind: FormatErrorKind::TruncatedPayload {
                    expected_bytes: 16,
                    got_bytes: 6
                },
                ..
            }
        ));
    }

    #[test]
    fn nonpositive_pixdim_is_distinct() {
        let mut bytes = int16_fixture(1.0, 0.0);
        bytes[80..84].copy_from_slice(&(-1.0f32).to_le_bytes()); // pixdim[1]
        let e = decode(Path::new("b.nii"), &bytes).unwrap_err();
        assert!(matches!(
            e,
            Error::Format {
                kind: FormatErrorKind::NonPositiveVoxelDim { axis: 0, .. },
                ..
            }
        ));
    }

    #[test]
    fn nonfinite_payload_is_rejected() {
        let g = geometry();
        let mut bytes = encode_header(&g, DataType::Float32);
        for i in 0..8 {
            let v = if i == 3 { f32::NAN } else { 1.0 };
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let e = decode(Path::new("b.nii"), &bytes).unwrap_err();
        assert!(matches!(
            e,
            Error::Format {
                kind: FormatErrorKind::NonFiniteData,
                ..
            }
        ));
    }

    #[test]
    fn origin_roundtrips_through_sform() {
        let g = GridGeometry::new(
            [2, 2, 2],
            Spacing::new(1.0, 1.0, 1.0).unwrap(),
            [10.0, -4.5, 3.25],
        )
        .unwrap();
        let vol = ScalarVolume::filled(g, 1.0).unwrap();
        let bytes = encode_f32(&vol);
        let back = decode(Path::new("o.nii"), &bytes).unwrap();
        assert_eq!(back.geometry().origin, [10.0, -4.5, 3.25]);
    }
}
