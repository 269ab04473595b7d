//! Volume file I/O: a NIfTI-1 subset and a raw JSON-sidecar fallback.
//!
//! Format is chosen by extension: `.nii` / `.nii.gz` for NIfTI-1,
//! `.rawj` / `.rawj.gz` for the fallback. A `.gz` suffix triggers gzip on
//! both formats. Masks are written as uint8 {0, 1}; scalar volumes as
//! float32. Round trips are payload-bit-exact.

mod nifti;
mod rawj;

use crate::error::{Error, FormatErrorKind, Result};
use crate::volgrid::{BinaryMask, ProbabilityMap, ScalarVolume};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// On-disk format tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatTag {
    Nifti1,
    Rawj,
}

/// Payload datatypes supported by both formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    Uint8,
    Int16,
    Float32,
}

impl DataType {
    pub fn bytes_per_voxel(&self) -> usize {
        match self {
            DataType::Uint8 => 1,
            DataType::Int16 => 2,
            DataType::Float32 => 4,
        }
    }
}

/// What a volume file is, without decoding its payload.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeFileMeta {
    pub path: PathBuf,
    pub format: FormatTag,
    pub datatype: DataType,
    pub compressed: bool,
}

fn classify(path: &Path) -> Result<(FormatTag, bool)> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii.gz") {
        Ok((FormatTag::Nifti1, true))
    } else if name.ends_with(".nii") {
        Ok((FormatTag::Nifti1, false))
    } else if name.ends_with(".rawj.gz") {
        Ok((FormatTag::Rawj, true))
    } else if name.ends_with(".rawj") {
        Ok((FormatTag::Rawj, false))
    } else {
        Err(Error::format(
            path,
            FormatErrorKind::BadHeader(format!("unsupported file extension on '{name}'")),
        ))
    }
}

pub(crate) fn read_bytes(path: &Path, compressed: bool) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if compressed {
        let mut out = Vec::new();
        flate2::read::MultiGzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Write bytes atomically (temp file in the target directory, then rename),
/// gzipping when requested. The gzip stream carries no mtime, so identical
/// inputs produce identical files.
pub(crate) fn write_bytes(path: &Path, bytes: &[u8], compressed: bool) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    if compressed {
        let mut enc =
            flate2::write::GzEncoder::new(tmp.as_file_mut(), flate2::Compression::fast());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        tmp.as_file_mut()
            .write_all(bytes)
            .map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Inspect a file's format and datatype without decoding the payload.
pub fn file_meta(path: impl AsRef<Path>) -> Result<VolumeFileMeta> {
    let path = path.as_ref();
    let (format, compressed) = classify(path)?;
    let bytes = read_bytes(path, compressed)?;
    let datatype = match format {
        FormatTag::Nifti1 => nifti::peek_datatype(path, &bytes)?,
        FormatTag::Rawj => rawj::peek_datatype(path, &bytes)?,
    };
    Ok(VolumeFileMeta {
        path: path.to_path_buf(),
        format,
        datatype,
        compressed,
    })
}

/// Read a volume in either supported format, applying any header-declared
/// linear scaling. The result always satisfies the grid invariants
/// (finite values, positive spacing).
pub fn read_volume(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    let path = path.as_ref();
    let (format, compressed) = classify(path)?;
    let bytes = read_bytes(path, compressed)?;
    match format {
        FormatTag::Nifti1 => nifti::decode(path, &bytes),
        FormatTag::Rawj => rawj::decode(path, &bytes),
    }
}

/// Read a volume and interpret nonzero voxels as set.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let vol = read_volume(&path)?;
    let geometry = *vol.geometry();
    let data = vol.data().iter().map(|&v| v != 0.0).collect();
    BinaryMask::new(geometry, data)
}

/// Read a volume and validate it as a probability map in [0, 1].
pub fn read_probability(path: impl AsRef<Path>) -> Result<ProbabilityMap> {
    let path = path.as_ref();
    let vol = read_volume(path)?;
    ProbabilityMap::try_from(vol).map_err(|_| {
        Error::format(
            path,
            FormatErrorKind::BadHeader("probability map has values outside [0, 1]".into()),
        )
    })
}

/// Write a scalar volume as float32 in the format implied by the extension.
pub fn write_volume(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (format, compressed) = classify(path)?;
    let bytes = match format {
        FormatTag::Nifti1 => nifti::encode_f32(vol),
        FormatTag::Rawj => return rawj::write_f32(vol, path, compressed),
    };
    write_bytes(path, &bytes, compressed)
}

/// Write a probability map as float32.
pub fn write_probability(map: &ProbabilityMap, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&map.clone().into_scalar(), path)
}

/// Write a mask as uint8 {0, 1} in the format implied by the extension.
pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (format, compressed) = classify(path)?;
    let bytes = match format {
        FormatTag::Nifti1 => nifti::encode_mask(mask),
        FormatTag::Rawj => return rawj::write_mask(mask, path, compressed),
    };
    write_bytes(path, &bytes, compressed)
}
