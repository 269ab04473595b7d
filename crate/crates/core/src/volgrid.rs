//! Core 3D grid types: geometry, scalar volumes, probability maps, binary
//! masks, and the mask algebra shared by the whole pipeline.
//!
//! All grids use one linearization: row-major with x fastest, i.e.
//! `index = x + nx * (y + ny * z)`. The third axis (z) is the axial axis.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Relative tolerance for spacing comparisons (resampled inputs carry
/// float spacing noise).
pub const SPACING_REL_TOL: f64 = 1e-6;

fn rel_eq(a: f64, b: f64, tol: f64) -> bool {
    let m = a.abs().max(b.abs());
    (a - b).abs() <= tol * m
}

/// Millimeters per voxel along each axis. All components strictly positive
/// and finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl Spacing {
    pub fn new(sx: f64, sy: f64, sz: f64) -> Result<Self> {
        for (axis, v) in [sx, sy, sz].into_iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParam(format!(
                    "spacing component on axis {axis} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(Spacing { sx, sy, sz })
    }

    pub fn isotropic(s: f64) -> Result<Self> {
        Spacing::new(s, s, s)
    }

    pub fn component(&self, axis: usize) -> f64 {
        match axis {
            0 => self.sx,
            1 => self.sy,
            _ => self.sz,
        }
    }

    pub fn approx_eq(&self, other: &Spacing) -> bool {
        rel_eq(self.sx, other.sx, SPACING_REL_TOL)
            && rel_eq(self.sy, other.sy, SPACING_REL_TOL)
            && rel_eq(self.sz, other.sz, SPACING_REL_TOL)
    }
}

/// Milliliters occupied by one voxel: sx*sy*sz / 1000 (mm^3 to ml).
pub fn voxel_volume_ml(spacing: Spacing) -> f64 {
    spacing.sx * spacing.sy * spacing.sz / 1000.0
}

/// Grid shape, spacing, and millimeter offset of voxel (0,0,0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    /// Voxel counts (nx, ny, nz), each >= 1.
    pub dims: [usize; 3],
    pub spacing: Spacing,
    pub origin: [f64; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: Spacing, origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParam(format!(
                "grid dims must be >= 1 on every axis, got {dims:?}"
            )));
        }
        Ok(GridGeometry {
            dims,
            spacing,
            origin,
        })
    }

    pub fn with_dims_spacing(dims: [usize; 3], spacing: Spacing) -> Result<Self> {
        GridGeometry::new(dims, spacing, [0.0; 3])
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Linear index for voxel (x, y, z); x fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Inverse of [`GridGeometry::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        (x, rest % self.dims[1], rest / self.dims[1])
    }

    /// Two volumes are algebra-compatible iff dims match exactly and spacing
    /// matches within [`SPACING_REL_TOL`]. Origin is carried metadata and
    /// does not participate.
    pub fn compatible(&self, other: &GridGeometry) -> bool {
        self.dims == other.dims && self.spacing.approx_eq(&other.spacing)
    }

    /// One-line description used in mismatch diagnostics.
    pub fn summary(&self) -> String {
        format!(
            "dims ({}, {}, {}) spacing ({}, {}, {}) mm",
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.spacing.sx,
            self.spacing.sy,
            self.spacing.sz
        )
    }
}

pub(crate) fn ensure_compatible(a: &GridGeometry, b: &GridGeometry) -> Result<()> {
    if a.compatible(b) {
        Ok(())
    } else {
        Err(Error::GeometryMismatch {
            left: a.summary(),
            right: b.summary(),
        })
    }
}

/// Real-valued 3D grid (MR intensities and the like). All values finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    geometry: GridGeometry,
    data: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(geometry: GridGeometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidParam(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                geometry.dims,
                geometry.voxel_count()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(
                "scalar volume contains NaN or infinite values".into(),
            ));
        }
        Ok(ScalarVolume { geometry, data })
    }

    pub fn filled(geometry: GridGeometry, value: f32) -> Result<Self> {
        let n = geometry.voxel_count();
        ScalarVolume::new(geometry, vec![value; n])
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }
}

/// Per-voxel probabilities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    geometry: GridGeometry,
    data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(geometry: GridGeometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidParam(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        if let Some(v) = data.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidParam(format!(
                "probability value {v} outside [0, 1]"
            )));
        }
        Ok(ProbabilityMap { geometry, data })
    }

    pub fn filled(geometry: GridGeometry, value: f32) -> Result<Self> {
        let n = geometry.voxel_count();
        ProbabilityMap::new(geometry, vec![value; n])
    }

    /// Probability map from a mask: 1.0 inside, 0.0 outside.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        ProbabilityMap {
            geometry: mask.geometry,
            data: mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_scalar(self) -> ScalarVolume {
        ScalarVolume {
            geometry: self.geometry,
            data: self.data,
        }
    }
}

impl TryFrom<ScalarVolume> for ProbabilityMap {
    type Error = Error;

    fn try_from(vol: ScalarVolume) -> Result<Self> {
        ProbabilityMap::new(vol.geometry, vol.data)
    }
}

/// Per-voxel boolean grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    geometry: GridGeometry,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(geometry: GridGeometry, data: Vec<bool>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidParam(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(BinaryMask { geometry, data })
    }

    pub fn empty(geometry: GridGeometry) -> Self {
        let n = geometry.voxel_count();
        BinaryMask {
            geometry,
            data: vec![false; n],
        }
    }

    /// Build a mask from the set of voxels satisfying a coordinate predicate.
    pub fn from_fn(geometry: GridGeometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = vec![false; geometry.voxel_count()];
        let mut i = 0;
        for z in 0..geometry.dims[2] {
            for y in 0..geometry.dims[1] {
                for x in 0..geometry.dims[0] {
                    data[i] = f(x, y, z);
                    i += 1;
                }
            }
        }
        BinaryMask { geometry, data }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.geometry.index(x, y, z);
        self.data[i] = value;
    }

    /// Number of set voxels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Set-voxel count times the per-voxel volume.
    pub fn volume_ml(&self) -> f64 {
        self.count() as f64 * voxel_volume_ml(self.geometry.spacing)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        mask_algebra(self, other, MaskOp::Union)
    }

    pub fn intersect(&self, other: &BinaryMask) -> Result<BinaryMask> {
        mask_algebra(self, other, MaskOp::Intersect)
    }

    pub fn subtract(&self, other: &BinaryMask) -> Result<BinaryMask> {
        mask_algebra(self, other, MaskOp::Subtract)
    }

    /// True iff every set voxel of `self` is set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.geometry.compatible(&other.geometry)
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| !a || b)
    }
}

/// Voxelwise set operations on two masks sharing one geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskOp {
    Union,
    Intersect,
    Subtract,
}

pub fn mask_algebra(a: &BinaryMask, b: &BinaryMask, op: MaskOp) -> Result<BinaryMask> {
    ensure_compatible(&a.geometry, &b.geometry)?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&va, &vb)| match op {
            MaskOp::Union => va || vb,
            MaskOp::Intersect => va && vb,
            MaskOp::Subtract => va && !vb,
        })
        .collect();
    Ok(BinaryMask {
        geometry: a.geometry,
        data,
    })
}

/// Voxels with probability >= t. t = 0 selects the full grid, t = 1 only
/// exact ones.
pub fn binarize(p: &ProbabilityMap, threshold: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidParam(format!(
            "binarization threshold must be in [0, 1], got {threshold}"
        )));
    }
    let t = threshold as f32;
    Ok(BinaryMask {
        geometry: p.geometry,
        data: p.data.iter().map(|&v| v >= t).collect(),
    })
}

/// The anatomical structures handled by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    Brain,
    TumorCore,
    Netc,
    /// Postoperative contrast-enhancing residual tumor (enhancing tissue).
    ResidualTumor,
    ResectionCavity,
    Snfh,
    WholeTumor,
}

impl StructureKind {
    pub const ALL: [StructureKind; 7] = [
        StructureKind::Brain,
        StructureKind::TumorCore,
        StructureKind::Netc,
        StructureKind::ResidualTumor,
        StructureKind::ResectionCavity,
        StructureKind::Snfh,
        StructureKind::WholeTumor,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StructureKind::Brain => "brain",
            StructureKind::TumorCore => "tumor_core",
            StructureKind::Netc => "netc",
            StructureKind::ResidualTumor => "residual_tumor",
            StructureKind::ResectionCavity => "resection_cavity",
            StructureKind::Snfh => "snfh",
            StructureKind::WholeTumor => "whole_tumor",
        }
    }
}

impl std::fmt::Display for StructureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "brain" => Ok(StructureKind::Brain),
            "tumor_core" | "tc" => Ok(StructureKind::TumorCore),
            "netc" => Ok(StructureKind::Netc),
            "residual_tumor" | "et" | "rt" | "enhancing_tissue" => Ok(StructureKind::ResidualTumor),
            "resection_cavity" | "cavity" | "rc" => Ok(StructureKind::ResectionCavity),
            "snfh" => Ok(StructureKind::Snfh),
            "whole_tumor" | "wt" => Ok(StructureKind::WholeTumor),
            other => Err(Error::InvalidParam(format!(
                "unknown structure kind '{other}'"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geo(n: usize) -> GridGeometry {
        GridGeometry::with_dims_spacing([n, n, n], Spacing::isotropic(1.0).unwrap()).unwrap()
    }

    #[test]
    fn voxel_volume_unit_cases() {
        assert_eq!(voxel_volume_ml(Spacing::new(1.0, 1.0, 1.0).unwrap()), 0.001);
        assert_eq!(voxel_volume_ml(Spacing::new(2.0, 2.0, 2.0).unwrap()), 0.008);
        assert!(
            (voxel_volume_ml(Spacing::new(0.5, 0.5, 1.0).unwrap()) - 0.00025).abs() < 1e-15
        );
    }

    #[test]
    fn spacing_rejects_nonpositive() {
        assert!(Spacing::new(0.0, 1.0, 1.0).is_err());
        assert!(Spacing::new(1.0, -2.0, 1.0).is_err());
        assert!(Spacing::new(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn mask_volume_examples() {
        let g = geo(8);
        assert_eq!(BinaryMask::empty(g).volume_ml(), 0.0);

        let mut m = BinaryMask::empty(g);
        for i in 0..50 {
            m.data_mut()[i] = true;
        }
        assert!((m.volume_ml() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn digitized_sphere_volume_matches_analytic() {
        // r = 10 mm at 1 mm spacing; voxel centers within r of the center.
        let g = GridGeometry::with_dims_spacing([24, 24, 24], Spacing::isotropic(1.0).unwrap())
            .unwrap();
        let c = 11.5;
        let m = BinaryMask::from_fn(g, |x, y, z| {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let dz = z as f64 - c;
            (dx * dx + dy * dy + dz * dz).sqrt() <= 10.0
        });
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 1000.0 / 1000.0; // 4.18879 ml
        let rel = (m.volume_ml() - analytic).abs() / analytic;
        assert!(rel < 0.02, "rel err {rel}");
    }

    #[test]
    fn mask_algebra_examples() {
        let g = geo(4);
        let a = BinaryMask::from_fn(g, |x, _, _| x < 2);
        let b = BinaryMask::from_fn(g, |x, _, _| x >= 1 && x < 3);

        assert!(a.subtract(&a).unwrap().is_empty());
        assert_eq!(a.union(&BinaryMask::empty(g)).unwrap(), a);

        let i = a.intersect(&b).unwrap();
        let expect = BinaryMask::from_fn(g, |x, _, _| x == 1);
        assert_eq!(i, expect);
    }

    #[test]
    fn mask_algebra_rejects_geometry_mismatch() {
        let a = BinaryMask::empty(geo(4));
        let b = BinaryMask::empty(geo(5));
        let err = a.union(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(4, 4, 4)") && msg.contains("(5, 5, 5)"), "{msg}");
    }

    #[test]
    fn binarize_examples() {
        let g = geo(3);
        let p = ProbabilityMap::filled(g, 0.55).unwrap();
        assert_eq!(binarize(&p, 0.5).unwrap().count(), 27);
        assert_eq!(binarize(&p, 0.6).unwrap().count(), 0);

        let p2 = ProbabilityMap::filled(g, 0.99).unwrap();
        assert_eq!(binarize(&p2, 1.0).unwrap().count(), 0);
        assert!(binarize(&p2, 1.5).is_err());
        assert!(binarize(&p2, -0.1).is_err());
    }

    #[test]
    fn binarize_zero_threshold_selects_everything() {
        let g = geo(3);
        let p = ProbabilityMap::filled(g, 0.0).unwrap();
        assert_eq!(binarize(&p, 0.0).unwrap().count(), 27);
    }

    #[test]
    fn probability_map_rejects_out_of_range() {
        let g = geo(2);
        assert!(ProbabilityMap::new(g, vec![0.5; 7]).is_err());
        assert!(ProbabilityMap::new(g, vec![1.5; 8]).is_err());
        assert!(ScalarVolume::new(g, vec![f32::NAN; 8]).is_err());
    }

    #[test]
    fn geometry_compatibility_tolerates_spacing_noise() {
        let a = GridGeometry::with_dims_spacing([4, 4, 4], Spacing::new(1.0, 1.0, 1.0).unwrap())
            .unwrap();
        let b = GridGeometry::with_dims_spacing(
            [4, 4, 4],
            Spacing::new(1.0 + 5e-7, 1.0, 1.0).unwrap(),
        )
        .unwrap();
        let c = GridGeometry::with_dims_spacing([4, 4, 4], Spacing::new(1.01, 1.0, 1.0).unwrap())
            .unwrap();
        assert!(a.compatible(&b));
        assert!(!a.compatible(&c));
    }

    proptest! {
        #[test]
        fn inclusion_exclusion_holds(bits_a in prop::collection::vec(any::<bool>(), 64),
                                     bits_b in prop::collection::vec(any::<bool>(), 64)) {
            let g = geo(4);
            let a = BinaryMask::new(g, bits_a).unwrap();
            let b = BinaryMask::new(g, bits_b).unwrap();
            let lhs = a.union(&b).unwrap().volume_ml() + a.intersect(&b).unwrap().volume_ml();
            let rhs = a.volume_ml() + b.volume_ml();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn binarize_is_antitone(values in prop::collection::vec(0.0f32..=1.0, 27),
                                t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let p = ProbabilityMap::new(geo(3), values).unwrap();
            let high = binarize(&p, hi).unwrap();
            let low = binarize(&p, lo).unwrap();
            prop_assert!(high.is_subset_of(&low));
        }
    }
}
