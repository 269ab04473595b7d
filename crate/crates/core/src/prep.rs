//! Preprocessing chain: resampling, tight cropping, subtraction channels,
//! percentile clipping, and zero-mean normalization of nonzero values,
//! applied in that order.

use crate::error::{Error, Result};
use crate::volgrid::{ensure_compatible, BinaryMask, GridGeometry, ScalarVolume, Spacing};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepParams {
    /// Isotropic 1 mm by default.
    pub target_spacing: Spacing,
    /// Percentile clipping range over all voxels, default [0, 99.5].
    pub clip_lo_pct: f64,
    pub clip_hi_pct: f64,
    pub crop_margin_voxels: usize,
}

impl Default for PrepParams {
    fn default() -> Self {
        PrepParams {
            target_spacing: Spacing {
                sx: 1.0,
                sy: 1.0,
                sz: 1.0,
            },
            clip_lo_pct: 0.0,
            clip_hi_pct: 99.5,
            crop_margin_voxels: 0,
        }
    }
}

impl PrepParams {
    pub fn validate(&self) -> Result<()> {
        Spacing::new(
            self.target_spacing.sx,
            self.target_spacing.sy,
            self.target_spacing.sz,
        )?;
        if !(0.0 <= self.clip_lo_pct && self.clip_lo_pct < self.clip_hi_pct
            && self.clip_hi_pct <= 100.0)
        {
            return Err(Error::InvalidParam(format!(
                "clip percentiles must satisfy 0 <= lo < hi <= 100, got [{}, {}]",
                self.clip_lo_pct, self.clip_hi_pct
            )));
        }
        Ok(())
    }
}

/// Interpolation used when regridding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    /// Trilinear interpolation of voxel-center samples with edge clamping.
    Linear,
    /// Nearest neighbor; keeps masks binary.
    Nearest,
}

fn output_dims(input: &GridGeometry, target: Spacing) -> [usize; 3] {
    let mut dims = [1usize; 3];
    for axis in 0..3 {
        let extent = input.dims[axis] as f64 * input.spacing.component(axis);
        dims[axis] = ((extent / target.component(axis)).round() as usize).max(1);
    }
    dims
}

/// Regrid a volume to the target spacing. Output dims are
/// `round(in_dim * in_spacing / target)` (min 1) per axis; samples are taken
/// at voxel centers and clamped at edges. Origin is preserved.
pub fn resample(vol: &ScalarVolume, target: Spacing, mode: ResampleMode) -> ScalarVolume {
    let in_geo = vol.geometry();
    let dims = output_dims(in_geo, target);
    let out_geo = GridGeometry::new(dims, target, in_geo.origin).expect("dims >= 1");
    let [nx, ny, nz] = in_geo.dims;
    let src = vol.data();

    // Continuous input coordinate (in voxel units) of each output sample,
    // clamped per axis.
    let coords = |axis: usize| -> Vec<f64> {
        let n_in = in_geo.dims[axis];
        let s = in_geo.spacing.component(axis);
        let t = target.component(axis);
        (0..dims[axis])
            .map(|i| {
                let p = (i as f64 + 0.5) * t;
                (p / s - 0.5).clamp(0.0, (n_in - 1) as f64)
            })
            .collect()
    };
    let ux = coords(0);
    let uy = coords(1);
    let uz = coords(2);

    let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    match mode {
        ResampleMode::Nearest => {
            for &z in &uz {
                let zi = z.round() as usize;
                for &y in &uy {
                    let yi = y.round() as usize;
                    for &x in &ux {
                        let xi = x.round() as usize;
                        data.push(src[in_geo.index(xi, yi, zi)]);
                    }
                }
            }
        }
        ResampleMode::Linear => {
            for &z in &uz {
                let z0 = z.floor() as usize;
                let z1 = (z0 + 1).min(nz - 1);
                let fz = z - z0 as f64;
                for &y in &uy {
                    let y0 = y.floor() as usize;
                    let y1 = (y0 + 1).min(ny - 1);
                    let fy = y - y0 as f64;
                    for &x in &ux {
                        let x0 = x.floor() as usize;
                        let x1 = (x0 + 1).min(nx - 1);
                        let fx = x - x0 as f64;

                        let c000 = src[in_geo.index(x0, y0, z0)] as f64;
                        let c100 = src[in_geo.index(x1, y0, z0)] as f64;
                        let c010 = src[in_geo.index(x0, y1, z0)] as f64;
                        let c110 = src[in_geo.index(x1, y1, z0)] as f64;
                        let c001 = src[in_geo.index(x0, y0, z1)] as f64;
                        let c101 = src[in_geo.index(x1, y0, z1)] as f64;
                        let c011 = src[in_geo.index(x0, y1, z1)] as f64;
                        let c111 = src[in_geo.index(x1, y1, z1)] as f64;

                        let c00 = c000 + (c100 - c000) * fx;
                        let c10 = c010 + (c110 - c010) * fx;
                        let c01 = c001 + (c101 - c001) * fx;
                        let c11 = c011 + (c111 - c011) * fx;
                        let c0 = c00 + (c10 - c00) * fy;
                        let c1 = c01 + (c11 - c01) * fy;
                        data.push((c0 + (c1 - c0) * fz) as f32);
                    }
                }
            }
        }
    }
    ScalarVolume::new(out_geo, data).expect("finite interpolation of finite input")
}

/// Nearest-neighbor regridding for masks.
pub fn resample_mask(mask: &BinaryMask, target: Spacing) -> BinaryMask {
    let geometry = *mask.geometry();
    let as_scalar = ScalarVolume::new(
        geometry,
        mask.data().iter().map(|&b| b as u8 as f32).collect(),
    )
    .expect("mask values are finite");
    let res = resample(&as_scalar, target, ResampleMode::Nearest);
    let out_geo = *res.geometry();
    BinaryMask::new(out_geo, res.data().iter().map(|&v| v != 0.0).collect())
        .expect("geometry matches data")
}

/// A crop region recorded so masks can be cropped identically to volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub offset: [usize; 3],
    pub dims: [usize; 3],
}

impl CropBox {
    pub fn full(geometry: &GridGeometry) -> Self {
        CropBox {
            offset: [0; 3],
            dims: geometry.dims,
        }
    }

    fn expanded(mut self, margin: usize, grid: &GridGeometry) -> Self {
        for axis in 0..3 {
            let lo = self.offset[axis].saturating_sub(margin);
            let hi = (self.offset[axis] + self.dims[axis] + margin).min(grid.dims[axis]);
            self.offset[axis] = lo;
            self.dims[axis] = hi - lo;
        }
        self
    }

    fn union(self, other: CropBox) -> CropBox {
        let mut offset = [0usize; 3];
        let mut dims = [0usize; 3];
        for axis in 0..3 {
            let lo = self.offset[axis].min(other.offset[axis]);
            let hi = (self.offset[axis] + self.dims[axis])
                .max(other.offset[axis] + other.dims[axis]);
            offset[axis] = lo;
            dims[axis] = hi - lo;
        }
        CropBox { offset, dims }
    }
}

/// Bounding box of voxels with intensity > 0, or None when all background.
fn positive_bbox(vol: &ScalarVolume) -> Option<CropBox> {
    let geometry = vol.geometry();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &v) in vol.data().iter().enumerate() {
        if v > 0.0 {
            any = true;
            let (x, y, z) = geometry.coords(i);
            let c = [x, y, z];
            for axis in 0..3 {
                lo[axis] = lo[axis].min(c[axis]);
                hi[axis] = hi[axis].max(c[axis]);
            }
        }
    }
    any.then(|| CropBox {
        offset: lo,
        dims: [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1],
    })
}

/// Extract the crop region from a volume; the origin shifts with the offset.
pub fn crop_volume(vol: &ScalarVolume, cbox: &CropBox) -> Result<ScalarVolume> {
    let in_geo = vol.geometry();
    for axis in 0..3 {
        if cbox.offset[axis] + cbox.dims[axis] > in_geo.dims[axis] {
            return Err(Error::InvalidParam(format!(
                "crop box {cbox:?} exceeds grid dims {:?}",
                in_geo.dims
            )));
        }
    }
    let mut origin = in_geo.origin;
    for axis in 0..3 {
        origin[axis] += cbox.offset[axis] as f64 * in_geo.spacing.component(axis);
    }
    let out_geo = GridGeometry::new(cbox.dims, in_geo.spacing, origin)?;
    let mut data = Vec::with_capacity(out_geo.voxel_count());
    for z in 0..cbox.dims[2] {
        for y in 0..cbox.dims[1] {
            let row = in_geo.index(cbox.offset[0], y + cbox.offset[1], z + cbox.offset[2]);
            data.extend_from_slice(&vol.data()[row..row + cbox.dims[0]]);
        }
    }
    ScalarVolume::new(out_geo, data)
}

/// Mask counterpart of [`crop_volume`].
pub fn crop_mask(mask: &BinaryMask, cbox: &CropBox) -> Result<BinaryMask> {
    let as_scalar = ScalarVolume::new(
        *mask.geometry(),
        mask.data().iter().map(|&b| b as u8 as f32).collect(),
    )?;
    let cropped = crop_volume(&as_scalar, cbox)?;
    let geometry = *cropped.geometry();
    BinaryMask::new(geometry, cropped.data().iter().map(|&v| v != 0.0).collect())
}

/// Crop to the bounding box of voxels with intensity > 0, expanded by
/// `margin` voxels and clamped to the grid. An all-zero volume is returned
/// unchanged with a full-grid box.
pub fn tight_crop(vol: &ScalarVolume, margin: usize) -> (ScalarVolume, CropBox) {
    match positive_bbox(vol) {
        None => (vol.clone(), CropBox::full(vol.geometry())),
        Some(bbox) => {
            let cbox = bbox.expanded(margin, vol.geometry());
            let cropped = crop_volume(vol, &cbox).expect("bbox lies inside the grid");
            (cropped, cbox)
        }
    }
}

/// Voxelwise a - b; both volumes must share geometry.
pub fn subtract_channel(a: &ScalarVolume, b: &ScalarVolume) -> Result<ScalarVolume> {
    ensure_compatible(a.geometry(), b.geometry())?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&va, &vb)| va - vb)
        .collect();
    ScalarVolume::new(*a.geometry(), data)
}

/// Percentile of sorted samples with linear interpolation between order
/// statistics (rank = (n - 1) * pct / 100).
fn percentile_sorted(sorted: &[f32], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0] as f64;
    }
    let rank = (n - 1) as f64 * pct / 100.0;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

/// Clamp values to [P_lo, P_hi] computed over all voxels.
pub fn clip_percentile(vol: &ScalarVolume, lo_pct: f64, hi_pct: f64) -> Result<ScalarVolume> {
    if !(0.0 <= lo_pct && lo_pct < hi_pct && hi_pct <= 100.0) {
        return Err(Error::InvalidParam(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got [{lo_pct}, {hi_pct}]"
        )));
    }
    let mut sorted: Vec<f32> = vol.data().to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let lo = percentile_sorted(&sorted, lo_pct) as f32;
    let hi = percentile_sorted(&sorted, hi_pct) as f32;
    let data = vol.data().iter().map(|&v| v.clamp(lo, hi)).collect();
    ScalarVolume::new(*vol.geometry(), data)
}

/// Zero-mean, unit-variance normalization over the set S of nonzero voxels
/// (population std). Voxels outside S stay exactly 0. When |S| <= 1 or
/// std(S) = 0, only the mean is subtracted.
pub fn normalize_nonzero(vol: &ScalarVolume) -> ScalarVolume {
    let nonzero: Vec<f64> = vol
        .data()
        .iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| v as f64)
        .collect();
    if nonzero.is_empty() {
        return vol.clone();
    }
    let n = nonzero.len() as f64;
    let mean = nonzero.iter().sum::<f64>() / n;
    let var = nonzero.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if nonzero.len() > 1 && std > 0.0 {
        1.0 / std
    } else {
        1.0
    };
    let data = vol
        .data()
        .iter()
        .map(|&v| {
            if v != 0.0 {
                ((v as f64 - mean) * scale) as f32
            } else {
                0.0
            }
        })
        .collect();
    ScalarVolume::new(*vol.geometry(), data).expect("finite arithmetic on finite input")
}

/// The full preprocessing chain, per channel and in order:
/// (i) resample, (ii) shared tight crop (union of per-channel boxes),
/// (iii) subtraction channels, (iv) percentile clip, (v) nonzero
/// normalization. Returns the processed channels (inputs first, then one
/// channel per subtraction pair) and the shared crop box.
pub fn preprocess_chain(
    inputs: &[ScalarVolume],
    subtraction_pairs: &[(usize, usize)],
    params: &PrepParams,
) -> Result<(Vec<ScalarVolume>, CropBox)> {
    if inputs.is_empty() {
        return Err(Error::InvalidParam(
            "preprocess_chain requires at least one input channel".into(),
        ));
    }
    params.validate()?;
    for &(a, b) in subtraction_pairs {
        if a >= inputs.len() || b >= inputs.len() {
            return Err(Error::InvalidParam(format!(
                "subtraction pair ({a}, {b}) out of range for {} inputs",
                inputs.len()
            )));
        }
    }

    // (i) resample
    let resampled: Vec<ScalarVolume> = inputs
        .iter()
        .map(|v| resample(v, params.target_spacing, ResampleMode::Linear))
        .collect();
    for v in &resampled[1..] {
        ensure_compatible(resampled[0].geometry(), v.geometry())?;
    }

    // (ii) shared tight crop: union of per-channel positive boxes
    let union_box = resampled
        .iter()
        .filter_map(positive_bbox)
        .reduce(CropBox::union)
        .map(|b| b.expanded(params.crop_margin_voxels, resampled[0].geometry()))
        .unwrap_or_else(|| CropBox::full(resampled[0].geometry()));
    let mut channels: Vec<ScalarVolume> = resampled
        .iter()
        .map(|v| crop_volume(v, &union_box))
        .collect::<Result<_>>()?;

    // (iii) subtraction channels
    for &(a, b) in subtraction_pairs {
        channels.push(subtract_channel(&channels[a], &channels[b])?);
    }

    // (iv) clip, (v) normalize
    channels = channels
        .iter()
        .map(|c| {
            clip_percentile(c, params.clip_lo_pct, params.clip_hi_pct)
                .map(|c| normalize_nonzero(&c))
        })
        .collect::<Result<_>>()?;

    Ok((channels, union_box))
}
