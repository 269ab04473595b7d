//! Sliding-window prediction harness around a pluggable predictor,
//! flip-based test-time augmentation, probability-map ensembling, and the
//! two-step postprocessing refinement.

use crate::error::{Error, Result};
use crate::morph::{connected_components, Connectivity};
use crate::prep::{crop_volume, CropBox};
use crate::volgrid::{
    binarize, ensure_compatible, voxel_volume_ml, BinaryMask, GridGeometry, ProbabilityMap,
    ScalarVolume,
};
use serde::{Deserialize, Serialize};

/// Produces a probability patch for a stack of co-registered channel
/// patches. Output dims must equal the input patch dims.
pub trait Predictor {
    fn predict(&self, channels: &[ScalarVolume]) -> Result<ProbabilityMap>;

    /// Whether `predict` may be called from multiple threads at once.
    /// The harness serializes calls to non-reentrant predictors.
    fn reentrant(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Average,
    Amax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(&self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferParams {
    pub patch_dims: [usize; 3],
    /// Fraction of the patch shared by consecutive windows, in [0, 1).
    pub overlap_fraction: f64,
    pub fusion_mode: FusionMode,
    /// Axes flipped for test-time augmentation (identity always runs).
    pub tta_flips: Vec<Axis>,
}

impl Default for InferParams {
    fn default() -> Self {
        InferParams {
            patch_dims: [160, 160, 160],
            overlap_fraction: 0.5,
            fusion_mode: FusionMode::Average,
            tta_flips: Vec::new(),
        }
    }
}

impl InferParams {
    pub fn validate(&self) -> Result<()> {
        if self.patch_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParam(format!(
                "patch dims must be >= 1, got {:?}",
                self.patch_dims
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::InvalidParam(format!(
                "overlap fraction must be in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        Ok(())
    }
}

/// Window start offsets along one axis: stride `patch * (1 - overlap)`,
/// last window shifted flush to the border.
pub fn window_starts(axis_len: usize, patch: usize, overlap_fraction: f64) -> Vec<usize> {
    if axis_len <= patch {
        return vec![0];
    }
    let stride = ((patch as f64 * (1.0 - overlap_fraction)).floor() as usize).max(1);
    let mut starts = Vec::new();
    let mut s = 0usize;
    loop {
        if s + patch >= axis_len {
            starts.push(axis_len - patch);
            break;
        }
        starts.push(s);
        s += stride;
    }
    starts
}

fn pad_to(vol: &ScalarVolume, dims: [usize; 3]) -> ScalarVolume {
    let in_geo = vol.geometry();
    if in_geo.dims == dims {
        return vol.clone();
    }
    let out_geo = GridGeometry::new(dims, in_geo.spacing, in_geo.origin).expect("dims >= 1");
    let mut data = vec![0.0f32; out_geo.voxel_count()];
    for z in 0..in_geo.dims[2] {
        for y in 0..in_geo.dims[1] {
            let src = in_geo.index(0, y, z);
            let dst = out_geo.index(0, y, z);
            data[dst..dst + in_geo.dims[0]]
                .copy_from_slice(&vol.data()[src..src + in_geo.dims[0]]);
        }
    }
    ScalarVolume::new(out_geo, data).expect("padding preserves finiteness")
}

/// Tile the grid with overlapping windows, run the predictor on each, and
/// combine the overlapping outputs by uniform per-voxel averaging. Volumes
/// smaller than a patch are zero-padded and the output cropped back.
pub fn sliding_window_predict(
    channels: &[ScalarVolume],
    predictor: &dyn Predictor,
    params: &InferParams,
) -> Result<ProbabilityMap> {
    params.validate()?;
    if channels.is_empty() {
        return Err(Error::InvalidParam(
            "sliding_window_predict requires at least one channel".into(),
        ));
    }
    for c in &channels[1..] {
        ensure_compatible(channels[0].geometry(), c.geometry())?;
    }
    let orig_geo = *channels[0].geometry();
    let padded_dims = [
        orig_geo.dims[0].max(params.patch_dims[0]),
        orig_geo.dims[1].max(params.patch_dims[1]),
        orig_geo.dims[2].max(params.patch_dims[2]),
    ];
    let padded: Vec<ScalarVolume> = channels.iter().map(|c| pad_to(c, padded_dims)).collect();
    let work_geo = *padded[0].geometry();

    let xs = window_starts(padded_dims[0], params.patch_dims[0], params.overlap_fraction);
    let ys = window_starts(padded_dims[1], params.patch_dims[1], params.overlap_fraction);
    let zs = window_starts(padded_dims[2], params.patch_dims[2], params.overlap_fraction);

    let mut sum = vec![0.0f64; work_geo.voxel_count()];
    let mut count = vec![0u32; work_geo.voxel_count()];

    for &z0 in &zs {
        for &y0 in &ys {
            for &x0 in &xs {
                let cbox = CropBox {
                    offset: [x0, y0, z0],
                    dims: params.patch_dims,
                };
                let patch: Vec<ScalarVolume> = padded
                    .iter()
                    .map(|c| crop_volume(c, &cbox))
                    .collect::<Result<_>>()?;
                let out = predictor.predict(&patch)?;
                if out.geometry().dims != params.patch_dims {
                    return Err(Error::InvalidParam(format!(
                        "predictor output dims {:?} do not match patch dims {:?} \
                         at window origin ({x0}, {y0}, {z0})",
                        out.geometry().dims,
                        params.patch_dims
                    )));
                }
                let out_data = out.data();
                let pg = out.geometry();
                for pz in 0..params.patch_dims[2] {
                    for py in 0..params.patch_dims[1] {
                        let src = pg.index(0, py, pz);
                        let dst = work_geo.index(x0, y0 + py, z0 + pz);
                        for px in 0..params.patch_dims[0] {
                            sum[dst + px] += out_data[src + px] as f64;
                            count[dst + px] += 1;
                        }
                    }
                }
            }
        }
    }

    let averaged: Vec<f32> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| (s / c as f64) as f32)
        .collect();
    let full = ProbabilityMap::new(work_geo, averaged)?;
    if work_geo.dims == orig_geo.dims {
        return Ok(full);
    }
    let cropped = crop_volume(
        &full.into_scalar(),
        &CropBox {
            offset: [0, 0, 0],
            dims: orig_geo.dims,
        },
    )?;
    ProbabilityMap::try_from(cropped)
}

fn flip_data<T: Copy>(data: &[T], geometry: &GridGeometry, axis: usize) -> Vec<T> {
    let [nx, ny, nz] = geometry.dims;
    let mut out = Vec::with_capacity(data.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (fx, fy, fz) = match axis {
                    0 => (nx - 1 - x, y, z),
                    1 => (x, ny - 1 - y, z),
                    _ => (x, y, nz - 1 - z),
                };
                out.push(data[geometry.index(fx, fy, fz)]);
            }
        }
    }
    out
}

/// Mirror a volume along one axis.
pub fn flip_scalar(vol: &ScalarVolume, axis: Axis) -> ScalarVolume {
    let geometry = *vol.geometry();
    ScalarVolume::new(geometry, flip_data(vol.data(), &geometry, axis.index()))
        .expect("flip preserves values")
}

fn flip_probability(map: &ProbabilityMap, axis: Axis) -> ProbabilityMap {
    let geometry = *map.geometry();
    ProbabilityMap::new(geometry, flip_data(map.data(), &geometry, axis.index()))
        .expect("flip preserves values")
}

/// Sliding-window prediction on the identity orientation plus each
/// configured axis flip; flipped outputs are un-flipped and all variants
/// averaged voxelwise.
pub fn tta_predict(
    channels: &[ScalarVolume],
    predictor: &dyn Predictor,
    params: &InferParams,
) -> Result<ProbabilityMap> {
    let base = sliding_window_predict(channels, predictor, params)?;
    if params.tta_flips.is_empty() {
        return Ok(base);
    }
    let geometry = *base.geometry();
    let mut sum: Vec<f64> = base.data().iter().map(|&v| v as f64).collect();
    let mut variants = 1u32;

    let mut seen = Vec::new();
    for &axis in &params.tta_flips {
        if seen.contains(&axis) {
            continue;
        }
        seen.push(axis);
        let flipped: Vec<ScalarVolume> =
            channels.iter().map(|c| flip_scalar(c, axis)).collect();
        let out = sliding_window_predict(&flipped, predictor, params)?;
        let restored = flip_probability(&out, axis);
        for (acc, &v) in sum.iter_mut().zip(restored.data()) {
            *acc += v as f64;
        }
        variants += 1;
    }

    let data = sum
        .iter()
        .map(|&s| (s / variants as f64) as f32)
        .collect();
    ProbabilityMap::new(geometry, data)
}

/// Combine 1..=5 probability maps voxelwise by mean or max.
pub fn fuse_probability_maps(maps: &[ProbabilityMap], mode: FusionMode) -> Result<ProbabilityMap> {
    if maps.is_empty() || maps.len() > 5 {
        return Err(Error::InvalidParam(format!(
            "fusion takes 1 to 5 probability maps, got {}",
            maps.len()
        )));
    }
    for m in &maps[1..] {
        ensure_compatible(maps[0].geometry(), m.geometry())?;
    }
    let geometry = *maps[0].geometry();
    let n = geometry.voxel_count();
    let data: Vec<f32> = match mode {
        FusionMode::Average => {
            let mut sum = vec![0.0f64; n];
            for m in maps {
                for (acc, &v) in sum.iter_mut().zip(m.data()) {
                    *acc += v as f64;
                }
            }
            sum.iter().map(|&s| (s / maps.len() as f64) as f32).collect()
        }
        FusionMode::Amax => {
            let mut best = vec![0.0f32; n];
            for m in maps {
                for (acc, &v) in best.iter_mut().zip(m.data()) {
                    *acc = acc.max(v);
                }
            }
            best
        }
    };
    ProbabilityMap::new(geometry, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostprocStep {
    BrainFilter,
    NoiseRemoval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocParams {
    /// Components smaller than this volume are noise.
    pub min_component_ml: f64,
    /// Components must appear in at least this many consecutive axial slices.
    pub min_consecutive_slices: usize,
    pub apply_brain_mask: bool,
    pub steps: Vec<PostprocStep>,
    pub connectivity: Connectivity,
}

impl Default for PostprocParams {
    fn default() -> Self {
        PostprocParams {
            min_component_ml: 0.05,
            min_consecutive_slices: 2,
            apply_brain_mask: true,
            steps: vec![PostprocStep::BrainFilter, PostprocStep::NoiseRemoval],
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl PostprocParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_component_ml < 0.0 {
            return Err(Error::InvalidParam(format!(
                "min_component_ml must be >= 0, got {}",
                self.min_component_ml
            )));
        }
        if self.min_consecutive_slices < 1 {
            return Err(Error::InvalidParam(
                "min_consecutive_slices must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn step_enabled(&self, step: PostprocStep) -> bool {
        self.steps.contains(&step)
    }
}

/// Two-step cleanup of a probability map.
///
/// Step 1 zeroes probabilities outside the brain mask (skipped when the
/// mask is absent or the step disabled). Step 2 binarizes at `threshold`,
/// labels components, and removes those with volume below
/// `min_component_ml` or spanning fewer than `min_consecutive_slices`
/// consecutive axial slices; removed components are zeroed in the map.
/// Returns the cleaned map and the cleaned binary mask.
pub fn postprocess(
    prob: &ProbabilityMap,
    brain: Option<&BinaryMask>,
    threshold: f64,
    params: &PostprocParams,
) -> Result<(ProbabilityMap, BinaryMask)> {
    params.validate()?;
    let geometry = *prob.geometry();
    let mut data: Vec<f32> = prob.data().to_vec();

    if params.step_enabled(PostprocStep::BrainFilter) && params.apply_brain_mask {
        if let Some(brain) = brain {
            ensure_compatible(&geometry, brain.geometry())?;
            for (v, &inside) in data.iter_mut().zip(brain.data()) {
                if !inside {
                    *v = 0.0;
                }
            }
        }
    }

    let map = ProbabilityMap::new(geometry, data)?;
    let mask = binarize(&map, threshold)?;
    if !params.step_enabled(PostprocStep::NoiseRemoval) {
        return Ok((map, mask));
    }

    let vox_ml = voxel_volume_ml(geometry.spacing);
    let labeling = connected_components(&mask, params.connectivity);
    let kept = labeling.select(|id| {
        let count = labeling.voxel_counts()[(id - 1) as usize];
        let volume = count as f64 * vox_ml;
        let run = labeling
            .axial_run_length(id)
            .expect("id comes from the labeling");
        volume >= params.min_component_ml && run >= params.min_consecutive_slices
    });

    let mut cleaned = map.into_scalar().into_data();
    for (i, (&was, &keep)) in mask.data().iter().zip(kept.data()).enumerate() {
        if was && !keep {
            cleaned[i] = 0.0;
        }
    }
    Ok((ProbabilityMap::new(geometry, cleaned)?, kept))
}

/// Deterministic analytic predictor for tests and demos: thresholds the
/// first channel's intensity and applies a 3x3x3 box blur.
#[derive(Debug, Clone)]
pub struct ToyPredictor {
    pub level: f32,
}

impl Predictor for ToyPredictor {
    fn predict(&self, channels: &[ScalarVolume]) -> Result<ProbabilityMap> {
        let first = channels.first().ok_or_else(|| {
            Error::InvalidParam("toy predictor needs at least one channel".into())
        })?;
        let geometry = *first.geometry();
        let [nx, ny, nz] = geometry.dims;
        let hard: Vec<f32> = first
            .data()
            .iter()
            .map(|&v| if v >= self.level { 1.0 } else { 0.0 })
            .collect();
        let mut out = vec![0.0f32; hard.len()];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut acc = 0.0f64;
                    let mut n = 0u32;
                    for dz in -1i32..=1 {
                        for dy in -1i32..=1 {
                            for dx in -1i32..=1 {
                                let xx = x as i32 + dx;
                                let yy = y as i32 + dy;
                                let zz = z as i32 + dz;
                                if xx < 0 || yy < 0 || zz < 0 {
                                    continue;
                                }
                                let (xx, yy, zz) = (xx as usize, yy as usize, zz as usize);
                                if xx >= nx || yy >= ny || zz >= nz {
                                    continue;
                                }
                                acc += hard[geometry.index(xx, yy, zz)] as f64;
                                n += 1;
                            }
                        }
                    }
                    out[geometry.index(x, y, z)] = (acc / n as f64) as f32;
                }
            }
        }
        ProbabilityMap::new(geometry, out)
    }

    fn reentrant(&self) -> bool {
        true
    }
}

/// Predictor returning one constant probability everywhere.
#[derive(Debug, Clone)]
pub struct ConstantPredictor(pub f32);

impl Predictor for ConstantPredictor {
    fn predict(&self, channels: &[ScalarVolume]) -> Result<ProbabilityMap> {
        let geometry = *channels[0].geometry();
        ProbabilityMap::filled(geometry, self.0)
    }

    fn reentrant(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Spacing;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn geo(dims: [usize; 3]) -> GridGeometry {
        GridGeometry::with_dims_spacing(dims, Spacing::isotropic(1.0).unwrap()).unwrap()
    }

    struct CountingPredictor {
        inner: ConstantPredictor,
        calls: AtomicUsize,
    }

    impl Predictor for CountingPredictor {
        fn predict(&self, channels: &[ScalarVolume]) -> Result<ProbabilityMap> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.predict(channels)
        }
    }

    fn params(patch: usize) -> InferParams {
        InferParams {
            patch_dims: [patch, patch, patch],
            ..InferParams::default()
        }
    }

    #[test]
    fn window_starts_match_enumeration_oracle() {
        // grid 240, patch 160, overlap 0.5 -> {0, 80}
        assert_eq!(window_starts(240, 160, 0.5), vec![0, 80]);
        // exact fit -> one window
        assert_eq!(window_starts(160, 160, 0.5), vec![0]);
        // smaller than patch -> one padded window
        assert_eq!(window_starts(100, 160, 0.5), vec![0]);
        // last window shifts flush to the border
        assert_eq!(window_starts(200, 160, 0.5), vec![0, 40]);
        assert_eq!(window_starts(400, 160, 0.5), vec![0, 80, 160, 240]);
    }

    #[test]
    fn constant_predictor_reproduces_constant_exactly() {
        let g = geo([24, 20, 18]);
        let channel = ScalarVolume::filled(g, 0.0).unwrap();
        let out = sliding_window_predict(
            &[channel],
            &ConstantPredictor(0.7),
            &params(16),
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.7), "tiling changed a constant");
    }

    #[test]
    fn exact_fit_runs_one_window() {
        let g = geo([16, 16, 16]);
        let channel = ScalarVolume::filled(g, 0.0).unwrap();
        let p = CountingPredictor {
            inner: ConstantPredictor(0.5),
            calls: AtomicUsize::new(0),
        };
        sliding_window_predict(&[channel], &p, &params(16)).unwrap();
        assert_eq!(p.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn small_volume_is_padded_and_cropped_back() {
        let g = geo([10, 12, 9]);
        let channel = ScalarVolume::filled(g, 1.0).unwrap();
        let out = sliding_window_predict(&[channel], &ConstantPredictor(0.3), &params(16))
            .unwrap();
        assert_eq!(out.geometry().dims, [10, 12, 9]);
        assert!(out.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn eight_windows_on_double_grid() {
        let g = geo([24, 24, 24]);
        let channel = ScalarVolume::filled(g, 0.0).unwrap();
        let p = CountingPredictor {
            inner: ConstantPredictor(0.5),
            calls: AtomicUsize::new(0),
        };
        let mut prm = params(16);
        prm.overlap_fraction = 0.5;
        sliding_window_predict(&[channel], &p, &prm).unwrap();
        // starts {0, 8} per axis -> 2^3 windows
        assert_eq!(p.calls.load(Ordering::SeqCst), 8);
    }

    struct WrongShapePredictor;

    impl Predictor for WrongShapePredictor {
        fn predict(&self, channels: &[ScalarVolume]) -> Result<ProbabilityMap> {
            let g = geo([2, 2, 2]);
            let _ = channels;
            ProbabilityMap::filled(g, 0.5)
        }
    }

    #[test]
    fn wrong_shape_is_rejected_with_window_coords() {
        let g = geo([16, 16, 16]);
        let channel = ScalarVolume::filled(g, 0.0).unwrap();
        let err = sliding_window_predict(&[channel], &WrongShapePredictor, &params(16))
            .unwrap_err();
        assert!(err.to_string().contains("window origin (0, 0, 0)"), "{err}");
    }

    /// Returns 0.8 when the patch corner voxel is set, else 0.2.
    struct CornerPredictor;

    impl Predictor for CornerPredictor {
        fn predict(&self, channels: &[ScalarVolume]) -> Result<ProbabilityMap> {
            let geometry = *channels[0].geometry();
            let v = if channels[0].data()[0] > 0.5 { 0.8 } else { 0.2 };
            ProbabilityMap::filled(geometry, v)
        }
    }

    #[test]
    fn tta_none_equals_single_pass() {
        let g = geo([12, 12, 12]);
        let channel = ScalarVolume::filled(g, 0.25).unwrap();
        let single = sliding_window_predict(&[channel.clone()], &ConstantPredictor(0.4), &params(12)).unwrap();
        let tta = tta_predict(&[channel], &ConstantPredictor(0.4), &params(12)).unwrap();
        assert_eq!(single, tta);
    }

    #[test]
    fn tta_averages_orientation_variants() {
        let g = geo([8, 8, 8]);
        // 1.0 only on the x = 0 plane: identity sees corner set, x-flip does not.
        let channel = ScalarVolume::new(
            g,
            (0..g.voxel_count())
                .map(|i| if g.coords(i).0 == 0 { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let mut prm = params(8);
        prm.tta_flips = vec![Axis::X];
        let out = tta_predict(&[channel], &CornerPredictor, &prm).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn tta_flip_symmetric_input_with_equivariant_predictor() {
        let g = geo([10, 10, 10]);
        // Symmetric under x-flip.
        let channel = ScalarVolume::new(
            g,
            (0..g.voxel_count())
                .map(|i| {
                    let (x, y, _) = g.coords(i);
                    let xs = x.min(9 - x) as f32;
                    if xs + y as f32 > 5.0 {
                        10.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        )
        .unwrap();
        let toy = ToyPredictor { level: 5.0 };
        let single = sliding_window_predict(std::slice::from_ref(&channel), &toy, &params(10)).unwrap();
        let mut prm = params(10);
        prm.tta_flips = vec![Axis::X];
        let tta = tta_predict(&[channel], &toy, &prm).unwrap();
        for (a, b) in tta.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_examples() {
        let g = geo([4, 4, 4]);
        let a = ProbabilityMap::filled(g, 0.2).unwrap();
        let b = ProbabilityMap::filled(g, 0.8).unwrap();

        let single = fuse_probability_maps(std::slice::from_ref(&a), FusionMode::Average).unwrap();
        assert_eq!(single, a);
        let single = fuse_probability_maps(std::slice::from_ref(&a), FusionMode::Amax).unwrap();
        assert_eq!(single, a);

        let avg = fuse_probability_maps(&[a.clone(), b.clone()], FusionMode::Average).unwrap();
        assert!(avg.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        let amax = fuse_probability_maps(&[a.clone(), b.clone()], FusionMode::Amax).unwrap();
        assert!(amax.data().iter().all(|&v| v == 0.8));

        assert!(fuse_probability_maps(&[], FusionMode::Average).is_err());
        let six = vec![a.clone(); 6];
        assert!(fuse_probability_maps(&six, FusionMode::Average).is_err());
    }

    fn blob_map(g: GridGeometry, voxels: &[(usize, usize, usize)], p: f32) -> ProbabilityMap {
        let mut data = vec![0.0f32; g.voxel_count()];
        for &(x, y, z) in voxels {
            data[g.index(x, y, z)] = p;
        }
        ProbabilityMap::new(g, data).unwrap()
    }

    fn cuboid(x0: usize, y0: usize, z0: usize, dx: usize, dy: usize, dz: usize) -> Vec<(usize, usize, usize)> {
        let mut v = Vec::new();
        for z in z0..z0 + dz {
            for y in y0..y0 + dy {
                for x in x0..x0 + dx {
                    v.push((x, y, z));
                }
            }
        }
        v
    }

    #[test]
    fn postprocess_removes_small_components() {
        // 40 voxels (0.04 ml at 1 mm) across 2 slices: below the volume floor.
        let g = geo([16, 16, 16]);
        let prob = blob_map(g, &cuboid(2, 2, 2, 5, 4, 2), 0.9);
        let (map, mask) = postprocess(&prob, None, 0.5, &PostprocParams::default()).unwrap();
        assert!(mask.is_empty());
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn postprocess_keeps_components_above_both_floors() {
        // 60 voxels (0.06 ml) spanning 3 slices.
        let g = geo([16, 16, 16]);
        let prob = blob_map(g, &cuboid(2, 2, 2, 5, 4, 3), 0.9);
        let (map, mask) = postprocess(&prob, None, 0.5, &PostprocParams::default()).unwrap();
        assert_eq!(mask.count(), 60);
        assert_eq!(map.data().iter().filter(|&&v| v > 0.0).count(), 60);
    }

    #[test]
    fn postprocess_removes_single_slice_pancake() {
        // 0.5 ml confined to one axial slice: run length 1 < 2.
        let g = geo([32, 32, 8]);
        let prob = blob_map(g, &cuboid(4, 4, 3, 25, 20, 1), 0.8);
        let (_, mask) = postprocess(&prob, None, 0.5, &PostprocParams::default()).unwrap();
        assert!(mask.is_empty());
    }

    #[test]
    fn postprocess_brain_filter_zeroes_outside() {
        let g = geo([8, 8, 8]);
        let prob = ProbabilityMap::filled(g, 0.9).unwrap();
        let brain = BinaryMask::from_fn(g, |x, _, _| x < 4);
        let mut prm = PostprocParams::default();
        prm.steps = vec![PostprocStep::BrainFilter];
        let (map, mask) = postprocess(&prob, Some(&brain), 0.5, &prm).unwrap();
        assert_eq!(mask.count(), 4 * 8 * 8);
        for (i, &v) in map.data().iter().enumerate() {
            let (x, _, _) = g.coords(i);
            if x < 4 {
                assert_eq!(v, 0.9);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn postprocess_rejects_bad_threshold() {
        let g = geo([4, 4, 4]);
        let prob = ProbabilityMap::filled(g, 0.5).unwrap();
        assert!(postprocess(&prob, None, 1.5, &PostprocParams::default()).is_err());
    }

    proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(24))]
        #[test]
        fn fuse_average_never_exceeds_amax(
            a in prop::collection::vec(0.0f32..=1.0, 27),
            b in prop::collection::vec(0.0f32..=1.0, 27),
        ) {
            let g = geo([3, 3, 3]);
            let maps = [
                ProbabilityMap::new(g, a).unwrap(),
                ProbabilityMap::new(g, b).unwrap(),
            ];
            let avg = fuse_probability_maps(&maps, FusionMode::Average).unwrap();
            let amax = fuse_probability_maps(&maps, FusionMode::Amax).unwrap();
            for i in 0..27 {
                let lo = maps[0].data()[i].min(maps[1].data()[i]);
                let hi = maps[0].data()[i].max(maps[1].data()[i]);
                prop_assert!(avg.data()[i] <= amax.data()[i] + 1e-7);
                prop_assert!(avg.data()[i] >= lo - 1e-7 && avg.data()[i] <= hi + 1e-7);
                prop_assert_eq!(amax.data()[i], hi);
            }
        }

        #[test]
        fn postprocess_shrinks_map_and_mask(
            values in prop::collection::vec(0.0f32..=1.0, 125),
            t in 0.1f64..=0.9,
        ) {
            let g = geo([5, 5, 5]);
            let prob = ProbabilityMap::new(g, values).unwrap();
            let mut prm = PostprocParams::default();
            prm.min_component_ml = 0.003;
            let (map, mask) = postprocess(&prob, None, t, &prm).unwrap();
            let raw = binarize(&prob, t).unwrap();
            prop_assert!(mask.is_subset_of(&raw));
            for (out, inp) in map.data().iter().zip(prob.data()) {
                prop_assert!(out <= inp);
            }
        }

        #[test]
        fn sliding_window_is_deterministic(
            values in prop::collection::vec(0.0f32..=20.0, 12 * 12 * 12),
        ) {
            let g = geo([12, 12, 12]);
            let channel = ScalarVolume::new(g, values).unwrap();
            let toy = ToyPredictor { level: 10.0 };
            let prm = params(8);
            let a = sliding_window_predict(std::slice::from_ref(&channel), &toy, &prm).unwrap();
            let b = sliding_window_predict(std::slice::from_ref(&channel), &toy, &prm).unwrap();
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
