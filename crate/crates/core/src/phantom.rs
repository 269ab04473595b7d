//! Deterministic synthetic pre/postoperative phantoms with analytic ground
//! truth: an ellipsoidal brain, a spherical tumor with an enhancing rim and
//! necrotic core, a surrounding hyperintensity shell, and postoperatively a
//! resection cavity with a crescent of residual tumor.
//!
//! Noise comes from a counter-based splitmix64 generator keyed by the spec
//! seed, so outputs are bit-reproducible for a given spec.

use crate::error::{Error, Result};
use crate::refine::{Enhancement, StructureSet, Timepoint};
use crate::volgrid::{BinaryMask, GridGeometry, ProbabilityMap, ScalarVolume, Spacing, StructureKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

/// MR sequence tags of the generated channels, in output order.
pub const CHANNEL_TAGS: [&str; 4] = ["t1c", "t1w", "t2f", "t2w"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: Spacing,
    /// Brain ellipsoid semi-axes (mm), centered in the grid.
    pub brain_semi_axes_mm: [f64; 3],
    /// Tumor center offset from the grid center (mm).
    pub tumor_center_mm: [f64; 3],
    pub tumor_radius_mm: f64,
    /// Enhancing rim thickness; the necrotic core (NETC) is the sphere of
    /// radius tumor_radius - rim_thickness.
    pub rim_thickness_mm: f64,
    /// Thickness of the hyperintensity (SNFH) shell outside the tumor.
    pub snfh_thickness_mm: f64,
    /// Resection cavity radius (postoperative).
    pub cavity_radius_mm: f64,
    /// Solid-angle fraction of the cavity-to-tumor shell left as residual
    /// tumor (postoperative), in [0, 1].
    pub residual_fraction: f64,
    /// Amplitude of the additive uniform intensity noise.
    pub noise_amplitude: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 7,
            dims: [64, 64, 64],
            spacing: Spacing {
                sx: 1.0,
                sy: 1.0,
                sz: 1.0,
            },
            brain_semi_axes_mm: [25.0, 22.0, 20.0],
            tumor_center_mm: [4.0, 2.0, 0.0],
            tumor_radius_mm: 10.0,
            rim_thickness_mm: 3.0,
            snfh_thickness_mm: 4.0,
            // Leaves a 2.0 ml shell between cavity and former tumor surface.
            cavity_radius_mm: 8.0545,
            residual_fraction: 0.25,
            noise_amplitude: 10.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParam("phantom dims must be >= 1".into()));
        }
        Spacing::new(self.spacing.sx, self.spacing.sy, self.spacing.sz)?;
        for v in [
            self.tumor_radius_mm,
            self.rim_thickness_mm,
            self.snfh_thickness_mm,
            self.cavity_radius_mm,
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParam(format!(
                    "phantom radii and thicknesses must be > 0, got {v}"
                )));
            }
        }
        if self.brain_semi_axes_mm.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
            return Err(Error::InvalidParam(
                "brain semi-axes must be > 0".into(),
            ));
        }
        if self.rim_thickness_mm > self.tumor_radius_mm {
            return Err(Error::InvalidParam(
                "rim thickness exceeds the tumor radius".into(),
            ));
        }
        if self.cavity_radius_mm > self.tumor_radius_mm {
            return Err(Error::InvalidParam(
                "cavity must lie inside or overlap the tumor".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.residual_fraction) {
            return Err(Error::InvalidParam(
                "residual fraction must be in [0, 1]".into(),
            ));
        }
        if self.noise_amplitude < 0.0 {
            return Err(Error::InvalidParam("noise amplitude must be >= 0".into()));
        }
        // Tumor plus its hyperintensity shell must fit inside the brain
        // (conservative per-axis check).
        let reach = self.tumor_radius_mm + self.snfh_thickness_mm;
        for axis in 0..3 {
            if self.tumor_center_mm[axis].abs() + reach > self.brain_semi_axes_mm[axis] {
                return Err(Error::InvalidParam(format!(
                    "tumor (radius + snfh = {reach} mm) does not fit inside the brain \
                     along axis {axis}"
                )));
            }
        }
        Ok(())
    }

    fn geometry(&self) -> GridGeometry {
        GridGeometry::with_dims_spacing(self.dims, self.spacing).expect("validated dims")
    }

    /// Analytic (continuous-geometry) volumes in ml.
    pub fn analytic_volumes(&self, timepoint: Timepoint) -> BTreeMap<StructureKind, f64> {
        let sphere = |r: f64| 4.0 / 3.0 * PI * r * r * r / 1000.0;
        let [a, b, c] = self.brain_semi_axes_mm;
        let r = self.tumor_radius_mm;
        let mut out = BTreeMap::new();
        out.insert(StructureKind::Brain, 4.0 / 3.0 * PI * a * b * c / 1000.0);
        out.insert(
            StructureKind::Snfh,
            sphere(r + self.snfh_thickness_mm) - sphere(r),
        );
        match timepoint {
            Timepoint::Preop => {
                out.insert(StructureKind::TumorCore, sphere(r));
                out.insert(StructureKind::Netc, sphere(r - self.rim_thickness_mm));
            }
            Timepoint::Postop => {
                let shell = sphere(r) - sphere(self.cavity_radius_mm);
                out.insert(StructureKind::ResectionCavity, sphere(self.cavity_radius_mm));
                out.insert(StructureKind::ResidualTumor, self.residual_fraction * shell);
            }
        }
        out
    }
}

/// splitmix64 keyed by (seed, counter); uniform in [0, 1).
pub fn seeded_uniform(seed: u64, counter: u64) -> f64 {
    let mut z = seed
        .wrapping_add(counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Everything one phantom study produces: the four MR channels, the ground
/// truth structure set, and the analytic volumes.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub channels: Vec<ScalarVolume>,
    pub truth: StructureSet,
    pub analytic_ml: BTreeMap<StructureKind, f64>,
}

struct Regions {
    brain: Vec<bool>,
    rim: Vec<bool>,
    core: Vec<bool>,
    snfh: Vec<bool>,
    cavity: Vec<bool>,
    residual: Vec<bool>,
}

fn carve(spec: &PhantomSpec, timepoint: Timepoint) -> Regions {
    let geometry = spec.geometry();
    let n = geometry.voxel_count();
    let mut regions = Regions {
        brain: vec![false; n],
        rim: vec![false; n],
        core: vec![false; n],
        snfh: vec![false; n],
        cavity: vec![false; n],
        residual: vec![false; n],
    };
    let grid_center = [
        spec.dims[0] as f64 * spec.spacing.sx / 2.0,
        spec.dims[1] as f64 * spec.spacing.sy / 2.0,
        spec.dims[2] as f64 * spec.spacing.sz / 2.0,
    ];
    let tumor_center = [
        grid_center[0] + spec.tumor_center_mm[0],
        grid_center[1] + spec.tumor_center_mm[1],
        grid_center[2] + spec.tumor_center_mm[2],
    ];
    let r = spec.tumor_radius_mm;
    let core_r = r - spec.rim_thickness_mm;
    let snfh_r = r + spec.snfh_thickness_mm;
    let cavity_r = spec.cavity_radius_mm;
    // Spherical cap with this cosine bound subtends the requested
    // solid-angle fraction.
    let cos_min = 1.0 - 2.0 * spec.residual_fraction;

    let mut i = 0usize;
    for z in 0..spec.dims[2] {
        let pz = (z as f64 + 0.5) * spec.spacing.sz;
        for y in 0..spec.dims[1] {
            let py = (y as f64 + 0.5) * spec.spacing.sy;
            for x in 0..spec.dims[0] {
                let px = (x as f64 + 0.5) * spec.spacing.sx;

                let e = [
                    (px - grid_center[0]) / spec.brain_semi_axes_mm[0],
                    (py - grid_center[1]) / spec.brain_semi_axes_mm[1],
                    (pz - grid_center[2]) / spec.brain_semi_axes_mm[2],
                ];
                regions.brain[i] = e[0] * e[0] + e[1] * e[1] + e[2] * e[2] <= 1.0;

                let dx = px - tumor_center[0];
                let dy = py - tumor_center[1];
                let dz = pz - tumor_center[2];
                let d = (dx * dx + dy * dy + dz * dz).sqrt();

                regions.snfh[i] = d > r && d <= snfh_r;
                match timepoint {
                    Timepoint::Preop => {
                        regions.core[i] = d <= core_r;
                        regions.rim[i] = d <= r && d > core_r;
                    }
                    Timepoint::Postop => {
                        regions.cavity[i] = d <= cavity_r;
                        regions.residual[i] =
                            d > cavity_r && d <= r && d > 0.0 && dz / d >= cos_min;
                    }
                }
                i += 1;
            }
        }
    }
    regions
}

fn render_channels(spec: &PhantomSpec, regions: &Regions) -> Vec<ScalarVolume> {
    let geometry = spec.geometry();
    let n = geometry.voxel_count();
    // Base intensities per channel: [brain tissue, rim, core, snfh, cavity,
    // residual].
    let palette: [[f32; 6]; 4] = [
        [600.0, 1000.0, 300.0, 550.0, 150.0, 1000.0], // t1c: enhancement bright
        [600.0, 450.0, 300.0, 550.0, 150.0, 450.0],   // t1w
        [400.0, 500.0, 600.0, 900.0, 200.0, 500.0],   // t2f: snfh bright
        [500.0, 550.0, 700.0, 800.0, 950.0, 550.0],   // t2w: fluid bright
    ];
    (0..4)
        .map(|ch| {
            let base = &palette[ch];
            let mut data = vec![0.0f32; n];
            for i in 0..n {
                if !regions.brain[i] {
                    continue;
                }
                let mut v = base[0];
                if regions.snfh[i] {
                    v = base[3];
                }
                if regions.rim[i] {
                    v = base[1];
                }
                if regions.core[i] {
                    v = base[2];
                }
                if regions.cavity[i] {
                    v = base[4];
                }
                if regions.residual[i] {
                    v = base[5];
                }
                if spec.noise_amplitude > 0.0 {
                    let u = seeded_uniform(spec.seed, (ch * n + i) as u64);
                    v += spec.noise_amplitude * (2.0 * u - 1.0) as f32;
                }
                data[i] = v;
            }
            ScalarVolume::new(geometry, data).expect("finite phantom intensities")
        })
        .collect()
}

fn mask_of(geometry: GridGeometry, bits: &[bool]) -> BinaryMask {
    BinaryMask::new(geometry, bits.to_vec()).expect("length matches geometry")
}

/// Preoperative phantom: brain, tumor core (rim + core), NETC (core), and
/// SNFH shell, with four MR channels.
pub fn generate_preop(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let geometry = spec.geometry();
    let regions = carve(spec, Timepoint::Preop);
    let channels = render_channels(spec, &regions);

    let tc: Vec<bool> = regions
        .rim
        .iter()
        .zip(&regions.core)
        .map(|(&r, &c)| r || c)
        .collect();
    let truth = StructureSet::new(Timepoint::Preop, Enhancement::ContrastEnhancing)
        .with(StructureKind::Brain, mask_of(geometry, &regions.brain))?
        .with(StructureKind::TumorCore, mask_of(geometry, &tc))?
        .with(StructureKind::Netc, mask_of(geometry, &regions.core))?
        .with(StructureKind::Snfh, mask_of(geometry, &regions.snfh))?;

    Ok(Phantom {
        channels,
        truth,
        analytic_ml: spec.analytic_volumes(Timepoint::Preop),
    })
}

/// Postoperative phantom: the tumor is replaced by a cavity sphere plus a
/// residual crescent subtending the configured solid-angle fraction of the
/// cavity-to-tumor shell.
pub fn generate_postop(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let geometry = spec.geometry();
    let regions = carve(spec, Timepoint::Postop);
    let channels = render_channels(spec, &regions);

    let truth = StructureSet::new(Timepoint::Postop, Enhancement::ContrastEnhancing)
        .with(StructureKind::Brain, mask_of(geometry, &regions.brain))?
        .with(StructureKind::ResidualTumor, mask_of(geometry, &regions.residual))?
        .with(StructureKind::ResectionCavity, mask_of(geometry, &regions.cavity))?
        .with(StructureKind::Snfh, mask_of(geometry, &regions.snfh))?;

    Ok(Phantom {
        channels,
        truth,
        analytic_ml: spec.analytic_volumes(Timepoint::Postop),
    })
}

/// Synthetic "model output" for evaluation harnesses: high probability
/// inside the truth mask, a low-probability halo on its 6-neighbors, zero
/// elsewhere, with seeded voxelwise perturbation. Deterministic in
/// (mask, seed).
pub fn synthetic_probability_map(mask: &BinaryMask, seed: u64) -> ProbabilityMap {
    let geometry = *mask.geometry();
    let [nx, ny, nz] = geometry.dims;
    let data = mask.data();
    let mut out = vec![0.0f32; data.len()];
    for (i, &inside) in data.iter().enumerate() {
        let (x, y, z) = geometry.coords(i);
        let base: f32 = if inside {
            0.92
        } else {
            let halo = (x > 0 && data[geometry.index(x - 1, y, z)])
                || (x + 1 < nx && data[geometry.index(x + 1, y, z)])
                || (y > 0 && data[geometry.index(x, y - 1, z)])
                || (y + 1 < ny && data[geometry.index(x, y + 1, z)])
                || (z > 0 && data[geometry.index(x, y, z - 1)])
                || (z + 1 < nz && data[geometry.index(x, y, z + 1)]);
            if halo {
                0.35
            } else {
                0.0
            }
        };
        if base > 0.0 {
            let u = seeded_uniform(seed, i as u64);
            out[i] = (base + 0.15 * (2.0 * u - 1.0) as f32).clamp(0.0, 1.0);
        }
    }
    ProbabilityMap::new(geometry, out).expect("values clamped to [0, 1]")
}
