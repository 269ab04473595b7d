//! Standardized per-timepoint features and the postsurgical report:
//! volumes, component statistics, diameter characteristics, volumetric
//! evolution, and the resection-class assessment.

use crate::error::{Error, Result};
use crate::morph::{boundary_voxels, connected_components, Connectivity};
use crate::refine::{Enhancement, StructureSet, Timepoint};
use crate::volgrid::{voxel_volume_ml, BinaryMask, Spacing, StructureKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Diameter characteristics in millimeters, measured between voxel centers
/// on the largest connected component. A one-voxel component reports zeros
/// (point convention).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diameters {
    /// Longest in-plane distance on the largest axial cross-section.
    pub long_axis: f64,
    /// Longest chord perpendicular to the long axis on the same slice.
    pub short_axis: f64,
    /// 3D caliper: max pairwise distance between boundary voxel centers.
    pub feret_3d: f64,
    /// Diameter of the circle with the largest slice's area.
    pub equivalent_area: f64,
}

impl Diameters {
    pub fn zero() -> Self {
        Diameters {
            long_axis: 0.0,
            short_axis: 0.0,
            feret_3d: 0.0,
            equivalent_area: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureParams {
    pub connectivity: Connectivity,
    /// Components below this size are ignored in the component statistics.
    pub min_component_voxels: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            connectivity: Connectivity::TwentySix,
            min_component_voxels: 0,
        }
    }
}

/// Diameter characteristics of a mask's largest connected component.
pub fn diameters(mask: &BinaryMask, connectivity: Connectivity) -> Diameters {
    let labeling = connected_components(mask, connectivity);
    if labeling.count() == 0 {
        return Diameters::zero();
    }
    let largest_id = (1..=labeling.count() as u32)
        .max_by_key(|&id| labeling.voxel_counts()[(id - 1) as usize])
        .expect("count > 0");
    if labeling.voxel_counts()[(largest_id - 1) as usize] == 1 {
        return Diameters::zero();
    }
    let component = labeling
        .component_mask(largest_id)
        .expect("id from labeling");
    let spacing = mask.geometry().spacing;

    // 3D Feret on boundary voxel centers.
    let boundary = boundary_voxels(&component);
    let mut feret2 = 0.0f64;
    for i in 0..boundary.len() {
        let (ax, ay, az) = boundary[i];
        for &(bx, by, bz) in &boundary[i + 1..] {
            let dx = (ax as f64 - bx as f64) * spacing.sx;
            let dy = (ay as f64 - by as f64) * spacing.sy;
            let dz = (az as f64 - bz as f64) * spacing.sz;
            feret2 = feret2.max(dx * dx + dy * dy + dz * dz);
        }
    }

    // Largest axial cross-section of the component.
    let geometry = component.geometry();
    let mut per_slice = vec![0usize; geometry.dims[2]];
    for (i, &set) in component.data().iter().enumerate() {
        if set {
            per_slice[geometry.coords(i).2] += 1;
        }
    }
    let best_z = per_slice
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(z, _)| z)
        .expect("nonempty component");

    let mut points: Vec<(f64, f64)> = Vec::new();
    for y in 0..geometry.dims[1] {
        for x in 0..geometry.dims[0] {
            if component.get(x, y, best_z) {
                points.push((x as f64 * spacing.sx, y as f64 * spacing.sy));
            }
        }
    }

    let (long_axis, short_axis) = slice_axes(&points, spacing);
    let slice_area = points.len() as f64 * spacing.sx * spacing.sy;
    Diameters {
        long_axis,
        short_axis,
        feret_3d: feret2.sqrt(),
        equivalent_area: 2.0 * (slice_area / std::f64::consts::PI).sqrt(),
    }
}

/// Long axis: max pairwise distance. Short axis: longest chord
/// perpendicular to the long-axis direction, estimated by slicing the
/// point set into voxel-width bins along the long axis and taking the
/// largest perpendicular extent within a bin.
fn slice_axes(points: &[(f64, f64)], spacing: Spacing) -> (f64, f64) {
    if points.len() < 2 {
        return (0.0, 0.0);
    }
    let mut best = (0.0f64, (0usize, 0usize));
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let dx = points[i].0 - points[j].0;
            let dy = points[i].1 - points[j].1;
            let d2 = dx * dx + dy * dy;
            if d2 > best.0 {
                best = (d2, (i, j));
            }
        }
    }
    let long_axis = best.0.sqrt();
    if long_axis == 0.0 {
        return (0.0, 0.0);
    }
    let (i, j) = best.1;
    let ux = (points[i].0 - points[j].0) / long_axis;
    let uy = (points[i].1 - points[j].1) / long_axis;

    let bin_width = spacing.sx.max(spacing.sy);
    let mut bins: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for &(x, y) in points {
        let along = x * ux + y * uy;
        let across = -x * uy + y * ux;
        let bin = (along / bin_width).floor() as i64;
        let entry = bins.entry(bin).or_insert((across, across));
        entry.0 = entry.0.min(across);
        entry.1 = entry.1.max(across);
    }
    let short_axis = bins
        .values()
        .map(|&(lo, hi)| hi - lo)
        .fold(0.0f64, f64::max);
    (long_axis, short_axis)
}

/// Features of one structure at one timepoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureFeatures {
    pub kind: StructureKind,
    pub volume_ml: f64,
    /// Component count after the size filter.
    #[serde(rename = "components")]
    pub component_count: usize,
    #[serde(rename = "largest_ml")]
    pub largest_component_ml: f64,
    /// Present for the reference tumor structure only.
    #[serde(rename = "diameters_mm")]
    pub diameters: Option<Diameters>,
    pub tumor_brain_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimepointFeatures {
    pub tag: Timepoint,
    pub structures: Vec<StructureFeatures>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub reference_kind: Option<StructureKind>,
}

impl TimepointFeatures {
    pub fn volume_of(&self, kind: StructureKind) -> Option<f64> {
        self.structures
            .iter()
            .find(|s| s.kind == kind)
            .map(|s| s.volume_ml)
    }

    fn reference_volume(&self) -> Option<f64> {
        self.reference_kind.and_then(|k| self.volume_of(k))
    }
}

/// The reference tumor structure whose volume drives the surgical
/// assessment.
pub fn reference_kind(enhancement: Enhancement, timepoint: Timepoint) -> StructureKind {
    match (enhancement, timepoint) {
        (Enhancement::ContrastEnhancing, Timepoint::Preop) => StructureKind::TumorCore,
        (Enhancement::ContrastEnhancing, Timepoint::Postop) => StructureKind::ResidualTumor,
        (Enhancement::NonEnhancing, _) => StructureKind::WholeTumor,
    }
}

/// Per-structure volumes, component statistics, diameters for the
/// reference tumor structure, and structure-to-brain volume ratios.
pub fn timepoint_features(
    set: &StructureSet,
    brain: Option<&BinaryMask>,
    params: &FeatureParams,
) -> TimepointFeatures {
    let brain_volume = brain
        .map(BinaryMask::volume_ml)
        .or_else(|| set.get(StructureKind::Brain).map(BinaryMask::volume_ml))
        .filter(|&v| v > 0.0);
    let reference = reference_kind(set.enhancement, set.timepoint);

    let structures = set
        .masks()
        .iter()
        .map(|(&kind, mask)| {
            let labeling = connected_components(mask, params.connectivity);
            let surviving: Vec<usize> = labeling
                .voxel_counts()
                .iter()
                .copied()
                .filter(|&c| c >= params.min_component_voxels)
                .collect();
            let vox_ml = voxel_volume_ml(mask.geometry().spacing);
            StructureFeatures {
                kind,
                volume_ml: mask.volume_ml(),
                component_count: surviving.len(),
                largest_component_ml: surviving.iter().max().copied().unwrap_or(0) as f64
                    * vox_ml,
                diameters: (kind == reference).then(|| diameters(mask, params.connectivity)),
                tumor_brain_ratio: brain_volume.map(|b| mask.volume_ml() / b),
            }
        })
        .collect();

    let notes = set
        .all_notes()
        .iter()
        .flat_map(|(kind, notes)| notes.iter().map(move |n| format!("{kind}: {n}")))
        .collect();

    TimepointFeatures {
        tag: set.timepoint,
        structures,
        notes,
        reference_kind: Some(reference),
    }
}

/// Percent volume reduction across surgery: 100 * (pre - post) / pre.
/// Undefined when pre = 0; negative values (growth) are reported as-is.
pub fn volumetric_evolution(pre_ml: f64, post_ml: f64) -> Result<Option<f64>> {
    if pre_ml < 0.0 || post_ml < 0.0 {
        return Err(Error::InvalidParam(format!(
            "volumes must be >= 0, got pre {pre_ml}, post {post_ml}"
        )));
    }
    if pre_ml == 0.0 {
        return Ok(None);
    }
    Ok(Some(100.0 * (pre_ml - post_ml) / pre_ml))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResectionClass {
    Complete,
    NearTotal,
    Subtotal,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResectionThresholds {
    /// Residual disease below this volume counts as measurable-disease
    /// free (complete resection).
    pub measurability_ml: f64,
    /// Upper bound of the near-total class.
    pub near_total_max_ml: f64,
}

impl Default for ResectionThresholds {
    fn default() -> Self {
        ResectionThresholds {
            measurability_ml: 0.175,
            near_total_max_ml: 1.0,
        }
    }
}

impl ResectionThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.measurability_ml && self.measurability_ml <= self.near_total_max_ml) {
            return Err(Error::InvalidParam(format!(
                "resection thresholds must satisfy 0 <= measurability <= near_total_max, \
                 got {} and {}",
                self.measurability_ml, self.near_total_max_ml
            )));
        }
        Ok(())
    }
}

/// Surgical assessment class from the preoperative reference volume and
/// the postoperative residual volume.
pub fn classify_resection(
    preop_reference_ml: Option<f64>,
    residual_ml: f64,
    thresholds: &ResectionThresholds,
) -> Result<ResectionClass> {
    thresholds.validate()?;
    if residual_ml < 0.0 || preop_reference_ml.is_some_and(|v| v < 0.0) {
        return Err(Error::InvalidParam("volumes must be >= 0".into()));
    }
    Ok(match preop_reference_ml {
        None => ResectionClass::NotApplicable,
        Some(_) => {
            if residual_ml < thresholds.measurability_ml {
                ResectionClass::Complete
            } else if residual_ml <= thresholds.near_total_max_ml {
                ResectionClass::NearTotal
            } else {
                ResectionClass::Subtotal
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgicalSection {
    /// Percent volume change per structure present at both timepoints;
    /// null where the preoperative volume is zero.
    pub evolution_pct: BTreeMap<StructureKind, Option<f64>>,
    pub eor_pct: Option<f64>,
    pub residual_ml: f64,
    pub resection_class: ResectionClass,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgicalReport {
    pub patient_id: String,
    pub timepoints: Vec<TimepointFeatures>,
    pub surgical: SurgicalSection,
    #[serde(default)]
    pub config_echo: serde_json::Value,
    pub version: String,
}

/// Assemble the postsurgical report from a preop/postop feature pair. The
/// extent of resection comes from the reference tumor structure; a missing
/// reference yields a NotApplicable class and a warning note rather than
/// an error.
pub fn build_surgical_report(
    patient_id: &str,
    pre: &TimepointFeatures,
    post: &TimepointFeatures,
    thresholds: &ResectionThresholds,
) -> Result<SurgicalReport> {
    thresholds.validate()?;
    let mut notes = Vec::new();

    let mut evolution_pct = BTreeMap::new();
    for s in &pre.structures {
        if let Some(post_ml) = post.volume_of(s.kind) {
            evolution_pct.insert(s.kind, volumetric_evolution(s.volume_ml, post_ml)?);
        }
    }

    let pre_ref = pre.reference_volume();
    let post_ref = post.reference_volume();
    if pre_ref.is_none() {
        notes.push(format!(
            "preoperative reference structure ({}) missing: resection class not applicable",
            pre.reference_kind
                .map(|k| k.to_string())
                .unwrap_or_else(|| "unknown".into())
        ));
    }
    if post_ref.is_none() {
        notes.push(format!(
            "postoperative reference structure ({}) missing: residual volume unknown",
            post.reference_kind
                .map(|k| k.to_string())
                .unwrap_or_else(|| "unknown".into())
        ));
    }

    let residual_ml = post_ref.unwrap_or(0.0);
    let eor_pct = match (pre_ref, post_ref) {
        (Some(pre_ml), Some(post_ml)) => volumetric_evolution(pre_ml, post_ml)?,
        _ => None,
    };
    let resection_class = match (pre_ref, post_ref) {
        (Some(pre_ml), Some(_)) => classify_resection(Some(pre_ml), residual_ml, thresholds)?,
        _ => ResectionClass::NotApplicable,
    };

    Ok(SurgicalReport {
        patient_id: patient_id.to_string(),
        timepoints: vec![pre.clone(), post.clone()],
        surgical: SurgicalSection {
            evolution_pct,
            eor_pct,
            residual_ml,
            resection_class,
            notes,
        },
        config_echo: serde_json::Value::Null,
        version: crate::VERSION.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::{GridGeometry, Spacing};

    fn geo(n: usize, s: f64) -> GridGeometry {
        GridGeometry::with_dims_spacing([n, n, n], Spacing::isotropic(s).unwrap()).unwrap()
    }

    #[test]
    fn sphere_diameters_match_analytic() {
        // r = 10 mm at 1 mm spacing: every diameter should be ~20 mm.
        let g = geo(26, 1.0);
        let c = 12.5;
        let mask = BinaryMask::from_fn(g, |x, y, z| {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
            d2.sqrt() <= 10.0
        });
        let d = diameters(&mask, Connectivity::TwentySix);
        for (name, v) in [
            ("long", d.long_axis),
            ("short", d.short_axis),
            ("feret", d.feret_3d),
            ("eq_area", d.equivalent_area),
        ] {
            let rel = (v - 20.0f64).abs() / 20.0;
            assert!(rel < 0.05, "{name} = {v}, rel err {rel}");
        }
        assert!(d.short_axis <= d.long_axis + 1e-9);
        assert!(d.long_axis <= d.feret_3d + 1e-9);
    }

    #[test]
    fn single_voxel_reports_zero_diameters() {
        let g = geo(5, 1.0);
        let mut mask = BinaryMask::empty(g);
        mask.set(2, 2, 2, true);
        assert_eq!(diameters(&mask, Connectivity::TwentySix), Diameters::zero());
        assert_eq!(
            diameters(&BinaryMask::empty(g), Connectivity::TwentySix),
            Diameters::zero()
        );
    }

    #[test]
    fn box_diameters_match_geometry() {
        // Axis-aligned 20 x 10 x 10 mm box at 1 mm spacing.
        let g = geo(24, 1.0);
        let mask = BinaryMask::from_fn(g, |x, y, z| {
            (2..22).contains(&x) && (2..12).contains(&y) && (2..12).contains(&z)
        });
        let d = diameters(&mask, Connectivity::TwentySix);
        let voxel_diag = 2.0f64.sqrt();
        assert!(
            (d.long_axis - 20.0).abs() <= voxel_diag,
            "long {}",
            d.long_axis
        );
        assert!(
            (d.short_axis - 10.0).abs() <= voxel_diag,
            "short {}",
            d.short_axis
        );
        assert!(d.short_axis <= d.long_axis);
        assert!(d.long_axis <= d.feret_3d + 1e-9);
    }

    fn ce_set(timepoint: Timepoint) -> StructureSet {
        StructureSet::new(timepoint, Enhancement::ContrastEnhancing)
    }

    #[test]
    fn features_of_empty_structure_are_zero() {
        let g = geo(8, 1.0);
        let set = ce_set(Timepoint::Preop)
            .with(StructureKind::TumorCore, BinaryMask::empty(g))
            .unwrap();
        let f = timepoint_features(&set, None, &FeatureParams::default());
        let s = &f.structures[0];
        assert_eq!(s.volume_ml, 0.0);
        assert_eq!(s.component_count, 0);
        assert_eq!(s.largest_component_ml, 0.0);
        assert_eq!(s.diameters, Some(Diameters::zero()));
        assert_eq!(s.tumor_brain_ratio, None);
    }

    #[test]
    fn tumor_to_brain_ratio() {
        // At 10 mm spacing one voxel is 1 ml: tumor 15 voxels = 15 ml,
        // brain 1500 voxels = 1500 ml, ratio 0.01.
        let g = GridGeometry::with_dims_spacing([12, 12, 12], Spacing::isotropic(10.0).unwrap())
            .unwrap();
        let mut tumor = BinaryMask::empty(g);
        for i in 0..15 {
            tumor.data_mut()[i] = true;
        }
        let mut brain = BinaryMask::empty(g);
        for i in 0..1500 {
            brain.data_mut()[i] = true;
        }
        let set = ce_set(Timepoint::Preop)
            .with(StructureKind::TumorCore, tumor)
            .unwrap();
        let f = timepoint_features(&set, Some(&brain), &FeatureParams::default());
        let s = &f.structures[0];
        assert!((s.volume_ml - 15.0).abs() < 1e-9);
        assert!((s.tumor_brain_ratio.unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn component_statistics_with_min_size_zero() {
        let g = geo(12, 1.0);
        let mask = BinaryMask::from_fn(g, |x, y, z| {
            let a = x < 2 && y < 2 && z < 2; // 8 voxels
            let b = x >= 6 && x < 9 && y >= 6 && y < 9 && z >= 6 && z < 9; // 27
            a || b
        });
        let set = ce_set(Timepoint::Preop)
            .with(StructureKind::TumorCore, mask)
            .unwrap();
        let f = timepoint_features(&set, None, &FeatureParams::default());
        let s = &f.structures[0];
        assert_eq!(s.component_count, 2);
        assert!((s.largest_component_ml - 0.027).abs() < 1e-12);
    }

    #[test]
    fn evolution_examples() {
        assert_eq!(volumetric_evolution(30.0, 3.0).unwrap(), Some(90.0));
        assert_eq!(volumetric_evolution(30.0, 0.0).unwrap(), Some(100.0));
        assert_eq!(volumetric_evolution(10.0, 12.0).unwrap(), Some(-20.0));
        assert_eq!(volumetric_evolution(0.0, 5.0).unwrap(), None);
        assert!(volumetric_evolution(-1.0, 5.0).is_err());
    }

    #[test]
    fn resection_classes() {
        let t = ResectionThresholds::default();
        assert_eq!(
            classify_resection(Some(30.0), 0.0, &t).unwrap(),
            ResectionClass::Complete
        );
        assert_eq!(
            classify_resection(Some(30.0), 0.5, &t).unwrap(),
            ResectionClass::NearTotal
        );
        assert_eq!(
            classify_resection(Some(30.0), 5.0, &t).unwrap(),
            ResectionClass::Subtotal
        );
        assert_eq!(
            classify_resection(None, 0.0, &t).unwrap(),
            ResectionClass::NotApplicable
        );
        assert!(classify_resection(Some(1.0), -2.0, &t).is_err());
    }

    #[test]
    fn resection_class_is_monotone_in_residual() {
        let t = ResectionThresholds::default();
        let order = |c: ResectionClass| match c {
            ResectionClass::Complete => 0,
            ResectionClass::NearTotal => 1,
            ResectionClass::Subtotal => 2,
            ResectionClass::NotApplicable => 3,
        };
        let mut last = 0;
        for i in 0..200 {
            let residual = i as f64 * 0.02;
            let c = classify_resection(Some(30.0), residual, &t).unwrap();
            assert!(order(c) >= last);
            last = order(c);
        }
    }

    fn features_with(kind: StructureKind, volume: f64, tag: Timepoint) -> TimepointFeatures {
        TimepointFeatures {
            tag,
            structures: vec![StructureFeatures {
                kind,
                volume_ml: volume,
                component_count: 1,
                largest_component_ml: volume,
                diameters: None,
                tumor_brain_ratio: None,
            }],
            notes: vec![],
            reference_kind: Some(kind),
        }
    }

    #[test]
    fn report_complete_resection() {
        let pre = features_with(StructureKind::TumorCore, 30.0, Timepoint::Preop);
        let post = features_with(StructureKind::ResidualTumor, 0.0, Timepoint::Postop);
        let r = build_surgical_report("p1", &pre, &post, &ResectionThresholds::default()).unwrap();
        assert_eq!(r.surgical.eor_pct, Some(100.0));
        assert_eq!(r.surgical.resection_class, ResectionClass::Complete);
        assert_eq!(r.surgical.residual_ml, 0.0);
    }

    #[test]
    fn report_subtotal_resection() {
        let pre = features_with(StructureKind::TumorCore, 30.0, Timepoint::Preop);
        let post = features_with(StructureKind::ResidualTumor, 3.0, Timepoint::Postop);
        let r = build_surgical_report("p1", &pre, &post, &ResectionThresholds::default()).unwrap();
        assert_eq!(r.surgical.eor_pct, Some(90.0));
        assert_eq!(r.surgical.resection_class, ResectionClass::Subtotal);
    }

    #[test]
    fn report_non_enhancing_uses_whole_tumor() {
        let pre = features_with(StructureKind::WholeTumor, 40.0, Timepoint::Preop);
        let post = features_with(StructureKind::WholeTumor, 10.0, Timepoint::Postop);
        let r = build_surgical_report("p1", &pre, &post, &ResectionThresholds::default()).unwrap();
        assert_eq!(r.surgical.eor_pct, Some(75.0));
        assert_eq!(
            r.surgical.evolution_pct[&StructureKind::WholeTumor],
            Some(75.0)
        );
        assert_eq!(r.surgical.resection_class, ResectionClass::Subtotal); // 10 ml residual
    }

    #[test]
    fn report_missing_reference_is_not_applicable_with_note() {
        let pre = features_with(StructureKind::Snfh, 40.0, Timepoint::Preop);
        let mut pre = pre;
        pre.reference_kind = Some(StructureKind::TumorCore); // absent from structures
        let post = features_with(StructureKind::ResidualTumor, 3.0, Timepoint::Postop);
        let r = build_surgical_report("p1", &pre, &post, &ResectionThresholds::default()).unwrap();
        assert_eq!(r.surgical.resection_class, ResectionClass::NotApplicable);
        assert_eq!(r.surgical.eor_pct, None);
        assert!(!r.surgical.notes.is_empty());
    }

    #[test]
    fn report_json_roundtrip_is_identity() {
        let pre = features_with(StructureKind::TumorCore, 30.0, Timepoint::Preop);
        let post = features_with(StructureKind::ResidualTumor, 0.4, Timepoint::Postop);
        let r = build_surgical_report("p7", &pre, &post, &ResectionThresholds::default()).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: SurgicalReport = serde_json::from_str(&json).unwrap();
        // reference_kind is derivable context, not part of the schema
        let strip = |mut r: SurgicalReport| {
            for t in &mut r.timepoints {
                t.reference_kind = None;
            }
            r
        };
        assert_eq!(strip(r), strip(back));
    }
}
