//! Three-tier segmentation validation: patient-wise classification from
//! volume cutoffs, voxel-wise overlap and surface distance, object-wise
//! Hungarian-paired metrics, plus the threshold sweep and pooled
//! cross-validation estimates.

mod distance;
mod hungarian;

pub use hungarian::assign_min_cost;

use crate::error::{Error, Result};
use crate::infer::{postprocess, PostprocParams};
use crate::morph::{boundary_voxels, connected_components, ComponentLabeling, Connectivity};
use crate::volgrid::{binarize, ensure_compatible, BinaryMask, ProbabilityMap, StructureKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Volume cutoffs (ml) deciding whether a ground-truth structure counts as
/// a positive case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureCutoffs {
    pub residual_tumor_ml: f64,
    pub netc_ml: f64,
    pub resection_cavity_ml: f64,
    pub tumor_core_ml: f64,
    /// Applied to kinds without a dedicated cutoff (brain, snfh, whole
    /// tumor); 0 means any nonempty mask is positive.
    pub other_ml: f64,
}

impl Default for StructureCutoffs {
    fn default() -> Self {
        StructureCutoffs {
            residual_tumor_ml: 0.175,
            netc_ml: 0.05,
            resection_cavity_ml: 0.1,
            tumor_core_ml: 0.1,
            other_ml: 0.0,
        }
    }
}

impl StructureCutoffs {
    pub fn cutoff_ml(&self, kind: StructureKind) -> f64 {
        match kind {
            StructureKind::ResidualTumor => self.residual_tumor_ml,
            StructureKind::Netc => self.netc_ml,
            StructureKind::ResectionCavity => self.resection_cavity_ml,
            StructureKind::TumorCore => self.tumor_core_ml,
            _ => self.other_ml,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in [
            self.residual_tumor_ml,
            self.netc_ml,
            self.resection_cavity_ml,
            self.tumor_core_ml,
            self.other_ml,
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParam(format!(
                    "structure cutoffs must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn default_thresholds() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalParams {
    /// Probability thresholds swept during evaluation, sorted, within (0, 1].
    pub thresholds: Vec<f64>,
    /// Minimum voxel-wise Dice for a positive case to count as TP.
    pub tp_dice_min: f64,
    /// Object-wise minimum component size in voxels.
    pub min_object_voxels: usize,
    /// Relaxed minimum for the fragmented NETC structure.
    pub min_object_voxels_netc: usize,
    pub connectivity: Connectivity,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            thresholds: default_thresholds(),
            tp_dice_min: 0.001,
            min_object_voxels: 75,
            min_object_voxels_netc: 50,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl EvalParams {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidParam("thresholds must be nonempty".into()));
        }
        if self
            .thresholds
            .iter()
            .any(|&t| !(t.is_finite() && 0.0 < t && t <= 1.0))
        {
            return Err(Error::InvalidParam(format!(
                "thresholds must lie in (0, 1], got {:?}",
                self.thresholds
            )));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParam(
                "thresholds must be strictly increasing".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.tp_dice_min) {
            return Err(Error::InvalidParam(format!(
                "tp_dice_min must be in [0, 1], got {}",
                self.tp_dice_min
            )));
        }
        Ok(())
    }

    pub fn min_object_voxels_for(&self, kind: StructureKind) -> usize {
        if kind == StructureKind::Netc {
            self.min_object_voxels_netc
        } else {
            self.min_object_voxels
        }
    }
}

/// Patient-level classification outcome of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatientOutcome {
    TP,
    FP,
    TN,
    FN,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl OutcomeCounts {
    pub fn add(&mut self, outcome: PatientOutcome) {
        match outcome {
            PatientOutcome::TP => self.tp += 1,
            PatientOutcome::FP => self.fp += 1,
            PatientOutcome::TN => self.tn += 1,
            PatientOutcome::FN => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Voxel-wise overlap of a prediction against ground truth. Ratios with a
/// zero denominator are undefined, never 0; Dice of two empty masks is
/// defined as 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelMetrics {
    pub dice: f64,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub hd95_mm: Option<f64>,
}

/// Object-wise metrics after size filtering and one-to-one pairing.
/// `dice`/`hd95_mm` average over matched pairs only; `dice_zero_filled`
/// spreads the matched Dice mass over all objects on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub dice: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub dice_zero_filled: Option<f64>,
    pub n_gt_objects: usize,
    pub n_pred_objects: usize,
    pub n_matched: usize,
}

/// Everything measured for one sample at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub fold_id: u32,
    pub threshold: f64,
    pub gt_positive: bool,
    pub outcome: PatientOutcome,
    pub voxel: VoxelMetrics,
    pub object: ObjectMetrics,
}

/// Dice, recall, precision from voxel counts.
pub fn voxel_overlap(gt: &BinaryMask, pred: &BinaryMask) -> Result<VoxelMetrics> {
    ensure_compatible(gt.geometry(), pred.geometry())?;
    let mut inter = 0usize;
    let mut ng = 0usize;
    let mut np = 0usize;
    for (&g, &p) in gt.data().iter().zip(pred.data()) {
        inter += (g && p) as usize;
        ng += g as usize;
        np += p as usize;
    }
    let dice = if ng + np == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (ng + np) as f64
    };
    Ok(VoxelMetrics {
        dice,
        recall: (ng > 0).then(|| inter as f64 / ng as f64),
        precision: (np > 0).then(|| inter as f64 / np as f64),
        hd95_mm: None,
    })
}

/// Symmetric 95th-percentile Hausdorff distance in millimeters between the
/// boundary voxel centers of the two masks. Undefined (None) when either
/// mask is empty.
pub fn hd95(gt: &BinaryMask, pred: &BinaryMask) -> Result<Option<f64>> {
    ensure_compatible(gt.geometry(), pred.geometry())?;
    let a = boundary_voxels(gt);
    let b = boundary_voxels(pred);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    Ok(Some(distance::hd95_from_boundaries(
        &a,
        &b,
        gt.geometry().spacing,
    )))
}

/// Patient-level outcome: the ground truth is positive when its volume
/// reaches the per-structure cutoff; a positive case is TP only when the
/// voxel-wise Dice reaches `tp_dice_min`; a negative case is FP when the
/// prediction is nonempty.
pub fn patient_outcome(
    gt: &BinaryMask,
    pred: &BinaryMask,
    kind: StructureKind,
    cutoffs: &StructureCutoffs,
    tp_dice_min: f64,
) -> Result<PatientOutcome> {
    ensure_compatible(gt.geometry(), pred.geometry())?;
    let gt_ml = gt.volume_ml();
    // The volume > 0 clause only matters for zero cutoffs, where an empty
    // mask must still count as negative.
    let gt_positive = gt_ml >= cutoffs.cutoff_ml(kind) && gt_ml > 0.0;
    let pred_positive = pred.volume_ml() > 0.0;
    Ok(if gt_positive {
        if voxel_overlap(gt, pred)?.dice >= tp_dice_min {
            PatientOutcome::TP
        } else {
            PatientOutcome::FN
        }
    } else if pred_positive {
        PatientOutcome::FP
    } else {
        PatientOutcome::TN
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientRates {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

/// Standard rates from outcome counts; zero-denominator ratios are
/// undefined, never 0. Balanced accuracy = (recall + specificity) / 2.
pub fn patient_rates(counts: &OutcomeCounts) -> PatientRates {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let specificity = ratio(counts.tn, counts.tn + counts.fp);
    let balanced_accuracy = match (recall, specificity) {
        (Some(r), Some(s)) => Some((r + s) / 2.0),
        _ => None,
    };
    PatientRates {
        recall,
        precision,
        specificity,
        balanced_accuracy,
    }
}

/// Boundary voxels of every component (1-based id -> list), using the
/// 6-adjacent surface definition.
fn component_boundaries(labeling: &ComponentLabeling) -> Vec<Vec<(usize, usize, usize)>> {
    let geometry = labeling.geometry();
    let [nx, ny, nz] = geometry.dims;
    let labels = labeling.labels();
    let mut out: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); labeling.count()];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (x, y, z) = geometry.coords(i);
        let exposed = x == 0
            || y == 0
            || z == 0
            || x == nx - 1
            || y == ny - 1
            || z == nz - 1
            || labels[geometry.index(x - 1, y, z)] != l
            || labels[geometry.index(x + 1, y, z)] != l
            || labels[geometry.index(x, y - 1, z)] != l
            || labels[geometry.index(x, y + 1, z)] != l
            || labels[geometry.index(x, y, z - 1)] != l
            || labels[geometry.index(x, y, z + 1)] != l;
        if exposed {
            out[(l - 1) as usize].push((x, y, z));
        }
    }
    out
}

/// Object-wise evaluation: label both masks, discard components below
/// `min_object_voxels`, pair the survivors one-to-one with the Hungarian
/// algorithm on cost 1 - Dice, and drop zero-overlap pairs. Recall and
/// precision count detections; Dice and HD95 average over matched pairs.
pub fn objectwise_eval(
    gt: &BinaryMask,
    pred: &BinaryMask,
    min_object_voxels: usize,
    connectivity: Connectivity,
) -> Result<ObjectMetrics> {
    ensure_compatible(gt.geometry(), pred.geometry())?;
    let spacing = gt.geometry().spacing;

    let gt_lab = connected_components(gt, connectivity);
    let pred_lab = connected_components(pred, connectivity);
    let keep = |lab: &ComponentLabeling| -> Vec<u32> {
        (1..=lab.count() as u32)
            .filter(|&id| lab.voxel_counts()[(id - 1) as usize] >= min_object_voxels)
            .collect()
    };
    let gt_ids = keep(&gt_lab);
    let pred_ids = keep(&pred_lab);
    let n_gt = gt_ids.len();
    let n_pred = pred_ids.len();

    if n_gt == 0 || n_pred == 0 {
        return Ok(ObjectMetrics {
            dice: None,
            recall: (n_gt > 0).then_some(0.0),
            precision: (n_pred > 0).then_some(0.0),
            hd95_mm: None,
            dice_zero_filled: (n_gt + n_pred > 0).then_some(0.0),
            n_gt_objects: n_gt,
            n_pred_objects: n_pred,
            n_matched: 0,
        });
    }

    // Pairwise overlaps in one sweep over the grid.
    let gt_pos: BTreeMap<u32, usize> = gt_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let pred_pos: BTreeMap<u32, usize> =
        pred_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut overlap = vec![0usize; n_gt * n_pred];
    for (&g, &p) in gt_lab.labels().iter().zip(pred_lab.labels()) {
        if g == 0 || p == 0 {
            continue;
        }
        if let (Some(&gi), Some(&pi)) = (gt_pos.get(&g), pred_pos.get(&p)) {
            overlap[gi * n_pred + pi] += 1;
        }
    }
    let pair_dice = |gi: usize, pi: usize| -> f64 {
        let ov = overlap[gi * n_pred + pi];
        if ov == 0 {
            return 0.0;
        }
        let sg = gt_lab.voxel_counts()[(gt_ids[gi] - 1) as usize];
        let sp = pred_lab.voxel_counts()[(pred_ids[pi] - 1) as usize];
        2.0 * ov as f64 / (sg + sp) as f64
    };

    // Hungarian on cost 1 - dice; rows are the smaller side.
    let transpose = n_gt > n_pred;
    let (rows, cols) = if transpose { (n_pred, n_gt) } else { (n_gt, n_pred) };
    let cost: Vec<Vec<f64>> = (0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| {
                    let (gi, pi) = if transpose { (c, r) } else { (r, c) };
                    1.0 - pair_dice(gi, pi)
                })
                .collect()
        })
        .collect();
    let assignment = hungarian::assign_min_cost(&cost);

    let mut matched: Vec<(usize, usize)> = Vec::new();
    for (r, &c) in assignment.iter().enumerate() {
        let (gi, pi) = if transpose { (c, r) } else { (r, c) };
        if overlap[gi * n_pred + pi] > 0 {
            matched.push((gi, pi));
        }
    }

    let (dice, hd95_mm) = if matched.is_empty() {
        (None, None)
    } else {
        let gt_bounds = component_boundaries(&gt_lab);
        let pred_bounds = component_boundaries(&pred_lab);
        let mut dice_sum = 0.0;
        let mut hd_sum = 0.0;
        for &(gi, pi) in &matched {
            dice_sum += pair_dice(gi, pi);
            hd_sum += distance::hd95_from_boundaries(
                &gt_bounds[(gt_ids[gi] - 1) as usize],
                &pred_bounds[(pred_ids[pi] - 1) as usize],
                spacing,
            );
        }
        let n = matched.len() as f64;
        (Some(dice_sum / n), Some(hd_sum / n))
    };

    let dice_total: f64 = matched.iter().map(|&(gi, pi)| pair_dice(gi, pi)).sum();
    let union_objects = n_gt + n_pred - matched.len();
    Ok(ObjectMetrics {
        dice,
        recall: Some(matched.len() as f64 / n_gt as f64),
        precision: Some(matched.len() as f64 / n_pred as f64),
        hd95_mm,
        dice_zero_filled: Some(dice_total / union_objects as f64),
        n_gt_objects: n_gt,
        n_pred_objects: n_pred,
        n_matched: matched.len(),
    })
}

/// How predictions are derived from the probability map during a sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepConfig<'a> {
    pub kind: StructureKind,
    pub cutoffs: &'a StructureCutoffs,
    pub params: &'a EvalParams,
    /// When set, each threshold goes through the two-step postprocessing
    /// instead of plain binarization.
    pub postproc: Option<&'a PostprocParams>,
    pub brain: Option<&'a BinaryMask>,
}

/// Evaluate all three tiers at every configured threshold.
pub fn sweep_thresholds(
    prob: &ProbabilityMap,
    gt: &BinaryMask,
    cfg: &SweepConfig<'_>,
    sample_id: &str,
    fold_id: u32,
) -> Result<Vec<EvalRecord>> {
    cfg.params.validate()?;
    cfg.cutoffs.validate()?;
    ensure_compatible(prob.geometry(), gt.geometry())?;
    let gt_ml = gt.volume_ml();
    let gt_positive = gt_ml >= cfg.cutoffs.cutoff_ml(cfg.kind) && gt_ml > 0.0;
    let min_obj = cfg.params.min_object_voxels_for(cfg.kind);

    let mut records = Vec::with_capacity(cfg.params.thresholds.len());
    for &t in &cfg.params.thresholds {
        let pred = match cfg.postproc {
            Some(pp) => postprocess(prob, cfg.brain, t, pp)?.1,
            None => binarize(prob, t)?,
        };
        let outcome = patient_outcome(gt, &pred, cfg.kind, cfg.cutoffs, cfg.params.tp_dice_min)?;
        let mut voxel = voxel_overlap(gt, &pred)?;
        voxel.hd95_mm = hd95(gt, &pred)?;
        let object = objectwise_eval(gt, &pred, min_obj, cfg.params.connectivity)?;
        records.push(EvalRecord {
            sample_id: sample_id.to_string(),
            fold_id,
            threshold: t,
            gt_positive,
            outcome,
            voxel,
            object,
        });
    }
    Ok(records)
}

/// Threshold with the best mean voxel-wise Dice over ground-truth-positive
/// samples; exact ties resolve to the lowest threshold.
pub fn select_best_threshold(records: &[EvalRecord]) -> Result<f64> {
    let mut by_threshold: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        if !r.gt_positive {
            continue;
        }
        let entry = by_threshold
            .entry(r.threshold.to_bits())
            .or_insert((r.threshold, 0.0, 0));
        entry.1 += r.voxel.dice;
        entry.2 += 1;
    }
    if by_threshold.is_empty() {
        return Err(Error::Eval(
            "cannot select a threshold: no ground-truth-positive samples".into(),
        ));
    }
    let mut candidates: Vec<(f64, f64)> = by_threshold
        .values()
        .map(|&(t, sum, n)| (t, sum / n as f64))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = candidates[0];
    for &(t, mean) in &candidates[1..] {
        if mean > best.1 {
            best = (t, mean);
        }
    }
    Ok(best.0)
}

/// Mean and population standard deviation of a pooled metric; undefined
/// values are excluded and counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
    pub n_excluded: usize,
}

impl MetricSummary {
    fn from_values(values: impl Iterator<Item = Option<f64>>) -> MetricSummary {
        let mut defined = Vec::new();
        let mut excluded = 0usize;
        for v in values {
            match v {
                Some(x) => defined.push(x),
                None => excluded += 1,
            }
        }
        if defined.is_empty() {
            return MetricSummary {
                mean: None,
                std: None,
                n: 0,
                n_excluded: excluded,
            };
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let var = defined.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        MetricSummary {
            mean: Some(mean),
            std: Some(var.sqrt()),
            n: defined.len(),
            n_excluded: excluded,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierSummary {
    pub dice: MetricSummary,
    pub recall: MetricSummary,
    pub precision: MetricSummary,
    pub hd95_mm: MetricSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectTierSummary {
    pub dice: MetricSummary,
    pub recall: MetricSummary,
    pub precision: MetricSummary,
    pub hd95_mm: MetricSummary,
    pub dice_zero_filled: MetricSummary,
}

/// Pooled estimates: per-sample values concatenated across folds, reported
/// as mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub threshold: f64,
    pub n_samples: usize,
    pub n_gt_positive: usize,
    pub samples_per_fold: BTreeMap<u32, usize>,
    pub patient_counts: OutcomeCounts,
    pub patient_rates: PatientRates,
    pub voxel: TierSummary,
    pub object: ObjectTierSummary,
}

/// Pool per-sample records (all at one threshold) across folds. The
/// patient tier uses every sample; voxel and object tiers are restricted
/// to ground-truth-positive samples, with undefined values excluded and
/// counted.
pub fn pool_folds(records: &[EvalRecord]) -> Result<FoldSummary> {
    if records.is_empty() {
        return Err(Error::Eval("cannot pool an empty set of records".into()));
    }
    let threshold = records[0].threshold;

    let mut samples_per_fold: BTreeMap<u32, usize> = BTreeMap::new();
    let mut patient_counts = OutcomeCounts::default();
    for r in records {
        *samples_per_fold.entry(r.fold_id).or_insert(0) += 1;
        patient_counts.add(r.outcome);
    }

    let positives: Vec<&EvalRecord> = records.iter().filter(|r| r.gt_positive).collect();
    let pick = |f: &dyn Fn(&EvalRecord) -> Option<f64>| {
        MetricSummary::from_values(positives.iter().map(|r| f(r)))
    };

    Ok(FoldSummary {
        threshold,
        n_samples: records.len(),
        n_gt_positive: positives.len(),
        samples_per_fold,
        patient_counts,
        patient_rates: patient_rates(&patient_counts),
        voxel: TierSummary {
            dice: pick(&|r| Some(r.voxel.dice)),
            recall: pick(&|r| r.voxel.recall),
            precision: pick(&|r| r.voxel.precision),
            hd95_mm: pick(&|r| r.voxel.hd95_mm),
        },
        object: ObjectTierSummary {
            dice: pick(&|r| r.object.dice),
            recall: pick(&|r| r.object.recall),
            precision: pick(&|r| r.object.precision),
            hd95_mm: pick(&|r| r.object.hd95_mm),
            dice_zero_filled: pick(&|r| r.object.dice_zero_filled),
        },
    })
}
