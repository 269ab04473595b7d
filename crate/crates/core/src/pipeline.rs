//! Orchestration: patient-folder ingestion and the batch runners behind
//! the CLI subcommands (report, eval-seg, eval-cls, phantom, preprocess,
//! fuse, postprocess).
//!
//! Cohort layout:
//! `root/<patient>/<preop|postop>/<file>` where a file is one of
//! `t1c|t1w|t2f|t2w.<ext>` (MR sequence), `<kind>_prob.<ext>` (probability
//! map), `<kind>_mask.<ext>` (binary mask), with `<ext>` one of
//! `nii[.gz]` / `rawj[.gz]`. Evaluation cohorts are flat:
//! `root/<sample>/<kind>_{prob,gt}.<ext>`. An optional `manifest.json`
//! carries `{"fold": n}` (patient level) and/or `{"sequences": {tag:
//! file}}` (timepoint level, overriding filename tags).

use crate::config::{LabelSource, PipelineConfig};
use crate::error::{Error, Result};
use crate::evalcls::{confusion_matrix, multiclass_metrics, ConfusionMatrix, MulticlassMetrics};
use crate::evalseg::{
    pool_folds, select_best_threshold, sweep_thresholds, EvalRecord, FoldSummary, SweepConfig,
};
use crate::imgio;
use crate::infer::{fuse_probability_maps, postprocess, FusionMode};
use crate::jsonfmt::{format_cell, to_stable_json};
use crate::phantom::{
    generate_postop, generate_preop, seeded_uniform, synthetic_probability_map, PhantomSpec,
    CHANNEL_TAGS,
};
use crate::prep::preprocess_chain;
use crate::refine::{refine, StructureSet, Timepoint};
use crate::report::{build_surgical_report, timepoint_features, SurgicalReport, TimepointFeatures};
use crate::volgrid::{BinaryMask, ProbabilityMap, ScalarVolume, StructureKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const SEQUENCE_TAGS: [&str; 4] = ["t1c", "t1w", "t2f", "t2w"];

const VOLUME_EXTENSIONS: [&str; 4] = [".nii.gz", ".nii", ".rawj.gz", ".rawj"];

/// Inputs found for one timepoint of one patient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimepointInputs {
    pub sequences: BTreeMap<String, PathBuf>,
    pub prob_maps: BTreeMap<StructureKind, PathBuf>,
    pub masks: BTreeMap<StructureKind, PathBuf>,
}

impl TimepointInputs {
    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty() && self.prob_maps.is_empty() && self.masks.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientStudy {
    pub patient_id: String,
    pub fold_id: u32,
    pub timepoints: BTreeMap<Timepoint, TimepointInputs>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    #[serde(default)]
    fold: Option<u32>,
    #[serde(default)]
    sequences: BTreeMap<String, String>,
}

fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    Ok(Some(manifest))
}

/// Strip a recognized volume extension; None for non-volume files.
fn volume_stem(name: &str) -> Option<String> {
    let lower = name.to_ascii_lowercase();
    VOLUME_EXTENSIONS
        .iter()
        .find(|ext| lower.ends_with(*ext))
        .map(|ext| lower[..lower.len() - ext.len()].to_string())
}

#[derive(Debug, PartialEq)]
enum FileRole {
    Sequence(String),
    Prob(StructureKind),
    Mask(StructureKind),
    GroundTruth(StructureKind),
}

fn classify_stem(stem: &str) -> Option<FileRole> {
    if SEQUENCE_TAGS.contains(&stem) {
        return Some(FileRole::Sequence(stem.to_string()));
    }
    for (suffix, build) in [
        ("_prob", FileRole::Prob as fn(StructureKind) -> FileRole),
        ("_mask", FileRole::Mask as fn(StructureKind) -> FileRole),
        ("_gt", FileRole::GroundTruth as fn(StructureKind) -> FileRole),
    ] {
        if let Some(prefix) = stem.strip_suffix(suffix) {
            if let Ok(kind) = prefix.parse::<StructureKind>() {
                return Some(build(kind));
            }
        }
    }
    None
}

fn sorted_subdirs(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(root).map_err(|e| {
        Error::Ingest(format!("cannot read cohort root {}: {e}", root.display()))
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn scan_timepoint(
    dir: &Path,
    label_source: LabelSource,
    seq_overrides: &BTreeMap<String, String>,
) -> Result<TimepointInputs> {
    let mut inputs = TimepointInputs::default();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();

    let manifest = read_manifest(dir)?;
    let use_filenames = label_source != LabelSource::Sidecar;

    for path in &entries {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some(stem) = volume_stem(name) else {
            continue;
        };
        match classify_stem(&stem) {
            Some(FileRole::Sequence(tag)) if use_filenames => {
                if inputs.sequences.insert(tag.clone(), path.clone()).is_some() {
                    return Err(Error::Ingest(format!(
                        "duplicate sequence tag '{tag}' in {}",
                        dir.display()
                    )));
                }
            }
            Some(FileRole::Sequence(_)) => {}
            Some(FileRole::Prob(kind)) => {
                if inputs.prob_maps.insert(kind, path.clone()).is_some() {
                    return Err(Error::Ingest(format!(
                        "duplicate probability map for '{kind}' in {}",
                        dir.display()
                    )));
                }
            }
            Some(FileRole::Mask(kind)) | Some(FileRole::GroundTruth(kind)) => {
                if inputs.masks.insert(kind, path.clone()).is_some() {
                    return Err(Error::Ingest(format!(
                        "duplicate mask for '{kind}' in {}",
                        dir.display()
                    )));
                }
            }
            None => {}
        }
    }

    // Sidecar tags override filename-derived ones (and are the only source
    // in sidecar mode).
    let manifest_sequences = manifest.map(|m| m.sequences).unwrap_or_default();
    for (tag, file) in manifest_sequences.iter().chain(seq_overrides) {
        if !SEQUENCE_TAGS.contains(&tag.as_str()) {
            return Err(Error::Ingest(format!(
                "unknown sequence tag '{tag}' in manifest of {}",
                dir.display()
            )));
        }
        let target = dir.join(file);
        if !target.is_file() {
            return Err(Error::Ingest(format!(
                "manifest of {} names a missing file '{file}'",
                dir.display()
            )));
        }
        inputs.sequences.retain(|_, p| p != &target);
        inputs.sequences.insert(tag.clone(), target);
    }

    Ok(inputs)
}

/// Walk a cohort root and assemble patient studies. Malformed patients are
/// skipped; the reason lands in the returned diagnostics, never a crash.
pub fn ingest(root: &Path, config: &PipelineConfig) -> Result<(Vec<PatientStudy>, Vec<String>)> {
    let dirs = sorted_subdirs(root)?;
    if dirs.is_empty() {
        return Err(Error::Ingest(format!(
            "cohort root {} contains no patient directories",
            root.display()
        )));
    }
    let mut studies = Vec::new();
    let mut diagnostics = Vec::new();

    for dir in dirs {
        let patient_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let ingest_one = || -> Result<PatientStudy> {
            let fold_id = read_manifest(&dir)?.and_then(|m| m.fold).unwrap_or(1);
            let mut timepoints = BTreeMap::new();
            for tp in [Timepoint::Preop, Timepoint::Postop] {
                let tp_dir = dir.join(tp.as_str());
                if !tp_dir.is_dir() {
                    continue;
                }
                let inputs = scan_timepoint(
                    &tp_dir,
                    config.sequence_label_source,
                    &BTreeMap::new(),
                )?;
                if !inputs.is_empty() {
                    timepoints.insert(tp, inputs);
                }
            }
            if timepoints.is_empty() {
                return Err(Error::Ingest(format!(
                    "{}: no preop/ or postop/ directory with recognizable volumes",
                    dir.display()
                )));
            }
            Ok(PatientStudy {
                patient_id: patient_id.clone(),
                fold_id,
                timepoints,
            })
        };
        match ingest_one() {
            Ok(study) => studies.push(study),
            Err(e) => diagnostics.push(format!("skipping patient '{patient_id}': {e}")),
        }
    }
    Ok((studies, diagnostics))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    imgio::write_bytes(path, text.as_bytes(), false)
}

fn load_structure_set(
    study: &PatientStudy,
    timepoint: Timepoint,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<(StructureSet, Vec<String>)> {
    let inputs = &study.timepoints[&timepoint];
    let mut set = StructureSet::new(timepoint, config.enhancement);
    let mut notes = Vec::new();

    for (&kind, path) in &inputs.masks {
        set.insert(kind, imgio::read_mask(path)?)?;
    }
    let brain = set.get(StructureKind::Brain).cloned();
    for (&kind, path) in &inputs.prob_maps {
        if set.contains(kind) {
            notes.push(format!(
                "{kind}: probability map ignored in favor of the provided mask"
            ));
            continue;
        }
        let prob = imgio::read_probability(path)?;
        let (clean_map, clean_mask) =
            postprocess(&prob, brain.as_ref(), config.threshold, &config.postproc)?;
        let base = out_dir.join(timepoint.as_str());
        imgio::write_probability(&clean_map, base.join(format!("{kind}_prob_clean.nii.gz")))?;
        imgio::write_mask(&clean_mask, base.join(format!("{kind}_mask_clean.nii.gz")))?;
        set.insert(kind, clean_mask)?;
        set.add_note(
            kind,
            format!(
                "derived from probability map at threshold {}",
                config.threshold
            ),
        );
    }
    Ok((set, notes))
}

fn run_prep_for_timepoint(
    inputs: &TimepointInputs,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<Vec<String>> {
    if inputs.sequences.is_empty() {
        return Ok(Vec::new());
    }
    let mut notes = Vec::new();
    let mut tags: Vec<&str> = Vec::new();
    let mut channels: Vec<ScalarVolume> = Vec::new();
    for tag in SEQUENCE_TAGS {
        if let Some(path) = inputs.sequences.get(tag) {
            tags.push(tag);
            channels.push(imgio::read_volume(path)?);
        }
    }
    let mut pairs = Vec::new();
    for (a, b) in &config.subtraction_pairs {
        match (
            tags.iter().position(|t| t == a),
            tags.iter().position(|t| t == b),
        ) {
            (Some(ia), Some(ib)) => pairs.push((ia, ib)),
            _ => notes.push(format!(
                "subtraction pair ({a}, {b}) skipped: sequence not available"
            )),
        }
    }
    let (processed, _box) = preprocess_chain(&channels, &pairs, &config.prep)?;
    for (i, vol) in processed.iter().enumerate() {
        let name = if i < tags.len() {
            format!("{}_preprocessed.nii.gz", tags[i])
        } else {
            let (a, b) = pairs[i - tags.len()];
            format!("{}_minus_{}_preprocessed.nii.gz", tags[a], tags[b])
        };
        imgio::write_volume(vol, out_dir.join(name))?;
    }
    Ok(notes)
}

#[derive(Debug, Serialize)]
struct TimepointDoc<'a> {
    patient_id: &'a str,
    #[serde(flatten)]
    features: &'a TimepointFeatures,
    config_echo: serde_json::Value,
    version: &'a str,
}

/// Execute the report pipeline for one study: preprocessing (when raw
/// scans are present), postprocessing of probability maps at the
/// configured threshold, refinement, per-timepoint features, and the
/// surgical report when both timepoints exist. Returns the written report
/// (if any) and the per-timepoint features.
pub fn run_report(
    study: &PatientStudy,
    config: &PipelineConfig,
    out_root: &Path,
) -> Result<(Option<SurgicalReport>, Vec<TimepointFeatures>)> {
    config.validate()?;
    let out_dir = out_root.join(&study.patient_id);
    let mut features: BTreeMap<Timepoint, TimepointFeatures> = BTreeMap::new();

    for (&tp, inputs) in &study.timepoints {
        let tp_out = out_dir.join(tp.as_str());
        let prep_notes = run_prep_for_timepoint(inputs, config, &tp_out)?;
        let (set, load_notes) = load_structure_set(study, tp, config, &out_dir)?;
        let (refined, refine_notes) = match refine(&set) {
            Ok(r) => (r, Vec::new()),
            Err(e) => (
                set,
                vec![format!("refinement skipped: {e}")],
            ),
        };
        let mut tp_features = timepoint_features(&refined, None, &config.features);
        tp_features
            .notes
            .extend(prep_notes.into_iter().chain(load_notes).chain(refine_notes));
        let doc = TimepointDoc {
            patient_id: &study.patient_id,
            features: &tp_features,
            config_echo: config.echo(),
            version: crate::VERSION,
        };
        write_text(
            &out_dir.join(format!("{}_features.json", tp.as_str())),
            &to_stable_json(&doc)?,
        )?;
        features.insert(tp, tp_features);
    }

    let report = match (features.get(&Timepoint::Preop), features.get(&Timepoint::Postop)) {
        (Some(pre), Some(post)) => {
            let mut report = build_surgical_report(
                &study.patient_id,
                pre,
                post,
                &config.resection,
            )?;
            report.config_echo = config.echo();
            write_text(
                &out_dir.join("surgical_report.json"),
                &to_stable_json(&report)?,
            )?;
            Some(report)
        }
        _ => None,
    };
    Ok((report, features.into_values().collect()))
}

/// Run `report` over every ingested study.
pub fn run_report_batch(
    root: &Path,
    config: &PipelineConfig,
    out_root: &Path,
    jobs: usize,
) -> Result<(usize, Vec<String>)> {
    let (studies, mut diagnostics) = ingest(root, config)?;
    let results: Vec<(String, Result<()>)> = in_pool(jobs, || {
        studies
            .par_iter()
            .map(|s| (s.patient_id.clone(), run_report(s, config, out_root).map(|_| ())))
            .collect()
    });
    let mut done = 0usize;
    for (id, result) in results {
        match result {
            Ok(()) => done += 1,
            Err(e) => diagnostics.push(format!("report failed for '{id}': {e}")),
        }
    }
    if done == 0 {
        return Err(Error::Eval(format!(
            "no usable studies under {} ({} diagnostics)",
            root.display(),
            diagnostics.len()
        )));
    }
    Ok((done, diagnostics))
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool construction");
    pool.install(f)
}

/// One evaluation sample: a ground-truth mask and a probability map for
/// the structure under evaluation.
#[derive(Debug, Clone)]
struct EvalSample {
    sample_id: String,
    fold_id: u32,
    gt: PathBuf,
    prob: PathBuf,
    brain: Option<PathBuf>,
}

fn scan_eval_samples(
    root: &Path,
    kind: StructureKind,
) -> Result<(Vec<EvalSample>, Vec<String>)> {
    let dirs = sorted_subdirs(root)?;
    if dirs.is_empty() {
        return Err(Error::Ingest(format!(
            "evaluation root {} contains no sample directories",
            root.display()
        )));
    }
    let mut samples = Vec::new();
    let mut diagnostics = Vec::new();
    for dir in dirs {
        let sample_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let mut gt = None;
        let mut prob = None;
        let mut brain = None;
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .collect();
        entries.sort();
        for path in entries {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let Some(stem) = volume_stem(name) else { continue };
            match classify_stem(&stem) {
                Some(FileRole::GroundTruth(k)) | Some(FileRole::Mask(k)) => {
                    if k == kind {
                        gt = Some(path);
                    } else if k == StructureKind::Brain {
                        brain = Some(path);
                    }
                }
                Some(FileRole::Prob(k)) if k == kind => prob = Some(path),
                _ => {}
            }
        }
        match (gt, prob) {
            (Some(gt), Some(prob)) => {
                let fold_id = read_manifest(&dir)?.and_then(|m| m.fold).unwrap_or(1);
                samples.push(EvalSample {
                    sample_id,
                    fold_id,
                    gt,
                    prob,
                    brain,
                });
            }
            (None, _) => diagnostics.push(format!(
                "sample '{sample_id}' skipped: no {kind} ground-truth mask"
            )),
            (_, None) => diagnostics.push(format!(
                "sample '{sample_id}' skipped: no {kind} probability map"
            )),
        }
    }
    Ok((samples, diagnostics))
}

#[derive(Debug, Serialize)]
pub struct EvalSegOutput {
    pub structure: StructureKind,
    pub n_samples: usize,
    pub summary: FoldSummary,
    pub diagnostics: Vec<String>,
    pub config_echo: serde_json::Value,
    pub version: String,
}

fn records_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(
        "sample_id,fold,threshold,gt_positive,outcome,voxel_dice,voxel_recall,voxel_precision,\
         voxel_hd95_mm,object_dice,object_recall,object_precision,object_hd95_mm,\
         object_dice_zero_filled,n_gt_objects,n_pred_objects,n_matched\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:?},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.sample_id,
            r.fold_id,
            format_cell(Some(r.threshold)),
            r.gt_positive,
            r.outcome,
            format_cell(Some(r.voxel.dice)),
            format_cell(r.voxel.recall),
            format_cell(r.voxel.precision),
            format_cell(r.voxel.hd95_mm),
            format_cell(r.object.dice),
            format_cell(r.object.recall),
            format_cell(r.object.precision),
            format_cell(r.object.hd95_mm),
            format_cell(r.object.dice_zero_filled),
            r.object.n_gt_objects,
            r.object.n_pred_objects,
            r.object.n_matched,
        ));
    }
    out
}

/// Batch segmentation evaluation: sweep every sample over the configured
/// thresholds, select the best threshold by mean voxel Dice over positive
/// samples, and pool the records at that threshold across folds. Writes
/// `records.csv` (all thresholds) and `summary.json`; outputs are ordered
/// by sample id and byte-stable across runs and job counts.
pub fn run_eval_seg(
    root: &Path,
    kind: StructureKind,
    config: &PipelineConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<EvalSegOutput> {
    config.validate()?;
    let (samples, mut diagnostics) = scan_eval_samples(root, kind)?;
    if samples.is_empty() {
        return Err(Error::Eval(format!(
            "no usable samples under {} ({} diagnostics)",
            root.display(),
            diagnostics.len()
        )));
    }

    let results: Vec<(String, Result<Vec<EvalRecord>>)> = in_pool(jobs, || {
        samples
            .par_iter()
            .map(|sample| {
                let run = || -> Result<Vec<EvalRecord>> {
                    let gt = imgio::read_mask(&sample.gt)?;
                    let prob = imgio::read_probability(&sample.prob)?;
                    let brain = sample
                        .brain
                        .as_ref()
                        .map(imgio::read_mask)
                        .transpose()?;
                    let cfg = SweepConfig {
                        kind,
                        cutoffs: &config.cutoffs,
                        params: &config.eval,
                        postproc: config.eval_apply_postprocessing.then_some(&config.postproc),
                        brain: brain.as_ref(),
                    };
                    sweep_thresholds(&prob, &gt, &cfg, &sample.sample_id, sample.fold_id)
                };
                (sample.sample_id.clone(), run())
            })
            .collect()
    });

    let mut records: Vec<EvalRecord> = Vec::new();
    for (id, result) in results {
        match result {
            Ok(mut r) => records.append(&mut r),
            Err(e) => diagnostics.push(format!("sample '{id}' skipped: {e}")),
        }
    }
    if records.is_empty() {
        return Err(Error::Eval("every sample failed evaluation".into()));
    }
    records.sort_by(|a, b| {
        a.sample_id
            .cmp(&b.sample_id)
            .then(a.threshold.total_cmp(&b.threshold))
    });

    let best = select_best_threshold(&records)?;
    let at_best: Vec<EvalRecord> = records
        .iter()
        .filter(|r| r.threshold == best)
        .cloned()
        .collect();
    let summary = pool_folds(&at_best)?;

    let output = EvalSegOutput {
        structure: kind,
        n_samples: at_best.len(),
        summary,
        diagnostics,
        config_echo: config.echo(),
        version: crate::VERSION.to_string(),
    };
    write_text(&out_dir.join("records.csv"), &records_csv(&records))?;
    write_text(&out_dir.join("summary.json"), &to_stable_json(&output)?)?;
    Ok(output)
}

#[derive(Debug, Serialize)]
pub struct EvalClsOutput {
    pub metrics: MulticlassMetrics,
    pub confusion: ConfusionMatrix,
    pub n_samples: usize,
    pub config_echo: serde_json::Value,
    pub version: String,
}

/// Parse the labels CSV (`sample_id,gt_label,pred_label`, header required)
/// and compute the confusion matrix and multiclass-averaged metrics.
/// Writes `metrics.json` and `confusion.csv`.
pub fn run_eval_cls(
    csv_path: &Path,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<EvalClsOutput> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .map(|(_, l)| l.trim())
        .ok_or_else(|| Error::Eval("labels CSV is empty".into()))?;
    if header != "sample_id,gt_label,pred_label" {
        return Err(Error::Eval(format!(
            "labels CSV must start with 'sample_id,gt_label,pred_label', got '{header}'"
        )));
    }

    let mut gt_names = Vec::new();
    let mut pred_names = Vec::new();
    for (line_no, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Eval(format!(
                "row {}: expected 3 comma-separated fields, got {}",
                line_no + 1,
                fields.len()
            )));
        }
        gt_names.push((line_no + 1, fields[1].trim().to_string()));
        pred_names.push((line_no + 1, fields[2].trim().to_string()));
    }
    if gt_names.is_empty() {
        return Err(Error::Eval("labels CSV contains no samples".into()));
    }

    let classes: Vec<String> = match &config.eval_cls.classes {
        Some(classes) => classes.clone(),
        None => {
            let mut c: Vec<String> = gt_names.iter().map(|(_, n)| n.clone()).collect();
            c.sort();
            c.dedup();
            c
        }
    };
    let index_of = |row: usize, name: &str| -> Result<usize> {
        classes.iter().position(|c| c == name).ok_or_else(|| {
            Error::Eval(format!("row {row}: unknown class name '{name}'"))
        })
    };
    let gt: Vec<usize> = gt_names
        .iter()
        .map(|(row, n)| index_of(*row, n))
        .collect::<Result<_>>()?;
    let pred: Vec<usize> = pred_names
        .iter()
        .map(|(row, n)| index_of(*row, n))
        .collect::<Result<_>>()?;

    let cm = confusion_matrix(&gt, &pred, &classes)?;
    let metrics = multiclass_metrics(&cm, config.eval_cls.averaging)
        .map_err(|e| Error::Eval(e.to_string()))?;

    let mut matrix_csv = format!("gt\\pred,{}\n", classes.join(","));
    for (i, row) in cm.counts.iter().enumerate() {
        matrix_csv.push_str(&format!(
            "{},{}\n",
            classes[i],
            row.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
    }

    let output = EvalClsOutput {
        metrics,
        confusion: cm,
        n_samples: gt.len(),
        config_echo: config.echo(),
        version: crate::VERSION.to_string(),
    };
    write_text(&out_dir.join("confusion.csv"), &matrix_csv)?;
    write_text(&out_dir.join("metrics.json"), &to_stable_json(&output)?)?;
    Ok(output)
}

/// Options for synthetic cohort generation.
#[derive(Debug, Clone)]
pub struct PhantomOptions {
    pub spec: PhantomSpec,
    pub count: usize,
    /// Volume file extension: "nii.gz", "nii", "rawj", or "rawj.gz".
    pub format: String,
    /// Write the four MR channels (study mode).
    pub with_channels: bool,
    /// Randomize tumor size and residual fraction per patient.
    pub vary: bool,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        PhantomOptions {
            spec: PhantomSpec::default(),
            count: 1,
            format: "nii.gz".into(),
            with_channels: true,
            vary: false,
        }
    }
}

fn patient_spec(opts: &PhantomOptions, index: usize) -> PhantomSpec {
    let mut spec = opts.spec.clone();
    spec.seed = opts.spec.seed.wrapping_add(index as u64);
    if opts.vary && index > 0 {
        let u1 = seeded_uniform(spec.seed, 1_000_001);
        let u2 = seeded_uniform(spec.seed, 1_000_002);
        let scale = 0.8 + 0.4 * u1;
        spec.tumor_radius_mm = opts.spec.tumor_radius_mm * scale;
        spec.cavity_radius_mm =
            (opts.spec.cavity_radius_mm * scale).min(spec.tumor_radius_mm * 0.95);
        spec.rim_thickness_mm = (opts.spec.rim_thickness_mm * scale).max(0.5);
        spec.residual_fraction = 0.05 + 0.4 * u2;
    }
    spec
}

/// Generate pre+post phantom studies in the report cohort layout:
/// channels, truth masks, analytic volumes, and a fold manifest.
pub fn generate_phantom_studies(out_root: &Path, opts: &PhantomOptions) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for i in 0..opts.count {
        let spec = patient_spec(opts, i);
        let patient_id = format!("p{i:03}");
        let dir = out_root.join(&patient_id);
        for (tp, phantom) in [
            (Timepoint::Preop, generate_preop(&spec)?),
            (Timepoint::Postop, generate_postop(&spec)?),
        ] {
            let tp_dir = dir.join(tp.as_str());
            if opts.with_channels {
                for (tag, vol) in CHANNEL_TAGS.iter().zip(&phantom.channels) {
                    imgio::write_volume(vol, tp_dir.join(format!("{tag}.{}", opts.format)))?;
                }
            }
            for (kind, mask) in phantom.truth.masks() {
                imgio::write_mask(mask, tp_dir.join(format!("{kind}_mask.{}", opts.format)))?;
            }
            write_text(
                &tp_dir.join("analytic_volumes.json"),
                &to_stable_json(&phantom.analytic_ml)?,
            )?;
        }
        write_text(
            &dir.join("manifest.json"),
            &format!("{{\"fold\": {}}}\n", i % 5 + 1),
        )?;
        write_text(&dir.join("phantom_spec.json"), &to_stable_json(&spec)?)?;
        ids.push(patient_id);
    }
    Ok(ids)
}

/// Generate a flat evaluation cohort for one structure: per sample a
/// ground-truth mask, a perturbed synthetic probability map, and a fold
/// manifest.
pub fn generate_eval_cohort(
    out_root: &Path,
    kind: StructureKind,
    opts: &PhantomOptions,
) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for i in 0..opts.count {
        let spec = patient_spec(opts, i);
        let phantom = match kind {
            StructureKind::TumorCore | StructureKind::Netc => generate_preop(&spec)?,
            _ => generate_postop(&spec)?,
        };
        let gt = phantom.truth.get(kind).ok_or_else(|| {
            Error::InvalidParam(format!("phantom does not produce a {kind} mask"))
        })?;
        let prob = synthetic_probability_map(gt, spec.seed.wrapping_add(0x5eed));
        let sample_id = format!("p{i:03}");
        let dir = out_root.join(&sample_id);
        imgio::write_mask(gt, dir.join(format!("{kind}_gt.{}", opts.format)))?;
        imgio::write_probability(&prob, dir.join(format!("{kind}_prob.{}", opts.format)))?;
        write_text(
            &dir.join("manifest.json"),
            &format!("{{\"fold\": {}}}\n", i % 5 + 1),
        )?;
        ids.push(sample_id);
    }
    Ok(ids)
}

/// Fuse probability maps from files and write the result.
pub fn run_fuse(inputs: &[PathBuf], mode: FusionMode, out_file: &Path) -> Result<()> {
    let maps: Vec<ProbabilityMap> = inputs
        .iter()
        .map(imgio::read_probability)
        .collect::<Result<_>>()?;
    let fused = fuse_probability_maps(&maps, mode)?;
    imgio::write_probability(&fused, out_file)
}

/// Postprocess a probability-map file and write the cleaned map and mask.
pub fn run_postprocess(
    prob_path: &Path,
    brain_path: Option<&Path>,
    threshold: f64,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<(f64, usize)> {
    let prob = imgio::read_probability(prob_path)?;
    let brain: Option<BinaryMask> = brain_path.map(imgio::read_mask).transpose()?;
    let (map, mask) = postprocess(&prob, brain.as_ref(), threshold, &config.postproc)?;
    imgio::write_probability(&map, out_dir.join("prob_clean.nii.gz"))?;
    imgio::write_mask(&mask, out_dir.join("mask_clean.nii.gz"))?;
    Ok((mask.volume_ml(), mask.count()))
}

/// Preprocess every timepoint of every study (raw MR channels only).
pub fn run_preprocess_batch(
    root: &Path,
    config: &PipelineConfig,
    out_root: &Path,
    jobs: usize,
) -> Result<(usize, Vec<String>)> {
    config.validate()?;
    let (studies, mut diagnostics) = ingest(root, config)?;
    let results: Vec<(String, Result<usize>)> = in_pool(jobs, || {
        studies
            .par_iter()
            .map(|study| {
                let run = || -> Result<usize> {
                    let mut n = 0usize;
                    for (&tp, inputs) in &study.timepoints {
                        if inputs.sequences.is_empty() {
                            continue;
                        }
                        let out_dir =
                            out_root.join(&study.patient_id).join(tp.as_str());
                        run_prep_for_timepoint(inputs, config, &out_dir)?;
                        n += 1;
                    }
                    Ok(n)
                };
                (study.patient_id.clone(), run())
            })
            .collect()
    });
    let mut done = 0usize;
    for (id, result) in results {
        match result {
            Ok(n) if n > 0 => done += 1,
            Ok(_) => diagnostics.push(format!("'{id}': no raw MR sequences to preprocess")),
            Err(e) => diagnostics.push(format!("preprocess failed for '{id}': {e}")),
        }
    }
    Ok((done, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::ResectionClass;

    fn write_file(path: &Path, bytes: &[u8]) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, bytes).unwrap();
    }

    fn mini_volume(path: &Path) {
        let g = crate::volgrid::GridGeometry::with_dims_spacing(
            [4, 4, 4],
            crate::volgrid::Spacing::isotropic(1.0).unwrap(),
        )
        .unwrap();
        let vol = ScalarVolume::filled(g, 1.0).unwrap();
        imgio::write_volume(&vol, path).unwrap();
    }

    #[test]
    fn ingest_minimal_layout() {
        let dir = tempfile::tempdir().unwrap();
        mini_volume(&dir.path().join("pat1/preop/t1c.nii.gz"));
        let (studies, diags) = ingest(dir.path(), &PipelineConfig::default()).unwrap();
        assert_eq!(studies.len(), 1);
        assert!(diags.is_empty());
        let tp = &studies[0].timepoints[&Timepoint::Preop];
        assert_eq!(tp.sequences.len(), 1);
        assert!(tp.sequences.contains_key("t1c"));
        assert_eq!(studies[0].fold_id, 1);
    }

    #[test]
    fn ingest_rejects_empty_root() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest(dir.path(), &PipelineConfig::default()),
            Err(Error::Ingest(_))
        ));
    }

    #[test]
    fn duplicate_tag_skips_patient_with_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        mini_volume(&dir.path().join("pat1/preop/t1c.nii"));
        mini_volume(&dir.path().join("pat1/preop/t1c.nii.gz"));
        mini_volume(&dir.path().join("pat2/preop/t1c.nii.gz"));
        let (studies, diags) = ingest(dir.path(), &PipelineConfig::default()).unwrap();
        assert_eq!(studies.len(), 1);
        assert_eq!(studies[0].patient_id, "pat2");
        assert_eq!(diags.len(), 1);
        assert!(diags[0].contains("pat1") && diags[0].contains("duplicate"), "{diags:?}");
    }

    #[test]
    fn manifest_overrides_filename_tag() {
        let dir = tempfile::tempdir().unwrap();
        mini_volume(&dir.path().join("pat1/preop/t1w.nii.gz"));
        write_file(
            &dir.path().join("pat1/preop/manifest.json"),
            br#"{"sequences": {"t1c": "t1w.nii.gz"}}"#,
        );
        let (studies, _) = ingest(dir.path(), &PipelineConfig::default()).unwrap();
        let tp = &studies[0].timepoints[&Timepoint::Preop];
        assert_eq!(tp.sequences.len(), 1);
        assert!(tp.sequences.contains_key("t1c"));
        assert!(!tp.sequences.contains_key("t1w"));
    }

    #[test]
    fn manifest_fold_is_read() {
        let dir = tempfile::tempdir().unwrap();
        mini_volume(&dir.path().join("pat1/postop/t2w.rawj"));
        write_file(&dir.path().join("pat1/manifest.json"), br#"{"fold": 4}"#);
        let (studies, _) = ingest(dir.path(), &PipelineConfig::default()).unwrap();
        assert_eq!(studies[0].fold_id, 4);
    }

    #[test]
    fn phantom_study_report_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = dir.path().join("cohort");
        let out = dir.path().join("out");
        let opts = PhantomOptions {
            spec: PhantomSpec {
                noise_amplitude: 0.0,
                ..PhantomSpec::default()
            },
            with_channels: false,
            ..PhantomOptions::default()
        };
        generate_phantom_studies(&cohort, &opts).unwrap();

        let config = PipelineConfig::default();
        let (studies, diags) = ingest(&cohort, &config).unwrap();
        assert!(diags.is_empty(), "{diags:?}");
        assert_eq!(studies.len(), 1);

        let (report, features) = run_report(&studies[0], &config, &out).unwrap();
        let report = report.expect("both timepoints present");
        assert_eq!(features.len(), 2);
        // residual 0.5 ml with defaults 0.175 / 1.0 -> near total
        assert_eq!(report.surgical.resection_class, ResectionClass::NearTotal);
        let residual = report.surgical.residual_ml;
        assert!((residual - 0.5).abs() / 0.5 < 0.05, "residual {residual}");
        assert!(out.join("p000/surgical_report.json").exists());
        assert!(out.join("p000/preop_features.json").exists());
    }

    #[test]
    fn missing_residual_mask_reports_not_applicable() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = dir.path().join("cohort");
        let out = dir.path().join("out");
        let opts = PhantomOptions {
            spec: PhantomSpec {
                noise_amplitude: 0.0,
                ..PhantomSpec::default()
            },
            with_channels: false,
            ..PhantomOptions::default()
        };
        generate_phantom_studies(&cohort, &opts).unwrap();
        // remove the postop residual mask
        std::fs::remove_file(cohort.join("p000/postop/residual_tumor_mask.nii.gz")).unwrap();

        let config = PipelineConfig::default();
        let (studies, _) = ingest(&cohort, &config).unwrap();
        let (report, _) = run_report(&studies[0], &config, &out).unwrap();
        let report = report.unwrap();
        assert_eq!(
            report.surgical.resection_class,
            ResectionClass::NotApplicable
        );
        assert!(!report.surgical.notes.is_empty());
    }

    #[test]
    fn eval_seg_end_to_end_small_cohort() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = dir.path().join("cohort");
        let out = dir.path().join("out");
        let opts = PhantomOptions {
            spec: PhantomSpec {
                dims: [48, 48, 48],
                noise_amplitude: 0.0,
                ..PhantomSpec::default()
            },
            count: 5,
            vary: true,
            with_channels: false,
            ..PhantomOptions::default()
        };
        generate_eval_cohort(&cohort, StructureKind::ResidualTumor, &opts).unwrap();

        let config = PipelineConfig::default();
        let output = run_eval_seg(
            &cohort,
            StructureKind::ResidualTumor,
            &config,
            &out,
            1,
        )
        .unwrap();
        assert_eq!(output.n_samples, 5);
        assert_eq!(output.summary.n_samples, 5);
        let csv = std::fs::read_to_string(out.join("records.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 5 * 10); // header + samples x thresholds
        assert!(out.join("summary.json").exists());

        // fold ids 1..5 -> per-fold counts sum to cohort size
        let total: usize = output.summary.samples_per_fold.values().sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn eval_seg_outputs_are_byte_identical_across_jobs() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = dir.path().join("cohort");
        let opts = PhantomOptions {
            spec: PhantomSpec {
                dims: [40, 40, 40],
                noise_amplitude: 0.0,
                ..PhantomSpec::default()
            },
            count: 3,
            vary: true,
            with_channels: false,
            ..PhantomOptions::default()
        };
        generate_eval_cohort(&cohort, StructureKind::ResectionCavity, &opts).unwrap();
        let config = PipelineConfig::default();

        let out1 = dir.path().join("out1");
        let out2 = dir.path().join("out2");
        run_eval_seg(&cohort, StructureKind::ResectionCavity, &config, &out1, 1).unwrap();
        run_eval_seg(&cohort, StructureKind::ResectionCavity, &config, &out2, 4).unwrap();
        for name in ["records.csv", "summary.json"] {
            let a = std::fs::read(out1.join(name)).unwrap();
            let b = std::fs::read(out2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between job counts");
        }
    }

    #[test]
    fn eval_cls_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("labels.csv");
        write_file(
            &csv,
            b"sample_id,gt_label,pred_label\ns1,t1c,t1c\ns2,t1w,t1w\ns3,t2f,t2w\ns4,t2w,t2w\n",
        );
        let out = dir.path().join("out");
        let output = run_eval_cls(&csv, &PipelineConfig::default(), &out).unwrap();
        assert_eq!(output.n_samples, 4);
        assert_eq!(output.confusion.counts[2][3], 1);
        assert!((output.metrics.accuracy - 0.75).abs() < 1e-12);
        assert!(out.join("metrics.json").exists());
        assert!(out.join("confusion.csv").exists());
    }

    #[test]
    fn eval_cls_rejects_unknown_class_with_row() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("labels.csv");
        write_file(
            &csv,
            b"sample_id,gt_label,pred_label\ns1,t1c,t1c\ns2,t1c,flair9000\n",
        );
        let err = run_eval_cls(&csv, &PipelineConfig::default(), dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3") && msg.contains("flair9000"), "{msg}");
    }

    #[test]
    fn eval_cls_rejects_empty_csv() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("labels.csv");
        write_file(&csv, b"sample_id,gt_label,pred_label\n");
        assert!(run_eval_cls(&csv, &PipelineConfig::default(), dir.path()).is_err());
    }

    #[test]
    fn perfect_cohort_pools_to_unit_dice() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = dir.path().join("cohort");
        // gt == prob (binary maps) for three samples
        let g = crate::volgrid::GridGeometry::with_dims_spacing(
            [24, 24, 24],
            crate::volgrid::Spacing::isotropic(1.0).unwrap(),
        )
        .unwrap();
        for i in 0..3 {
            let mask = BinaryMask::from_fn(g, |x, y, z| {
                let s = 6 + i;
                x >= 4 && x < 4 + s && y >= 4 && y < 4 + s && z >= 4 && z < 4 + s
            });
            let sample = cohort.join(format!("s{i}"));
            imgio::write_mask(&mask, sample.join("tumor_core_gt.nii.gz")).unwrap();
            imgio::write_probability(
                &ProbabilityMap::from_mask(&mask),
                sample.join("tumor_core_prob.nii.gz"),
            )
            .unwrap();
            write_file(
                &sample.join("manifest.json"),
                format!("{{\"fold\": {}}}", i + 1).as_bytes(),
            );
        }
        let out = dir.path().join("out");
        let output = run_eval_seg(
            &cohort,
            StructureKind::TumorCore,
            &PipelineConfig::default(),
            &out,
            1,
        )
        .unwrap();
        assert_eq!(output.summary.voxel.dice.mean, Some(1.0));
        assert_eq!(output.summary.voxel.dice.std, Some(0.0));
        assert_eq!(output.summary.patient_counts.tp, 3);
    }
}
