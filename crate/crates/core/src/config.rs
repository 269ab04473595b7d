//! Pipeline configuration: one strict JSON document holding every tunable
//! constant, with defaults matching the shipped pipeline.

use crate::error::{Error, Result};
use crate::evalcls::Averaging;
use crate::evalseg::{EvalParams, StructureCutoffs};
use crate::infer::{InferParams, PostprocParams};
use crate::prep::PrepParams;
use crate::refine::Enhancement;
use crate::report::{FeatureParams, ResectionThresholds};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Where sequence tags come from during ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// manifest.json next to the volumes.
    Sidecar,
    /// File stems (t1c.nii.gz and friends); a manifest still wins.
    Filename,
    /// Labels CSV provided on the command line.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalClsConfig {
    /// Class names in matrix order; inferred from the ground-truth column
    /// when absent.
    pub classes: Option<Vec<String>>,
    pub averaging: Averaging,
}

impl Default for EvalClsConfig {
    fn default() -> Self {
        EvalClsConfig {
            classes: None,
            averaging: Averaging::Macro,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub prep: PrepParams,
    pub infer: InferParams,
    pub postproc: PostprocParams,
    pub cutoffs: StructureCutoffs,
    pub eval: EvalParams,
    pub resection: ResectionThresholds,
    pub features: FeatureParams,
    pub enhancement: Enhancement,
    pub sequence_label_source: LabelSource,
    /// Operating threshold used by `report` and `postprocess`.
    pub threshold: f64,
    /// Run the two-step postprocessing inside the evaluation sweep instead
    /// of plain binarization.
    pub eval_apply_postprocessing: bool,
    /// Sequence-tag pairs turned into difference channels by `preprocess`.
    pub subtraction_pairs: Vec<(String, String)>,
    pub eval_cls: EvalClsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            prep: PrepParams::default(),
            infer: InferParams::default(),
            postproc: PostprocParams::default(),
            cutoffs: StructureCutoffs::default(),
            eval: EvalParams::default(),
            resection: ResectionThresholds::default(),
            features: FeatureParams::default(),
            enhancement: Enhancement::ContrastEnhancing,
            sequence_label_source: LabelSource::Filename,
            threshold: 0.5,
            eval_apply_postprocessing: false,
            subtraction_pairs: Vec::new(),
            eval_cls: EvalClsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        check(self.prep.validate())?;
        check(self.infer.validate())?;
        check(self.postproc.validate())?;
        check(self.cutoffs.validate())?;
        check(self.eval.validate())?;
        check(self.resection.validate())?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Strict load: unknown keys anywhere in the document are rejected.
    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
