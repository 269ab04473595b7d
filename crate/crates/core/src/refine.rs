//! Cross-structure consistency rules producing a coherent per-timepoint
//! structure set.
//!
//! Contrast-enhancing, preoperative: tumor core is the reference; NETC is
//! restricted to its overlap with the core, SNFH has the core subtracted,
//! and whole tumor = core + SNFH. Contrast-enhancing, postoperative: the
//! residual tumor is the reference; cavity and enhancing tissue are
//! subtracted from SNFH. Non-enhancing: SNFH serves as the whole tumor,
//! with the cavity subtracted postoperatively.

use crate::error::{Error, Result};
use crate::volgrid::{ensure_compatible, BinaryMask, GridGeometry, StructureKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timepoint {
    Preop,
    Postop,
}

impl Timepoint {
    pub fn as_str(&self) -> &'static str {
        match self {
            Timepoint::Preop => "preop",
            Timepoint::Postop => "postop",
        }
    }
}

impl std::str::FromStr for Timepoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "preop" => Ok(Timepoint::Preop),
            "postop" => Ok(Timepoint::Postop),
            other => Err(Error::InvalidParam(format!("unknown timepoint '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Enhancement {
    ContrastEnhancing,
    NonEnhancing,
}

/// Per-patient, per-timepoint collection of structure masks, all sharing
/// one geometry. At most one mask per kind; provenance notes ride along.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureSet {
    pub timepoint: Timepoint,
    pub enhancement: Enhancement,
    masks: BTreeMap<StructureKind, BinaryMask>,
    notes: BTreeMap<StructureKind, Vec<String>>,
}

impl StructureSet {
    pub fn new(timepoint: Timepoint, enhancement: Enhancement) -> Self {
        StructureSet {
            timepoint,
            enhancement,
            masks: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    /// Insert or replace a structure mask. All masks must share geometry.
    pub fn insert(&mut self, kind: StructureKind, mask: BinaryMask) -> Result<()> {
        if let Some(existing) = self.masks.values().next() {
            ensure_compatible(existing.geometry(), mask.geometry())?;
        }
        self.masks.insert(kind, mask);
        Ok(())
    }

    pub fn with(mut self, kind: StructureKind, mask: BinaryMask) -> Result<Self> {
        self.insert(kind, mask)?;
        Ok(self)
    }

    pub fn get(&self, kind: StructureKind) -> Option<&BinaryMask> {
        self.masks.get(&kind)
    }

    pub fn contains(&self, kind: StructureKind) -> bool {
        self.masks.contains_key(&kind)
    }

    pub fn kinds(&self) -> impl Iterator<Item = StructureKind> + '_ {
        self.masks.keys().copied()
    }

    pub fn masks(&self) -> &BTreeMap<StructureKind, BinaryMask> {
        &self.masks
    }

    pub fn geometry(&self) -> Option<&GridGeometry> {
        self.masks.values().next().map(|m| m.geometry())
    }

    /// Attach a provenance note to a structure (deduplicated, so repeated
    /// refinement stays idempotent).
    pub fn add_note(&mut self, kind: StructureKind, note: impl Into<String>) {
        let note = note.into();
        let notes = self.notes.entry(kind).or_default();
        if !notes.contains(&note) {
            notes.push(note);
        }
    }

    pub fn notes(&self, kind: StructureKind) -> &[String] {
        self.notes.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn all_notes(&self) -> &BTreeMap<StructureKind, Vec<String>> {
        &self.notes
    }
}

fn require(set: &StructureSet, kind: StructureKind, context: &str) -> Result<BinaryMask> {
    set.get(kind).cloned().ok_or_else(|| {
        Error::InvalidParam(format!(
            "{context} requires a {kind} mask (an empty mask is acceptable, absence is not)"
        ))
    })
}

/// Preoperative refinement for contrast-enhancing tumors. The tumor core is
/// kept unchanged as the reference; NETC keeps only its overlap with the
/// core; SNFH has the core subtracted; whole tumor = core + refined SNFH.
pub fn refine_preop_ce(set: &StructureSet) -> Result<StructureSet> {
    let tc = require(set, StructureKind::TumorCore, "preoperative refinement")?;
    let mut out = set.clone();

    if let Some(netc) = set.get(StructureKind::Netc) {
        out.insert(StructureKind::Netc, netc.intersect(&tc)?)?;
        out.add_note(StructureKind::Netc, "restricted to tumor core overlap");
    }
    let snfh = match set.get(StructureKind::Snfh) {
        Some(snfh) => {
            let refined = snfh.subtract(&tc)?;
            out.insert(StructureKind::Snfh, refined.clone())?;
            out.add_note(StructureKind::Snfh, "tumor core subtracted");
            Some(refined)
        }
        None => None,
    };
    let wt = match snfh {
        Some(snfh) => tc.union(&snfh)?,
        None => tc.clone(),
    };
    out.insert(StructureKind::WholeTumor, wt)?;
    out.add_note(StructureKind::WholeTumor, "tumor core + snfh");
    Ok(out)
}

/// Postoperative refinement for contrast-enhancing tumors. Residual tumor
/// (enhancing tissue) is the reference and must be supplied even if empty;
/// cavity and enhancing tissue are subtracted from SNFH.
pub fn refine_postop_ce(set: &StructureSet) -> Result<StructureSet> {
    let et = require(set, StructureKind::ResidualTumor, "postoperative refinement")?;
    let mut out = set.clone();

    if let Some(snfh) = set.get(StructureKind::Snfh) {
        let removed = match set.get(StructureKind::ResectionCavity) {
            Some(cavity) => cavity.union(&et)?,
            None => et.clone(),
        };
        out.insert(StructureKind::Snfh, snfh.subtract(&removed)?)?;
        out.add_note(StructureKind::Snfh, "resection cavity and enhancing tissue subtracted");
    }
    if let (Some(cavity), false) = (set.get(StructureKind::ResectionCavity), et.is_empty()) {
        let overlap = cavity.intersect(&et)?;
        if !overlap.is_empty() {
            out.add_note(
                StructureKind::ResidualTumor,
                format!(
                    "enhancing tissue overlaps the resection cavity by {} voxels; \
                     both kept unchanged",
                    overlap.count()
                ),
            );
        }
    }
    if set.contains(StructureKind::Netc) {
        out.add_note(
            StructureKind::Netc,
            "no postoperative consistency rule applied to netc",
        );
    }
    Ok(out)
}

/// Refinement for non contrast-enhancing tumors: SNFH serves as the whole
/// tumor; postoperatively the resection cavity is subtracted first.
pub fn refine_non_ce(set: &StructureSet) -> Result<StructureSet> {
    let snfh = require(set, StructureKind::Snfh, "non-enhancing refinement")?;
    let mut out = set.clone();

    let snfh = match (set.timepoint, set.get(StructureKind::ResectionCavity)) {
        (Timepoint::Postop, Some(cavity)) => {
            let refined = snfh.subtract(cavity)?;
            out.insert(StructureKind::Snfh, refined.clone())?;
            out.add_note(StructureKind::Snfh, "resection cavity subtracted");
            refined
        }
        _ => snfh,
    };
    out.insert(StructureKind::WholeTumor, snfh)?;
    out.add_note(StructureKind::WholeTumor, "aliases snfh");
    Ok(out)
}

/// Dispatch on enhancement mode and timepoint.
pub fn refine(set: &StructureSet) -> Result<StructureSet> {
    match (set.enhancement, set.timepoint) {
        (Enhancement::ContrastEnhancing, Timepoint::Preop) => refine_preop_ce(set),
        (Enhancement::ContrastEnhancing, Timepoint::Postop) => refine_postop_ce(set),
        (Enhancement::NonEnhancing, _) => refine_non_ce(set),
    }
}
