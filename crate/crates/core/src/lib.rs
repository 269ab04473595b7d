//! Postoperative CNS tumor analysis toolkit.
//!
//! A library and CLI around externally produced probability maps:
//! preprocessing, sliding-window inference harness, ensembling,
//! postprocessing, cross-structure refinement, three-tier validation
//! metrics, and standardized surgical reporting, plus a synthetic phantom
//! harness with analytic ground truth.

pub mod config;
pub mod error;
pub mod evalcls;
pub mod evalseg;
pub mod imgio;
pub mod infer;
pub mod jsonfmt;
pub mod morph;
pub mod phantom;
pub mod pipeline;
pub mod prep;
pub mod refine;
pub mod report;
pub mod volgrid;

pub use error::{Error, Result};

/// Toolkit version embedded in reports and config echoes.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
