//! Confusion-matrix construction and multiclass-averaged classification
//! metrics for externally produced sequence / tumor-type labels.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// counts[i][j] = samples with ground truth class i predicted as class j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    fn row_sum(&self, c: usize) -> usize {
        self.counts[c].iter().sum()
    }

    fn col_sum(&self, c: usize) -> usize {
        self.counts.iter().map(|row| row[c]).sum()
    }
}

/// Count gt/pred label pairs into a confusion matrix. Labels are class
/// indices in 0..n_classes.
pub fn confusion_matrix(
    gt: &[usize],
    pred: &[usize],
    class_names: &[String],
) -> Result<ConfusionMatrix> {
    if gt.len() != pred.len() {
        return Err(Error::InvalidParam(format!(
            "label lists differ in length: {} vs {}",
            gt.len(),
            pred.len()
        )));
    }
    let n = class_names.len();
    if n == 0 {
        return Err(Error::InvalidParam("need at least one class".into()));
    }
    let mut counts = vec![vec![0usize; n]; n];
    for (i, (&g, &p)) in gt.iter().zip(pred).enumerate() {
        if g >= n || p >= n {
            return Err(Error::InvalidParam(format!(
                "label out of range at sample {i}: gt {g}, pred {p}, {n} classes"
            )));
        }
        counts[g][p] += 1;
    }
    Ok(ConfusionMatrix {
        class_names: class_names.to_vec(),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Unweighted mean over classes; undefined per-class ratios are
    /// excluded and counted.
    Macro,
    /// Pooled one-vs-rest counts over all classes, then single ratios.
    Micro,
}

/// Per-class one-vs-rest rates; None where the denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassRates {
    pub class: String,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassMetrics {
    pub averaging: Averaging,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: f64,
    pub balanced_accuracy: Option<f64>,
    /// Classes whose undefined ratio was left out of each macro mean.
    pub excluded: ExclusionCounts,
    pub per_class: Vec<PerClassRates>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionCounts {
    pub recall: usize,
    pub precision: usize,
    pub specificity: usize,
    pub f1: usize,
}

struct OneVsRest {
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
}

fn one_vs_rest(cm: &ConfusionMatrix, c: usize) -> OneVsRest {
    let tp = cm.counts[c][c];
    let row = cm.row_sum(c);
    let col = cm.col_sum(c);
    let total = cm.total();
    OneVsRest {
        tp,
        fp: col - tp,
        tn: total + tp - row - col,
        fn_: row - tp,
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn macro_mean(values: &[Option<f64>]) -> (Option<f64>, usize) {
    let defined: Vec<f64> = values.iter().filter_map(|&v| v).collect();
    let excluded = values.len() - defined.len();
    if defined.is_empty() {
        (None, excluded)
    } else {
        (Some(defined.iter().sum::<f64>() / defined.len() as f64), excluded)
    }
}

/// One-vs-rest recall / precision / specificity / F1 averaged over classes,
/// plus overall accuracy (trace / total) and balanced accuracy
/// ((recall + specificity) / 2).
pub fn multiclass_metrics(cm: &ConfusionMatrix, averaging: Averaging) -> Result<MulticlassMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidParam(
            "confusion matrix has no samples".into(),
        ));
    }
    let trace: usize = (0..cm.n_classes()).map(|c| cm.counts[c][c]).sum();
    let accuracy = trace as f64 / total as f64;

    let per_class: Vec<PerClassRates> = (0..cm.n_classes())
        .map(|c| {
            let o = one_vs_rest(cm, c);
            let recall = ratio(o.tp, o.tp + o.fn_);
            let precision = ratio(o.tp, o.tp + o.fp);
            let specificity = ratio(o.tn, o.tn + o.fp);
            let f1 = match (recall, precision) {
                (Some(r), Some(p)) if r + p > 0.0 => Some(2.0 * r * p / (r + p)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            PerClassRates {
                class: cm.class_names[c].clone(),
                recall,
                precision,
                specificity,
                f1,
            }
        })
        .collect();

    let (recall, precision, specificity, f1, excluded) = match averaging {
        Averaging::Macro => {
            let (recall, er) = macro_mean(&per_class.iter().map(|p| p.recall).collect::<Vec<_>>());
            let (precision, ep) =
                macro_mean(&per_class.iter().map(|p| p.precision).collect::<Vec<_>>());
            let (specificity, es) =
                macro_mean(&per_class.iter().map(|p| p.specificity).collect::<Vec<_>>());
            let (f1, ef) = macro_mean(&per_class.iter().map(|p| p.f1).collect::<Vec<_>>());
            (
                recall,
                precision,
                specificity,
                f1,
                ExclusionCounts {
                    recall: er,
                    precision: ep,
                    specificity: es,
                    f1: ef,
                },
            )
        }
        Averaging::Micro => {
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut tn = 0usize;
            let mut fn_ = 0usize;
            for c in 0..cm.n_classes() {
                let o = one_vs_rest(cm, c);
                tp += o.tp;
                fp += o.fp;
                tn += o.tn;
                fn_ += o.fn_;
            }
            let recall = ratio(tp, tp + fn_);
            let precision = ratio(tp, tp + fp);
            let specificity = ratio(tn, tn + fp);
            let f1 = match (recall, precision) {
                (Some(r), Some(p)) if r + p > 0.0 => Some(2.0 * r * p / (r + p)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            (recall, precision, specificity, f1, ExclusionCounts::default())
        }
    };

    let balanced_accuracy = match (recall, specificity) {
        (Some(r), Some(s)) => Some((r + s) / 2.0),
        _ => None,
    };

    Ok(MulticlassMetrics {
        averaging,
        recall,
        precision,
        specificity,
        f1,
        accuracy,
        balanced_accuracy,
        excluded,
        per_class,
    })
}
