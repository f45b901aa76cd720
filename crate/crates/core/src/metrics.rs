//! Precision, recall, F1 and accuracy (percent), macro-averaged over the
//! classes present in the ground truth.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Ground-truth positives.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Top-1 accuracy (multi-class) or exact-match accuracy (multi-label).
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Classes left out of the macro averages for lack of support.
    pub excluded: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    pub samples: usize,
    pub disease: TaskMetrics,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_part: Option<TaskMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<TaskMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

fn class_metrics(tp: usize, fp: usize, fn_: usize) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        support: tp + fn_,
    }
}

fn macro_average(task: &str, per_class: Vec<ClassMetrics>, accuracy: f64) -> TaskMetrics {
    let excluded: Vec<usize> = per_class
        .iter()
        .enumerate()
        .filter(|(_, c)| c.support == 0)
        .map(|(i, _)| i)
        .collect();
    if !excluded.is_empty() {
        log::warn!("{task}: classes {excluded:?} have no samples and are excluded from macro averages");
    }
    let kept: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.support > 0).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if kept.is_empty() {
            0.0
        } else {
            kept.iter().map(|c| f(c)).sum::<f64>() / kept.len() as f64
        }
    };
    TaskMetrics {
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        f1: mean(|c| c.f1),
        accuracy,
        per_class,
        excluded,
    }
}

/// Single-label metrics and the confusion matrix.
pub fn multiclass(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<(TaskMetrics, Vec<Vec<usize>>)> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Shape(format!("class id outside 0..{num_classes}")));
        }
        confusion[t][p] += 1;
    }
    let per_class = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let fp = (0..num_classes).map(|t| confusion[t][c]).sum::<usize>() - tp;
            let fn_ = confusion[c].iter().sum::<usize>() - tp;
            class_metrics(tp, fp, fn_)
        })
        .collect();
    let correct = (0..num_classes).map(|c| confusion[c][c]).sum();
    Ok((
        macro_average("disease", per_class, ratio(correct, truth.len())),
        confusion,
    ))
}

/// Per-label binary metrics plus exact-match accuracy.
pub fn multilabel(task: &str, predicted: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<TaskMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let n = truth.first().map_or(0, Vec::len);
    if predicted.iter().chain(truth).any(|v| v.len() != n) {
        return Err(Error::Shape(format!("{task}: label vectors differ in length")));
    }
    let mut counts = vec![(0usize, 0usize, 0usize); n];
    let mut exact = 0;
    for (p, t) in predicted.iter().zip(truth) {
        if p == t {
            exact += 1;
        }
        for j in 0..n {
            match (p[j] != 0, t[j] != 0) {
                (true, true) => counts[j].0 += 1,
                (true, false) => counts[j].1 += 1,
                (false, true) => counts[j].2 += 1,
                (false, false) => {}
            }
        }
    }
    let per_class = counts
        .into_iter()
        .map(|(tp, fp, fn_)| class_metrics(tp, fp, fn_))
        .collect();
    Ok(macro_average(task, per_class, ratio(exact, truth.len())))
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}±{:.1}", self.mean, self.std)
    }
}

fn task_entries(prefix: &str, t: &TaskMetrics) -> [(String, f64); 4] {
    [
        (format!("{prefix}.precision"), t.precision),
        (format!("{prefix}.recall"), t.recall),
        (format!("{prefix}.f1"), t.f1),
        (format!("{prefix}.accuracy"), t.accuracy),
    ]
}

impl MetricsReport {
    /// Flat `task.metric -> value` view.
    pub fn flatten(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        out.extend(task_entries("disease", &self.disease));
        if let Some(b) = &self.body_part {
            out.extend(task_entries("body_part", b));
        }
        if let Some(a) = &self.attribute {
            out.extend(task_entries("attribute", a));
        }
        out
    }
}

/// Mean ± std of every metric across fold reports.
pub fn summarize(reports: &[MetricsReport]) -> BTreeMap<String, MeanStd> {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (k, v) in r.flatten() {
            columns.entry(k).or_default().push(v);
        }
    }
    columns.into_iter().map(|(k, v)| (k, MeanStd::of(&v))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let t = vec![0, 1, 2, 1];
        let (m, c) = multiclass(&t, &t, 3).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (100.0, 100.0, 100.0, 100.0));
        assert_eq!(c[1][1], 2);
        let l = vec![vec![1, 0], vec![0, 1]];
        let ml = multilabel("x", &l, &l).unwrap();
        assert_eq!((ml.f1, ml.accuracy), (100.0, 100.0));
    }

    #[test]
    fn two_class_confusion_by_hand() {
        // truth 0: 3 right, 1 wrong; truth 1: 2 wrong, 4 right
        let truth = [0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        let pred = [0, 0, 0, 1, 0, 0, 1, 1, 1, 1];
        let (m, c) = multiclass(&pred, &truth, 2).unwrap();
        assert_eq!(c, vec![vec![3, 1], vec![2, 4]]);
        assert!((m.accuracy - 70.0).abs() < 1e-12);
        let f0 = 2.0 * 0.6 * 0.75 / 1.35;
        let f1 = 2.0 * 0.8 * (4.0 / 6.0) / (0.8 + 4.0 / 6.0);
        assert!((m.f1 - 50.0 * (f0 + f1)).abs() < 1e-9);
        assert!((m.f1 - 69.697).abs() < 1e-3);
    }

    #[test]
    fn absent_class_is_excluded() {
        let (m, _) = multiclass(&[0, 1, 0], &[0, 1, 1], 3).unwrap();
        assert_eq!(m.excluded, vec![2]);
        let mean = (m.per_class[0].f1 + m.per_class[1].f1) / 2.0;
        assert!((m.f1 - mean).abs() < 1e-12);
    }

    #[test]
    fn mean_std_format() {
        let s = MeanStd::of(&[78.3, 79.3]);
        assert_eq!(s.to_string(), "78.8±0.5");
        assert_eq!(MeanStd::of(&[5.0, 5.0, 5.0]).std, 0.0);
    }

    #[test]
    fn report_roundtrip() {
        let (d, confusion) = multiclass(&[0, 1], &[0, 0], 2).unwrap();
        let r = MetricsReport {
            fold: Some(2),
            samples: 2,
            disease: d,
            confusion,
            body_part: None,
            attribute: Some(multilabel("a", &[vec![1, 0]], &[vec![1, 1]]).unwrap()),
        };
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
    }
}
