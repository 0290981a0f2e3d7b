//! Confusion matrices and the statistics derived from them.
//!
//! Orientation is fixed: rows are the true class, columns the predicted class.
//! Rates whose denominator is zero are reported as 0 and listed as undefined.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// JSON schema of [`MetricsReport`], also shipped as `schemas/metrics_report.schema.json`.
pub const REPORT_SCHEMA: &str = include_str!("../schemas/metrics_report.schema.json");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    /// `counts[true][predicted]`
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        ConfusionMatrix {
            class_names,
            counts: vec![vec![0; k]; k],
        }
    }

    /// Generic class names `class_0 .. class_{k-1}`.
    pub fn with_classes(k: usize) -> Self {
        Self::zeros((0..k).map(|i| format!("class_{i}")).collect())
    }

    pub fn from_counts(class_names: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = class_names.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::arg(format!("confusion matrix must be {k}x{k}")));
        }
        Ok(ConfusionMatrix {
            class_names,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let k = self.num_classes();
        if truth >= k || pred >= k {
            return Err(Error::arg(format!(
                "label pair ({truth}, {pred}) out of range for {k} classes"
            )));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }
}

/// Counts `(truth[i], pred[i])` pairs into a `k`-class matrix.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::arg(format!(
            "{} true labels vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::with_classes(k);
    for (&t, &p) in truth.iter().zip(pred) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, false)
    } else {
        (num as f64 / den as f64, true)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Names of the rates above whose denominator was zero.
    #[serde(default)]
    pub undefined: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassMetrics {
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
}

/// One-vs-rest precision, recall and F1 for every class, plus accuracy.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> PerClassMetrics {
    let classes = (0..cm.num_classes())
        .map(|c| {
            let tp = cm.counts[c][c];
            let (precision, p_ok) = ratio(tp, cm.col_sum(c));
            let (recall, r_ok) = ratio(tp, cm.row_sum(c));
            let f1_ok = p_ok && r_ok && precision + recall > 0.0;
            let f1 = if f1_ok {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            let undefined = [("precision", p_ok), ("recall", r_ok), ("f1", f1_ok)]
                .iter()
                .filter(|(_, ok)| !ok)
                .map(|(n, _)| n.to_string())
                .collect();
            ClassMetrics {
                class: cm.class_names[c].clone(),
                precision,
                recall,
                f1,
                support: cm.row_sum(c),
                undefined,
            }
        })
        .collect();
    PerClassMetrics {
        classes,
        accuracy: ratio(cm.trace(), cm.total()).0,
    }
}

/// Micro-averaged precision and recall (pooled one-vs-rest counts).
pub fn micro_precision_recall(cm: &ConfusionMatrix) -> (f64, f64) {
    let k = cm.num_classes();
    let tp: u64 = cm.trace();
    let fp: u64 = (0..k).map(|c| cm.col_sum(c) - cm.counts[c][c]).sum();
    let fn_: u64 = (0..k).map(|c| cm.row_sum(c) - cm.counts[c][c]).sum();
    (ratio(tp, tp + fp).0, ratio(tp, tp + fn_).0)
}

/// Chance-corrected agreement `(p_o - p_e) / (1 - p_e)`.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::arg("Cohen's kappa of an empty confusion matrix"));
    }
    let k = cm.num_classes();
    let chance: u128 = (0..k)
        .map(|i| cm.row_sum(i) as u128 * cm.col_sum(i) as u128)
        .sum();
    let total2 = total as u128 * total as u128;
    if chance == total2 {
        // Both marginals put everything in one class, so agreement is perfect.
        return Ok(1.0);
    }
    let p_o = cm.trace() as f64 / total as f64;
    let p_e = chance as f64 / total2 as f64;
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreeningMetrics {
    pub positive_class: String,
    pub true_positive: u64,
    pub false_positive: u64,
    pub true_negative: u64,
    pub false_negative: u64,
    /// TP / (TP + FN)
    pub sensitivity: f64,
    /// TN / (TN + FP)
    pub specificity: f64,
    /// TP / (TP + FP)
    pub positive_predictive_value: f64,
    /// TN / (TN + FN)
    pub negative_predictive_value: f64,
    #[serde(default)]
    pub undefined: Vec<String>,
}

/// Sensitivity, specificity, PPV and NPV of a two-class matrix with
/// `positive` as the positive class.
pub fn binary_screening_metrics(cm: &ConfusionMatrix, positive: usize) -> Result<ScreeningMetrics> {
    if cm.num_classes() != 2 {
        return Err(Error::arg(format!(
            "screening metrics need exactly 2 classes, got {}",
            cm.num_classes()
        )));
    }
    if positive > 1 {
        return Err(Error::arg(format!(
            "positive class index {positive} out of range"
        )));
    }
    let negative = 1 - positive;
    let tp = cm.counts[positive][positive];
    let fn_ = cm.counts[positive][negative];
    let fp = cm.counts[negative][positive];
    let tn = cm.counts[negative][negative];
    let mut undefined = Vec::new();
    let mut rate = |name: &str, num, den| {
        let (v, ok) = ratio(num, den);
        if !ok {
            undefined.push(name.to_string());
        }
        v
    };
    let sensitivity = rate("sensitivity", tp, tp + fn_);
    let specificity = rate("specificity", tn, tn + fp);
    let ppv = rate("positive_predictive_value", tp, tp + fp);
    let npv = rate("negative_predictive_value", tn, tn + fn_);
    Ok(ScreeningMetrics {
        positive_class: cm.class_names[positive].clone(),
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fn_,
        sensitivity,
        specificity,
        positive_predictive_value: ppv,
        negative_predictive_value: npv,
        undefined,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub class_names: Vec<String>,
    pub confusion_matrix: Vec<Vec<u64>>,
    pub total: u64,
    pub correct: u64,
    pub accuracy: f64,
    /// `null` when the matrix is empty.
    pub cohen_kappa: Option<f64>,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Present for two-class tasks.
    pub screening: Option<ScreeningMetrics>,
    pub config_digest: Option<String>,
}

impl MetricsReport {
    /// All statistics of `cm`. For two-class matrices the screening metrics
    /// use `positive` (default: class index 1).
    pub fn from_confusion(
        cm: &ConfusionMatrix,
        positive: Option<usize>,
        config_digest: Option<String>,
    ) -> Result<Self> {
        let per = per_class_metrics(cm);
        let (micro_precision, micro_recall) = micro_precision_recall(cm);
        let screening = if cm.num_classes() == 2 {
            Some(binary_screening_metrics(cm, positive.unwrap_or(1))?)
        } else {
            None
        };
        Ok(MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            class_names: cm.class_names.clone(),
            confusion_matrix: cm.counts.clone(),
            total: cm.total(),
            correct: cm.trace(),
            accuracy: per.accuracy,
            cohen_kappa: cohen_kappa(cm).ok(),
            micro_precision,
            micro_recall,
            per_class: per.classes,
            screening,
            config_digest,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: MetricsReport = serde_json::from_str(text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::arg(format!(
                "unsupported report schema version {}",
                report.schema_version
            )));
        }
        Ok(report)
    }

    /// Flat `metric,class,value` rows; class is empty for overall metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,class,value\n");
        let mut row = |m: &str, c: &str, v: f64| out.push_str(&format!("{m},{c},{v}\n"));
        row("accuracy", "", self.accuracy);
        if let Some(k) = self.cohen_kappa {
            row("cohen_kappa", "", k);
        }
        row("micro_precision", "", self.micro_precision);
        row("micro_recall", "", self.micro_recall);
        for c in &self.per_class {
            row("precision", &c.class, c.precision);
            row("recall", &c.class, c.recall);
            row("f1", &c.class, c.f1);
            row("support", &c.class, c.support as f64);
        }
        if let Some(s) = &self.screening {
            row("sensitivity", &s.positive_class, s.sensitivity);
            row("specificity", &s.positive_class, s.specificity);
            row(
                "positive_predictive_value",
                &s.positive_class,
                s.positive_predictive_value,
            );
            row(
                "negative_predictive_value",
                &s.positive_class,
                s.negative_predictive_value,
            );
        }
        out
    }
}

/// Writes `report` as pretty JSON to `path`.
pub fn emit_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let json = report.to_json()?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(json.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetricsReport::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn herlev() -> ConfusionMatrix {
        ConfusionMatrix::from_counts(
            vec!["Normal".into(), "Abnormal".into()],
            vec![vec![21, 2], vec![3, 66]],
        )
        .unwrap()
    }

    #[test]
    fn diagonal_and_empty_inputs() {
        let cm = confusion_matrix(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let per = per_class_metrics(&cm);
        assert!(per
            .classes
            .iter()
            .all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));
        assert_eq!(per.accuracy, 1.0);
        assert_eq!(cohen_kappa(&cm).unwrap(), 1.0);
        let empty = confusion_matrix(&[], &[], 2).unwrap();
        assert_eq!(empty.total(), 0);
        assert!(cohen_kappa(&empty).is_err());
        assert!(confusion_matrix(&[2], &[0], 2).is_err());
    }

    #[test]
    fn herlev_counts_from_label_vectors() {
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for (t, p, n) in [(0, 0, 21), (0, 1, 2), (1, 0, 3), (1, 1, 66)] {
            truth.extend(std::iter::repeat_n(t, n));
            pred.extend(std::iter::repeat_n(p, n));
        }
        assert_eq!(
            confusion_matrix(&truth, &pred, 2).unwrap().counts,
            herlev().counts
        );
    }

    #[test]
    fn herlev_kappa_formula() {
        let p_o = 87.0 / 92.0;
        let p_e = (23.0 * 24.0 + 69.0 * 68.0) / (92.0f64 * 92.0);
        let oracle = (p_o - p_e) / (1.0 - p_e);
        let k = cohen_kappa(&herlev()).unwrap();
        assert!((k - oracle).abs() < 1e-15);
        assert!((k - 0.857).abs() < 0.005);
    }

    #[test]
    fn screening_on_herlev() {
        let s = binary_screening_metrics(&herlev(), 1).unwrap();
        assert_eq!(
            (
                s.true_positive,
                s.false_negative,
                s.false_positive,
                s.true_negative
            ),
            (66, 3, 2, 21)
        );
        assert!((s.sensitivity - 66.0 / 69.0).abs() < 1e-15);
        assert!((s.specificity - 21.0 / 23.0).abs() < 1e-15);
        assert!((s.positive_predictive_value - 66.0 / 68.0).abs() < 1e-15);
        assert!((s.negative_predictive_value - 0.875).abs() < 1e-15);
        assert!(binary_screening_metrics(&ConfusionMatrix::with_classes(3), 1).is_err());
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let cm = ConfusionMatrix::from_counts(
            vec!["a".into(), "b".into()],
            vec![vec![4, 0], vec![0, 0]],
        )
        .unwrap();
        let per = per_class_metrics(&cm);
        assert_eq!(per.classes[1].precision, 0.0);
        assert_eq!(per.classes[1].undefined, vec!["precision", "recall", "f1"]);
        let s = binary_screening_metrics(&cm, 1).unwrap();
        assert!(s.undefined.contains(&"sensitivity".to_string()));
    }

    #[test]
    fn independent_margins_give_zero_kappa() {
        let rows = [3u64, 5, 2];
        let cols = [4u64, 1, 5];
        let counts = rows
            .iter()
            .map(|r| cols.iter().map(|c| r * c).collect())
            .collect();
        let cm =
            ConfusionMatrix::from_counts(vec!["a".into(), "b".into(), "c".into()], counts).unwrap();
        assert!(cohen_kappa(&cm).unwrap().abs() < 1e-12);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn one_vs_rest_matches_loop_oracle() {
        let counts = vec![vec![7, 2, 1], vec![3, 9, 0], vec![2, 4, 11]];
        let cm =
            ConfusionMatrix::from_counts(vec!["a".into(), "b".into(), "c".into()], counts.clone())
                .unwrap();
        let per = per_class_metrics(&cm);
        for c in 0..3 {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for t in 0..3 {
                for p in 0..3 {
                    let n = counts[t][p];
                    if t == c && p == c {
                        tp += n;
                    } else if p == c {
                        fp += n;
                    } else if t == c {
                        fn_ += n;
                    }
                }
            }
            let prec = tp as f64 / (tp + fp) as f64;
            let rec = tp as f64 / (tp + fn_) as f64;
            assert_eq!(per.classes[c].precision, prec);
            assert_eq!(per.classes[c].recall, rec);
            assert_eq!(per.classes[c].f1, 2.0 * prec * rec / (prec + rec));
        }
        assert_eq!(per.accuracy, 27.0 / 39.0);
    }

    #[test]
    fn csv_export_lists_every_metric() {
        let csv = MetricsReport::from_confusion(&herlev(), None, None)
            .unwrap()
            .to_csv();
        assert!(csv.starts_with("metric,class,value\n"));
        assert!(csv.contains("precision,Abnormal,"));
        assert!(csv.contains("negative_predictive_value,Abnormal,0.875"));
    }

    fn arb_cm() -> impl Strategy<Value = ConfusionMatrix> {
        (2usize..5).prop_flat_map(|k| {
            proptest::collection::vec(proptest::collection::vec(0u64..50, k), k).prop_map(
                move |counts| {
                    ConfusionMatrix::from_counts((0..k).map(|i| i.to_string()).collect(), counts)
                        .unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn accuracy_is_trace_over_total(cm in arb_cm()) {
            prop_assume!(cm.total() > 0);
            let per = per_class_metrics(&cm);
            prop_assert_eq!(per.accuracy, cm.trace() as f64 / cm.total() as f64);
            let (mp, mr) = micro_precision_recall(&cm);
            prop_assert_eq!(mp, per.accuracy);
            prop_assert_eq!(mr, per.accuracy);
        }

        #[test]
        fn kappa_bounded_by_observed_agreement(cm in arb_cm()) {
            prop_assume!(cm.total() > 0);
            let k = cohen_kappa(&cm).unwrap();
            let p_o = cm.trace() as f64 / cm.total() as f64;
            prop_assert!(k <= p_o + 1e-12);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&k));
            let report = MetricsReport::from_confusion(&cm, None, None).unwrap();
            for c in &report.per_class {
                for v in [c.precision, c.recall, c.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn report_json_roundtrip(cm in arb_cm()) {
            let report = MetricsReport::from_confusion(&cm, None, Some("abc".into())).unwrap();
            let back = MetricsReport::from_json(&report.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, report);
        }
    }

    #[test]
    fn kappa_equals_observed_when_chance_is_zero() {
        // p_e = 0 needs every class to be absent from either the true or the
        // predicted margin; p_o is then 0 as well.
        let cm = ConfusionMatrix::from_counts(
            vec!["a".into(), "b".into()],
            vec![vec![0, 5], vec![0, 0]],
        )
        .unwrap();
        let k = cohen_kappa(&cm).unwrap();
        assert_eq!(k, 0.0);
        assert_eq!(k, per_class_metrics(&cm).accuracy);
    }
}
