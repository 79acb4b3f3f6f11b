//! Classification metrics: confusion matrix, per-class precision/recall/F1,
//! support-weighted averages, and a JSON report format.
//!
//! Falls are the positive class. Every ratio with a zero denominator is
//! defined as zero — an evaluation where the model never predicts a fall
//! reports zero fall precision rather than NaN.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Label, WindowInstance};
use crate::dgru::{predict, DgruModel, ModelError};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot compute metrics over zero instances")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report {path}: {reason}")]
    Format { path: String, reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> MetricsError {
    MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Binary confusion counts with falls as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionMatrix {
    pub fn record(&mut self, predicted: Label, actual: Label) {
        match (predicted, actual) {
            (Label::Fall, Label::Fall) => self.true_pos += 1,
            (Label::Fall, Label::NonFall) => self.false_pos += 1,
            (Label::NonFall, Label::NonFall) => self.true_neg += 1,
            (Label::NonFall, Label::Fall) => self.false_neg += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    /// Instances whose true label is fall.
    pub fn fall_support(&self) -> u64 {
        self.true_pos + self.false_neg
    }

    /// Instances whose true label is non-fall.
    pub fn non_fall_support(&self) -> u64 {
        self.true_neg + self.false_pos
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.true_pos + self.true_neg, self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn precision(true_pos: u64, false_pos: u64) -> f64 {
    ratio(true_pos, true_pos + false_pos)
}

pub fn recall(true_pos: u64, false_neg: u64) -> f64 {
    ratio(true_pos, true_pos + false_neg)
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    let denom = precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / denom
    }
}

/// Precision, recall, and F1 for one class, plus how many instances of that
/// class the evaluation actually contained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

impl ClassMetrics {
    fn from_counts(true_pos: u64, false_pos: u64, false_neg: u64) -> ClassMetrics {
        let p = precision(true_pos, false_pos);
        let r = recall(true_pos, false_neg);
        ClassMetrics {
            precision: p,
            recall: r,
            f1: f1_score(p, r),
            support: true_pos + false_neg,
        }
    }
}

/// Support-weighted mean of per-class values: `Σ value·support / Σ support`.
/// Zero total support yields zero.
pub fn weighted_average(values_with_support: &[(f64, u64)]) -> f64 {
    let total: u64 = values_with_support.iter().map(|&(_, s)| s).sum();
    if total == 0 {
        return 0.0;
    }
    let weighted: f64 = values_with_support
        .iter()
        .map(|&(v, s)| v * s as f64)
        .sum();
    weighted / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub fall: ClassMetrics,
    pub non_fall: ClassMetrics,
    pub weighted: WeightedMetrics,
    pub accuracy: f64,
}

/// Derive the full report from confusion counts. The non-fall row treats
/// non-falls as the positive class, so its counts are the fall row's
/// mirrored across the diagonal.
pub fn report_from_confusion(confusion: ConfusionMatrix) -> Result<EvalReport, MetricsError> {
    if confusion.total() == 0 {
        return Err(MetricsError::Empty);
    }
    let fall = ClassMetrics::from_counts(confusion.true_pos, confusion.false_pos, confusion.false_neg);
    let non_fall =
        ClassMetrics::from_counts(confusion.true_neg, confusion.false_neg, confusion.false_pos);
    let weighted = WeightedMetrics {
        precision: weighted_average(&[
            (fall.precision, fall.support),
            (non_fall.precision, non_fall.support),
        ]),
        recall: weighted_average(&[(fall.recall, fall.support), (non_fall.recall, non_fall.support)]),
        f1: weighted_average(&[(fall.f1, fall.support), (non_fall.f1, non_fall.support)]),
    };
    Ok(EvalReport {
        confusion,
        fall,
        non_fall,
        weighted,
        accuracy: confusion.accuracy(),
    })
}

/// Run the model over a split and report. Instances are classified in
/// parallel; the counts are integers, so the result does not depend on
/// chunking or thread count.
pub fn evaluate_model(
    model: &DgruModel,
    instances: &[WindowInstance],
) -> Result<EvalReport, MetricsError> {
    if instances.is_empty() {
        return Err(MetricsError::Empty);
    }
    let parts: Vec<ConfusionMatrix> = instances
        .par_chunks(256)
        .map(|chunk| -> Result<ConfusionMatrix, MetricsError> {
            let mut cm = ConfusionMatrix::default();
            for inst in chunk {
                let (predicted, _) = predict(model, inst)?;
                cm.record(predicted, inst.label);
            }
            Ok(cm)
        })
        .collect::<Result<_, _>>()?;
    let mut confusion = ConfusionMatrix::default();
    for part in &parts {
        confusion.merge(part);
    }
    report_from_confusion(confusion)
}

// ---------------------------------------------------------------------------
// Report file
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ReportFile {
    format_version: u32,
    confusion: ConfusionMatrix,
    per_class: BTreeMap<String, ClassMetrics>,
    weighted_avg: WeightedMetrics,
    accuracy: f64,
}

/// Write the report as pretty-printed JSON with a stable field order.
pub fn save_report(path: &Path, report: &EvalReport) -> Result<(), MetricsError> {
    let mut per_class = BTreeMap::new();
    per_class.insert(Label::Fall.as_str().to_string(), report.fall);
    per_class.insert(Label::NonFall.as_str().to_string(), report.non_fall);
    let file = ReportFile {
        format_version: REPORT_FORMAT_VERSION,
        confusion: report.confusion,
        per_class,
        weighted_avg: report.weighted,
        accuracy: report.accuracy,
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(|e| MetricsError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn load_report(path: &Path) -> Result<EvalReport, MetricsError> {
    let bad = |reason: String| MetricsError::Format {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let file: ReportFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if file.format_version != REPORT_FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {} (this build reads {})",
            file.format_version, REPORT_FORMAT_VERSION
        )));
    }
    if file.confusion.total() == 0 {
        return Err(bad("confusion matrix is empty".into()));
    }
    let fall = *file
        .per_class
        .get(Label::Fall.as_str())
        .ok_or_else(|| bad("missing per_class entry for fall".into()))?;
    let non_fall = *file
        .per_class
        .get(Label::NonFall.as_str())
        .ok_or_else(|| bad("missing per_class entry for non_fall".into()))?;
    Ok(EvalReport {
        confusion: file.confusion,
        fall,
        non_fall,
        weighted: file.weighted_avg,
        accuracy: file.accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgru::ModelConfig;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn matrix(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionMatrix {
        ConfusionMatrix {
            true_pos: tp,
            false_pos: fp,
            true_neg: tn,
            false_neg: fn_,
        }
    }

    #[test]
    fn hand_computed_report() {
        // 100 instances: 13 true falls, of which 8 are caught; 2 false alarms.
        let report = report_from_confusion(matrix(8, 2, 85, 5)).unwrap();
        assert!((report.fall.precision - 0.8).abs() < 1e-15);
        assert!((report.fall.recall - 8.0 / 13.0).abs() < 1e-15);
        let expect_f1 = 2.0 * 0.8 * (8.0 / 13.0) / (0.8 + 8.0 / 13.0);
        assert!((report.fall.f1 - expect_f1).abs() < 1e-15);
        assert_eq!(report.fall.support, 13);

        assert!((report.non_fall.precision - 85.0 / 90.0).abs() < 1e-15);
        assert!((report.non_fall.recall - 85.0 / 87.0).abs() < 1e-15);
        assert_eq!(report.non_fall.support, 87);

        assert!((report.accuracy - 0.93).abs() < 1e-15);

        // Weighted precision by the definition, computed independently.
        let expect_wp = (0.8 * 13.0 + (85.0 / 90.0) * 87.0) / 100.0;
        assert!((report.weighted.precision - expect_wp).abs() < 1e-15);
    }

    #[test]
    fn zero_denominators_yield_zero_not_nan() {
        // The model never predicts a fall and the split contains none:
        // every fall ratio is 0/0.
        let report = report_from_confusion(matrix(0, 0, 50, 0)).unwrap();
        assert_eq!(report.fall.precision, 0.0);
        assert_eq!(report.fall.recall, 0.0);
        assert_eq!(report.fall.f1, 0.0);
        assert_eq!(report.fall.support, 0);
        assert_eq!(report.non_fall.recall, 1.0);
        assert_eq!(report.accuracy, 1.0);
        // Weighted metrics ignore the zero-support class entirely.
        assert_eq!(report.weighted.recall, 1.0);

        assert!(matches!(
            report_from_confusion(ConfusionMatrix::default()),
            Err(MetricsError::Empty)
        ));
    }

    #[test]
    fn f1_is_zero_when_both_parts_are_zero() {
        assert_eq!(f1_score(0.0, 0.0), 0.0);
        assert!((f1_score(1.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((f1_score(0.5, 1.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_average_matches_manual_sum() {
        let values = [(0.9, 10u64), (0.5, 30u64), (0.2, 0u64)];
        let expect = (0.9 * 10.0 + 0.5 * 30.0) / 40.0;
        assert!((weighted_average(&values) - expect).abs() < 1e-15);
        assert_eq!(weighted_average(&[]), 0.0);
        assert_eq!(weighted_average(&[(0.7, 0)]), 0.0);
    }

    #[test]
    fn record_routes_every_outcome() {
        let mut cm = ConfusionMatrix::default();
        cm.record(Label::Fall, Label::Fall);
        cm.record(Label::Fall, Label::NonFall);
        cm.record(Label::NonFall, Label::NonFall);
        cm.record(Label::NonFall, Label::NonFall);
        cm.record(Label::NonFall, Label::Fall);
        assert_eq!(cm, matrix(1, 1, 2, 1));
        assert_eq!(cm.total(), 5);
        assert_eq!(cm.fall_support(), 2);
        assert_eq!(cm.non_fall_support(), 3);
    }

    #[test]
    fn evaluate_model_agrees_with_a_sequential_count() {
        let model = DgruModel::new(
            &ModelConfig {
                hidden_dim: 4,
                num_layers: 1,
                head_dim: 4,
                window_size: 5,
            },
            &mut Rng::new(3),
        )
        .unwrap();
        let mut rng = Rng::new(4);
        let instances: Vec<WindowInstance> = (0..300)
            .map(|i| WindowInstance {
                values: (0..5)
                    .map(|_| {
                        [
                            rng.uniform(-2.0, 2.0),
                            rng.uniform(-2.0, 2.0),
                            rng.uniform(-2.0, 2.0),
                        ]
                    })
                    .collect(),
                label: if i % 3 == 0 { Label::Fall } else { Label::NonFall },
                source_segment: "toy".into(),
                start: i,
            })
            .collect();

        let report = evaluate_model(&model, &instances).unwrap();

        let mut cm = ConfusionMatrix::default();
        for inst in &instances {
            let (predicted, _) = predict(&model, inst).unwrap();
            cm.record(predicted, inst.label);
        }
        assert_eq!(report.confusion, cm);
        assert_eq!(report.confusion.total(), 300);

        assert!(matches!(
            evaluate_model(&model, &[]),
            Err(MetricsError::Empty)
        ));
    }

    #[test]
    fn report_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = report_from_confusion(matrix(8, 2, 85, 5)).unwrap();
        save_report(&path, &report).unwrap();
        let loaded = load_report(&path).unwrap();
        assert_eq!(loaded, report);

        // Saving what was loaded reproduces the bytes.
        let path2 = dir.path().join("report2.json");
        save_report(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn report_file_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = report_from_confusion(matrix(3, 1, 5, 1)).unwrap();
        save_report(&path, &report).unwrap();

        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["format_version"] = 99.into();
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        match load_report(&path) {
            Err(MetricsError::Format { reason, .. }) => {
                assert!(reason.contains("99"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }

        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_report(&path), Err(MetricsError::Format { .. })));

        assert!(matches!(
            load_report(&dir.path().join("missing.json")),
            Err(MetricsError::Io { .. })
        ));
    }

    proptest! {
        /// Swapping which class counts as positive mirrors the confusion
        /// matrix across its diagonal: the fall row of the original must
        /// equal the non-fall row of the swap, and the weighted averages
        /// and accuracy must not move at all.
        #[test]
        fn swapping_the_positive_class_mirrors_the_report(
            tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500
        ) {
            prop_assume!(tp + fp + tn + fn_ > 0);
            let original = report_from_confusion(matrix(tp, fp, tn, fn_)).unwrap();
            let swapped = report_from_confusion(matrix(tn, fn_, tp, fp)).unwrap();

            prop_assert_eq!(original.fall, swapped.non_fall);
            prop_assert_eq!(original.non_fall, swapped.fall);
            prop_assert!((original.accuracy - swapped.accuracy).abs() <= 1e-12);
            prop_assert!((original.weighted.precision - swapped.weighted.precision).abs() <= 1e-12);
            prop_assert!((original.weighted.recall - swapped.weighted.recall).abs() <= 1e-12);
            prop_assert!((original.weighted.f1 - swapped.weighted.f1).abs() <= 1e-12);
        }

        /// For binary classification the support-weighted recall collapses
        /// to plain accuracy: (TP + TN) / total.
        #[test]
        fn weighted_recall_equals_accuracy(
            tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500
        ) {
            prop_assume!(tp + fp + tn + fn_ > 0);
            let report = report_from_confusion(matrix(tp, fp, tn, fn_)).unwrap();
            prop_assert!((report.weighted.recall - report.accuracy).abs() <= 1e-12);
        }

        /// Precision, recall, F1, and accuracy always land in [0, 1].
        #[test]
        fn metrics_stay_in_unit_interval(
            tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500
        ) {
            prop_assume!(tp + fp + tn + fn_ > 0);
            let report = report_from_confusion(matrix(tp, fp, tn, fn_)).unwrap();
            for m in [
                report.fall.precision, report.fall.recall, report.fall.f1,
                report.non_fall.precision, report.non_fall.recall, report.non_fall.f1,
                report.weighted.precision, report.weighted.recall, report.weighted.f1,
                report.accuracy,
            ] {
                prop_assert!((0.0..=1.0).contains(&m), "{m} outside [0,1]");
            }
        }
    }
}
