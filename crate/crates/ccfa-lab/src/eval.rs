//! Evaluation metrics and dump formats: cumulative accuracy, average
//! incremental accuracy, forgetting, average new-class accuracy, and 2-D
//! point dumps for plotting.

use crate::data::LabeledFeatures;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Per-stage evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 1-based stage index.
    pub stage: usize,
    /// Accuracy over all classes seen so far.
    pub accuracy: f64,
    /// Per-class accuracy over exactly the seen classes.
    pub per_class: BTreeMap<usize, f64>,
    /// Accuracy restricted to this stage's new classes (stages >= 2).
    pub new_class_accuracy: Option<f64>,
    /// Wall time of the stage. Excluded from serialized records so reruns
    /// with the same seed produce byte-identical artifacts; timings go to a
    /// sidecar file instead.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// End-of-run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub average_incremental_accuracy: f64,
    /// Mean per-class drop from best historical accuracy to final accuracy;
    /// absent for single-stage streams.
    pub forgetting: Option<f64>,
    /// Mean new-class accuracy over incremental stages; absent for
    /// single-stage streams.
    pub average_new_accuracy: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

/// Predicted labels (dataset label space) for a feature batch.
pub fn predict_labels(model: &Model, features: &Matrix) -> Result<Vec<usize>> {
    let z = model.extractor.forward(features)?;
    let logits = model.classifier.logits(&z)?;
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            model.known_classes[best]
        })
        .collect())
}

/// Evaluate the model on the cumulative test set of stage `stage`
/// (1-based). `new_classes` restricts the auxiliary accuracy to this
/// stage's task.
pub fn evaluate_stage(
    model: &Model,
    test: &LabeledFeatures,
    new_classes: Option<&[usize]>,
    stage: usize,
) -> Result<MetricsRecord> {
    if test.is_empty() {
        return Err(Error::EmptyInput("test set"));
    }
    let predictions = predict_labels(model, &test.features)?;
    let mut correct = 0usize;
    let mut class_total: BTreeMap<usize, usize> = BTreeMap::new();
    let mut class_correct: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in &model.known_classes {
        class_total.insert(c, 0);
        class_correct.insert(c, 0);
    }
    let mut new_total = 0usize;
    let mut new_correct = 0usize;
    for (i, (&truth, &pred)) in test.labels.iter().zip(&predictions).enumerate() {
        let _ = i;
        *class_total.entry(truth).or_insert(0) += 1;
        let hit = truth == pred;
        if hit {
            correct += 1;
            *class_correct.entry(truth).or_insert(0) += 1;
        }
        if let Some(new) = new_classes {
            if new.contains(&truth) {
                new_total += 1;
                if hit {
                    new_correct += 1;
                }
            }
        }
    }
    let per_class = class_total
        .iter()
        .map(|(&c, &tot)| {
            let acc = if tot == 0 {
                0.0
            } else {
                class_correct[&c] as f64 / tot as f64
            };
            (c, acc)
        })
        .collect();
    Ok(MetricsRecord {
        stage,
        accuracy: correct as f64 / test.len() as f64,
        per_class,
        new_class_accuracy: new_classes.map(|_| {
            if new_total == 0 {
                0.0
            } else {
                new_correct as f64 / new_total as f64
            }
        }),
        wall_time_secs: 0.0,
    })
}

/// Unweighted mean of per-stage cumulative accuracies, initial stage
/// included.
pub fn average_incremental_accuracy(records: &[MetricsRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("metric records"));
    }
    Ok(records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64)
}

/// Mean over classes introduced before the final stage of
/// `max historical accuracy - final accuracy`. Nonnegative per class by
/// the max definition; no clamping applied.
pub fn forgetting(records: &[MetricsRecord]) -> Result<f64> {
    if records.len() < 2 {
        return Err(Error::EmptyInput("forgetting needs at least two stages"));
    }
    let last = records.last().unwrap();
    // Classes already evaluated before the final stage.
    let mut old_classes: Vec<usize> = Vec::new();
    for record in &records[..records.len() - 1] {
        for &c in record.per_class.keys() {
            if !old_classes.contains(&c) {
                old_classes.push(c);
            }
        }
    }
    if old_classes.is_empty() {
        return Err(Error::EmptyInput("no old classes in history"));
    }
    let mut total = 0.0;
    for &c in &old_classes {
        let best = records
            .iter()
            .filter_map(|r| r.per_class.get(&c))
            .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let final_acc = last.per_class.get(&c).copied().unwrap_or(0.0);
        total += best - final_acc;
    }
    Ok(total / old_classes.len() as f64)
}

/// Mean over stages >= 2 of the accuracy restricted to that stage's new
/// classes.
pub fn average_new_accuracy(records: &[MetricsRecord]) -> Result<f64> {
    let values: Vec<f64> = records
        .iter()
        .filter(|r| r.stage >= 2)
        .filter_map(|r| r.new_class_accuracy)
        .collect();
    if values.is_empty() {
        return Err(Error::EmptyInput(
            "average new accuracy needs incremental stages",
        ));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Assemble the run summary from its records.
pub fn summarize(records: &[MetricsRecord], config_hash: String, seed: u64) -> Result<Summary> {
    Ok(Summary {
        average_incremental_accuracy: average_incremental_accuracy(records)?,
        forgetting: if records.len() >= 2 {
            Some(forgetting(records)?)
        } else {
            None
        },
        average_new_accuracy: if records.len() >= 2 {
            Some(average_new_accuracy(records)?)
        } else {
            None
        },
        config_hash,
        seed,
    })
}

/// CSV dump of labeled points. For 2-D features the header is
/// `x,y,label,tag`; higher dimensions dump raw channels for external
/// projection.
pub fn dump_points(features: &Matrix, labels: &[usize], tag: &str) -> String {
    assert_eq!(features.rows(), labels.len());
    let d = features.cols();
    let mut out = String::new();
    if d == 2 {
        out.push_str("x,y,label,tag\n");
    } else {
        let cols: Vec<String> = (0..d).map(|k| format!("f{k}")).collect();
        out.push_str(&cols.join(","));
        out.push_str(",label,tag\n");
    }
    for i in 0..features.rows() {
        let vals: Vec<String> = features.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&vals.join(","));
        out.push_str(&format!(",{},{}\n", labels[i], tag));
    }
    out
}

/// CSV of per-stage cumulative accuracy, `stage,accuracy`.
pub fn curves_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("stage,accuracy\n");
    for r in records {
        out.push_str(&format!("{},{}\n", r.stage, r.accuracy));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(stage: usize, acc: f64, per_class: &[(usize, f64)], new_acc: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            stage,
            accuracy: acc,
            per_class: per_class.iter().copied().collect(),
            new_class_accuracy: new_acc,
            wall_time_secs: 0.0,
        }
    }

    #[test]
    fn incremental_accuracy_means() {
        let single = [record(1, 0.8, &[(0, 0.8)], None)];
        assert_eq!(average_incremental_accuracy(&single).unwrap(), 0.8);

        let two = [
            record(1, 1.0, &[(0, 1.0)], None),
            record(2, 0.5, &[(0, 0.5), (1, 0.5)], Some(0.5)),
        ];
        assert_eq!(average_incremental_accuracy(&two).unwrap(), 0.75);
        assert!(average_incremental_accuracy(&[]).is_err());
    }

    #[test]
    fn incremental_accuracy_five_stage_hand_check() {
        let accs = [0.9, 0.8, 0.7, 0.75, 0.6];
        let records: Vec<MetricsRecord> = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| record(i + 1, a, &[(0, a)], None))
            .collect();
        let expected = (0.9 + 0.8 + 0.7 + 0.75 + 0.6) / 5.0;
        assert!((average_incremental_accuracy(&records).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn forgetting_cases() {
        // Constant class contributes 0; degrading class contributes its drop.
        let records = [
            record(1, 1.0, &[(0, 0.9), (1, 1.0)], None),
            record(2, 0.8, &[(0, 0.9), (1, 0.6), (2, 1.0)], Some(1.0)),
        ];
        // class 0: max 0.9, final 0.9 -> 0; class 1: max 1.0, final 0.6 -> 0.4
        let f = forgetting(&records).unwrap();
        assert!((f - 0.2).abs() < 1e-12);
    }

    #[test]
    fn forgetting_three_stage_hand_calc() {
        let records = [
            record(1, 1.0, &[(0, 1.0), (1, 0.8)], None),
            record(2, 0.9, &[(0, 0.7), (1, 0.9), (2, 1.0)], Some(1.0)),
            record(3, 0.8, &[(0, 0.6), (1, 0.7), (2, 0.9), (3, 1.0)], Some(1.0)),
        ];
        // class 0: max 1.0 final 0.6 -> 0.4
        // class 1: max 0.9 final 0.7 -> 0.2
        // class 2: max 1.0 final 0.9 -> 0.1  (introduced at stage 2 < final)
        let expected = (0.4 + 0.2 + 0.1) / 3.0;
        assert!((forgetting(&records).unwrap() - expected).abs() < 1e-12);
        assert!(forgetting(&records[..1]).is_err());
    }

    #[test]
    fn forgetting_zero_when_no_class_degrades() {
        let records = [
            record(1, 0.9, &[(0, 0.9)], None),
            record(2, 0.95, &[(0, 0.9), (1, 1.0)], Some(1.0)),
        ];
        assert_eq!(forgetting(&records).unwrap(), 0.0);
    }

    #[test]
    fn new_accuracy_mean() {
        let records = [
            record(1, 1.0, &[(0, 1.0)], None),
            record(2, 0.9, &[(0, 1.0), (1, 0.8)], Some(0.8)),
            record(3, 0.8, &[(0, 1.0), (1, 0.8), (2, 0.6)], Some(0.6)),
        ];
        assert!((average_new_accuracy(&records).unwrap() - 0.7).abs() < 1e-12);
        assert!(average_new_accuracy(&records[..1]).is_err());
    }

    #[test]
    fn stage_accuracy_matches_independent_confusion_count() {
        use crate::data::LabeledFeatures;
        use crate::model::{Classifier, FeatureExtractor, Model};
        use crate::numerics::Rng;

        let mut rng = Rng::new(41);
        let model = Model::new(
            FeatureExtractor::identity(4),
            Classifier::cosine(rng.gaussian_matrix(3, 4), 2.0),
            vec![0, 1, 2],
        );
        let test = LabeledFeatures {
            features: rng.gaussian_matrix(30, 4),
            labels: (0..30).map(|i| i % 3).collect(),
            num_classes: 3,
        };
        let record = evaluate_stage(&model, &test, Some(&[2]), 2).unwrap();

        // Independent pass: full confusion matrix, then accuracy from its
        // diagonal.
        let preds = predict_labels(&model, &test.features).unwrap();
        let mut confusion = [[0usize; 3]; 3];
        for (&truth, &pred) in test.labels.iter().zip(&preds) {
            confusion[truth][pred] += 1;
        }
        let diag: usize = (0..3).map(|c| confusion[c][c]).sum();
        let total: usize = confusion.iter().flatten().sum();
        assert_eq!(record.accuracy, diag as f64 / total as f64);
        for c in 0..3 {
            let row_total: usize = confusion[c].iter().sum();
            assert_eq!(record.per_class[&c], confusion[c][c] as f64 / row_total as f64);
        }
    }

    #[test]
    fn dump_points_format_and_determinism() {
        let points = Matrix::from_rows(&[&[0.5, -0.25], &[1.0, 0.0]]);
        let a = dump_points(&points, &[3, 1], "memory");
        let b = dump_points(&points, &[3, 1], "memory");
        assert_eq!(a, b);
        assert!(a.starts_with("x,y,label,tag\n"));
        assert!(a.contains("0.5,-0.25,3,memory"));
        let lines: Vec<&str> = a.trim_end().lines().collect();
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn curves_csv_lists_stages() {
        let records = [
            record(1, 0.5, &[(0, 0.5)], None),
            record(2, 0.25, &[(0, 0.25), (1, 0.25)], Some(0.25)),
        ];
        let csv = curves_csv(&records);
        assert_eq!(csv, "stage,accuracy\n1,0.5\n2,0.25\n");
    }
}
