//! Task streams: synthetic generation, class-order splitting, and feature
//! file I/O.
//!
//! Synthetic data lives on the unit sphere: class prototypes are random unit
//! vectors and samples are prototypes plus Gaussian noise of variance
//! `1/concentration`, re-normalized. That matches the rest of the pipeline,
//! which operates on unit-norm features throughout.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, NORM_EPS};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// A labeled feature set; labels index into `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledFeatures {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    fn select(&self, idx: &[usize]) -> LabeledFeatures {
        LabeledFeatures {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// One task: its label set plus train/test splits restricted to it.
#[derive(Debug, Clone)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: LabeledFeatures,
    pub test: LabeledFeatures,
}

/// Ordered tasks with pairwise-disjoint label sets.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub dim: usize,
    pub total_classes: usize,
}

impl TaskStream {
    /// Validates disjoint label sets and label membership.
    pub fn new(tasks: Vec<Task>, dim: usize, total_classes: usize) -> Result<Self> {
        let mut seen: Vec<usize> = Vec::new();
        for task in &tasks {
            for &c in &task.classes {
                if seen.contains(&c) {
                    return Err(Error::ClassOverlap { class: c });
                }
                seen.push(c);
            }
            for &l in task.train.labels.iter().chain(task.test.labels.iter()) {
                if !task.classes.contains(&l) {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        classes: task.classes.len(),
                    });
                }
            }
        }
        Ok(TaskStream {
            tasks,
            dim,
            total_classes,
        })
    }

    pub fn stages(&self) -> usize {
        self.tasks.len()
    }

    /// Union of test sets of tasks `0..=k`.
    pub fn cumulative_test(&self, k: usize) -> LabeledFeatures {
        let mut features = Matrix::zeros(0, self.dim);
        let mut labels = Vec::new();
        for task in &self.tasks[..=k] {
            features = if features.rows() == 0 {
                task.test.features.clone()
            } else {
                features.vstack(&task.test.features).expect("same dim")
            };
            labels.extend_from_slice(&task.test.labels);
        }
        LabeledFeatures {
            features,
            labels,
            num_classes: self.total_classes,
        }
    }
}

/// Synthetic cluster specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Angular concentration: sample noise has variance `1/concentration`
    /// per coordinate before re-normalization.
    pub concentration: f64,
}

/// Unit-sphere clusters. Prototypes and samples are drawn from independent
/// derived streams, so regenerating with the same seed is bit-identical.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<(LabeledFeatures, LabeledFeatures)> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    assert!(spec.concentration > 0.0);
    let root = Rng::new(seed);
    let mut proto_rng = root.derive("prototypes");
    let prototypes = proto_rng
        .gaussian_matrix(spec.classes, spec.dim)
        .row_normalize(NORM_EPS)
        .0;
    for a in 0..spec.classes {
        for b in (a + 1)..spec.classes {
            let same = prototypes
                .row(a)
                .iter()
                .zip(prototypes.row(b))
                .all(|(x, y)| x == y);
            assert!(!same, "degenerate prototype draw");
        }
    }

    let sigma = (1.0 / spec.concentration).sqrt();
    let sample_split = |tag: &str, per_class: usize| -> LabeledFeatures {
        let mut rng = root.derive(tag);
        let n = spec.classes * per_class;
        let mut data = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for class in 0..spec.classes {
            for _ in 0..per_class {
                for k in 0..spec.dim {
                    data.push(prototypes.get(class, k) + sigma * rng.standard_normal());
                }
                labels.push(class);
            }
        }
        let features = Matrix::from_vec(n, spec.dim, data)
            .expect("finite draws")
            .row_normalize(NORM_EPS)
            .0;
        LabeledFeatures {
            features,
            labels,
            num_classes: spec.classes,
        }
    };

    Ok((
        sample_split("train", spec.train_per_class),
        sample_split("test", spec.test_per_class),
    ))
}

/// Deterministic class permutation for stream ordering.
pub fn class_order_from_seed(total_classes: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..total_classes).collect();
    let mut rng = Rng::new(seed).derive("class-order");
    rng.shuffle(&mut order);
    order
}

/// Split a dataset into an initial task plus fixed-size increments along the
/// given class order. `initial + k * increment` must tile the class count.
pub fn split_stream(
    train: &LabeledFeatures,
    test: &LabeledFeatures,
    initial_task_size: usize,
    increment_size: usize,
    class_order: &[usize],
) -> Result<TaskStream> {
    let total = train.num_classes;
    if class_order.len() != total {
        return Err(Error::Config(format!(
            "class order has {} entries for {} classes",
            class_order.len(),
            total
        )));
    }
    if initial_task_size == 0 || initial_task_size > total {
        return Err(Error::Config("initial task size out of range".into()));
    }
    let remaining = total - initial_task_size;
    if remaining > 0 && (increment_size == 0 || !remaining.is_multiple_of(increment_size)) {
        return Err(Error::Config(format!(
            "initial {initial_task_size} + k * {increment_size} cannot tile {total} classes"
        )));
    }

    let mut groups: Vec<Vec<usize>> = vec![class_order[..initial_task_size].to_vec()];
    let mut pos = initial_task_size;
    while pos < total {
        groups.push(class_order[pos..pos + increment_size].to_vec());
        pos += increment_size;
    }

    let tasks = groups
        .into_iter()
        .map(|classes| {
            let pick = |set: &LabeledFeatures| {
                let idx: Vec<usize> = (0..set.len())
                    .filter(|&i| classes.contains(&set.labels[i]))
                    .collect();
                set.select(&idx)
            };
            Task {
                train: pick(train),
                test: pick(test),
                classes,
            }
        })
        .collect();

    TaskStream::new(tasks, train.dim(), total)
}

// ---------------------------------------------------------------------------
// Feature files
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"CCFA";
const FILE_VERSION: u16 = 1;

/// Binary layout: magic "CCFA" | version u16 | d u32 | n u64 | c u32 |
/// then n records of (label u32, d little-endian f32).
pub fn save_feature_file(set: &LabeledFeatures, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(18 + set.len() * (4 + set.dim() * 4));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    out.extend_from_slice(&(set.num_classes as u32).to_le_bytes());
    for i in 0..set.len() {
        out.extend_from_slice(&(set.labels[i] as u32).to_le_bytes());
        for &v in set.features.row(i) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_feature_file(path: &Path) -> Result<LabeledFeatures> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut offset = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if offset + n > bytes.len() {
            return Err(Error::FeatureFile(format!(
                "truncated at byte {} (needed {} more)",
                bytes.len(),
                offset + n - bytes.len()
            )));
        }
        let slice = &bytes[offset..offset + n];
        offset += n;
        Ok(slice)
    };

    let magic = take(4)?;
    if magic != MAGIC {
        return Err(Error::FeatureFile(format!(
            "bad magic {:?} (expected \"CCFA\")",
            magic
        )));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != FILE_VERSION {
        return Err(Error::FeatureFile(format!(
            "unsupported version {version} (expected {FILE_VERSION})"
        )));
    }
    let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;

    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for record in 0..n {
        let label = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if label >= c {
            return Err(Error::FeatureFile(format!(
                "record {record}: label {label} out of declared range {c}"
            )));
        }
        labels.push(label);
        for _ in 0..d {
            let v = f32::from_le_bytes(take(4)?.try_into().unwrap());
            data.push(v as f64);
        }
    }
    Ok(LabeledFeatures {
        features: Matrix::from_vec(n, d, data)?,
        labels,
        num_classes: c,
    })
}

/// CSV alternative with header `label,f0,...,f{d-1}`. Values are written at
/// `f32` precision with shortest round-trip formatting, so CSV and binary
/// encodings of the same data load identically.
pub fn save_feature_csv(set: &LabeledFeatures, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for k in 0..set.dim() {
        out.push_str(&format!(",f{k}"));
    }
    out.push('\n');
    for i in 0..set.len() {
        out.push_str(&set.labels[i].to_string());
        for &v in set.features.row(i) {
            out.push(',');
            out.push_str(&format!("{}", v as f32));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_feature_csv(path: &Path) -> Result<LabeledFeatures> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::FeatureFile("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") {
        return Err(Error::FeatureFile(format!(
            "CSV header must start with 'label', got {:?}",
            cols.first()
        )));
    }
    let d = cols.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::FeatureFile(format!(
                "line {}: {} fields, expected {}",
                lineno + 2,
                fields.len(),
                d + 1
            )));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| Error::FeatureFile(format!("line {}: bad label", lineno + 2)))?;
        labels.push(label);
        for f in &fields[1..] {
            let v: f32 = f
                .parse()
                .map_err(|_| Error::FeatureFile(format!("line {}: bad float", lineno + 2)))?;
            data.push(v as f64);
        }
    }
    let n = labels.len();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(LabeledFeatures {
        features: Matrix::from_vec(n, d, data)?,
        labels,
        num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            dim: 4,
            classes: 3,
            train_per_class: 10,
            test_per_class: 4,
            concentration: 20.0,
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let (a_train, a_test) = generate_synthetic(&spec(), 42).unwrap();
        let (b_train, b_test) = generate_synthetic(&spec(), 42).unwrap();
        assert!(a_train.features.bit_eq(&b_train.features));
        assert!(a_test.features.bit_eq(&b_test.features));
        assert_eq!(a_train.labels, b_train.labels);
    }

    #[test]
    fn rejects_single_class() {
        let mut s = spec();
        s.classes = 1;
        assert!(generate_synthetic(&s, 1).is_err());
    }

    #[test]
    fn high_concentration_stays_near_prototype() {
        let s = SyntheticSpec {
            dim: 8,
            classes: 4,
            train_per_class: 50,
            test_per_class: 1,
            concentration: 1e6,
        };
        let (train, _) = generate_synthetic(&s, 7).unwrap();
        // Recover prototypes from the same derived stream.
        let protos = Rng::new(7)
            .derive("prototypes")
            .gaussian_matrix(4, 8)
            .row_normalize(NORM_EPS)
            .0;
        for i in 0..train.len() {
            let p = protos.row(train.labels[i]);
            let cosine: f64 = train.features.row(i).iter().zip(p).map(|(a, b)| a * b).sum();
            let angle = cosine.clamp(-1.0, 1.0).acos();
            assert!(angle < 0.1, "sample {i} at angle {angle}");
        }
    }

    #[test]
    fn two_dimensional_points_are_plottable() {
        let s = SyntheticSpec {
            dim: 2,
            classes: 2,
            train_per_class: 3,
            test_per_class: 1,
            concentration: 10.0,
        };
        let (train, _) = generate_synthetic(&s, 3).unwrap();
        assert_eq!(train.features.cols(), 2);
        for i in 0..train.len() {
            assert!((train.features.row_norm(i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_10_into_5_plus_5x1() {
        let (train, test) = generate_synthetic(
            &SyntheticSpec {
                dim: 3,
                classes: 10,
                train_per_class: 2,
                test_per_class: 1,
                concentration: 10.0,
            },
            1,
        )
        .unwrap();
        let order: Vec<usize> = (0..10).collect();
        let stream = split_stream(&train, &test, 5, 1, &order).unwrap();
        assert_eq!(stream.stages(), 6);
        assert_eq!(stream.tasks[0].classes.len(), 5);
        for task in &stream.tasks[1..] {
            assert_eq!(task.classes.len(), 1);
        }
    }

    #[test]
    fn initial_equals_total_gives_single_task() {
        let (train, test) = generate_synthetic(&spec(), 2).unwrap();
        let order: Vec<usize> = (0..3).collect();
        let stream = split_stream(&train, &test, 3, 1, &order).unwrap();
        assert_eq!(stream.stages(), 1);
    }

    #[test]
    fn bad_tiling_is_rejected() {
        let (train, test) = generate_synthetic(&spec(), 2).unwrap();
        let order: Vec<usize> = (0..3).collect();
        assert!(split_stream(&train, &test, 2, 2, &order).is_err());
    }

    #[test]
    fn permutations_only_reorder_task_composition() {
        let (train, test) = generate_synthetic(
            &SyntheticSpec {
                dim: 3,
                classes: 6,
                train_per_class: 2,
                test_per_class: 1,
                concentration: 10.0,
            },
            1,
        )
        .unwrap();
        for seed in [1u64, 2, 3] {
            let order = class_order_from_seed(6, seed);
            let stream = split_stream(&train, &test, 2, 2, &order).unwrap();
            assert_eq!(stream.stages(), 3);
            for task in &stream.tasks {
                assert_eq!(task.classes.len(), 2);
            }
        }
    }

    #[test]
    fn cumulative_test_is_union_without_duplicates() {
        let (train, test) = generate_synthetic(&spec(), 2).unwrap();
        let order: Vec<usize> = (0..3).collect();
        let stream = split_stream(&train, &test, 1, 1, &order).unwrap();
        let cum = stream.cumulative_test(2);
        assert_eq!(cum.len(), test.len());
        let total: usize = (0..=2).map(|k| stream.tasks[k].test.len()).sum();
        assert_eq!(cum.len(), total);
    }

    #[test]
    fn binary_round_trip_is_byte_identical() {
        let (train, _) = generate_synthetic(&spec(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_feature_file(&train, &p1).unwrap();
        let loaded = load_feature_file(&p1).unwrap();
        save_feature_file(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.labels, train.labels);
    }

    #[test]
    fn truncated_file_names_offset() {
        let (train, _) = generate_synthetic(&spec(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        save_feature_file(&train, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        let err = load_feature_file(&p).unwrap_err();
        assert!(err.to_string().contains("truncated at byte"), "{err}");
    }

    #[test]
    fn bad_magic_and_version_are_distinct_errors() {
        let (train, _) = generate_synthetic(&spec(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_feature_file(&train, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_feature_file(&p)
            .unwrap_err()
            .to_string()
            .contains("magic"));

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'C';
        bytes[4] = 9; // version
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_feature_file(&p)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn csv_and_binary_load_identically() {
        let (train, _) = generate_synthetic(&spec(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let pb = dir.path().join("x.bin");
        let pc = dir.path().join("x.csv");
        save_feature_file(&train, &pb).unwrap();
        save_feature_csv(&train, &pc).unwrap();
        let from_bin = load_feature_file(&pb).unwrap();
        let from_csv = load_feature_csv(&pc).unwrap();
        assert_eq!(from_bin.labels, from_csv.labels);
        assert!(from_bin.features.bit_eq(&from_csv.features));
    }
}
