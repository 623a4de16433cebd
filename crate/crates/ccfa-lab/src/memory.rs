//! Exemplar selection by herding and the cross-stage memory buffer.
//!
//! Herding is the greedy mean-matching rule: each pick minimizes the
//! distance between the running exemplar mean and the class feature mean.
//! The buffer keeps a fixed per-class budget and is append-only across
//! stages: once a class is herded its exemplar set never changes.

use crate::error::{Error, Result};
use crate::model::FeatureExtractor;
use crate::numerics::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Per-class exemplar indices into the originating task's training set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    /// class label -> row indices, in herding order.
    pub exemplars: BTreeMap<usize, Vec<usize>>,
    /// Per-class budget the buffer was built with.
    pub budget: usize,
    /// Last stage that touched the buffer.
    pub stage: usize,
}

impl MemoryBuffer {
    pub fn new(budget: usize) -> Self {
        assert!(budget >= 1);
        MemoryBuffer {
            exemplars: BTreeMap::new(),
            budget,
            stage: 0,
        }
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.exemplars.keys().copied()
    }

    pub fn total_exemplars(&self) -> usize {
        self.exemplars.values().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Greedy mean-matching selection over one class's feature rows.
///
/// Pick `t` is the candidate minimizing
/// `| mu - (phi(x) + sum of chosen) / t |` where `mu` is the class mean;
/// ties break toward the lower index. If the class has fewer than `m`
/// samples, all of them come back in herding order.
pub fn herding_select(features: &Matrix, m: usize) -> Result<Vec<usize>> {
    assert!(m >= 1);
    let n = features.rows();
    if n == 0 {
        return Err(Error::EmptyInput("herding candidates"));
    }
    let d = features.cols();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (acc, &v) in mean.iter_mut().zip(features.row(i)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }

    let take = m.min(n);
    let mut chosen: Vec<usize> = Vec::with_capacity(take);
    let mut used = vec![false; n];
    let mut running = vec![0.0; d];
    for t in 1..=take {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..n {
            if used[i] {
                continue;
            }
            let mut dist = 0.0;
            for k in 0..d {
                let candidate_mean = (running[k] + features.get(i, k)) / t as f64;
                let diff = mean[k] - candidate_mean;
                dist += diff * diff;
            }
            let better = match best {
                None => true,
                Some((bd, _)) => dist < bd,
            };
            if better {
                best = Some((dist, i));
            }
        }
        let (_, pick) = best.expect("unused candidate exists");
        used[pick] = true;
        for (acc, &v) in running.iter_mut().zip(features.row(pick)) {
            *acc += v;
        }
        chosen.push(pick);
    }
    Ok(chosen)
}

/// Add the new task's classes to the buffer, herding each class with the
/// given (end-of-stage) extractor. Existing entries are preserved verbatim.
pub fn update_buffer(
    buffer: &MemoryBuffer,
    task_features: &Matrix,
    task_labels: &[usize],
    extractor: &FeatureExtractor,
    m: usize,
    stage: usize,
) -> Result<MemoryBuffer> {
    let mut out = buffer.clone();
    out.budget = m;
    out.stage = stage;

    let mut new_classes: Vec<usize> = task_labels.to_vec();
    new_classes.sort_unstable();
    new_classes.dedup();
    for &class in &new_classes {
        if buffer.exemplars.contains_key(&class) {
            return Err(Error::ClassOverlap { class });
        }
    }

    for &class in &new_classes {
        let rows: Vec<usize> = (0..task_labels.len())
            .filter(|&i| task_labels[i] == class)
            .collect();
        let class_features = extractor.forward(&task_features.select_rows(&rows))?;
        let picks = herding_select(&class_features, m)?;
        out.exemplars
            .insert(class, picks.into_iter().map(|p| rows[p]).collect());
    }
    Ok(out)
}
