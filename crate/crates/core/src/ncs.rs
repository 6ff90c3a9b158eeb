//! Negative class sub-sampling.
//!
//! Each iteration restricts the classifier to the batch's positive classes
//! plus a uniform sample of negatives, so that the selected set has
//! `max(1, round(C·r))` entries (or more, if the batch holds more distinct
//! positives). Gradients are scattered back to exactly those columns.

use std::collections::HashMap;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::losses::ClassifierBank;
use crate::rng::{self, DetRng, RngState};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    global_ids: Vec<usize>,
    local_of_global: HashMap<usize, usize>,
    ratio: f64,
    /// Generator state before this set was drawn; `None` for a full set.
    seed_state: Option<RngState>,
}

/// `max(1, round(C·r))`.
pub fn sampled_count(classes: usize, ratio: f64) -> usize {
    ((classes as f64 * ratio).round() as usize).max(1)
}

impl SampleSet {
    fn from_sorted(global_ids: Vec<usize>, ratio: f64, seed_state: Option<RngState>) -> Self {
        let local_of_global = global_ids.iter().enumerate().map(|(l, &g)| (g, l)).collect();
        SampleSet {
            global_ids,
            local_of_global,
            ratio,
            seed_state,
        }
    }

    /// Every class, in order.
    pub fn full(classes: usize) -> Self {
        Self::from_sorted((0..classes).collect(), 1.0, None)
    }

    /// Arbitrary explicit selection; ids are sorted and deduplicated.
    pub fn from_ids(mut ids: Vec<usize>, classes: usize) -> Result<Self> {
        ids.sort_unstable();
        ids.dedup();
        if let Some(&bad) = ids.iter().find(|&&i| i >= classes) {
            return Err(Error::OutOfRange {
                what: "classes",
                index: bad,
                len: classes,
            });
        }
        let ratio = ids.len() as f64 / classes as f64;
        Ok(Self::from_sorted(ids, ratio, None))
    }

    pub fn global_ids(&self) -> &[usize] {
        &self.global_ids
    }

    pub fn len(&self) -> usize {
        self.global_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global_ids.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn seed_state(&self) -> Option<&RngState> {
        self.seed_state.as_ref()
    }

    pub fn local(&self, global: usize) -> Option<usize> {
        self.local_of_global.get(&global).copied()
    }

    pub fn contains(&self, global: usize) -> bool {
        self.local_of_global.contains_key(&global)
    }

    /// Local column of each label; errors if a positive is missing.
    pub fn label_columns(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&y| {
                self.local(y)
                    .ok_or_else(|| Error::State(format!("positive class {y} missing from sample set")))
            })
            .collect()
    }
}

/// Draws the per-iteration class subset for a batch.
pub fn sample(classes: usize, ratio: f64, batch_labels: &[usize], rng: &mut DetRng) -> Result<SampleSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::domain("ncs sample", format!("ratio {ratio} outside (0, 1]")));
    }
    if let Some(&bad) = batch_labels.iter().find(|&&y| y >= classes) {
        return Err(Error::OutOfRange {
            what: "classes",
            index: bad,
            len: classes,
        });
    }
    if ratio == 1.0 {
        return Ok(SampleSet::full(classes));
    }
    let state = rng::snapshot(rng);
    let mut positives: Vec<usize> = batch_labels.to_vec();
    positives.sort_unstable();
    positives.dedup();

    let target = sampled_count(classes, ratio).max(positives.len());
    let need = target - positives.len();
    let mut ids = positives.clone();
    if need > 0 {
        let mut is_pos = vec![false; classes];
        positives.iter().for_each(|&p| is_pos[p] = true);
        let candidates: Vec<usize> = (0..classes).filter(|&c| !is_pos[c]).collect();
        let take = need.min(candidates.len());
        ids.extend(
            index::sample(rng, candidates.len(), take)
                .into_iter()
                .map(|i| candidates[i]),
        );
        ids.sort_unstable();
    }
    Ok(SampleSet::from_sorted(ids, ratio, Some(state)))
}

/// Columns of `bank` selected by `set`, as a `d×|set|` matrix.
pub fn gather_columns(bank: &ClassifierBank, set: &SampleSet) -> Result<Tensor> {
    let (d, c) = (bank.dim(), bank.classes());
    let k = set.len();
    let w = bank.weights().data();
    let mut out = vec![0.0; d * k];
    for (l, &gid) in set.global_ids().iter().enumerate() {
        if gid >= c {
            return Err(Error::OutOfRange {
                what: "classifier columns",
                index: gid,
                len: c,
            });
        }
        for r in 0..d {
            out[r * k + l] = w[r * c + gid];
        }
    }
    Tensor::matrix(d, k, out)
}

/// Adjoint of [`gather_columns`]: unselected columns receive exact zeros.
pub fn scatter_gradients(grad_sub: &Tensor, set: &SampleSet, classes: usize) -> Result<Tensor> {
    let (d, k) = grad_sub.dims2();
    if k != set.len() || grad_sub.shape().len() != 2 {
        return Err(Error::Shape {
            op: "scatter_gradients",
            lhs: grad_sub.shape().to_vec(),
            rhs: vec![set.len()],
        });
    }
    let mut full = vec![0.0; d * classes];
    for (l, &gid) in set.global_ids().iter().enumerate() {
        if gid >= classes {
            return Err(Error::OutOfRange {
                what: "classes",
                index: gid,
                len: classes,
            });
        }
        for r in 0..d {
            full[r * classes + gid] = grad_sub.data()[r * k + l];
        }
    }
    Tensor::matrix(d, classes, full)
}

/// Gathered columns as a trainable leaf of `g`.
pub fn bind_columns(g: &mut Graph, bank: &ClassifierBank, set: &SampleSet) -> Result<Var> {
    Ok(g.param(gather_columns(bank, set)?))
}
