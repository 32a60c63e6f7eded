//! Stratified k-fold partitioning with a stratified validation carve-out.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One item to partition. Items are stratified by `label`; within a label,
/// items are spread evenly across folds per `group` as well.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldItem {
    pub id: String,
    pub label: String,
    pub group: String,
}

impl FoldItem {
    pub fn new(id: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            group: String::new(),
        }
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = group.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl FoldSplit {
    pub fn train_set(&self) -> BTreeSet<&str> {
        self.train.iter().map(String::as_str).collect()
    }

    pub fn validation_set(&self) -> BTreeSet<&str> {
        self.validation.iter().map(String::as_str).collect()
    }

    pub fn test_set(&self) -> BTreeSet<&str> {
        self.test.iter().map(String::as_str).collect()
    }
}

/// Partition `items` into `k` folds whose test sets are disjoint and cover
/// every item, with per-label counts differing by at most one between folds.
///
/// From each fold's non-test items a `val_fraction` share is moved to
/// validation, stratified the same way. Deterministic in `seed`.
pub fn stratified_kfold(
    items: &[FoldItem],
    k: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::config(format!("k = {k}: need at least 2 folds")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::config(format!(
            "validation fraction {val_fraction} outside [0, 1)"
        )));
    }
    let mut seen = HashSet::with_capacity(items.len());
    for it in items {
        if !seen.insert(it.id.as_str()) {
            return Err(Error::config(format!("duplicate id {:?}", it.id)));
        }
    }

    // label -> group -> ids, all sorted so input order does not matter
    let mut strata: BTreeMap<&str, BTreeMap<&str, Vec<&str>>> = BTreeMap::new();
    for it in items {
        strata
            .entry(&it.label)
            .or_default()
            .entry(&it.group)
            .or_default()
            .push(&it.id);
    }
    for (label, groups) in &strata {
        let n: usize = groups.values().map(Vec::len).sum();
        if n < k {
            return Err(Error::config(format!(
                "class {label:?} has {n} items, fewer than k = {k}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: Vec<Vec<(&str, &str, &str)>> = vec![Vec::new(); k];
    // A running offset keeps total fold sizes within one of each other.
    let mut cursor = 0usize;
    for (label, groups) in &mut strata {
        for (group, ids) in groups.iter_mut() {
            ids.sort_unstable();
            ids.shuffle(&mut rng);
            for id in ids.iter() {
                assignment[cursor % k].push((id, label, group));
                cursor += 1;
            }
        }
    }

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let mut rest: BTreeMap<(&str, &str), Vec<&str>> = BTreeMap::new();
        for (g, members) in assignment.iter().enumerate() {
            if g == f {
                continue;
            }
            for &(id, label, group) in members {
                rest.entry((label, group)).or_default().push(id);
            }
        }
        let mut fold_rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(f as u64 + 1)));
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for ids in rest.values_mut() {
            ids.sort_unstable();
            ids.shuffle(&mut fold_rng);
            let n_val = (val_fraction * ids.len() as f64).round() as usize;
            let n_val = n_val.min(ids.len().saturating_sub(1));
            validation.extend(ids[..n_val].iter().map(|s| s.to_string()));
            train.extend(ids[n_val..].iter().map(|s| s.to_string()));
        }
        let mut test: Vec<String> = assignment[f].iter().map(|(id, _, _)| id.to_string()).collect();
        train.sort();
        validation.sort();
        test.sort();
        folds.push(FoldSplit {
            fold: f,
            train,
            validation,
            test,
        });
    }
    Ok(folds)
}
