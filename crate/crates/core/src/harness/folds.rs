use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::types::Label;

/// Participant-level fold assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, participant: &str) -> Option<usize> {
        self.assignments.get(participant).copied()
    }

    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignments.iter().filter(|(_, &f)| f == fold).map(|(p, _)| p.as_str()).collect()
    }
}

/// Shuffle each class with the seed, then deal MCI followed by NC
/// round-robin across the `k` folds.
pub fn make_folds(participants: &[(String, Label)], k: usize, seed_root: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if participants.len() < k {
        return Err(Error::Data(format!("{} participants cannot fill {k} folds", participants.len())));
    }
    let unique: BTreeSet<&str> = participants.iter().map(|p| p.0.as_str()).collect();
    if unique.len() != participants.len() {
        return Err(Error::Data("duplicate participant ids".into()));
    }
    let mut rng = seed::rng(seed_root, "folds");
    let mut order = Vec::with_capacity(participants.len());
    for class in [Label::Mci, Label::Nc] {
        let mut ids: Vec<&String> = participants.iter().filter(|p| p.1 == class).map(|p| &p.0).collect();
        if ids.is_empty() {
            return Err(Error::Data(format!("no {class} participants")));
        }
        ids.sort();
        ids.shuffle(&mut rng);
        order.extend(ids);
    }
    let assignments = order.into_iter().enumerate().map(|(i, id)| (id.clone(), i % k)).collect();
    Ok(FoldPlan { k, seed: seed_root, assignments })
}

/// Check that train and test participants are disjoint and cover the plan,
/// and that each test fold holds both classes when the counts allow it.
pub fn check_fold_hygiene(plan: &FoldPlan, labels: &BTreeMap<String, Label>, fold: usize, train: &[&str], test: &[&str]) -> Result<()> {
    let train_set: BTreeSet<&str> = train.iter().copied().collect();
    let test_set: BTreeSet<&str> = test.iter().copied().collect();
    if let Some(p) = train_set.intersection(&test_set).next() {
        return Err(Error::Contract(format!("participant {p} is in both train and test of fold {fold}")));
    }
    if test_set.iter().any(|p| plan.fold_of(p) != Some(fold)) || train_set.iter().any(|p| plan.fold_of(p) == Some(fold)) {
        return Err(Error::Contract(format!("fold {fold} split disagrees with the plan")));
    }
    if train_set.len() + test_set.len() != plan.assignments.len() {
        return Err(Error::Contract(format!("fold {fold} does not cover every participant")));
    }
    let count = |c: Label| labels.values().filter(|&&l| l == c).count();
    let both_possible = count(Label::Mci) >= plan.k && count(Label::Nc) >= plan.k;
    let has = |c: Label| test_set.iter().any(|p| labels.get(*p) == Some(&c));
    if both_possible && !(has(Label::Mci) && has(Label::Nc)) {
        return Err(Error::Contract(format!("test fold {fold} lacks a class")));
    }
    Ok(())
}
