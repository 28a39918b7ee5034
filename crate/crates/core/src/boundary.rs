//! Task-change inference for streams without boundary labels.
//!
//! A change is declared when a batch contains a class the model has never
//! seen and at least `min_gap` batches have passed since the last change.
//! The first batch of a stream always counts as a change.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub const DEFAULT_MIN_GAP: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryState {
    pub seen_classes: BTreeSet<usize>,
    /// Batches observed since the last declared change.
    pub steps_since_change: usize,
    pub min_gap: usize,
}

impl Default for BoundaryState {
    fn default() -> Self {
        BoundaryState::new(DEFAULT_MIN_GAP)
    }
}

impl BoundaryState {
    pub fn new(min_gap: usize) -> Self {
        BoundaryState {
            seen_classes: BTreeSet::new(),
            steps_since_change: min_gap,
            min_gap,
        }
    }

    /// Feeds one batch and reports whether it starts a new task.
    pub fn observe(&mut self, labels: &[usize]) -> bool {
        let novel = labels.iter().any(|l| !self.seen_classes.contains(l));
        let changed = novel && self.steps_since_change >= self.min_gap;
        self.seen_classes.extend(labels.iter().copied());
        if changed {
            self.steps_since_change = 0;
        } else {
            self.steps_since_change = self.steps_since_change.saturating_add(1);
        }
        changed
    }
}

/// Indices of the batches at which a fresh detector declares a change.
pub fn detect<'a>(batches: impl IntoIterator<Item = &'a [usize]>, min_gap: usize) -> Vec<usize> {
    let mut state = BoundaryState::new(min_gap);
    batches
        .into_iter()
        .enumerate()
        .filter_map(|(i, labels)| state.observe(labels).then_some(i))
        .collect()
}
