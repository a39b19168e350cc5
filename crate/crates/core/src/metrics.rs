//! Instrumentation counters keyed by stage and layer.
//!
//! Keys look like `stage1.scores`, `stage2.layer1.ssd_flops` or
//! `stage3.layer3.block_flops`. A registry belongs to one forward pass (or a
//! sequence of passes that should be summed) and is not shared across threads.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use crate::sparse::Mask;

#[derive(Debug, Default)]
pub struct Registry {
    counters: RefCell<BTreeMap<String, u64>>,
    log_masks: Cell<bool>,
    masks: RefCell<BTreeMap<(usize, usize), Vec<Mask>>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry that also keeps the per-sample masks of every layer.
    pub fn with_masks() -> Self {
        let r = Self::default();
        r.log_masks.set(true);
        r
    }

    pub fn logs_masks(&self) -> bool {
        self.log_masks.get()
    }

    /// Appends masks for `(stage, layer)`; successive batches concatenate.
    pub fn record_masks(&self, stage: usize, layer: usize, masks: &[Mask]) {
        if self.log_masks.get() {
            self.masks
                .borrow_mut()
                .entry((stage, layer))
                .or_default()
                .extend_from_slice(masks);
        }
    }

    pub fn masks(&self, stage: usize, layer: usize) -> Vec<Mask> {
        self.masks.borrow().get(&(stage, layer)).cloned().unwrap_or_default()
    }

    pub fn add(&self, key: impl Into<String>, amount: u64) {
        *self.counters.borrow_mut().entry(key.into()).or_insert(0) += amount;
    }

    pub fn get(&self, key: &str) -> u64 {
        self.counters.borrow().get(key).copied().unwrap_or(0)
    }

    /// Sum over keys ending in `suffix`, e.g. `"ssd_flops"`.
    pub fn total(&self, suffix: &str) -> u64 {
        self.counters
            .borrow()
            .iter()
            .filter(|(k, _)| k.ends_with(suffix))
            .map(|(_, &v)| v)
            .sum()
    }

    pub fn snapshot(&self) -> BTreeMap<String, u64> {
        self.counters.borrow().clone()
    }

    pub fn clear(&self) {
        self.counters.borrow_mut().clear();
        self.masks.borrow_mut().clear();
    }
}
