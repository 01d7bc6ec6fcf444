use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Cumulative matrix-product FLOP count, broken down by tag.
///
/// `total` always equals the sum of `per_tag`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    total: u64,
    per_tag: BTreeMap<String, u64>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, tag: &str, flops: u64) {
        self.total += flops;
        *self.per_tag.entry(tag.to_string()).or_insert(0) += flops;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn per_tag(&self) -> &BTreeMap<String, u64> {
        &self.per_tag
    }

    pub fn get(&self, tag: &str) -> u64 {
        self.per_tag.get(tag).copied().unwrap_or(0)
    }

    /// Sum over every tag starting with `prefix`.
    pub fn sum_prefix(&self, prefix: &str) -> u64 {
        self.per_tag
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .sum()
    }

    /// Sum over every tag ending with `suffix`.
    pub fn sum_suffix(&self, suffix: &str) -> u64 {
        self.per_tag
            .iter()
            .filter(|(k, _)| k.ends_with(suffix))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (k, v) in &other.per_tag {
            self.record(k, *v);
        }
    }
}
