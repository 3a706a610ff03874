//! In-memory attention trace recorded during a generation run.
//!
//! Binary encoding lives in the `headkv` crate.

use alloc::vec::Vec;

use crate::cache::{GridSpec, HeadLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub layout: HeadLayout,
    pub grid: GridSpec,
    pub seed: u64,
}

/// Attention distribution of one head at one step, over the cache rows in
/// cache order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttention {
    pub positions: Vec<usize>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadStep {
    pub query: Vec<f64>,
    pub cache_len: usize,
    pub attention: Option<HeadAttention>,
}

/// One decoded visual token; `heads` is layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Index of the visual token (0-based, excluding the conditional prefix).
    pub step: usize,
    pub heads: Vec<HeadStep>,
}

impl StepRecord {
    /// Absolute stream position of this step's query.
    pub fn query_position(&self, grid: &GridSpec) -> usize {
        grid.conditional_len + self.step
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
}

impl AttentionTrace {
    pub fn new(header: TraceHeader) -> Self {
        Self { header, steps: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, step: usize) -> Option<&StepRecord> {
        // Steps are recorded in increasing order.
        self.steps
            .binary_search_by_key(&step, |s| s.step)
            .ok()
            .map(|i| &self.steps[i])
    }

    /// Steps that carry attention distributions for every head.
    pub fn steps_with_attention(&self) -> impl Iterator<Item = &StepRecord> + '_ {
        self.steps.iter().filter(|s| s.heads.iter().all(|h| h.attention.is_some()))
    }
}
