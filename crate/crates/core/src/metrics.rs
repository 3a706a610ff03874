use alloc::vec::Vec;

use crate::eviction::Policy;

/// Bytes per cached scalar in the reference engine (`f64`).
pub const BYTES_PER_SCALAR: usize = 8;

/// Summary of one generation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub policy: Policy,
    pub rho: f64,
    pub tau: f64,
    pub r_s: f64,
    pub buffer: usize,
    pub window: usize,
    pub seed: u64,
    pub steps: usize,
    /// Tokens held per head at steady state (after the last cache update).
    pub retained_per_head: Vec<usize>,
    /// Length an uncompressed cache would have at the end of the run.
    pub full_tokens: usize,
    pub head_dim: usize,
    /// Mean squared attention-output error against a full-cache shadow run.
    pub output_mse_vs_full: Option<f64>,
    pub per_head_mse: Option<Vec<f64>>,
    pub grouping_accuracy: Option<f64>,
    pub local_head_fraction: Option<f64>,
    /// Cache length of every head after every step (`[head][step]`).
    pub retained_curve: Vec<Vec<usize>>,
}

impl RunMetrics {
    pub fn retained_total(&self) -> usize {
        self.retained_per_head.iter().sum()
    }

    pub fn retained_tokens_mean(&self) -> f64 {
        if self.retained_per_head.is_empty() {
            return 0.0;
        }
        self.retained_total() as f64 / self.retained_per_head.len() as f64
    }

    /// `retained × 2 (K and V) × d × bytes_per_scalar`, summed over heads.
    pub fn simulated_memory_bytes(&self) -> usize {
        self.retained_total() * 2 * self.head_dim * BYTES_PER_SCALAR
    }

    pub fn full_memory_bytes(&self) -> usize {
        self.full_tokens * self.retained_per_head.len() * 2 * self.head_dim * BYTES_PER_SCALAR
    }

    /// `1 − retained / full`.
    pub fn memory_saving_fraction(&self) -> f64 {
        let full = self.full_tokens * self.retained_per_head.len();
        if full == 0 {
            return 0.0;
        }
        1.0 - self.retained_total() as f64 / full as f64
    }
}
