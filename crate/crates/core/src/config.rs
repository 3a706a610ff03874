use alloc::format;

use crate::cache::GridSpec;
use crate::{Error, Result};

/// Pipeline hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionConfig {
    /// Fraction of the `N` visual tokens each global head may retain.
    pub rho: f64,
    /// Attention mass a head must accumulate for classification.
    pub tau: f64,
    /// Fraction of the historical segment treated as long-range by STE.
    pub r_s: f64,
    /// Recent-window length `w`.
    pub window: usize,
    /// Update buffer length `P`; also the number of past queries kept.
    pub buffer: usize,
    /// Generated tokens before head grouping fires.
    pub prefill_threshold: usize,
    /// A head needing fewer tokens than this to reach `tau` is local.
    pub local_window_size: usize,
    /// Classify by majority vote over the buffered queries instead of the
    /// current query alone.
    pub majority_vote: bool,
    /// Experimental: re-run grouping every `n` cache updates.
    pub regroup_every: Option<usize>,
}

impl CompressionConfig {
    /// Defaults for a grid: `w` = two token rows, `P = w`, `τ = 0.9`,
    /// `r_s = 0.5`, `ρ = 1/4`, prefill 100 tokens (or `⌈N/6⌉` for grids
    /// larger than 1024 tokens, capped at `N/2` for tiny grids), local
    /// window = `w`.
    pub fn for_grid(grid: &GridSpec) -> Self {
        let window = 2 * grid.width;
        let n = grid.tokens();
        let prefill = if n <= 1024 { 100 } else { n.div_ceil(6) };
        // Small test grids would never reach 100 generated tokens.
        let prefill = if prefill > n / 2 { n / 2 } else { prefill };
        Self {
            rho: 0.25,
            tau: 0.9,
            r_s: 0.5,
            window,
            buffer: window,
            prefill_threshold: prefill.max(window),
            local_window_size: window,
            majority_vote: false,
            regroup_every: None,
        }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    /// `⌊ρ·N⌋`. A small epsilon absorbs representation error for fractions
    /// such as 1/6.
    pub fn global_budget(&self, grid: &GridSpec) -> usize {
        libm::floor(self.rho * grid.tokens() as f64 + 1e-9) as usize
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        grid.validate()?;
        let bad = |msg: alloc::string::String| Err(Error::InvalidConfig(msg));
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.r_s) {
            return bad(format!("r_s must lie in [0, 1], got {}", self.r_s));
        }
        if self.window == 0 || self.buffer == 0 || self.prefill_threshold == 0 || self.local_window_size == 0 {
            return bad("window, buffer, prefill_threshold and local_window_size must be positive".into());
        }
        if self.prefill_threshold < self.local_window_size {
            return bad(format!(
                "prefill_threshold ({}) must be at least local_window_size ({})",
                self.prefill_threshold, self.local_window_size
            ));
        }
        let budget = self.global_budget(grid);
        let mandatory = grid.conditional_len + self.window;
        if budget < mandatory {
            return bad(format!(
                "global budget floor(rho*N) = {budget} cannot hold conditional_len + window = {mandatory}"
            ));
        }
        if self.regroup_every == Some(0) {
            return bad("regroup_every must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(24, 24, 16, 32).unwrap()
    }

    #[test]
    fn defaults_follow_grid() {
        let c = CompressionConfig::for_grid(&grid());
        assert_eq!(c.window, 48);
        assert_eq!(c.buffer, 48);
        assert_eq!(c.prefill_threshold, 100);
        assert_eq!(c.local_window_size, 48);
        assert!(c.validate(&grid()).is_ok());

        let big = GridSpec::new(48, 49, 0, 8).unwrap();
        assert_eq!(CompressionConfig::for_grid(&big).prefill_threshold, 392);
    }

    #[test]
    fn budgets_for_standard_ratios() {
        let c = CompressionConfig::for_grid(&grid());
        let b: alloc::vec::Vec<usize> = [1.0 / 4.0, 1.0 / 6.0, 1.0 / 8.0]
            .iter()
            .map(|&r| c.with_rho(r).global_budget(&grid()))
            .collect();
        assert_eq!(b, [144, 96, 72]);
    }

    #[test]
    fn budget_must_fit_mandatory_segments() {
        let c = CompressionConfig::for_grid(&grid()).with_rho(1.0 / 16.0);
        let err = c.validate(&grid()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(ref m) if m.contains("global budget")));
    }

    #[test]
    fn rejects_out_of_range_values() {
        let g = grid();
        let base = CompressionConfig::for_grid(&g);
        assert!(CompressionConfig { tau: 1.0, ..base }.validate(&g).is_err());
        assert!(CompressionConfig { rho: 0.0, ..base }.validate(&g).is_err());
        assert!(CompressionConfig { r_s: 1.5, ..base }.validate(&g).is_err());
        assert!(CompressionConfig { buffer: 0, ..base }.validate(&g).is_err());
        assert!(CompressionConfig { prefill_threshold: 10, ..base }.validate(&g).is_err());
    }
}
