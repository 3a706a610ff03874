//! Parallel sweeps over `(seed, policy, rho)`. Every worker owns its own
//! pipeline; results come back in sweep order regardless of scheduling.

use std::time::Instant;

use anyhow::Context;
use headkv_core::pipeline::{run_generation, BudgetPlan, RunOptions, RunOutcome};
use headkv_core::synth::SyntheticModel;
use headkv_core::{CompressionConfig, HeadClass, Policy};
use rayon::prelude::*;

use crate::config_file::Settings;
use crate::report::MetricsRow;

pub const THREADS_ENV: &str = "HEADKV_THREADS";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunPoint {
    pub seed: u64,
    pub policy: Policy,
    pub rho: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub point: RunPoint,
    pub config: CompressionConfig,
    pub outcome: RunOutcome,
    pub runtime_ms: f64,
    /// Broken budget or losslessness invariants; empty on success.
    pub violations: Vec<String>,
}

impl RunResult {
    pub fn row(&self) -> MetricsRow {
        MetricsRow::new(&self.outcome.metrics, self.runtime_ms)
    }
}

/// Seed-major, then policy, then rho.
pub fn points(s: &Settings) -> Vec<RunPoint> {
    let mut out = Vec::new();
    for &seed in &s.seeds {
        for &policy in &s.policies {
            for &rho in &s.rhos {
                out.push(RunPoint { seed, policy, rho });
            }
        }
    }
    out
}

/// Worker cap from `HEADKV_THREADS`; unset means one worker per core.
pub fn worker_threads() -> anyhow::Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a count"))?;
            anyhow::ensure!(n > 0, "{THREADS_ENV} must be positive");
            Ok(Some(n))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn run_options(s: &Settings, cfg: &CompressionConfig) -> anyhow::Result<RunOptions> {
    let steps = s.steps()?;
    let mut attention_steps = vec![cfg.prefill_threshold.saturating_sub(1)];
    if steps > 0 {
        attention_steps.push(steps - 1);
    }
    Ok(RunOptions {
        steps,
        shadow_full: s.shadow_full,
        attention_every: (s.attention_every > 0).then_some(s.attention_every),
        attention_steps,
    })
}

pub fn run_point(s: &Settings, point: RunPoint, timing: bool) -> anyhow::Result<RunResult> {
    let config = s.compression(point.rho)?;
    let model = SyntheticModel::new(s.synthetic(point.seed)?)?;
    let opts = run_options(s, &config)?;
    let start = Instant::now();
    let outcome = run_generation(&model, &config, point.policy, &opts)
        .with_context(|| format!("{} rho={} seed={}", point.policy, point.rho, point.seed))?;
    let runtime_ms = if timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    let violations = check_invariants(&outcome, &config, &s.grid()?, point.policy);
    Ok(RunResult { point, config, outcome, runtime_ms, violations })
}

pub fn run_sweep(s: &Settings, timing: bool) -> anyhow::Result<Vec<RunResult>> {
    let pts = points(s);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_threads()? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    pool.install(|| pts.par_iter().map(|&p| run_point(s, p, timing)).collect())
}

/// Budget bounds after every cache update and zero error for the lossless
/// policy.
pub fn check_invariants(
    outcome: &RunOutcome,
    cfg: &CompressionConfig,
    grid: &headkv_core::GridSpec,
    policy: Policy,
) -> Vec<String> {
    let mut bad = Vec::new();
    let Ok(budget) = BudgetPlan::new(grid, cfg) else {
        return vec!["invalid configuration".into()];
    };
    if policy != Policy::Full {
        let classes = outcome.grouping.as_ref().map(|g| g.classes.values().copied().collect::<Vec<_>>());
        for u in &outcome.updates {
            for (i, &len) in u.lengths.iter().enumerate() {
                let local = policy.is_head_aware()
                    && classes.as_ref().is_some_and(|c| c[i] == HeadClass::Local);
                let cap = if local { budget.local_budget } else { budget.global_budget };
                if len > cap {
                    bad.push(format!("step {}: head {i} holds {len} tokens, budget {cap}", u.step));
                }
            }
        }
    }
    if policy == Policy::Full && outcome.metrics.output_mse_vs_full.is_some_and(|e| e != 0.0) {
        bad.push("full policy deviates from the uncompressed decoder".into());
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Settings {
        Settings {
            height: 12,
            width: 12,
            conditional_len: 4,
            layers: 1,
            heads: 4,
            head_dim: 8,
            policies: vec![Policy::Ste, Policy::TopK],
            rhos: vec![0.25, 0.5],
            seeds: vec![1, 2],
            shadow_full: true,
            ..Settings::default()
        }
    }

    #[test]
    fn sweep_order_is_stable() {
        let s = small();
        let r = run_sweep(&s, false).unwrap();
        let got: Vec<_> = r.iter().map(|r| r.point).collect();
        assert_eq!(got, points(&s));
        assert_eq!(got[1], RunPoint { seed: 1, policy: Policy::Ste, rho: 0.5 });
        assert!(r.iter().all(|r| r.violations.is_empty() && r.runtime_ms == 0.0));
        let single = run_point(&s, got[5], false).unwrap();
        assert_eq!(single.row(), r[5].row());
    }

    #[test]
    fn invariants_flag_overfull_heads() {
        let s = small();
        let mut r = run_point(&s, RunPoint { seed: 1, policy: Policy::TopK, rho: 0.25 }, false).unwrap();
        r.outcome.updates[0].lengths[0] += 1;
        let g = s.grid().unwrap();
        assert_eq!(check_invariants(&r.outcome, &r.config, &g, Policy::TopK).len(), 1);
    }
}
