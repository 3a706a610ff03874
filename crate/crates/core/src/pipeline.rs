//! The compression loop: prefill, one-shot head grouping, then buffered
//! cache updates with head-aware budgets.
//!
//! Each generated token is appended to every head's cache before the head
//! attends, so a query always sees itself. Grouping fires on the step at
//! which `prefill_threshold` tokens have been generated; from then on every
//! `P` generated tokens trigger one [`Pipeline::compress_update`].

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::attention::{attend, AttentionResult};
use crate::cache::{GridSpec, HeadAddr, HeadCache, HeadClass, HeadLayout, TokenRecord};
use crate::config::CompressionConfig;
use crate::eviction::{self, EvictionRequest, Policy};
use crate::grouping::{classify_cache, GroupingReport};
use crate::metrics::RunMetrics;
use crate::trace::{AttentionTrace, HeadAttention, HeadStep, StepRecord, TraceHeader};
use crate::{Error, Result};

/// Query, key and value of one head for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadKvq {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

/// A stream of per-head projections, e.g. a synthetic model or a recorded
/// real-model trace.
pub trait ModelSource {
    fn grid(&self) -> GridSpec;
    fn layout(&self) -> HeadLayout;
    fn seed(&self) -> u64;
    /// Projections of every head (layer-major) at stream `position`;
    /// positions `0..conditional_len` are the conditional prefix.
    fn emit(&self, position: usize) -> Vec<HeadKvq>;
    fn ground_truth(&self) -> Option<BTreeMap<HeadAddr, HeadClass>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Grouped,
}

/// Per-head token budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetPlan {
    /// `⌊ρ·N⌋`, counting conditional and recent tokens.
    pub global_budget: usize,
    pub global_historical_target: usize,
    /// `conditional_len + w`.
    pub local_budget: usize,
}

impl BudgetPlan {
    pub fn new(grid: &GridSpec, cfg: &CompressionConfig) -> Result<Self> {
        cfg.validate(grid)?;
        let global_budget = cfg.global_budget(grid);
        let local_budget = grid.conditional_len + cfg.window;
        Ok(Self { global_budget, global_historical_target: global_budget - local_budget, local_budget })
    }
}

#[derive(Debug, Clone)]
pub struct HeadState {
    pub cache: HeadCache,
    pub class: HeadClass,
    /// Cumulative attention per cached position (H2O only).
    accumulated: BTreeMap<usize, f64>,
}

impl HeadState {
    pub fn accumulated_attention(&self, position: usize) -> Option<f64> {
        self.accumulated.get(&position).copied()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineState {
    /// Number of generated tokens so far.
    pub step: usize,
    pub heads: Vec<HeadState>,
    pub buffer_fill: usize,
    pub phase: Phase,
    pub updates: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateSummary {
    /// Generated-token count at which the update ran.
    pub step: usize,
    /// Cache length of every head after the update.
    pub lengths: Vec<usize>,
    pub evicted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub outputs: Vec<AttentionResult>,
    /// Positions of the attended cache rows per head, when requested via
    /// [`Pipeline::capture_positions`].
    pub positions: Option<Vec<Vec<usize>>>,
    /// Set on the step at which grouping fired (or re-fired).
    pub grouping: Option<GroupingReport>,
    pub update: Option<UpdateSummary>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    grid: GridSpec,
    layout: HeadLayout,
    cfg: CompressionConfig,
    policy: Policy,
    budget: BudgetPlan,
    state: PipelineState,
    grouping: Option<GroupingReport>,
    capture_positions: bool,
}

impl Pipeline {
    pub fn new(grid: GridSpec, layout: HeadLayout, cfg: CompressionConfig, policy: Policy) -> Result<Self> {
        let budget = BudgetPlan::new(&grid, &cfg)?;
        if layout.is_empty() {
            return Err(Error::InvalidConfig("at least one layer and head required".into()));
        }
        let heads = (0..layout.len())
            .map(|_| {
                Ok(HeadState {
                    cache: HeadCache::new(grid.head_dim, cfg.window, cfg.buffer)?,
                    class: HeadClass::Undecided,
                    accumulated: BTreeMap::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid,
            layout,
            cfg,
            policy,
            budget,
            state: PipelineState { step: 0, heads, buffer_fill: 0, phase: Phase::Prefill, updates: 0 },
            grouping: None,
            capture_positions: false,
        })
    }

    /// Whether subsequent decode steps report the attended positions.
    pub fn capture_positions(&mut self, on: bool) {
        self.capture_positions = on;
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn config(&self) -> &CompressionConfig {
        &self.cfg
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn budget(&self) -> BudgetPlan {
        self.budget
    }

    pub fn state(&self) -> &PipelineState {
        &self.state
    }

    pub fn grouping(&self) -> Option<&GroupingReport> {
        self.grouping.as_ref()
    }

    pub fn head(&self, addr: HeadAddr) -> &HeadState {
        &self.state.heads[self.layout.index(addr)]
    }

    pub fn cache_lengths(&self) -> Vec<usize> {
        self.state.heads.iter().map(|h| h.cache.len()).collect()
    }

    fn next_position(&self) -> usize {
        self.grid.conditional_len + self.state.step
    }

    fn check_width(&self, kvq: &[HeadKvq]) -> Result<()> {
        if kvq.len() != self.layout.len() {
            return Err(Error::DimensionMismatch { expected: self.layout.len(), found: kvq.len() });
        }
        Ok(())
    }

    /// Feeds conditional token `position` (must be `< conditional_len`, in
    /// order) into every head.
    pub fn push_conditional(&mut self, position: usize, kvq: Vec<HeadKvq>) -> Result<()> {
        self.check_width(&kvq)?;
        if position >= self.grid.conditional_len || self.state.step > 0 {
            return Err(Error::Phase("conditional tokens precede generation"));
        }
        for (h, t) in self.state.heads.iter_mut().zip(kvq) {
            h.cache.push_conditional(TokenRecord::new(position, t.k, t.v))?;
            h.cache.push_query(t.q)?;
        }
        Ok(())
    }

    /// A decode step restricted to the prefill phase.
    pub fn prefill_step(&mut self, kvq: Vec<HeadKvq>) -> Result<StepOutput> {
        if self.state.phase != Phase::Prefill {
            return Err(Error::Phase("prefill is over"));
        }
        self.decode_step(kvq)
    }

    /// Appends the new token to every head, attends over the (possibly
    /// compressed) caches, and runs grouping or a cache update when due.
    pub fn decode_step(&mut self, kvq: Vec<HeadKvq>) -> Result<StepOutput> {
        self.check_width(&kvq)?;
        if self.state.step >= self.grid.tokens() {
            return Err(Error::Phase("all visual tokens have been generated"));
        }
        let position = self.next_position();
        let track = self.policy.needs_accumulated_attention();
        let mut outputs = Vec::with_capacity(kvq.len());
        let mut positions = self.capture_positions.then(|| Vec::with_capacity(kvq.len()));
        for (h, t) in self.state.heads.iter_mut().zip(kvq) {
            h.cache.append_token(TokenRecord::new(position, t.k, t.v))?;
            let view = h.cache.view();
            let result = attend(&t.q, &view.keys, &view.values)?;
            if track {
                for (&p, &w) in view.positions.iter().zip(&result.probs) {
                    *h.accumulated.entry(p).or_insert(0.0) += w;
                }
            }
            h.cache.push_query(t.q)?;
            outputs.push(result);
            if let Some(p) = positions.as_mut() {
                p.push(view.positions);
            }
        }
        self.state.step += 1;

        let mut out = StepOutput { outputs, positions, grouping: None, update: None };
        match self.state.phase {
            Phase::Prefill => {
                if self.state.step == self.cfg.prefill_threshold {
                    out.grouping = Some(self.fire_grouping()?);
                }
            }
            Phase::Grouped => {
                self.state.buffer_fill += 1;
                if self.state.buffer_fill == self.cfg.buffer {
                    let regroup = self
                        .cfg
                        .regroup_every
                        .is_some_and(|n| (self.state.updates + 1).is_multiple_of(n));
                    if regroup {
                        out.grouping = Some(self.classify_all()?);
                    }
                    out.update = Some(self.compress_update()?);
                }
            }
        }
        Ok(out)
    }

    fn classify_all(&mut self) -> Result<GroupingReport> {
        let mut report = GroupingReport::default();
        for (i, h) in self.state.heads.iter_mut().enumerate() {
            let addr = self.layout.addr(i);
            let q = h.cache.latest_query().ok_or(Error::MissingQuery(addr))?;
            let (class, m) = classify_cache(&h.cache, q, &self.cfg)?;
            h.class = class;
            report.classes.insert(addr, class);
            report.required_counts.insert(addr, m);
        }
        self.grouping = Some(report.clone());
        Ok(report)
    }

    /// Classifies every head from its current query. Under a head-aware
    /// policy local heads drop their historical segment immediately.
    pub fn fire_grouping(&mut self) -> Result<GroupingReport> {
        if self.state.phase != Phase::Prefill {
            return Err(Error::Phase("head grouping already fired"));
        }
        if self.state.step < self.cfg.prefill_threshold {
            return Err(Error::Phase("cache has not reached the prefill threshold"));
        }
        let report = self.classify_all()?;
        if self.policy.is_head_aware() {
            for h in &mut self.state.heads {
                if h.class == HeadClass::Local {
                    drop_historical(h);
                }
            }
        }
        self.state.phase = Phase::Grouped;
        self.state.buffer_fill = 0;
        Ok(report)
    }

    /// Brings every head back within its budget.
    pub fn compress_update(&mut self) -> Result<UpdateSummary> {
        if self.state.phase != Phase::Grouped {
            return Err(Error::Phase("cache updates start after head grouping"));
        }
        let mut evicted = Vec::with_capacity(self.state.heads.len());
        for h in &mut self.state.heads {
            let before = h.cache.len();
            if self.policy == Policy::Full {
                // Nothing to do.
            } else if self.policy.is_head_aware() && h.class == HeadClass::Local {
                drop_historical(h);
            } else {
                evict_to_target(h, self.policy, self.budget.global_historical_target, self.cfg.r_s)?;
            }
            evicted.push(before - h.cache.len());
        }
        self.state.buffer_fill = 0;
        self.state.updates += 1;
        Ok(UpdateSummary { step: self.state.step, lengths: self.cache_lengths(), evicted })
    }
}

fn drop_historical(h: &mut HeadState) {
    for r in h.cache.historical() {
        h.accumulated.remove(&r.position);
    }
    h.cache.clear_historical();
}

fn evict_to_target(h: &mut HeadState, policy: Policy, target: usize, r_s: f64) -> Result<()> {
    let t = h.cache.historical_len();
    let m = t.saturating_sub(target);
    if m == 0 {
        return Ok(());
    }
    let keys = h.cache.historical_keys();
    let positions = h.cache.historical_positions();
    let q_past = h.cache.query_matrix();
    let accumulated: Option<Vec<f64>> = policy.needs_accumulated_attention().then(|| {
        positions.iter().map(|p| h.accumulated.get(p).copied().unwrap_or(0.0)).collect()
    });
    let req = EvictionRequest { historical_keys: &keys, historical_positions: &positions, q_past: &q_past, evict_count: m };
    let decision = eviction::select(policy, &req, accumulated.as_deref(), r_s)?;
    for &i in &decision.evicted_indices {
        h.accumulated.remove(&positions[i]);
    }
    h.cache.evict_historical(&decision.evicted_indices)
}

/// What to record during [`run_generation`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Visual tokens to generate (`≤ N`).
    pub steps: usize,
    /// Run a full-cache pipeline alongside and measure output error.
    pub shadow_full: bool,
    /// Record full attention distributions every `n` steps.
    pub attention_every: Option<usize>,
    /// Additional steps at which to record attention distributions.
    pub attention_steps: Vec<usize>,
}

impl RunOptions {
    pub fn steps(steps: usize) -> Self {
        Self { steps, ..Self::default() }
    }

    fn records_attention(&self, step: usize) -> bool {
        self.attention_every.is_some_and(|n| n > 0 && step.is_multiple_of(n)) || self.attention_steps.contains(&step)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: AttentionTrace,
    pub metrics: RunMetrics,
    pub grouping: Option<GroupingReport>,
    pub updates: Vec<UpdateSummary>,
}

fn squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Full loop over a model source: conditional prefix, prefill, grouping and
/// compressed decoding.
pub fn run_generation<M: ModelSource + ?Sized>(
    model: &M,
    cfg: &CompressionConfig,
    policy: Policy,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    let grid = model.grid();
    let layout = model.layout();
    if opts.steps > grid.tokens() {
        return Err(Error::InvalidConfig(alloc::format!(
            "steps ({}) exceed the number of visual tokens ({})",
            opts.steps,
            grid.tokens()
        )));
    }
    let mut pipe = Pipeline::new(grid, layout, *cfg, policy)?;
    let mut shadow = if opts.shadow_full {
        Some(Pipeline::new(grid, layout, *cfg, Policy::Full)?)
    } else {
        None
    };
    for pos in 0..grid.conditional_len {
        let kvq = model.emit(pos);
        if let Some(s) = shadow.as_mut() {
            s.push_conditional(pos, kvq.clone())?;
        }
        pipe.push_conditional(pos, kvq)?;
    }

    let mut trace = AttentionTrace::new(TraceHeader { layout, grid, seed: model.seed() });
    let mut updates = Vec::new();
    let mut sq_err = alloc::vec![0.0; layout.len()];
    let mut curve: Vec<Vec<usize>> = (0..layout.len()).map(|_| Vec::with_capacity(opts.steps)).collect();

    for step in 0..opts.steps {
        let kvq = model.emit(grid.conditional_len + step);
        let queries: Vec<Vec<f64>> = kvq.iter().map(|t| t.q.clone()).collect();
        let reference = match shadow.as_mut() {
            Some(s) => Some(s.decode_step(kvq.clone())?),
            None => None,
        };
        let record = opts.records_attention(step);
        pipe.capture_positions(record);
        let out = pipe.decode_step(kvq)?;
        if let Some(r) = &reference {
            for ((acc, a), b) in sq_err.iter_mut().zip(&out.outputs).zip(&r.outputs) {
                *acc += squared_error(&a.output, &b.output);
            }
        }
        let mut positions = out.positions.map(Vec::into_iter);
        let heads = out
            .outputs
            .into_iter()
            .zip(queries)
            .map(|(o, query)| {
                let cache_len = o.probs.len();
                let attention = positions
                    .as_mut()
                    .and_then(Iterator::next)
                    .map(|positions| HeadAttention { positions, probs: o.probs });
                HeadStep { query, cache_len, attention }
            })
            .collect();
        trace.steps.push(StepRecord { step, heads });
        if let Some(u) = out.update {
            updates.push(u);
        }
        for (c, h) in curve.iter_mut().zip(&pipe.state.heads) {
            c.push(h.cache.len());
        }
    }

    let retained_per_head = match (policy, updates.last()) {
        (Policy::Full, _) | (_, None) => pipe.cache_lengths(),
        (_, Some(u)) => u.lengths.clone(),
    };
    let truth = model.ground_truth();
    let grouping = pipe.grouping.clone();
    let per_head_mse =
        shadow.as_ref().map(|_| sq_err.iter().map(|e| e / opts.steps.max(1) as f64).collect::<Vec<f64>>());
    let metrics = RunMetrics {
        policy,
        rho: cfg.rho,
        tau: cfg.tau,
        r_s: cfg.r_s,
        buffer: cfg.buffer,
        window: cfg.window,
        seed: model.seed(),
        steps: opts.steps,
        retained_per_head,
        full_tokens: grid.conditional_len + opts.steps,
        head_dim: grid.head_dim,
        output_mse_vs_full: per_head_mse.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64),
        per_head_mse,
        grouping_accuracy: match (&grouping, &truth) {
            (Some(g), Some(t)) => Some(g.accuracy(t)),
            _ => None,
        },
        local_head_fraction: grouping.as_ref().map(GroupingReport::local_fraction),
        retained_curve: curve,
    };
    Ok(RunOutcome { trace, metrics, grouping, updates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attend;
    use crate::matrix::Matrix;
    use crate::synth::{HeadMix, SyntheticModel, SyntheticSpec};
    use alloc::vec;

    // 12×12 grid, 4 conditional tokens: w = P = 24, prefill 72, ρ = 1/4 → 36.
    fn small(mix: HeadMix, seed: u64) -> SyntheticModel {
        let grid = GridSpec::new(12, 12, 4, 8).unwrap();
        SyntheticModel::new(SyntheticSpec::planned(grid, HeadLayout::new(2, 4), seed, mix)).unwrap()
    }

    fn pipeline(model: &SyntheticModel, policy: Policy) -> Pipeline {
        let cfg = CompressionConfig::for_grid(&model.grid());
        let mut p = Pipeline::new(model.grid(), model.layout(), cfg, policy).unwrap();
        for pos in 0..model.grid().conditional_len {
            p.push_conditional(pos, model.emit(pos)).unwrap();
        }
        p
    }

    fn step(p: &mut Pipeline, model: &SyntheticModel) -> StepOutput {
        let pos = p.grid().conditional_len + p.state().step;
        p.decode_step(model.emit(pos)).unwrap()
    }

    #[test]
    fn budgets() {
        let m = small(HeadMix::Mixed, 0);
        let b = pipeline(&m, Policy::Ste).budget();
        assert_eq!(b, BudgetPlan { global_budget: 36, global_historical_target: 8, local_budget: 28 });
    }

    #[test]
    fn prefill_keeps_everything_and_matches_recompute() {
        let m = small(HeadMix::Mixed, 1);
        let mut p = pipeline(&m, Policy::Ste);
        for s in 0..71 {
            let out = step(&mut p, &m);
            assert!(out.grouping.is_none() && out.update.is_none());
            assert!(p.cache_lengths().iter().all(|&l| l == 4 + s + 1));
            // Oracle: attention over every token emitted so far.
            for (h, o) in out.outputs.iter().enumerate() {
                let toks: Vec<HeadKvq> = (0..=4 + s).map(|pos| m.emit(pos).swap_remove(h)).collect();
                let k = Matrix::from_rows(8, &toks.iter().map(|t| t.k.clone()).collect::<Vec<_>>()).unwrap();
                let v = Matrix::from_rows(8, &toks.iter().map(|t| t.v.clone()).collect::<Vec<_>>()).unwrap();
                let want = attend(&toks.last().unwrap().q, &k, &v).unwrap();
                assert_eq!(o.output, want.output);
            }
        }
        assert_eq!(p.state().phase, Phase::Prefill);
        assert!(p.compress_update().is_err());
        assert!(matches!(p.fire_grouping(), Err(Error::Phase(_))));
        let out = step(&mut p, &m);
        assert!(out.grouping.is_some());
        assert_eq!(p.state().phase, Phase::Grouped);
        assert!(p.fire_grouping().is_err());
        assert!(p.prefill_step(m.emit(77)).is_err());
    }

    #[test]
    fn all_local_heads_shrink_to_local_budget() {
        let m = small(HeadMix::AllLocal, 2);
        let mut p = pipeline(&m, Policy::Ste);
        for _ in 0..72 {
            step(&mut p, &m);
        }
        let g = p.grouping().unwrap();
        assert_eq!(g.local_fraction(), 1.0);
        assert!(p.cache_lengths().iter().all(|&l| l == 28));
        while p.state().step < 144 {
            let out = step(&mut p, &m);
            if let Some(u) = out.update {
                assert!(u.lengths.iter().all(|&l| l == 28), "{:?}", u.lengths);
            }
        }
        for h in &p.state().heads {
            let cond: Vec<usize> = h.cache.conditional().iter().map(|r| r.position).collect();
            assert_eq!(cond, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn baselines_ignore_classes() {
        let m = small(HeadMix::AllLocal, 2);
        let mut p = pipeline(&m, Policy::TopK);
        for _ in 0..72 {
            step(&mut p, &m);
        }
        assert!(p.cache_lengths().iter().all(|&l| l == 76));
        let u = (0..24).find_map(|_| step(&mut p, &m).update).unwrap();
        assert!(u.lengths.iter().all(|&l| l == 36));
    }

    #[test]
    fn global_heads_evict_a_buffer_per_update() {
        let m = small(HeadMix::AllUniform, 3);
        let mut p = pipeline(&m, Policy::Ste);
        let mut updates = Vec::new();
        while p.state().step < 144 {
            let out = step(&mut p, &m);
            if let Some(g) = out.grouping {
                assert_eq!(g.local_fraction(), 0.0);
                // No global eviction at grouping time.
                assert!(p.cache_lengths().iter().all(|&l| l == 76));
            }
            updates.extend(out.update);
        }
        assert_eq!(updates.iter().map(|u| u.step).collect::<Vec<_>>(), vec![96, 120, 144]);
        assert!(updates[0].evicted.iter().all(|&e| e == 96 + 4 - 36));
        for u in &updates {
            assert!(u.lengths.iter().all(|&l| l == 36));
        }
        for u in &updates[1..] {
            assert!(u.evicted.iter().all(|&e| e == 24));
        }
        assert!(p.decode_step(m.emit(148)).is_err());
    }

    #[test]
    fn h2o_bookkeeping_tracks_cache() {
        let m = small(HeadMix::Mixed, 4);
        let mut p = pipeline(&m, Policy::H2o);
        for _ in 0..144 {
            step(&mut p, &m);
        }
        for h in &p.state().heads {
            for pos in h.cache.positions() {
                assert!(h.accumulated_attention(pos).is_some());
            }
            assert_eq!(h.accumulated.len(), h.cache.len());
        }
    }

    #[test]
    fn run_generation_metrics() {
        let m = small(HeadMix::Mixed, 5);
        let cfg = CompressionConfig::for_grid(&m.grid());
        let opts = RunOptions { steps: 144, shadow_full: true, attention_every: Some(10), attention_steps: vec![143] };
        let full = run_generation(&m, &cfg.with_rho(1.0), Policy::Full, &opts).unwrap();
        assert_eq!(full.metrics.output_mse_vs_full, Some(0.0));
        assert!(full.metrics.retained_per_head.iter().all(|&l| l == 148));
        assert_eq!(full.metrics.memory_saving_fraction(), 0.0);

        let ste = run_generation(&m, &cfg, Policy::Ste, &opts).unwrap();
        assert_eq!(ste.metrics.grouping_accuracy, Some(1.0));
        assert_eq!(ste.metrics.local_head_fraction, Some(0.5));
        assert_eq!(ste.metrics.retained_per_head, vec![28, 36, 28, 36, 28, 36, 28, 36]);
        assert_eq!(ste.metrics.full_tokens, 148);
        assert!(ste.metrics.output_mse_vs_full.unwrap() > 0.0);
        assert_eq!(ste.trace.steps.len(), 144);
        assert_eq!(ste.trace.steps_with_attention().count(), 16);
        let rec = ste.trace.step(143).unwrap();
        let att = rec.heads[0].attention.as_ref().unwrap();
        assert_eq!(att.positions.len(), att.probs.len());
        assert_eq!(rec.heads[0].cache_len, att.probs.len());
        assert_eq!(ste.metrics.retained_curve[0].len(), 144);

        let again = run_generation(&m, &cfg, Policy::Ste, &opts).unwrap();
        assert_eq!(again.trace, ste.trace);
        assert_eq!(again.metrics, ste.metrics);
        assert!(run_generation(&m, &cfg, Policy::Ste, &RunOptions::steps(145)).is_err());
    }

    #[test]
    fn regrouping_refires() {
        let m = small(HeadMix::Mixed, 6);
        let cfg = CompressionConfig { regroup_every: Some(2), ..CompressionConfig::for_grid(&m.grid()) };
        let mut p = Pipeline::new(m.grid(), m.layout(), cfg, Policy::Ste).unwrap();
        for pos in 0..4 {
            p.push_conditional(pos, m.emit(pos)).unwrap();
        }
        let fired: Vec<usize> = (0..144).filter(|_| step(&mut p, &m).grouping.is_some()).collect();
        assert_eq!(fired, vec![71, 119]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = small(HeadMix::Mixed, 0);
        let mut p = pipeline(&m, Policy::Ste);
        assert!(p.decode_step(m.emit(4)[..3].to_vec()).is_err());
        step(&mut p, &m);
        assert!(p.push_conditional(3, m.emit(3)).is_err());
        let cfg = CompressionConfig::for_grid(&m.grid()).with_rho(0.1);
        assert!(Pipeline::new(m.grid(), m.layout(), cfg, Policy::Ste).is_err());
    }
}
