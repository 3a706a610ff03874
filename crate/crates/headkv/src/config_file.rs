//! Run settings and their flat `key = value` file form.
//!
//! ```text
//! # comment          blank lines and `#` comments are ignored
//! policy = ste, topk # lists are comma separated
//! rho = 0.25, 0.125
//! grid = 24x24
//! head.L0H1 = stripe period=24 strength=3 drift=192
//! ```
//!
//! Later lines override earlier ones; an unknown key is an error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use headkv_core::synth::{HeadMix, PatternSpec, SyntheticSpec};
use headkv_core::{CompressionConfig, GridSpec, HeadAddr, HeadLayout, Policy};

/// Everything a `run` needs; one run per `(seed, policy, rho)` combination.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub policies: Vec<Policy>,
    pub rhos: Vec<f64>,
    pub seeds: Vec<u64>,
    pub tau: f64,
    pub r_s: f64,
    pub window: Option<usize>,
    pub buffer: Option<usize>,
    pub prefill_threshold: Option<usize>,
    pub local_window_size: Option<usize>,
    pub majority_vote: bool,
    pub regroup_every: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub conditional_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Defaults to every visual token.
    pub steps: Option<usize>,
    pub shadow_full: bool,
    pub mix: HeadMix,
    pub head_plan: BTreeMap<HeadAddr, PatternSpec>,
    /// Record full attention every `n` steps in traces (0 = only the
    /// grouping step and the last step).
    pub attention_every: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            policies: vec![Policy::Ste],
            rhos: vec![0.25],
            seeds: vec![0],
            tau: 0.9,
            r_s: 0.5,
            window: None,
            buffer: None,
            prefill_threshold: None,
            local_window_size: None,
            majority_vote: false,
            regroup_every: None,
            height: 24,
            width: 24,
            conditional_len: 16,
            layers: 4,
            heads: 8,
            head_dim: 32,
            steps: None,
            shadow_full: false,
            mix: HeadMix::Mixed,
            head_plan: BTreeMap::new(),
            attention_every: 25,
        }
    }
}

impl Settings {
    pub fn grid(&self) -> anyhow::Result<GridSpec> {
        Ok(GridSpec::new(self.height, self.width, self.conditional_len, self.head_dim)?)
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout::new(self.layers, self.heads)
    }

    pub fn steps(&self) -> anyhow::Result<usize> {
        Ok(self.steps.unwrap_or(self.grid()?.tokens()))
    }

    pub fn compression(&self, rho: f64) -> anyhow::Result<CompressionConfig> {
        let grid = self.grid()?;
        let base = CompressionConfig::for_grid(&grid);
        let window = self.window.unwrap_or(base.window);
        let cfg = CompressionConfig {
            rho,
            tau: self.tau,
            r_s: self.r_s,
            window,
            buffer: self.buffer.unwrap_or(window),
            local_window_size: self.local_window_size.unwrap_or(window),
            prefill_threshold: self.prefill_threshold.unwrap_or(base.prefill_threshold.max(window)),
            majority_vote: self.majority_vote,
            regroup_every: self.regroup_every,
        };
        cfg.validate(&grid)?;
        Ok(cfg)
    }

    pub fn synthetic(&self, seed: u64) -> anyhow::Result<SyntheticSpec> {
        let grid = self.grid()?;
        let layout = self.layout();
        let mut spec = SyntheticSpec::planned(grid, layout, seed, self.mix);
        for (addr, p) in &self.head_plan {
            if !layout.contains(*addr) {
                bail!("head.{addr} lies outside the {}x{} layout", layout.num_layers, layout.num_heads);
            }
            spec.head_plan.insert(*addr, *p);
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        if let Some(addr) = key.strip_prefix("head.") {
            let addr = parse_head_addr(addr)?;
            let grid = self.grid()?;
            self.head_plan.insert(addr, parse_pattern(value, &grid)?);
            return Ok(());
        }
        match key {
            "policy" | "policies" => self.policies = list(value)?,
            "rho" => self.rhos = list(value)?,
            "seed" | "seeds" => self.seeds = list(value)?,
            "tau" => self.tau = one(value)?,
            "r_s" | "rs" => self.r_s = one(value)?,
            "window" | "w" => self.window = Some(one(value)?),
            "buffer" | "P" => self.buffer = Some(one(value)?),
            "prefill" | "prefill_threshold" => self.prefill_threshold = Some(one(value)?),
            "local_window_size" => self.local_window_size = Some(one(value)?),
            "majority_vote" => self.majority_vote = one(value)?,
            "regroup_every" => self.regroup_every = optional(value)?,
            "grid" => (self.height, self.width) = parse_grid(value)?,
            "height" => self.height = one(value)?,
            "width" => self.width = one(value)?,
            "conditional_len" => self.conditional_len = one(value)?,
            "layers" | "num_layers" => self.layers = one(value)?,
            "heads" | "num_heads" => self.heads = one(value)?,
            "dim" | "head_dim" => self.head_dim = one(value)?,
            "steps" => self.steps = optional(value)?,
            "shadow_full" => self.shadow_full = one(value)?,
            "mix" => self.mix = parse_mix(value)?,
            "attention_every" => self.attention_every = one(value)?,
            _ => bail!("unknown key {key:?}"),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> anyhow::Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut s = Self::default();
        s.apply_text(&text).with_context(|| path.display().to_string())?;
        Ok(s)
    }
}

fn one<T: FromStr>(v: &str) -> anyhow::Result<T>
where
    T::Err: Display,
{
    v.trim().parse().map_err(|e| anyhow!("invalid value {v:?}: {e}"))
}

fn optional<T: FromStr>(v: &str) -> anyhow::Result<Option<T>>
where
    T::Err: Display,
{
    match v.trim() {
        "" | "none" => Ok(None),
        s => one(s).map(Some),
    }
}

fn list<T: FromStr>(v: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: Display,
{
    let items = v.split(',').map(one).collect::<anyhow::Result<Vec<T>>>()?;
    if items.is_empty() {
        bail!("empty list");
    }
    Ok(items)
}

/// `HxW`, e.g. `24x24`.
pub fn parse_grid(v: &str) -> anyhow::Result<(usize, usize)> {
    let (h, w) = v.trim().split_once(['x', 'X']).ok_or_else(|| anyhow!("grid must look like HxW, got {v:?}"))?;
    Ok((one(h)?, one(w)?))
}

pub fn parse_mix(v: &str) -> anyhow::Result<HeadMix> {
    Ok(match v.trim() {
        "mixed" => HeadMix::Mixed,
        "local" => HeadMix::AllLocal,
        "stripe" => HeadMix::AllStripe,
        "uniform" => HeadMix::AllUniform,
        other => bail!("unknown mix {other:?} (mixed, local, stripe, uniform)"),
    })
}

/// `L{layer}H{head}`.
pub fn parse_head_addr(v: &str) -> anyhow::Result<HeadAddr> {
    let bad = || anyhow!("head address must look like L0H3, got {v:?}");
    let rest = v.strip_prefix('L').ok_or_else(bad)?;
    let (l, h) = rest.split_once('H').ok_or_else(bad)?;
    Ok(HeadAddr::new(l.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

/// `local scale=S`, `stripe period=P strength=A drift=D`, `uniform spread=S`;
/// omitted parameters take the planned defaults.
pub fn parse_pattern(v: &str, grid: &GridSpec) -> anyhow::Result<PatternSpec> {
    let mut words = v.split_whitespace();
    let kind = words.next().ok_or_else(|| anyhow!("empty head pattern"))?;
    let mut params = BTreeMap::new();
    for w in words {
        let (k, x) = w.split_once('=').ok_or_else(|| anyhow!("expected name=value, got {w:?}"))?;
        params.insert(k, x);
    }
    let mut get = |name: &str, default: f64| -> anyhow::Result<f64> {
        params.remove(name).map_or(Ok(default), one)
    };
    let p = match kind {
        "local" => PatternSpec::local(get("scale", 2.0)?),
        "stripe" => {
            let period = get("period", grid.width as f64)?;
            if period.fract() != 0.0 || period < 2.0 {
                bail!("stripe period must be an integer >= 2");
            }
            PatternSpec::stripe(period as usize, get("strength", 3.0)?, get("drift", grid.tokens() as f64 / 3.0)?)
        }
        "uniform" => PatternSpec::uniform(get("spread", 0.5)?),
        other => bail!("unknown head pattern {other:?} (local, stripe, uniform)"),
    };
    if let Some(k) = params.keys().next() {
        bail!("unknown parameter {k:?} for {kind}");
    }
    Ok(p)
}
