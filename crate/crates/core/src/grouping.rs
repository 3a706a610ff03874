//! Local/global head classification by backward attention accumulation.
//!
//! For a head's current query, attention weights over the cache are summed
//! from the newest token backwards. The number of tokens needed to reach the
//! mass threshold `tau` decides the class: fewer than `local_window_size`
//! means the head is local.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::attention::{scaled_scores, softmax};
use crate::cache::{HeadAddr, HeadCache, HeadClass};
use crate::config::CompressionConfig;
use crate::trace::AttentionTrace;
use crate::{Error, Result};

const NORMALIZATION_TOLERANCE: f64 = 1e-6;
/// Slack on the `>= tau` comparison so that, e.g., nine of ten uniform
/// weights reach 0.9 despite summation rounding.
const MASS_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupingReport {
    pub classes: BTreeMap<HeadAddr, HeadClass>,
    /// Minimum number of newest tokens holding `tau` of the attention mass.
    pub required_counts: BTreeMap<HeadAddr, usize>,
}

impl GroupingReport {
    pub fn local_fraction(&self) -> f64 {
        if self.classes.is_empty() {
            return 0.0;
        }
        let local = self.classes.values().filter(|c| **c == HeadClass::Local).count();
        local as f64 / self.classes.len() as f64
    }

    /// Fraction of heads whose class matches `truth`.
    pub fn accuracy(&self, truth: &BTreeMap<HeadAddr, HeadClass>) -> f64 {
        if self.classes.is_empty() {
            return 0.0;
        }
        let hits = self.classes.iter().filter(|(a, c)| truth.get(a) == Some(c)).count();
        hits as f64 / self.classes.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StabilityReport {
    pub total_accuracy: f64,
    /// Share of probe classifications where a head that was global at the
    /// reference step is classified local.
    pub local_to_global_rate: f64,
    pub per_head_agreement: BTreeMap<HeadAddr, bool>,
}

/// Smallest `m` such that the last `m` entries of `probs` sum to at least
/// `tau`; `probs.len()` if rounding keeps the sum below `tau`.
pub fn min_tokens_for_mass(probs: &[f64], tau: f64) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::Empty("attention probabilities"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(alloc::format!("tau must lie in (0, 1), got {tau}")));
    }
    let sum: f64 = probs.iter().sum();
    if !sum.is_finite() || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::Unnormalized { sum });
    }
    let mut acc = 0.0;
    for (m, p) in probs.iter().rev().enumerate() {
        acc += p;
        if acc + MASS_SLACK >= tau {
            return Ok(m + 1);
        }
    }
    Ok(probs.len())
}

/// Class and required count from an attention distribution ordered oldest
/// to newest.
pub fn classify_probs(probs: &[f64], cfg: &CompressionConfig) -> Result<(HeadClass, usize)> {
    let m = min_tokens_for_mass(probs, cfg.tau)?;
    let class = if m < cfg.local_window_size { HeadClass::Local } else { HeadClass::Global };
    Ok((class, m))
}

fn classify_query(cache: &HeadCache, q: &[f64], cfg: &CompressionConfig) -> Result<(HeadClass, usize)> {
    let view = cache.view();
    let probs = softmax(&scaled_scores(q, &view.keys)?)?;
    classify_probs(&probs, cfg)
}

/// Classifies one head from its current query.
///
/// With `cfg.majority_vote` the class is the majority over every buffered
/// query (ties resolve to global); the reported count still comes from
/// `q_current`.
pub fn classify_head(
    cache: &HeadCache,
    q_current: &[f64],
    cfg: &CompressionConfig,
) -> Result<(HeadClass, usize)> {
    if cache.len() < cfg.prefill_threshold {
        return Err(Error::Phase("head grouping requires a prefilled cache"));
    }
    classify_cache(cache, q_current, cfg)
}

/// [`classify_head`] without the prefill-length check.
pub(crate) fn classify_cache(cache: &HeadCache, q_current: &[f64], cfg: &CompressionConfig) -> Result<(HeadClass, usize)> {
    let (class, m) = classify_query(cache, q_current, cfg)?;
    if !cfg.majority_vote {
        return Ok((class, m));
    }
    let mut local = 0usize;
    let mut total = 0usize;
    for q in cache.query_history() {
        if classify_query(cache, q, cfg)?.0 == HeadClass::Local {
            local += 1;
        }
        total += 1;
    }
    let voted = if total > 0 && 2 * local > total { HeadClass::Local } else { HeadClass::Global };
    Ok((voted, m))
}

pub fn group_all_heads(
    caches: &BTreeMap<HeadAddr, HeadCache>,
    queries: &BTreeMap<HeadAddr, Vec<f64>>,
    cfg: &CompressionConfig,
) -> Result<GroupingReport> {
    let mut report = GroupingReport::default();
    for (&addr, cache) in caches {
        let q = queries.get(&addr).ok_or(Error::MissingQuery(addr))?;
        let (class, m) = classify_head(cache, q, cfg)?;
        report.classes.insert(addr, class);
        report.required_counts.insert(addr, m);
    }
    Ok(report)
}

/// Re-derives every head's class from the distributions recorded at
/// `reference_step` and each probe step, and compares them.
pub fn stability_report(
    trace: &AttentionTrace,
    reference_step: usize,
    probe_steps: &[usize],
    cfg: &CompressionConfig,
) -> Result<StabilityReport> {
    let layout = trace.header.layout;
    let classes_at = |step: usize| -> Result<Vec<HeadClass>> {
        let rec = trace.step(step).ok_or(Error::MissingStep(step))?;
        rec.heads
            .iter()
            .map(|h| {
                let att = h.attention.as_ref().ok_or(Error::MissingStep(step))?;
                Ok(classify_probs(&att.probs, cfg)?.0)
            })
            .collect()
    };
    let reference = classes_at(reference_step)?;
    let mut agreement = alloc::vec![true; reference.len()];
    let mut agree = 0usize;
    let mut flipped_to_local = 0usize;
    let mut total = 0usize;
    for &probe in probe_steps {
        let probed = classes_at(probe)?;
        for (i, (r, p)) in reference.iter().zip(&probed).enumerate() {
            total += 1;
            if r == p {
                agree += 1;
            } else {
                agreement[i] = false;
                if *r == HeadClass::Global && *p == HeadClass::Local {
                    flipped_to_local += 1;
                }
            }
        }
    }
    let frac = |n: usize| if total == 0 { 1.0 } else { n as f64 / total as f64 };
    Ok(StabilityReport {
        total_accuracy: frac(agree),
        local_to_global_rate: if total == 0 { 0.0 } else { flipped_to_local as f64 / total as f64 },
        per_head_agreement: agreement
            .into_iter()
            .enumerate()
            .map(|(i, a)| (layout.addr(i), a))
            .collect(),
    })
}
