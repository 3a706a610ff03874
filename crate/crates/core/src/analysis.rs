//! Offline analyses of attention traces: distance binning, top-K distance
//! histograms, and a facility-location information oracle for comparing
//! stratified against global top-K retention.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::cache::GridSpec;
use crate::eviction::{lowest_scoring, stratified_from_scores};
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

/// Mean and standard deviation of attention per distance bin; bin 0 holds
/// the nearest tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct BinProfile {
    pub bin_means: Vec<f64>,
    pub bin_stds: Vec<f64>,
    pub bin_sizes: Vec<usize>,
    pub n_bins: usize,
}

impl BinProfile {
    /// `Σ mean × size`, i.e. the attention mass that was binned.
    pub fn total_mass(&self) -> f64 {
        self.bin_means.iter().zip(&self.bin_sizes).map(|(m, &s)| m * s as f64).sum()
    }
}

/// [`distance_bins_at`] for an unpruned cache, where `probs[j]` belongs to
/// position `j`.
pub fn distance_bins(probs: &[f64], query_position: usize, n_bins: usize) -> Result<BinProfile> {
    let positions: Vec<usize> = (0..probs.len()).collect();
    distance_bins_at(probs, &positions, query_position, n_bins)
}

/// Ranks tokens by distance `query_position − position` (nearest first) and
/// puts rank `r` in bin `⌊n_bins·r/L⌋`.
pub fn distance_bins_at(probs: &[f64], positions: &[usize], query_position: usize, n_bins: usize) -> Result<BinProfile> {
    if probs.is_empty() {
        return Err(Error::Empty("attention distribution"));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be positive".into()));
    }
    let order = distance_order(probs, positions, query_position)?;
    let l = probs.len();
    let mut groups: Vec<Vec<f64>> = alloc::vec![Vec::new(); n_bins];
    for (rank, &j) in order.iter().enumerate() {
        groups[n_bins * rank / l].push(probs[j]);
    }
    let mut bin_means = Vec::with_capacity(n_bins);
    let mut bin_stds = Vec::with_capacity(n_bins);
    for g in &groups {
        if g.is_empty() {
            bin_means.push(0.0);
            bin_stds.push(0.0);
            continue;
        }
        let n = g.len() as f64;
        let mean = g.iter().sum::<f64>() / n;
        let var = g.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
        bin_means.push(mean);
        bin_stds.push(libm::sqrt(var));
    }
    Ok(BinProfile { bin_means, bin_stds, bin_sizes: groups.iter().map(Vec::len).collect(), n_bins })
}

/// Token indices sorted by increasing distance from the query.
fn distance_order(probs: &[f64], positions: &[usize], query_position: usize) -> Result<Vec<usize>> {
    if positions.len() != probs.len() {
        return Err(Error::DimensionMismatch { expected: probs.len(), found: positions.len() });
    }
    if let Some(&p) = positions.iter().find(|&&p| p > query_position) {
        return Err(Error::InvalidArgument(alloc::format!(
            "position {p} lies after query position {query_position}"
        )));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by_key(|&j| query_position - positions[j]);
    Ok(order)
}

/// Histogram (distance → count) of the `k` highest-probability tokens; ties
/// go to the nearer token.
pub fn topk_distance_hist(
    probs: &[f64],
    positions: &[usize],
    query_position: usize,
    k: usize,
) -> Result<BTreeMap<usize, usize>> {
    if k > probs.len() {
        return Err(Error::InvalidArgument(alloc::format!("k = {k} exceeds {} tokens", probs.len())));
    }
    let mut order = distance_order(probs, positions, query_position)?;
    // Stable sort keeps nearer tokens first among equal probabilities.
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut hist = BTreeMap::new();
    for &j in &order[..k] {
        *hist.entry(query_position - positions[j]).or_insert(0) += 1;
    }
    Ok(hist)
}

/// Token universe with a symmetric non-negative similarity and a retention
/// budget.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoInstance {
    n: usize,
    sim: Vec<f64>,
    pub budget: usize,
}

impl InfoInstance {
    /// Similarity given as a dense row-major `n × n` matrix.
    pub fn from_similarity(n: usize, sim: Vec<f64>, budget: usize) -> Result<Self> {
        if sim.len() != n * n {
            return Err(Error::DimensionMismatch { expected: n * n, found: sim.len() });
        }
        for t in 0..n {
            for s in 0..n {
                let v = sim[t * n + s];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidArgument(alloc::format!("sim({t},{s}) = {v} is not a finite non-negative value")));
                }
                if (v - sim[s * n + t]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(alloc::format!("sim is not symmetric at ({t},{s})")));
                }
                if v > sim[t * n + t] + 1e-12 {
                    return Err(Error::InvalidArgument(alloc::format!("sim({t},{s}) exceeds self-similarity")));
                }
            }
        }
        Ok(Self { n, sim, budget })
    }

    /// `sim(t, s) = max(0, cos(e_t, e_s))`; zero vectors are similar only to
    /// themselves.
    pub fn from_embeddings(embeddings: &[Vec<f64>], budget: usize) -> Result<Self> {
        let n = embeddings.len();
        let norms: Vec<f64> = embeddings.iter().map(|e| libm::sqrt(e.iter().map(|x| x * x).sum())).collect();
        let mut sim = alloc::vec![0.0; n * n];
        for t in 0..n {
            for s in 0..n {
                sim[t * n + s] = if t == s {
                    1.0
                } else if norms[t] == 0.0 || norms[s] == 0.0 {
                    0.0
                } else {
                    if embeddings[t].len() != embeddings[s].len() {
                        return Err(Error::DimensionMismatch { expected: embeddings[t].len(), found: embeddings[s].len() });
                    }
                    let dot: f64 = embeddings[t].iter().zip(&embeddings[s]).map(|(a, b)| a * b).sum();
                    (dot / (norms[t] * norms[s])).clamp(0.0, 1.0)
                };
            }
        }
        Ok(Self { n, sim, budget })
    }

    /// Gaussian kernel over grid coordinates,
    /// `exp(−‖c_t − c_s‖² / (2·bandwidth²))`. Conditional positions sit at
    /// row −1.
    pub fn grid_spatial(grid: &GridSpec, positions: &[usize], bandwidth: f64, budget: usize) -> Result<Self> {
        if bandwidth.is_nan() || bandwidth <= 0.0 {
            return Err(Error::InvalidArgument("bandwidth must be positive".into()));
        }
        let coords: Vec<(f64, f64)> = positions
            .iter()
            .map(|&p| match grid.coords(p) {
                Some((r, c)) => (r as f64, c as f64),
                None => (-1.0, p as f64),
            })
            .collect();
        let n = positions.len();
        let mut sim = alloc::vec![0.0; n * n];
        for t in 0..n {
            for s in 0..n {
                let dr = coords[t].0 - coords[s].0;
                let dc = coords[t].1 - coords[s].1;
                sim[t * n + s] = libm::exp(-(dr * dr + dc * dc) / (2.0 * bandwidth * bandwidth));
            }
        }
        Ok(Self { n, sim, budget })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sim(&self, t: usize, s: usize) -> f64 {
        self.sim[t * self.n + s]
    }

    fn check(&self, set: &[usize]) -> Result<()> {
        match set.iter().find(|&&s| s >= self.n) {
            Some(&s) => Err(Error::InvalidArgument(alloc::format!("token {s} outside universe of {}", self.n))),
            None => Ok(()),
        }
    }
}

/// Facility-location information `I(S) = Σ_t max_{s∈S} sim(t, s)`.
pub fn facility_info(set: &[usize], inst: &InfoInstance) -> Result<f64> {
    inst.check(set)?;
    if set.is_empty() {
        return Ok(0.0);
    }
    Ok((0..inst.n)
        .map(|t| set.iter().map(|&s| inst.sim(t, s)).fold(0.0, f64::max))
        .sum())
}

/// `I(S ∪ {x}) − I(S)`.
pub fn marginal_gain(x: usize, set: &[usize], inst: &InfoInstance) -> Result<f64> {
    if set.contains(&x) {
        return Err(Error::AlreadySelected(x));
    }
    inst.check(&[x])?;
    let mut with = set.to_vec();
    with.push(x);
    Ok(facility_info(&with, inst)? - facility_info(set, inst)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionComparison {
    pub info_ste: f64,
    pub info_topk: f64,
    pub keep_ste: Vec<usize>,
    pub keep_topk: Vec<usize>,
}

/// Keeps `inst.budget` tokens once by stratified eviction and once by
/// global top-K over `scores` (index order = age), and scores both keep-sets.
pub fn compare_retention(inst: &InfoInstance, scores: &[f64], r_s: f64) -> Result<RetentionComparison> {
    if scores.len() != inst.n {
        return Err(Error::DimensionMismatch { expected: inst.n, found: scores.len() });
    }
    if inst.budget > inst.n {
        return Err(Error::EvictTooMany { requested: inst.budget, available: inst.n });
    }
    let m = inst.n - inst.budget;
    let keep = |evicted: Vec<usize>| -> Vec<usize> { (0..inst.n).filter(|i| !evicted.contains(i)).collect() };
    let keep_ste = keep(stratified_from_scores(scores, m, r_s)?);
    let keep_topk = keep(lowest_scoring(scores, m));
    Ok(RetentionComparison {
        info_ste: facility_info(&keep_ste, inst)?,
        info_topk: facility_info(&keep_topk, inst)?,
        keep_ste,
        keep_topk,
    })
}

/// Greedy maximisation of `I` under the budget (largest marginal gain,
/// lowest index on ties).
pub fn greedy_maximize(inst: &InfoInstance) -> Result<(Vec<usize>, f64)> {
    let b = inst.budget.min(inst.n);
    let mut set = Vec::with_capacity(b);
    for _ in 0..b {
        let mut best = None;
        for x in (0..inst.n).filter(|x| !set.contains(x)) {
            let g = marginal_gain(x, &set, inst)?;
            if best.is_none_or(|(_, bg)| g > bg) {
                best = Some((x, g));
            }
        }
        set.push(best.expect("budget bounded by universe").0);
    }
    let info = facility_info(&set, inst)?;
    set.sort_unstable();
    Ok((set, info))
}

/// Exact maximiser over all `C(n, B)` subsets; first in lexicographic order
/// on ties.
pub fn exhaustive_maximize(inst: &InfoInstance) -> Result<(Vec<usize>, f64)> {
    let b = inst.budget;
    if b > inst.n {
        return Err(Error::EvictTooMany { requested: b, available: inst.n });
    }
    let mut idx: Vec<usize> = (0..b).collect();
    let mut best = (idx.clone(), facility_info(&idx, inst)?);
    loop {
        // Advance to the next combination.
        let Some(i) = (0..b).rev().find(|&i| idx[i] != i + inst.n - b) else {
            return Ok(best);
        };
        idx[i] += 1;
        for j in i + 1..b {
            idx[j] = idx[j - 1] + 1;
        }
        let v = facility_info(&idx, inst)?;
        if v > best.1 {
            best = (idx.clone(), v);
        }
    }
}

/// Eight tokens, budget 4, `r_s = 0.5`: tokens 0–3 are mutually orthogonal
/// with low scores, tokens 4–7 share one embedding and score high. Global
/// top-K keeps only the redundant cluster.
pub fn clustered_redundancy_instance() -> (InfoInstance, Vec<f64>, f64) {
    let d = 5;
    let embeddings: Vec<Vec<f64>> = (0..8)
        .map(|t| {
            let mut e = alloc::vec![0.0; d];
            e[t.min(4)] = 1.0;
            e
        })
        .collect();
    let inst = InfoInstance::from_embeddings(&embeddings, 4).expect("well-formed embeddings");
    let scores = alloc::vec![0.1, 0.2, 0.3, 0.4, 1.0, 1.1, 1.2, 1.3];
    (inst, scores, 0.5)
}
