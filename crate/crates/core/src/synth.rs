//! Deterministic synthetic q/k/v streams with planted attention structure.
//!
//! Logit patterns are realised in q/k space, so `q_i·k_j / sqrt(d)` equals the
//! target logit plus bounded noise:
//!
//! * dims 0–1 carry a linear distance penalty `−(i−j)/scale`
//!   (`k_j = (j/S, 1)`, `q_i = sqrt(d)·(S/scale, −i/scale)`);
//! * a stripe head adds a truncated Fourier series over `period`, which sums
//!   to `strength·[(i−j) mod period = 0]` when every harmonic fits;
//! * the remaining dims carry uniform noise sized so the noise logit has a
//!   standard deviation of 5% of the pattern strength.
//!
//! Values form a smooth random field over the token grid, so that spatially
//! adjacent tokens carry similar content.
//!
//! All randomness comes from ChaCha8 keyed by
//! `seed ‖ layer ‖ head ‖ position ‖ stream tag` (little-endian, 32 bytes);
//! a uniform draw is `(next_u64 >> 11) · 2⁻⁵³`.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::cache::{GridSpec, HeadAddr, HeadClass, HeadLayout};
use crate::pipeline::{HeadKvq, ModelSource};
use crate::{Error, Result};

/// Noise logit standard deviation relative to the pattern strength.
pub const NOISE_FRACTION: f64 = 0.05;
const MIN_NOISE_DIMS: usize = 4;
const VALUE_WAVES: usize = 3;
const VALUE_NOISE: f64 = 0.1;
const TAG_TOKEN: u64 = 0;
const TAG_PARAMS: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatternKind {
    /// Logit `−(i−j)/scale`: attention mass decays exponentially with
    /// distance.
    LocalDecay { scale: f64 },
    /// `+strength` on tokens an exact multiple of `period` back, over a weak
    /// distance penalty `−(i−j)/drift`.
    GlobalStripe { period: usize, strength: f64, drift: f64 },
    /// Near-isotropic q/k; logits are noise with standard deviation `spread`.
    GlobalUniform { spread: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternSpec {
    pub kind: PatternKind,
}

impl PatternSpec {
    pub fn local(scale: f64) -> Self {
        Self { kind: PatternKind::LocalDecay { scale } }
    }

    pub fn stripe(period: usize, strength: f64, drift: f64) -> Self {
        Self { kind: PatternKind::GlobalStripe { period, strength, drift } }
    }

    pub fn uniform(spread: f64) -> Self {
        Self { kind: PatternKind::GlobalUniform { spread } }
    }

    /// Ground-truth class implied by the pattern.
    pub fn label(&self) -> HeadClass {
        match self.kind {
            PatternKind::LocalDecay { .. } => HeadClass::Local,
            _ => HeadClass::Global,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            PatternKind::LocalDecay { scale } => scale > 0.0 && scale.is_finite(),
            PatternKind::GlobalStripe { period, strength, drift } => {
                period >= 2 && strength > 0.0 && strength.is_finite() && drift > 0.0
            }
            PatternKind::GlobalUniform { spread } => spread > 0.0 && spread.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(alloc::format!("invalid head pattern {:?}", self.kind)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub grid: GridSpec,
    pub layout: HeadLayout,
    pub seed: u64,
    pub head_plan: BTreeMap<HeadAddr, PatternSpec>,
}

/// Which patterns a generated plan contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMix {
    /// Even heads local; odd heads alternate stripe and uniform.
    Mixed,
    AllLocal,
    AllStripe,
    AllUniform,
}

impl SyntheticSpec {
    pub fn new(grid: GridSpec, layout: HeadLayout, seed: u64, head_plan: BTreeMap<HeadAddr, PatternSpec>) -> Result<Self> {
        let spec = Self { grid, layout, seed, head_plan };
        spec.validate()?;
        Ok(spec)
    }

    /// Desk-scale default: 24×24 grid, 16 conditional tokens, d = 32,
    /// 4 layers × 8 heads, mixed plan.
    pub fn desk_default(seed: u64) -> Self {
        let grid = GridSpec { height: 24, width: 24, conditional_len: 16, head_dim: 32 };
        Self::planned(grid, HeadLayout::new(4, 8), seed, HeadMix::Mixed)
    }

    /// Plan with seeded per-head parameters: local scales uniform in
    /// `[1, max(1, width/4)]`; stripes with `period = width`, strength 3 and
    /// drift `N/3`; uniform heads with spread 0.5.
    pub fn planned(grid: GridSpec, layout: HeadLayout, seed: u64, mix: HeadMix) -> Self {
        let mut head_plan = BTreeMap::new();
        for addr in layout.addrs() {
            let mut rng = stream(seed, addr, u64::MAX, TAG_PARAMS);
            let max_scale = (grid.width as f64 / 4.0).max(1.0);
            let local = PatternSpec::local(1.0 + uniform(&mut rng) * (max_scale - 1.0));
            let stripe = PatternSpec::stripe(grid.width.max(2), 3.0, grid.tokens() as f64 / 3.0);
            let flat = PatternSpec::uniform(0.5);
            let p = match mix {
                HeadMix::AllLocal => local,
                HeadMix::AllStripe => stripe,
                HeadMix::AllUniform => flat,
                HeadMix::Mixed => match addr.head % 4 {
                    0 | 2 => local,
                    1 => stripe,
                    _ => flat,
                },
            };
            head_plan.insert(addr, p);
        }
        Self { grid, layout, seed, head_plan }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.grid.head_dim < 2 + MIN_NOISE_DIMS {
            return Err(Error::InvalidConfig(alloc::format!(
                "synthetic heads need head_dim >= {}",
                2 + MIN_NOISE_DIMS
            )));
        }
        if self.head_plan.len() != self.layout.len() || !self.layout.addrs().all(|a| self.head_plan.contains_key(&a)) {
            return Err(Error::InvalidConfig("head plan must cover every head exactly once".into()));
        }
        self.head_plan.values().try_for_each(PatternSpec::validate)
    }

    pub fn ground_truth(&self) -> BTreeMap<HeadAddr, HeadClass> {
        self.head_plan.iter().map(|(&a, p)| (a, p.label())).collect()
    }
}

fn stream(seed: u64, addr: HeadAddr, position: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&(addr.layer as u32).to_le_bytes());
    key[12..16].copy_from_slice(&(addr.head as u32).to_le_bytes());
    key[16..24].copy_from_slice(&position.to_le_bytes());
    key[24..32].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[inline]
fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn symmetric(rng: &mut ChaCha8Rng) -> f64 {
    2.0 * uniform(rng) - 1.0
}

/// Precomputed realisation of one head's pattern.
#[derive(Debug, Clone)]
struct HeadParams {
    addr: HeadAddr,
    pattern: PatternSpec,
    /// Harmonics `1..=harmonics` as cos/sin pairs, plus the Nyquist term.
    harmonics: usize,
    nyquist: bool,
    noise_dims: usize,
    /// Half-width of the uniform noise in q and k.
    noise_amp: f64,
    /// `(row freq, col freq, phase)` per value dim and wave.
    waves: Vec<[f64; 3]>,
}

impl HeadParams {
    fn new(addr: HeadAddr, pattern: PatternSpec, seed: u64, d: usize) -> Self {
        let (harmonics, nyquist, signal_dims, strength) = match pattern.kind {
            PatternKind::LocalDecay { .. } => (0, false, 2, 1.0),
            PatternKind::GlobalStripe { period, strength, .. } => {
                let avail = d - 2 - MIN_NOISE_DIMS;
                let h = ((period - 1) / 2).min(avail / 2);
                let nyq = period % 2 == 0 && h == (period - 1) / 2 && 2 * h < avail;
                (h, nyq, 2 + 2 * h + nyq as usize, strength)
            }
            PatternKind::GlobalUniform { spread } => (0, false, 0, spread / NOISE_FRACTION),
        };
        let noise_dims = d - signal_dims;
        // Noise logit std = a²·sqrt(n) / (3·sqrt(d)).
        let target = NOISE_FRACTION * strength;
        let noise_amp = libm::sqrt(3.0 * target * libm::sqrt(d as f64) / libm::sqrt(noise_dims as f64));
        let mut rng = stream(seed, addr, u64::MAX - 1, TAG_PARAMS);
        let waves = (0..d * VALUE_WAVES)
            .map(|_| [uniform(&mut rng) * PI / 4.0, uniform(&mut rng) * PI / 4.0, uniform(&mut rng) * 2.0 * PI])
            .collect();
        Self { addr, pattern, harmonics, nyquist, noise_dims, noise_amp, waves }
    }

    fn emit(&self, seed: u64, grid: &GridSpec, position: usize) -> HeadKvq {
        let d = grid.head_dim;
        let sqrt_d = libm::sqrt(d as f64);
        let span = grid.stream_len() as f64;
        let pos = position as f64;
        let mut q = alloc::vec![0.0; d];
        let mut k = alloc::vec![0.0; d];

        let distance_scale = match self.pattern.kind {
            PatternKind::LocalDecay { scale } => Some(scale),
            PatternKind::GlobalStripe { drift, .. } => Some(drift),
            PatternKind::GlobalUniform { .. } => None,
        };
        if let Some(scale) = distance_scale {
            k[0] = pos / span;
            k[1] = 1.0;
            q[0] = sqrt_d * span / scale;
            q[1] = -sqrt_d * pos / scale;
        }
        if let PatternKind::GlobalStripe { period, strength, .. } = self.pattern.kind {
            let p = period as f64;
            // strength/p · Σ_{h=0}^{p−1} cos(2πh(i−j)/p); the h = 0 term is a
            // per-query constant.
            q[1] += sqrt_d * strength / p;
            let mut dim = 2;
            for h in 1..=self.harmonics {
                let angle = 2.0 * PI * h as f64 * pos / p;
                let (s, c) = (libm::sin(angle), libm::cos(angle));
                k[dim] = c;
                k[dim + 1] = s;
                q[dim] = sqrt_d * 2.0 * strength / p * c;
                q[dim + 1] = sqrt_d * 2.0 * strength / p * s;
                dim += 2;
            }
            if self.nyquist {
                let sign = if position.is_multiple_of(2) { 1.0 } else { -1.0 };
                k[dim] = sign;
                q[dim] = sqrt_d * strength / p * sign;
            }
        }

        let mut rng = stream(seed, self.addr, position as u64, TAG_TOKEN);
        for x in q[d - self.noise_dims..].iter_mut().chain(k[d - self.noise_dims..].iter_mut()) {
            *x = self.noise_amp * symmetric(&mut rng);
        }
        let v = match grid.coords(position) {
            Some((row, col)) => (0..d)
                .map(|dim| {
                    let field: f64 = self.waves[dim * VALUE_WAVES..(dim + 1) * VALUE_WAVES]
                        .iter()
                        .map(|[fr, fc, ph]| libm::cos(fr * row as f64 + fc * col as f64 + ph))
                        .sum();
                    field / libm::sqrt(VALUE_WAVES as f64) + VALUE_NOISE * symmetric(&mut rng)
                })
                .collect(),
            None => (0..d).map(|_| symmetric(&mut rng)).collect(),
        };
        HeadKvq { q, k, v }
    }
}

/// A [`SyntheticSpec`] with its per-head parameters realised.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    spec: SyntheticSpec,
    heads: Vec<HeadParams>,
}

impl SyntheticModel {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let heads = spec
            .layout
            .addrs()
            .map(|a| HeadParams::new(a, spec.head_plan[&a], spec.seed, spec.grid.head_dim))
            .collect();
        Ok(Self { spec, heads })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// Projections of every head at stream `position`.
    pub fn emit_step(&self, position: usize) -> Vec<HeadKvq> {
        self.heads.iter().map(|h| h.emit(self.spec.seed, &self.spec.grid, position)).collect()
    }

    pub fn emit_head(&self, addr: HeadAddr, position: usize) -> HeadKvq {
        self.heads[self.spec.layout.index(addr)].emit(self.spec.seed, &self.spec.grid, position)
    }

    pub fn pattern(&self, addr: HeadAddr) -> PatternSpec {
        self.spec.head_plan[&addr]
    }
}

impl ModelSource for SyntheticModel {
    fn grid(&self) -> GridSpec {
        self.spec.grid
    }

    fn layout(&self) -> HeadLayout {
        self.spec.layout
    }

    fn seed(&self) -> u64 {
        self.spec.seed
    }

    fn emit(&self, position: usize) -> Vec<HeadKvq> {
        self.emit_step(position)
    }

    fn ground_truth(&self) -> Option<BTreeMap<HeadAddr, HeadClass>> {
        Some(self.spec.ground_truth())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{scaled_scores, softmax};
    use crate::grouping::min_tokens_for_mass;
    use crate::matrix::Matrix;

    fn one_head(pattern: PatternSpec, seed: u64) -> SyntheticModel {
        let grid = GridSpec { height: 24, width: 24, conditional_len: 16, head_dim: 32 };
        let layout = HeadLayout::new(1, 1);
        let plan = [(HeadAddr::new(0, 0), pattern)].into_iter().collect();
        SyntheticModel::new(SyntheticSpec::new(grid, layout, seed, plan).unwrap()).unwrap()
    }

    /// Attention probabilities of the query at `pos` over positions `from..=pos`.
    fn probs_at(m: &SyntheticModel, pos: usize, from: usize) -> Vec<f64> {
        let a = HeadAddr::new(0, 0);
        let keys: Vec<Vec<f64>> = (from..=pos).map(|p| m.emit_head(a, p).k).collect();
        let keys = Matrix::from_rows(32, &keys).unwrap();
        softmax(&scaled_scores(&m.emit_head(a, pos).q, &keys).unwrap()).unwrap()
    }

    fn logit(m: &SyntheticModel, i: usize, j: usize) -> f64 {
        let a = HeadAddr::new(0, 0);
        let q = m.emit_head(a, i).q;
        let k = m.emit_head(a, j).k;
        q.iter().zip(&k).map(|(x, y)| x * y).sum::<f64>() / 32f64.sqrt()
    }

    #[test]
    fn emission_is_deterministic() {
        let a = SyntheticModel::new(SyntheticSpec::desk_default(9)).unwrap();
        let b = SyntheticModel::new(SyntheticSpec::desk_default(9)).unwrap();
        assert_eq!(a.emit_step(123), b.emit_step(123));
        assert_ne!(a.emit_step(123), a.emit_step(124));
        let c = SyntheticModel::new(SyntheticSpec::desk_default(10)).unwrap();
        assert_ne!(a.emit_step(123), c.emit_step(123));
    }

    #[test]
    fn local_logits_follow_distance() {
        let m = one_head(PatternSpec::local(2.0), 1);
        // Pattern part differs by (j1 − j2)/scale; noise is 5% of a unit.
        let diff = logit(&m, 300, 299) - logit(&m, 300, 289);
        assert!((diff - 5.0).abs() < 0.5, "diff {diff}");
    }

    #[test]
    fn stripe_logits_peak_on_period() {
        let m = one_head(PatternSpec::stripe(24, 3.0, 192.0), 4);
        let on = logit(&m, 400, 400 - 48);
        let off = logit(&m, 400, 400 - 47);
        // 3 − 1/192 after drift, within noise.
        assert!((on - off - 3.0).abs() < 0.6, "on {on} off {off}");
    }

    #[test]
    fn local_decay_mass_is_concentrated() {
        let m = one_head(PatternSpec::local(2.0), 3);
        let probs = probs_at(&m, 16 + 200, 0);
        assert!(min_tokens_for_mass(&probs, 0.9).unwrap() < 20);
    }

    #[test]
    fn uniform_mass_is_spread() {
        let m = one_head(PatternSpec::uniform(0.5), 5);
        let pos = 16 + 200;
        let probs = probs_at(&m, pos, pos - 199);
        assert!(min_tokens_for_mass(&probs, 0.9).unwrap() as f64 >= 0.8 * 200.0);
    }

    #[test]
    fn plans_and_labels() {
        let s = SyntheticSpec::desk_default(0);
        let truth = s.ground_truth();
        assert_eq!(truth.len(), 32);
        assert_eq!(truth.values().filter(|c| **c == HeadClass::Local).count(), 16);
        let g = s.grid;
        let all_local = SyntheticSpec::planned(g, s.layout, 0, HeadMix::AllLocal);
        assert!(all_local.ground_truth().values().all(|c| *c == HeadClass::Local));
        for p in all_local.head_plan.values() {
            match p.kind {
                PatternKind::LocalDecay { scale } => assert!((1.0..=6.0).contains(&scale)),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn rejects_incomplete_plans() {
        let s = SyntheticSpec::desk_default(0);
        let mut plan = s.head_plan.clone();
        plan.remove(&HeadAddr::new(3, 7));
        assert!(SyntheticSpec::new(s.grid, s.layout, 0, plan).is_err());
        let tiny = GridSpec { head_dim: 4, ..s.grid };
        assert!(SyntheticSpec::new(tiny, s.layout, 0, s.head_plan.clone()).is_err());
    }
}
