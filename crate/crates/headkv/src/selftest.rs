//! Fast invariant checks runnable from the command line.

use headkv_core::analysis::{clustered_redundancy_instance, compare_retention, facility_info, InfoInstance};
use headkv_core::attention::{attend, masked_attend};
use headkv_core::eviction::{ste_select, topk_select, EvictionRequest};
use headkv_core::{CompressionConfig, GridSpec, Matrix, Policy};

use crate::config_file::Settings;
use crate::sweep::{run_point, run_sweep, RunPoint};
use crate::trace_io;

pub struct Check {
    pub name: &'static str,
    pub outcome: Result<(), String>,
}

/// SplitMix64.
struct Mix(u64);

impl Mix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn below(&mut self, n: usize) -> usize {
        (self.next() % n as u64) as usize
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| self.unit() * 4.0 - 2.0).collect()).unwrap()
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn small_settings() -> Settings {
    Settings {
        height: 12,
        width: 12,
        conditional_len: 4,
        layers: 2,
        heads: 4,
        head_dim: 8,
        shadow_full: true,
        ..Settings::default()
    }
}

fn budgets() -> Result<(), String> {
    let grid = GridSpec::new(24, 24, 16, 32).map_err(|e| e.to_string())?;
    let cfg = CompressionConfig::for_grid(&grid);
    let got: Vec<usize> = [4.0, 6.0, 8.0].iter().map(|d| cfg.with_rho(1.0 / d).global_budget(&grid)).collect();
    ensure(got == [144, 96, 72], || format!("budgets {got:?}"))
}

fn sweep_invariants() -> Result<(), String> {
    let s = Settings { policies: Policy::ALL.to_vec(), rhos: vec![0.25, 0.5], ..small_settings() };
    let runs = run_sweep(&s, false).map_err(|e| format!("{e:#}"))?;
    for r in &runs {
        ensure(r.violations.is_empty(), || format!("{:?}: {}", r.point, r.violations.join("; ")))?;
    }
    Ok(())
}

fn ste_degenerates() -> Result<(), String> {
    let mut rng = Mix(7);
    for _ in 0..200 {
        let t = 1 + rng.below(40);
        let d = 1 + rng.below(8);
        let keys = rng.matrix(t, d);
        let p = 1 + rng.below(6);
        let q = rng.matrix(p, d);
        let positions: Vec<usize> = (0..t).collect();
        let req = EvictionRequest {
            historical_keys: &keys,
            historical_positions: &positions,
            q_past: &q,
            evict_count: rng.below(t + 1),
        };
        let top = topk_select(&req).map_err(|e| e.to_string())?.evicted_indices;
        for rs in [0.0, 1.0] {
            let ste = ste_select(&req, rs).map_err(|e| e.to_string())?.evicted_indices;
            ensure(ste == top, || format!("r_s={rs}: {ste:?} != {top:?}"))?;
        }
    }
    Ok(())
}

fn padding() -> Result<(), String> {
    let mut rng = Mix(11);
    for _ in 0..200 {
        let (l, pad, d) = (1 + rng.below(30), rng.below(10), 1 + rng.below(16));
        let (k, v) = (rng.matrix(l + pad, d), rng.matrix(l + pad, d));
        let q: Vec<f64> = (0..d).map(|_| rng.unit()).collect();
        let mask: Vec<bool> = (0..l + pad).map(|i| i < l).collect();
        let keep: Vec<usize> = (0..l).collect();
        let a = masked_attend(&q, &k, &v, &mask).map_err(|e| e.to_string())?;
        let b = attend(&q, &k.select_rows(&keep), &v.select_rows(&keep)).map_err(|e| e.to_string())?;
        let err = a.output.iter().zip(&b.output).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        ensure(err <= 1e-12, || format!("padded output differs by {err}"))?;
    }
    Ok(())
}

fn submodular() -> Result<(), String> {
    let mut rng = Mix(3);
    let emb: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.unit() * 2.0 - 1.0).collect()).collect();
    let inst = InfoInstance::from_embeddings(&emb, 4).map_err(|e| e.to_string())?;
    let set = |m: u32| -> Vec<usize> { (0..8).filter(|i| m >> i & 1 == 1).collect() };
    let info: Vec<f64> = (0u32..256).map(|m| facility_info(&set(m), &inst).unwrap()).collect();
    for a in 0u32..256 {
        for b in (0u32..256).filter(|b| a & b == a) {
            ensure(info[a as usize] <= info[b as usize] + 1e-12, || format!("not monotone at {a:b} ⊆ {b:b}"))?;
            for x in (0..8).filter(|x| b >> x & 1 == 0) {
                let ga = info[(a | 1 << x) as usize] - info[a as usize];
                let gb = info[(b | 1 << x) as usize] - info[b as usize];
                ensure(ga >= gb - 1e-12, || format!("gain of {x} grows from {a:b} to {b:b}"))?;
            }
        }
    }
    let (inst, scores, rs) = clustered_redundancy_instance();
    let c = compare_retention(&inst, &scores, rs).map_err(|e| e.to_string())?;
    ensure(c.info_ste > c.info_topk, || format!("clustered: ste {} <= topk {}", c.info_ste, c.info_topk))
}

fn determinism() -> Result<(), String> {
    let s = small_settings();
    let p = RunPoint { seed: 5, policy: Policy::Ste, rho: 0.25 };
    let a = run_point(&s, p, false).map_err(|e| format!("{e:#}"))?;
    let b = run_point(&s, p, false).map_err(|e| format!("{e:#}"))?;
    let (ea, eb) = (trace_io::encode(&a.outcome.trace), trace_io::encode(&b.outcome.trace));
    ensure(ea == eb, || "trace bytes differ between identical runs".into())?;
    ensure(a.row() == b.row(), || "metrics differ between identical runs".into())?;
    let back = trace_io::decode(&ea).map_err(|e| e.to_string())?;
    ensure(back == a.outcome.trace, || "trace does not round-trip".into())
}

type CheckFn = fn() -> Result<(), String>;

pub fn run_all() -> Vec<Check> {
    let checks: [(&'static str, CheckFn); 6] = [
        ("budget arithmetic", budgets),
        ("sweep budgets and lossless full policy", sweep_invariants),
        ("STE degenerates to top-K", ste_degenerates),
        ("padding equivalence", padding),
        ("facility-location submodularity", submodular),
        ("determinism and trace round trip", determinism),
    ];
    checks.into_iter().map(|(name, f)| Check { name, outcome: f() }).collect()
}
