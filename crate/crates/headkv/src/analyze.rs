//! CSV analyses over recorded attention distributions.

use std::io::Write;

use anyhow::{bail, ensure};
use headkv_core::analysis::{compare_retention, distance_bins_at, topk_distance_hist, InfoInstance};
use headkv_core::grouping::classify_probs;
use headkv_core::trace::AttentionTrace;
use headkv_core::{CompressionConfig, HeadAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AnalysisKind {
    /// Mean/std attention per distance bin.
    Bins,
    /// Distances of the top-K attended tokens.
    Topk,
    /// Facility-location information kept by STE vs. global top-K.
    Retention,
    /// Tokens needed to reach `tau` and the resulting class.
    Grouping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    pub kind: AnalysisKind,
    pub bins: usize,
    pub topk: usize,
    pub head: Option<HeadAddr>,
    /// Fraction of each cache kept in retention comparisons.
    pub keep_fraction: f64,
    pub r_s: f64,
    /// Spatial similarity bandwidth in grid cells.
    pub bandwidth: f64,
    pub tau: f64,
    pub local_window_size: Option<usize>,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            kind: AnalysisKind::Bins,
            bins: headkv_core::analysis::DEFAULT_BINS,
            topk: 16,
            head: None,
            keep_fraction: 0.25,
            r_s: 0.5,
            bandwidth: 1.0,
            tau: 0.9,
            local_window_size: None,
        }
    }
}

pub fn analyze<W: Write>(trace: &AttentionTrace, opts: &AnalyzeOptions, out: W) -> anyhow::Result<()> {
    ensure!(!trace.is_empty(), "trace contains no steps");
    let layout = trace.header.layout;
    let grid = trace.header.grid;
    if let Some(h) = opts.head {
        ensure!(layout.contains(h), "head {h} is not in the trace");
    }
    let cfg = CompressionConfig {
        tau: opts.tau,
        local_window_size: opts.local_window_size.unwrap_or(2 * grid.width),
        ..CompressionConfig::for_grid(&grid)
    };
    let mut w = csv::Writer::from_writer(out);
    match opts.kind {
        AnalysisKind::Bins => w.write_record(["layer", "head", "step", "bin", "size", "mean", "std"])?,
        AnalysisKind::Topk => w.write_record(["layer", "head", "step", "distance", "count"])?,
        AnalysisKind::Retention => {
            w.write_record(["layer", "head", "step", "cache_len", "budget", "info_ste", "info_topk"])?
        }
        AnalysisKind::Grouping => w.write_record(["layer", "head", "step", "required_count", "class"])?,
    }
    let mut rows = 0usize;
    for rec in &trace.steps {
        let qpos = rec.query_position(&grid);
        for (i, hs) in rec.heads.iter().enumerate() {
            let addr = layout.addr(i);
            if opts.head.is_some_and(|h| h != addr) {
                continue;
            }
            let Some(att) = &hs.attention else { continue };
            let (l, h, s) = (addr.layer.to_string(), addr.head.to_string(), rec.step.to_string());
            match opts.kind {
                AnalysisKind::Bins => {
                    let b = distance_bins_at(&att.probs, &att.positions, qpos, opts.bins)?;
                    for k in 0..b.n_bins {
                        w.write_record([
                            &l,
                            &h,
                            &s,
                            &k.to_string(),
                            &b.bin_sizes[k].to_string(),
                            &b.bin_means[k].to_string(),
                            &b.bin_stds[k].to_string(),
                        ])?;
                    }
                }
                AnalysisKind::Topk => {
                    let k = opts.topk.min(att.probs.len());
                    for (d, c) in topk_distance_hist(&att.probs, &att.positions, qpos, k)? {
                        w.write_record([&l, &h, &s, &d.to_string(), &c.to_string()])?;
                    }
                }
                AnalysisKind::Retention => {
                    let n = att.probs.len();
                    let budget = ((opts.keep_fraction * n as f64) as usize).clamp(1, n);
                    let inst = InfoInstance::grid_spatial(&grid, &att.positions, opts.bandwidth, budget)?;
                    let c = compare_retention(&inst, &att.probs, opts.r_s)?;
                    w.write_record([
                        &l,
                        &h,
                        &s,
                        &n.to_string(),
                        &budget.to_string(),
                        &c.info_ste.to_string(),
                        &c.info_topk.to_string(),
                    ])?;
                }
                AnalysisKind::Grouping => {
                    let (class, m) = classify_probs(&att.probs, &cfg)?;
                    w.write_record([&l, &h, &s, &m.to_string(), class.as_str()])?;
                }
            }
            rows += 1;
        }
    }
    if rows == 0 {
        bail!("no step in the trace records attention distributions");
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use headkv_core::pipeline::{run_generation, RunOptions};
    use headkv_core::synth::{HeadMix, SyntheticModel, SyntheticSpec};
    use headkv_core::{GridSpec, HeadLayout, Policy};

    fn local_trace() -> AttentionTrace {
        let grid = GridSpec::new(12, 12, 4, 8).unwrap();
        let model = SyntheticModel::new(SyntheticSpec::planned(grid, HeadLayout::new(1, 2), 3, HeadMix::AllLocal)).unwrap();
        let cfg = CompressionConfig::for_grid(&grid);
        let opts = RunOptions { steps: 144, attention_steps: vec![70, 143], ..RunOptions::default() };
        run_generation(&model, &cfg.with_rho(1.0), Policy::Full, &opts).unwrap().trace
    }

    fn csv_rows(opts: &AnalyzeOptions, t: &AttentionTrace) -> Vec<Vec<String>> {
        let mut buf = Vec::new();
        analyze(t, opts, &mut buf).unwrap();
        csv::Reader::from_reader(&buf[..]).records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
    }

    #[test]
    fn local_bins_decrease() {
        let t = local_trace();
        let rows = csv_rows(&AnalyzeOptions::default(), &t);
        assert_eq!(rows.len(), 2 * 2 * 10);
        for chunk in rows.chunks(10) {
            let means: Vec<f64> = chunk.iter().map(|r| r[5].parse().unwrap()).collect();
            assert!(means.windows(2).all(|p| p[0] > p[1]), "{means:?}");
        }
    }

    #[test]
    fn other_kinds_produce_rows() {
        let t = local_trace();
        for kind in [AnalysisKind::Topk, AnalysisKind::Retention, AnalysisKind::Grouping] {
            let opts = AnalyzeOptions { kind, head: Some(HeadAddr::new(0, 1)), ..AnalyzeOptions::default() };
            let rows = csv_rows(&opts, &t);
            assert!(!rows.is_empty());
            assert!(rows.iter().all(|r| r[1] == "1"));
        }
        let g = csv_rows(&AnalyzeOptions { kind: AnalysisKind::Grouping, ..AnalyzeOptions::default() }, &t);
        assert!(g.iter().all(|r| r[4] == "local"));
    }

    #[test]
    fn empty_trace_is_an_error() {
        let mut t = local_trace();
        t.steps.clear();
        let e = analyze(&t, &AnalyzeOptions::default(), Vec::new()).unwrap_err();
        assert!(e.to_string().contains("no steps"));
        let mut t = local_trace();
        for s in &mut t.steps {
            for h in &mut s.heads {
                h.attention = None;
            }
        }
        assert!(analyze(&t, &AnalyzeOptions::default(), Vec::new()).is_err());
    }
}
