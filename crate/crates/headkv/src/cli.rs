use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use headkv_core::{HeadAddr, Policy};
use serde_json::json;

use crate::analyze::{analyze, AnalysisKind, AnalyzeOptions};
use crate::config_file::{parse_grid, parse_head_addr, parse_mix, Settings};
use crate::{report, selftest, sweep, trace_io};

#[derive(Debug, Parser)]
#[command(name = "headkv", version, about = "Head-aware KV-cache compression on synthetic decoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run generation for every (seed, policy, rho) and write a metrics report.
    Run(Box<RunArgs>),
    /// Analyse the attention distributions stored in a trace file.
    Analyze(AnalyzeArgs),
    /// Inspect or convert trace files.
    #[command(subcommand)]
    Trace(TraceCommand),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Settings file (`key = value` lines); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub policy: Vec<Policy>,
    #[arg(long, value_delimiter = ',')]
    pub rho: Vec<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long = "rs")]
    pub r_s: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub buffer: Option<usize>,
    #[arg(long)]
    pub prefill: Option<usize>,
    #[arg(long)]
    pub local_window: Option<usize>,
    #[arg(long)]
    pub majority_vote: bool,
    #[arg(long)]
    pub regroup_every: Option<usize>,
    /// Token grid as HxW.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    #[arg(long)]
    pub conditional_len: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Head pattern mix: mixed, local, stripe or uniform.
    #[arg(long, value_parser = parse_mix)]
    pub mix: Option<headkv_core::synth::HeadMix>,
    /// Measure output error against a full-cache decoder.
    #[arg(long)]
    pub shadow_full: bool,
    /// Record attention distributions every N steps (0: grouping and last step only).
    #[arg(long)]
    pub attention_every: Option<usize>,
    /// Write the trace of the (single) run here.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Metrics report path; stdout when absent.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    /// Report format; defaults to jsonl for `.jsonl` paths, csv otherwise.
    #[arg(long, value_enum)]
    pub format: Option<ReportFormat>,
    /// Fill `runtime_ms` with wall-clock time.
    #[arg(long)]
    pub timing: bool,
}

impl RunArgs {
    pub fn settings(&self) -> anyhow::Result<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        if !self.policy.is_empty() {
            s.policies = self.policy.clone();
        }
        if !self.rho.is_empty() {
            s.rhos = self.rho.clone();
        }
        if !self.seed.is_empty() {
            s.seeds = self.seed.clone();
        }
        macro_rules! over {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = self.$flag { s.$field = v; }
            )*};
        }
        over!(tau => tau, r_s => r_s, conditional_len => conditional_len, layers => layers,
              heads => heads, dim => head_dim, mix => mix, attention_every => attention_every);
        if let Some((h, w)) = self.grid {
            (s.height, s.width) = (h, w);
        }
        for (flag, field) in [
            (self.window, &mut s.window),
            (self.buffer, &mut s.buffer),
            (self.prefill, &mut s.prefill_threshold),
            (self.local_window, &mut s.local_window_size),
            (self.regroup_every, &mut s.regroup_every),
            (self.steps, &mut s.steps),
        ] {
            if flag.is_some() {
                *field = flag;
            }
        }
        s.majority_vote |= self.majority_vote;
        s.shadow_full |= self.shadow_full;
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub trace: PathBuf,
    #[arg(long, value_enum, default_value = "bins")]
    pub kind: AnalysisKind,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 16)]
    pub topk: usize,
    /// Restrict to one head, e.g. L0H3.
    #[arg(long, value_parser = parse_head_addr)]
    pub head: Option<HeadAddr>,
    /// Fraction of each cache kept in retention comparisons.
    #[arg(long, default_value_t = 0.25)]
    pub keep_fraction: f64,
    #[arg(long = "rs", default_value_t = 0.5)]
    pub r_s: f64,
    #[arg(long, default_value_t = 1.0)]
    pub bandwidth: f64,
    #[arg(long, default_value_t = 0.9)]
    pub tau: f64,
    #[arg(long)]
    pub local_window: Option<usize>,
    /// Output CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TraceCommand {
    /// Print the header and a per-step summary.
    Inspect { trace: PathBuf },
    /// Rewrite a trace as JSON lines (header first, then one line per step).
    Convert {
        trace: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_trace(path: &Path) -> anyhow::Result<headkv_core::trace::AttentionTrace> {
    trace_io::read_file(path).with_context(|| format!("reading trace {}", path.display()))
}

/// Runs a command; `Ok(false)` means it completed but an invariant failed.
pub fn execute(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Analyze(args) => {
            let trace = read_trace(&args.trace)?;
            let opts = AnalyzeOptions {
                kind: args.kind,
                bins: args.bins,
                topk: args.topk,
                head: args.head,
                keep_fraction: args.keep_fraction,
                r_s: args.r_s,
                bandwidth: args.bandwidth,
                tau: args.tau,
                local_window_size: args.local_window,
            };
            analyze(&trace, &opts, output(args.out.as_deref())?)?;
            Ok(true)
        }
        Command::Trace(TraceCommand::Inspect { trace }) => {
            let t = read_trace(&trace)?;
            let h = &t.header;
            let mut out = output(None)?;
            writeln!(
                out,
                "layers={} heads={} d={} grid={}x{} conditional_len={} seed={} steps={} with_attention={}",
                h.layout.num_layers,
                h.layout.num_heads,
                h.grid.head_dim,
                h.grid.height,
                h.grid.width,
                h.grid.conditional_len,
                h.seed,
                t.steps.len(),
                t.steps_with_attention().count()
            )?;
            for s in &t.steps {
                let lens: Vec<String> = s.heads.iter().map(|h| h.cache_len.to_string()).collect();
                let flag = if s.heads.iter().any(|h| h.attention.is_some()) { " *" } else { "" };
                writeln!(out, "step {} cache_len {}{flag}", s.step, lens.join(" "))?;
            }
            out.flush()?;
            Ok(true)
        }
        Command::Trace(TraceCommand::Convert { trace, out }) => {
            let t = read_trace(&trace)?;
            let h = &t.header;
            let mut w = output(out.as_deref())?;
            let header = json!({
                "layers": h.layout.num_layers, "heads": h.layout.num_heads, "d": h.grid.head_dim,
                "height": h.grid.height, "width": h.grid.width,
                "conditional_len": h.grid.conditional_len, "seed": h.seed,
            });
            writeln!(w, "{header}")?;
            for s in &t.steps {
                let heads: Vec<_> = s
                    .heads
                    .iter()
                    .map(|hs| {
                        json!({
                            "cache_len": hs.cache_len,
                            "query": hs.query,
                            "positions": hs.attention.as_ref().map(|a| &a.positions),
                            "probs": hs.attention.as_ref().map(|a| &a.probs),
                        })
                    })
                    .collect();
                writeln!(w, "{}", json!({ "step": s.step, "heads": heads }))?;
            }
            w.flush()?;
            Ok(true)
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            let mut ok = true;
            for c in &checks {
                match &c.outcome {
                    Ok(()) => println!("PASS  {}", c.name),
                    Err(e) => {
                        ok = false;
                        println!("FAIL  {}: {e}", c.name);
                    }
                }
            }
            Ok(ok)
        }
    }
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<bool> {
    let s = args.settings()?;
    // Surface configuration errors before any work starts.
    for &rho in &s.rhos {
        s.compression(rho)?;
    }
    s.synthetic(0)?;
    let n_points = s.seeds.len() * s.policies.len() * s.rhos.len();
    if args.trace_out.is_some() && n_points != 1 {
        bail!("--trace-out needs exactly one run, got {n_points}");
    }
    let results = sweep::run_sweep(&s, args.timing)?;
    if let Some(p) = &args.trace_out {
        trace_io::write_file(p, &results[0].outcome.trace).with_context(|| format!("writing {}", p.display()))?;
    }
    let rows: Vec<_> = results.iter().map(|r| r.row()).collect();
    let format = args.format.unwrap_or(match &args.report_out {
        Some(p) if p.extension().is_some_and(|e| e == "jsonl") => ReportFormat::Jsonl,
        _ => ReportFormat::Csv,
    });
    let out = output(args.report_out.as_deref())?;
    match format {
        ReportFormat::Csv => report::write_csv(out, &rows)?,
        ReportFormat::Jsonl => report::write_jsonl(out, &rows)?,
    }
    let mut ok = true;
    for r in &results {
        for v in &r.violations {
            ok = false;
            eprintln!("invariant violated ({} rho={} seed={}): {v}", r.point.policy, r.point.rho, r.point.seed);
        }
    }
    Ok(ok)
}
