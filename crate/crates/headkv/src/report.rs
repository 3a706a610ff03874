//! Metrics rows as CSV or JSON lines. Column order is fixed; new columns go
//! at the end.

use std::io::Write;

use headkv_core::metrics::RunMetrics;
use serde::{Deserialize, Serialize};

pub const COLUMNS: [&str; 15] = [
    "policy",
    "rho",
    "tau",
    "r_s",
    "P",
    "w",
    "seed",
    "steps",
    "retained_tokens_mean",
    "simulated_memory_bytes",
    "memory_saving_fraction",
    "output_mse_vs_full",
    "grouping_accuracy",
    "local_head_fraction",
    "runtime_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub policy: String,
    pub rho: f64,
    pub tau: f64,
    pub r_s: f64,
    #[serde(rename = "P")]
    pub buffer: usize,
    #[serde(rename = "w")]
    pub window: usize,
    pub seed: u64,
    pub steps: usize,
    pub retained_tokens_mean: f64,
    pub simulated_memory_bytes: usize,
    pub memory_saving_fraction: f64,
    pub output_mse_vs_full: Option<f64>,
    pub grouping_accuracy: Option<f64>,
    pub local_head_fraction: Option<f64>,
    /// Zero unless timing was requested, so reports stay reproducible.
    pub runtime_ms: f64,
}

impl MetricsRow {
    pub fn new(m: &RunMetrics, runtime_ms: f64) -> Self {
        Self {
            policy: m.policy.name().to_string(),
            rho: m.rho,
            tau: m.tau,
            r_s: m.r_s,
            buffer: m.buffer,
            window: m.window,
            seed: m.seed,
            steps: m.steps,
            retained_tokens_mean: m.retained_tokens_mean(),
            simulated_memory_bytes: m.simulated_memory_bytes(),
            memory_saving_fraction: m.memory_saving_fraction(),
            output_mse_vs_full: m.output_mse_vs_full,
            grouping_accuracy: m.grouping_accuracy,
            local_head_fraction: m.local_head_fraction,
            runtime_ms,
        }
    }
}

pub fn write_csv<W: Write>(out: W, rows: &[MetricsRow]) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<W: Write>(mut out: W, rows: &[MetricsRow]) -> anyhow::Result<()> {
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> anyhow::Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        anyhow::bail!("unexpected report columns {header:?}");
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> MetricsRow {
        MetricsRow {
            policy: "ste".into(),
            rho: 0.125,
            tau: 0.9,
            r_s: 0.5,
            buffer: 48,
            window: 48,
            seed: 3,
            steps: 576,
            retained_tokens_mean: 68.0,
            simulated_memory_bytes: 1_114_112,
            memory_saving_fraction: 1.0 - 68.0 / 592.0,
            output_mse_vs_full: None,
            grouping_accuracy: Some(1.0),
            local_head_fraction: Some(0.5),
            runtime_ms: 0.0,
        }
    }

    #[test]
    fn csv_header_and_round_trip() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[row()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), COLUMNS.join(","));
        assert!(text.lines().nth(1).unwrap().starts_with("ste,0.125,0.9,0.5,48,48,3,576,68.0,1114112,"));
        assert_eq!(read_csv(&buf[..]).unwrap(), vec![row()]);
    }

    #[test]
    fn jsonl_has_every_column() {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[row(), row()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for c in COLUMNS {
            assert!(v.get(c).is_some(), "missing {c}");
        }
        assert!(v["output_mse_vs_full"].is_null());
    }
}
