//! Run metrics and CSV reports.

use std::io::Write;

use crate::controller::{Controller, Mode};
use crate::line::Ns;
use crate::workloads::WorkloadKind;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub txns: u64,
    pub flushes: u64,
    pub reads: u64,
    pub data_writes: u64,
    pub counter_writes_appended: u64,
    pub counter_writes_merged: u64,
    pub nvm_writes_total: u64,
    pub txn_latencies: Vec<Ns>,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub reencryptions: u64,
    pub cwt_violations: u64,
    /// Simulated time from the first request to the last NVM write.
    pub sim_time_ns: Ns,
}

impl RunStats {
    /// Collect counters from a controller whose queue has been drained.
    pub fn from_controller(ctrl: &Controller, txn_latencies: Vec<Ns>, sim_time_ns: Ns) -> RunStats {
        let q = ctrl.queue().counters();
        let s = ctrl.stats();
        RunStats {
            txns: txn_latencies.len() as u64,
            flushes: s.flushes,
            reads: s.reads,
            data_writes: q.data_appended,
            counter_writes_appended: q.counter_appended,
            counter_writes_merged: q.counter_merged,
            nvm_writes_total: ctrl.nvm().writes,
            txn_latencies,
            cache_hits: ctrl.cache().hits,
            cache_misses: ctrl.cache().misses,
            reencryptions: s.reencryptions,
            cwt_violations: s.cwt_violations,
            sim_time_ns,
        }
    }

    /// `nvm_writes_total = data_writes + appended − merged`.
    pub fn identity_holds(&self) -> bool {
        self.nvm_writes_total + self.counter_writes_merged == self.data_writes + self.counter_writes_appended
    }

    pub fn mean_latency(&self) -> Option<f64> {
        (!self.txn_latencies.is_empty())
            .then(|| self.txn_latencies.iter().sum::<u64>() as f64 / self.txn_latencies.len() as f64)
    }

    pub fn hit_rate(&self) -> Option<f64> {
        let total = self.cache_hits + self.cache_misses;
        (total > 0).then(|| self.cache_hits as f64 / total as f64)
    }

    /// Transactions per simulated second.
    pub fn throughput(&self) -> Option<f64> {
        (self.sim_time_ns > 0).then(|| self.txns as f64 * 1e9 / self.sim_time_ns as f64)
    }
}

/// Fraction of counter writes removed by merging; `None` without counters.
pub fn reduction_percentage(stats: &RunStats) -> Option<f64> {
    (stats.counter_writes_appended > 0)
        .then(|| stats.counter_writes_merged as f64 / stats.counter_writes_appended as f64)
}

/// Identifies one simulation cell of a sweep.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, PartialOrd, Ord)]
pub struct RunKey {
    pub workload: WorkloadKind,
    pub txn_size: u64,
    pub queue_len: Option<usize>,
    pub cache_bytes: u64,
    pub cores: usize,
    pub mode: Mode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub key: RunKey,
    pub stats: RunStats,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReportFormat {
    /// One row per (cell, metric).
    Csv,
    /// Writes and latency relative to the unencrypted run of the same cell.
    Normalized,
}

pub const REPORT_HEADER: &str = "workload,mode,txn_size,queue_len,cache_bytes,cores,metric,value";
pub const NORMALIZED_HEADER: &str =
    "workload,txn_size,queue_len,cache_bytes,cores,mode,normalized_writes,normalized_latency";

/// Metric names in report order.
pub const METRICS: [&str; 14] = [
    "txns",
    "flushes",
    "data_writes",
    "counter_writes_appended",
    "counter_writes_merged",
    "nvm_writes_total",
    "reduction_pct",
    "mean_latency_ns",
    "throughput_txn_per_s",
    "cache_hits",
    "cache_misses",
    "cache_hit_rate",
    "reencryptions",
    "sim_time_ns",
];

fn float(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| format!("{x:.6}"))
}

fn metric_values(s: &RunStats) -> [String; 14] {
    [
        s.txns.to_string(),
        s.flushes.to_string(),
        s.data_writes.to_string(),
        s.counter_writes_appended.to_string(),
        s.counter_writes_merged.to_string(),
        s.nvm_writes_total.to_string(),
        float(reduction_percentage(s).map(|f| f * 100.0)),
        float(s.mean_latency()),
        float(s.throughput()),
        s.cache_hits.to_string(),
        s.cache_misses.to_string(),
        float(s.hit_rate()),
        s.reencryptions.to_string(),
        s.sim_time_ns.to_string(),
    ]
}

fn queue_len(k: &RunKey) -> String {
    k.queue_len.map_or_else(|| "unbounded".to_string(), |q| q.to_string())
}

pub fn emit_report<W: Write>(records: &[RunRecord], format: ReportFormat, mut out: W) -> std::io::Result<()> {
    match format {
        ReportFormat::Csv => {
            writeln!(out, "{REPORT_HEADER}")?;
            for r in records {
                let k = &r.key;
                for (name, value) in METRICS.iter().zip(metric_values(&r.stats)) {
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{name},{value}",
                        k.workload,
                        k.mode,
                        k.txn_size,
                        queue_len(k),
                        k.cache_bytes,
                        k.cores
                    )?;
                }
            }
        }
        ReportFormat::Normalized => {
            writeln!(out, "{NORMALIZED_HEADER}")?;
            for r in records {
                let base_key = RunKey {
                    mode: Mode::UnsecPm,
                    ..r.key
                };
                let Some(base) = records.iter().find(|b| b.key == base_key) else {
                    continue;
                };
                let writes = (base.stats.nvm_writes_total > 0)
                    .then(|| r.stats.nvm_writes_total as f64 / base.stats.nvm_writes_total as f64);
                let latency = match (r.stats.mean_latency(), base.stats.mean_latency()) {
                    (Some(a), Some(b)) if b > 0.0 => Some(a / b),
                    _ => None,
                };
                let k = &r.key;
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    k.workload,
                    k.txn_size,
                    queue_len(k),
                    k.cache_bytes,
                    k.cores,
                    k.mode,
                    float(writes),
                    float(latency)
                )?;
            }
        }
    }
    Ok(())
}
