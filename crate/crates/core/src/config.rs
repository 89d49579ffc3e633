//! Flat `key = value` run configuration.
//!
//! Lists are comma separated and define sweeps; sizes accept `K`, `M`, `G`
//! (binary) suffixes with an optional `iB`/`B`. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::controller::{ControllerConfig, Mode};
use crate::crypto::EncryptionKey;
use crate::error::{SimError, SimResult};
use crate::experiment::ExperimentConfig;
use crate::nvm::Timing;
use crate::workloads::{WorkloadKind, WorkloadSpec, DEFAULT_LOG_RING_BYTES};
use crate::write_queue::DrainPolicy;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub modes: Vec<Mode>,
    pub workloads: Vec<WorkloadKind>,
    pub txn_sizes: Vec<u64>,
    pub txn_count: u64,
    /// `None` is an unbounded queue.
    pub queue_lens: Vec<Option<usize>>,
    pub cache_sizes: Vec<u64>,
    pub cache_ways: usize,
    pub cores: Vec<usize>,
    pub seed: u64,
    /// Per-core data footprint; `None` uses the workload default.
    pub footprint: Option<u64>,
    pub log_ring: u64,
    pub timing: Timing,
    pub banks: usize,
    pub capacity: u64,
    pub aes_latency: u64,
    pub cache_hit_latency: u64,
    pub staging_register: bool,
    pub drain_policy: DrainPolicy,
    pub out: Option<PathBuf>,
    pub normalized_out: Option<PathBuf>,
    pub trace_in: Option<PathBuf>,
    pub trace_out: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        let c = ControllerConfig::default();
        Config {
            modes: vec![Mode::Secpm],
            workloads: vec![WorkloadKind::Btree],
            txn_sizes: vec![1024],
            txn_count: 10_000,
            queue_lens: vec![c.queue_capacity],
            cache_sizes: vec![c.cache_bytes],
            cache_ways: c.cache_ways,
            cores: vec![4],
            seed: 1,
            footprint: None,
            log_ring: DEFAULT_LOG_RING_BYTES,
            timing: c.timing,
            banks: c.banks,
            capacity: c.capacity,
            aes_latency: c.aes_latency,
            cache_hit_latency: c.cache_hit_latency,
            staging_register: c.staging_register,
            drain_policy: c.drain_policy,
            out: None,
            normalized_out: None,
            trace_in: None,
            trace_out: None,
        }
    }
}

pub const KEYS: [&str; 27] = [
    "mode",
    "workload",
    "txn_size",
    "txn_count",
    "queue_len",
    "cache_size",
    "cache_ways",
    "cores",
    "seed",
    "footprint",
    "log_ring",
    "t_rcd",
    "t_cl",
    "t_cwd",
    "t_faw",
    "t_wtr",
    "t_wr",
    "banks",
    "capacity",
    "aes_latency",
    "cache_hit_latency",
    "staging_register",
    "drain_policy",
    "out",
    "normalized_out",
    "trace_in",
    "trace_out",
];

pub fn parse_size(s: &str) -> SimResult<u64> {
    let t = s.trim();
    let digits = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, suffix) = t.split_at(digits);
    let n: u64 = num.parse().map_err(|_| SimError::Parse(format!("bad size `{s}`")))?;
    let shift = match suffix.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kb" | "kib" => 10,
        "m" | "mb" | "mib" => 20,
        "g" | "gb" | "gib" => 30,
        _ => return Err(SimError::Parse(format!("bad size suffix in `{s}`"))),
    };
    n.checked_mul(1 << shift)
        .ok_or_else(|| SimError::Parse(format!("size `{s}` overflows")))
}

fn list<T>(value: &str, f: impl Fn(&str) -> SimResult<T>) -> SimResult<Vec<T>> {
    let items: Vec<T> = value.split(',').map(|v| f(v.trim())).collect::<SimResult<_>>()?;
    if items.is_empty() {
        return Err(SimError::Parse("empty list".into()));
    }
    Ok(items)
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> SimResult<T> {
    value
        .trim()
        .parse()
        .map_err(|_| SimError::Parse(format!("`{key}` expects a number, got `{value}`")))
}

fn path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn boolean(key: &str, value: &str) -> SimResult<bool> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(SimError::Parse(format!("`{key}` expects on/off, got `{value}`"))),
    }
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Set one key from its text form.
    pub fn apply(&mut self, key: &str, value: &str) -> SimResult<()> {
        match key.trim() {
            "mode" => self.modes = list(value, |v| v.parse())?,
            "workload" => self.workloads = list(value, |v| v.parse())?,
            "txn_size" => self.txn_sizes = list(value, parse_size)?,
            "txn_count" => self.txn_count = number(key, value)?,
            "queue_len" => {
                self.queue_lens = list(value, |v| match v {
                    "unbounded" => Ok(None),
                    _ => number::<usize>("queue_len", v).map(Some),
                })?
            }
            "cache_size" => self.cache_sizes = list(value, parse_size)?,
            "cache_ways" => self.cache_ways = number(key, value)?,
            "cores" => self.cores = list(value, |v| number("cores", v))?,
            "seed" => self.seed = number(key, value)?,
            "footprint" => {
                self.footprint = match value.trim() {
                    "default" => None,
                    v => Some(parse_size(v)?),
                }
            }
            "log_ring" => self.log_ring = parse_size(value)?,
            "t_rcd" => self.timing.t_rcd = number(key, value)?,
            "t_cl" => self.timing.t_cl = number(key, value)?,
            "t_cwd" => self.timing.t_cwd = number(key, value)?,
            "t_faw" => self.timing.t_faw = number(key, value)?,
            "t_wtr" => self.timing.t_wtr = number(key, value)?,
            "t_wr" => self.timing.t_wr = number(key, value)?,
            "banks" => self.banks = number(key, value)?,
            "capacity" => self.capacity = parse_size(value)?,
            "aes_latency" => self.aes_latency = number(key, value)?,
            "cache_hit_latency" => self.cache_hit_latency = number(key, value)?,
            "staging_register" => self.staging_register = boolean(key, value)?,
            "drain_policy" => {
                self.drain_policy = match value.trim() {
                    "eager" => DrainPolicy::Eager,
                    "watermark" => DrainPolicy::Watermark,
                    v => return Err(SimError::Parse(format!("unknown drain policy `{v}`"))),
                }
            }
            "out" => self.out = path(value),
            "normalized_out" => self.normalized_out = path(value),
            "trace_in" => self.trace_in = path(value),
            "trace_out" => self.trace_out = path(value),
            other => return Err(SimError::Parse(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by the lines of `text`. `#` starts a comment.
    pub fn parse(text: &str) -> SimResult<Config> {
        let mut cfg = Config::default();
        cfg.merge(text)?;
        Ok(cfg)
    }

    pub fn merge(&mut self, text: &str) -> SimResult<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SimError::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            self.apply(k, v)
                .map_err(|e| SimError::Parse(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", join(&self.modes, |m| m.to_string()));
        kv("workload", join(&self.workloads, |w| w.to_string()));
        kv("txn_size", join(&self.txn_sizes, |x| x.to_string()));
        kv("txn_count", self.txn_count.to_string());
        kv(
            "queue_len",
            join(&self.queue_lens, |q| q.map_or("unbounded".into(), |q| q.to_string())),
        );
        kv("cache_size", join(&self.cache_sizes, |x| x.to_string()));
        kv("cache_ways", self.cache_ways.to_string());
        kv("cores", join(&self.cores, |x| x.to_string()));
        kv("seed", self.seed.to_string());
        kv("footprint", self.footprint.map_or("default".into(), |f| f.to_string()));
        kv("log_ring", self.log_ring.to_string());
        kv("t_rcd", self.timing.t_rcd.to_string());
        kv("t_cl", self.timing.t_cl.to_string());
        kv("t_cwd", self.timing.t_cwd.to_string());
        kv("t_faw", self.timing.t_faw.to_string());
        kv("t_wtr", self.timing.t_wtr.to_string());
        kv("t_wr", self.timing.t_wr.to_string());
        kv("banks", self.banks.to_string());
        kv("capacity", self.capacity.to_string());
        kv("aes_latency", self.aes_latency.to_string());
        kv("cache_hit_latency", self.cache_hit_latency.to_string());
        kv("staging_register", self.staging_register.to_string());
        kv(
            "drain_policy",
            match self.drain_policy {
                DrainPolicy::Eager => "eager",
                DrainPolicy::Watermark => "watermark",
            }
            .into(),
        );
        kv("out", opt_path(&self.out));
        kv("normalized_out", opt_path(&self.normalized_out));
        kv("trace_in", opt_path(&self.trace_in));
        kv("trace_out", opt_path(&self.trace_out));
        s
    }

    pub fn controller(&self, mode: Mode, queue_len: Option<usize>, cache_bytes: u64) -> ControllerConfig {
        ControllerConfig {
            mode,
            staging_register: self.staging_register,
            queue_capacity: queue_len,
            drain_policy: self.drain_policy,
            cache_bytes,
            cache_ways: self.cache_ways,
            timing: self.timing,
            banks: self.banks,
            capacity: self.capacity,
            aes_latency: self.aes_latency,
            cache_hit_latency: self.cache_hit_latency,
            key: EncryptionKey::from_seed(self.seed),
            audit: false,
            record_otp: false,
        }
    }

    /// Every sweep cell, ordered by workload, size, queue, cache, cores, mode.
    pub fn cells(&self) -> SimResult<Vec<ExperimentConfig>> {
        let mut out = Vec::new();
        for &kind in &self.workloads {
            for &size in &self.txn_sizes {
                let mut spec = WorkloadSpec::new(kind, size, self.txn_count, self.seed);
                if let Some(f) = self.footprint {
                    spec.footprint = f;
                }
                spec.validate()?;
                for &q in &self.queue_lens {
                    for &cache in &self.cache_sizes {
                        for &cores in &self.cores {
                            for &mode in &self.modes {
                                let mut cell = ExperimentConfig::new(self.controller(mode, q, cache), spec);
                                cell.cores = cores;
                                cell.log_ring_bytes = self.log_ring;
                                out.push(cell);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
