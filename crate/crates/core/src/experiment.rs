//! Multi-requester experiment driver.
//!
//! Every core owns a transaction stream and a private data and log region.
//! Cores advance one transaction operation at a time, always picking the
//! lowest `(time, core id)`, so runs are reproducible bit for bit.

use rayon::prelude::*;

use crate::controller::{Controller, ControllerConfig};
use crate::error::{SimError, SimResult};
use crate::line::{Ns, PAGE_BYTES};
use crate::stats::{RunKey, RunRecord, RunStats};
use crate::txn::{TxnCursor, TxnDescriptor};
use crate::workloads::{
    descriptors_from_trace, LogRing, Placement, TraceTxn, TxnStream, WorkloadSpec, DEFAULT_LOG_RING_BYTES,
};

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub controller: ControllerConfig,
    pub workload: WorkloadSpec,
    pub cores: usize,
    pub log_ring_bytes: u64,
    /// Replay these transactions (dealt round-robin to cores) instead of generating.
    pub trace: Option<Vec<TraceTxn>>,
}

impl ExperimentConfig {
    pub fn new(controller: ControllerConfig, workload: WorkloadSpec) -> Self {
        ExperimentConfig {
            controller,
            workload,
            cores: 4,
            log_ring_bytes: DEFAULT_LOG_RING_BYTES,
            trace: None,
        }
    }

    pub fn key(&self) -> RunKey {
        RunKey {
            workload: self.workload.kind,
            txn_size: self.workload.txn_size,
            queue_len: self.controller.queue_capacity,
            cache_bytes: self.controller.cache_bytes,
            cores: self.cores,
            mode: self.controller.mode,
        }
    }
}

fn round_down_page(x: u64) -> u64 {
    x / PAGE_BYTES * PAGE_BYTES
}

/// Per-core streams over disjoint regions. The footprint shrinks when
/// `cores` full-size regions do not fit the data span.
fn build_streams(cfg: &ExperimentConfig, data_span: u64) -> SimResult<Vec<Box<dyn Iterator<Item = TxnDescriptor>>>> {
    let cores = cfg.cores as u64;
    if let Some(trace) = &cfg.trace {
        let ring_top = data_span - cores * cfg.log_ring_bytes;
        if let Some(t) = trace.iter().find(|t| t.address + t.len > ring_top) {
            return Err(SimError::Config(format!(
                "trace address {:#x} overlaps the log rings above {ring_top:#x}",
                t.address
            )));
        }
        let mut streams: Vec<Box<dyn Iterator<Item = TxnDescriptor>>> = Vec::new();
        for c in 0..cores {
            let mine: Vec<TraceTxn> = trace.iter().skip(c as usize).step_by(cfg.cores).cloned().collect();
            let mut ring = LogRing::new(ring_top + c * cfg.log_ring_bytes, cfg.log_ring_bytes);
            let seed = cfg.workload.seed.wrapping_add(c);
            streams.push(Box::new(descriptors_from_trace(&mine, seed, &mut ring).into_iter()));
        }
        return Ok(streams);
    }

    let mut spec = cfg.workload;
    let per_core = round_down_page(data_span / cores);
    if spec.footprint + cfg.log_ring_bytes > per_core {
        let shrunk = round_down_page(per_core.saturating_sub(cfg.log_ring_bytes));
        log::warn!(
            "footprint {} per core does not fit {} cores; using {shrunk}",
            spec.footprint,
            cfg.cores
        );
        spec.footprint = shrunk;
    }
    let stride = spec.footprint + cfg.log_ring_bytes;
    (0..cores)
        .map(|c| {
            let core_spec = WorkloadSpec {
                seed: spec.seed.wrapping_add(c),
                ..spec
            };
            let placement = Placement::contiguous(c * stride, spec.footprint, cfg.log_ring_bytes);
            TxnStream::new(core_spec, placement).map(|s| Box::new(s) as Box<dyn Iterator<Item = TxnDescriptor>>)
        })
        .collect()
}

struct Core {
    stream: Box<dyn Iterator<Item = TxnDescriptor>>,
    current: Option<(TxnDescriptor, TxnCursor, Ns)>,
    time: Ns,
    finished: bool,
}

/// Run the experiment; returns the stats and the final controller.
pub fn run_with_controller(cfg: &ExperimentConfig) -> SimResult<(RunStats, Controller)> {
    if cfg.cores == 0 {
        return Err(SimError::Config("at least one core is required".into()));
    }
    let mut ctrl = Controller::new(cfg.controller.clone())?;
    let mut cores: Vec<Core> = build_streams(cfg, ctrl.map().data_span)?
        .into_iter()
        .map(|stream| Core {
            stream,
            current: None,
            time: 0,
            finished: false,
        })
        .collect();
    let mut latencies = Vec::new();
    while let Some(core) = cores
        .iter_mut()
        .enumerate()
        .filter(|(_, c)| !c.finished)
        .min_by_key(|(i, c)| (c.time, *i))
        .map(|(_, c)| c)
    {
        if core.current.is_none() {
            match core.stream.next() {
                Some(txn) => {
                    txn.validate()?;
                    let cursor = TxnCursor::new(&txn);
                    core.current = Some((txn, cursor, core.time));
                }
                None => {
                    core.finished = true;
                    continue;
                }
            }
        }
        let (txn, cursor, start) = core.current.as_mut().expect("transaction in flight");
        core.time = cursor.step(txn, &mut ctrl, core.time)?;
        if cursor.is_done() {
            latencies.push(core.time - *start);
            core.current = None;
        }
    }
    let last = cores.iter().map(|c| c.time).max().unwrap_or(0);
    ctrl.drain_all(last)?;
    let sim_time = ctrl.quiesce_time();
    let stats = RunStats::from_controller(&ctrl, latencies, sim_time);
    debug_assert!(stats.identity_holds());
    Ok((stats, ctrl))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> SimResult<RunStats> {
    run_with_controller(cfg).map(|(s, _)| s)
}

/// Run independent cells in parallel; results keep the input order.
pub fn run_cells(cells: &[ExperimentConfig]) -> SimResult<Vec<RunRecord>> {
    cells
        .par_iter()
        .map(|cfg| run_experiment(cfg).map(|stats| RunRecord { key: cfg.key(), stats }))
        .collect()
}
