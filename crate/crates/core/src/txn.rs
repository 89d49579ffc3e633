//! Undo-logged durable transactions and log-scanning recovery.
//!
//! A log entry is laid out contiguously: a header line, one old-value line
//! per write-set line, then an end tag. Commit overwrites the end tag with a
//! zero line, so only entries with a matching tag are rolled back.

use std::fmt;
use std::io::Write;

use crate::controller::Controller;
use crate::crash::CrashOutcome;
use crate::error::{SimError, SimResult};
use crate::line::{MemoryLine, Ns, LINE_BYTES};

pub const LOG_HEADER_MAGIC: u64 = 0x5345_4350_4d4c_4f47;
pub const LOG_END_MAGIC: u64 = 0x5345_4350_4d45_4e44;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub enum Stage {
    Prepare,
    Mutate,
    Commit,
    Done,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "PREPARE",
            Stage::Mutate => "MUTATE",
            Stage::Commit => "COMMIT",
            Stage::Done => "DONE",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TxnDescriptor {
    pub txn_id: u64,
    /// Contiguous data lines with their new contents.
    pub write_set: Vec<(u64, MemoryLine)>,
    /// First line of this transaction's log entry.
    pub log_base: u64,
    /// Lines read before the update (structure traversal).
    pub touches: Vec<u64>,
    pub stage: Stage,
}

impl TxnDescriptor {
    pub fn new(txn_id: u64, write_set: Vec<(u64, MemoryLine)>, log_base: u64) -> Self {
        TxnDescriptor {
            txn_id,
            write_set,
            log_base,
            touches: Vec::new(),
            stage: Stage::Prepare,
        }
    }

    pub fn data_address(&self) -> u64 {
        self.write_set[0].0
    }

    pub fn payload_len(&self) -> u64 {
        (self.write_set.len() * LINE_BYTES) as u64
    }

    /// Header, old values and end tag.
    pub fn log_lines(&self) -> u64 {
        self.write_set.len() as u64 + 2
    }

    pub fn log_range(&self) -> (u64, u64) {
        (self.log_base, self.log_base + self.log_lines() * 64)
    }

    pub fn end_tag_address(&self) -> u64 {
        self.log_base + (self.log_lines() - 1) * 64
    }

    pub fn validate(&self) -> SimResult<()> {
        if self.write_set.is_empty() {
            return Err(SimError::Config(format!(
                "transaction {} has an empty write set",
                self.txn_id
            )));
        }
        for (i, (addr, _)) in self.write_set.iter().enumerate() {
            if addr % 64 != 0 {
                return Err(SimError::Misaligned(*addr));
            }
            if *addr != self.data_address() + i as u64 * 64 {
                return Err(SimError::Config(format!(
                    "transaction {} write set is not contiguous at {addr:#x}",
                    self.txn_id
                )));
            }
        }
        if !self.log_base.is_multiple_of(64) {
            return Err(SimError::Misaligned(self.log_base));
        }
        let (ls, le) = self.log_range();
        let (ds, de) = (self.data_address(), self.data_address() + self.payload_len());
        if ls < de && ds < le {
            return Err(SimError::Config(format!(
                "transaction {} log overlaps its data",
                self.txn_id
            )));
        }
        Ok(())
    }

    /// Move to a later stage; stages never go backwards.
    pub fn advance(&mut self, next: Stage) {
        assert!(next >= self.stage, "stage {next} after {}", self.stage);
        self.stage = next;
    }
}

pub fn header_line(txn_id: u64, data_address: u64, payload_len: u64) -> MemoryLine {
    MemoryLine::from_words([LOG_HEADER_MAGIC, txn_id, data_address, payload_len, 0, 0, 0, 0])
}

pub fn end_tag_line(txn_id: u64) -> MemoryLine {
    MemoryLine::from_words([LOG_END_MAGIC, txn_id, 0, 0, 0, 0, 0, 0])
}

/// One step of a transaction program.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Op {
    Enter(Stage),
    Touch(u64),
    ReadOld(usize),
    FlushHeader,
    FlushOld(usize),
    FlushEndTag,
    FlushData(usize),
    Invalidate,
    Fence,
}

pub fn program(txn: &TxnDescriptor) -> Vec<Op> {
    let n = txn.write_set.len();
    let mut ops = Vec::with_capacity(3 * n + txn.touches.len() + 10);
    ops.push(Op::Enter(Stage::Prepare));
    ops.extend(txn.touches.iter().map(|&a| Op::Touch(a)));
    ops.extend((0..n).map(Op::ReadOld));
    ops.push(Op::FlushHeader);
    ops.extend((0..n).map(Op::FlushOld));
    ops.push(Op::FlushEndTag);
    ops.push(Op::Fence);
    ops.push(Op::Enter(Stage::Mutate));
    ops.extend((0..n).map(Op::FlushData));
    ops.push(Op::Fence);
    ops.push(Op::Enter(Stage::Commit));
    ops.push(Op::Invalidate);
    ops.push(Op::Fence);
    ops.push(Op::Enter(Stage::Done));
    ops
}

/// Execution state of one transaction, advanced an operation at a time so
/// that several cores can interleave at flush granularity.
#[derive(Clone, Debug)]
pub struct TxnCursor {
    ops: Vec<Op>,
    pc: usize,
    old: Vec<MemoryLine>,
}

impl TxnCursor {
    pub fn new(txn: &TxnDescriptor) -> Self {
        TxnCursor {
            ops: program(txn),
            pc: 0,
            old: vec![MemoryLine::ZERO; txn.write_set.len()],
        }
    }

    pub fn is_done(&self) -> bool {
        self.pc >= self.ops.len()
    }

    pub fn step(&mut self, txn: &mut TxnDescriptor, ctrl: &mut Controller, now: Ns) -> SimResult<Ns> {
        let op = self.ops[self.pc];
        let t = match op {
            Op::Enter(stage) => {
                txn.advance(stage);
                ctrl.set_stage(Some(stage));
                now
            }
            Op::Touch(addr) => ctrl.handle_read(addr, now)?.1,
            Op::ReadOld(i) => {
                let (line, t) = ctrl.handle_read(txn.write_set[i].0, now)?;
                self.old[i] = line;
                t
            }
            Op::FlushHeader => ctrl.handle_flush(
                txn.log_base,
                header_line(txn.txn_id, txn.data_address(), txn.payload_len()),
                now,
            )?,
            Op::FlushOld(i) => ctrl.handle_flush(txn.log_base + (i as u64 + 1) * 64, self.old[i], now)?,
            Op::FlushEndTag => ctrl.handle_flush(txn.end_tag_address(), end_tag_line(txn.txn_id), now)?,
            Op::FlushData(i) => {
                let (addr, line) = txn.write_set[i];
                ctrl.handle_flush(addr, line, now)?
            }
            Op::Invalidate => ctrl.handle_flush(txn.end_tag_address(), MemoryLine::ZERO, now)?,
            Op::Fence => {
                ctrl.fence()?;
                now
            }
        };
        self.pc += 1;
        Ok(t)
    }
}

/// Run prepare, mutate and commit back to back; returns the end time.
pub fn run_transaction(ctrl: &mut Controller, txn: &TxnDescriptor, now: Ns) -> SimResult<Ns> {
    txn.validate()?;
    let mut txn = txn.clone();
    let mut cursor = TxnCursor::new(&txn);
    let mut t = now;
    while !cursor.is_done() {
        t = cursor.step(&mut txn, ctrl, t)?;
    }
    Ok(t)
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LogEntry {
    pub txn_id: u64,
    pub data_address: u64,
    pub payload_len: u64,
    pub old_values: Vec<MemoryLine>,
    pub complete: bool,
}

#[derive(Clone, Default, PartialEq, Eq, Debug)]
pub struct RecoveryReport {
    pub entries: Vec<LogEntry>,
    pub rolled_back: Vec<u64>,
    pub discarded: Vec<u64>,
    pub time: Ns,
}

/// Scan `[start, end)` for log entries; undo complete ones and invalidate
/// them, abandon incomplete ones. The scan stops at the first line that is
/// not a well-formed header.
pub fn recover_log(ctrl: &mut Controller, (start, end): (u64, u64), now: Ns) -> SimResult<RecoveryReport> {
    let mut report = RecoveryReport {
        time: now,
        ..Default::default()
    };
    let mut t = now;
    let mut cursor = start;
    while cursor + 64 <= end {
        let (header, done) = ctrl.handle_read(cursor, t)?;
        t = done;
        let len = header.word(3);
        let lines = len / 64;
        let sane = header.word(0) == LOG_HEADER_MAGIC && len > 0 && len % 64 == 0 && cursor + (lines + 2) * 64 <= end;
        if !sane {
            break;
        }
        let txn_id = header.word(1);
        let data_address = header.word(2);
        let tag_addr = cursor + (lines + 1) * 64;
        let (tag, done) = ctrl.handle_read(tag_addr, t)?;
        t = done;
        let complete = tag.word(0) == LOG_END_MAGIC && tag.word(1) == txn_id;
        let mut entry = LogEntry {
            txn_id,
            data_address,
            payload_len: len,
            old_values: Vec::new(),
            complete,
        };
        if complete {
            for i in 0..lines {
                let (old, done) = ctrl.handle_read(cursor + (i + 1) * 64, t)?;
                t = done;
                entry.old_values.push(old);
            }
            for (i, old) in entry.old_values.iter().enumerate() {
                t = ctrl.handle_flush(data_address + i as u64 * 64, *old, t)?;
            }
            t = ctrl.handle_flush(tag_addr, MemoryLine::ZERO, t)?;
            report.rolled_back.push(txn_id);
        } else {
            report.discarded.push(txn_id);
        }
        report.entries.push(entry);
        cursor = tag_addr + 64;
    }
    report.time = t;
    Ok(report)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum RecoveryVerdict {
    /// Data equals the pre-transaction image.
    RolledBack,
    /// Data equals the post-transaction image.
    Committed,
    /// Nothing was meant to change and nothing did.
    Intact,
    /// Neither image: torn or undecryptable, at the first bad line.
    Inconsistent { address: u64 },
}

impl RecoveryVerdict {
    pub fn is_consistent(self) -> bool {
        !matches!(self, RecoveryVerdict::Inconsistent { .. })
    }
}

impl fmt::Display for RecoveryVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecoveryVerdict::RolledBack => f.write_str("ROLLED_BACK"),
            RecoveryVerdict::Committed => f.write_str("COMMITTED"),
            RecoveryVerdict::Intact => f.write_str("INTACT"),
            RecoveryVerdict::Inconsistent { address } => write!(f, "INCONSISTENT@{address:#x}"),
        }
    }
}

/// Compare recovered data with the pre- and post-images.
pub fn judge(ctrl: &mut Controller, txn: &TxnDescriptor, pre: &[MemoryLine], now: Ns) -> SimResult<RecoveryVerdict> {
    let mut t = now;
    let (mut all_pre, mut all_post) = (true, true);
    let mut first_bad = None;
    for ((addr, post), pre) in txn.write_set.iter().zip(pre) {
        let (line, done) = ctrl.handle_read(*addr, t)?;
        t = done;
        let is_pre = line == *pre;
        let is_post = line == *post;
        all_pre &= is_pre;
        all_post &= is_post;
        if !is_pre && !is_post && first_bad.is_none() {
            first_bad = Some(*addr);
        }
    }
    Ok(if all_pre {
        RecoveryVerdict::RolledBack
    } else if all_post {
        RecoveryVerdict::Committed
    } else {
        RecoveryVerdict::Inconsistent {
            address: first_bad.unwrap_or(txn.data_address()),
        }
    })
}

/// Rebuild a controller from `snapshot`, finish any re-encryption, replay
/// the log and judge one transaction.
pub fn recover(
    cfg: crate::controller::ControllerConfig,
    snapshot: &crate::nvm::CrashSnapshot,
    log_region: (u64, u64),
    txn: &TxnDescriptor,
    pre: &[MemoryLine],
) -> SimResult<RecoveryVerdict> {
    let mut ctrl = Controller::from_snapshot(cfg, snapshot)?;
    let t = ctrl.resume_reencryption(0)?;
    let t = recover_log(&mut ctrl, log_region, t)?.time;
    judge(&mut ctrl, txn, pre, t)
}

/// Crash a transaction at every boundary of its run and recover each time.
pub fn enumerate_crash_points(cfg: crate::controller::ControllerConfig, lines: usize) -> SimResult<Vec<CrashOutcome>> {
    if lines == 0 || lines > 64 {
        return Err(SimError::Config(format!(
            "exhaustive enumeration needs a 1..=64 line transaction, got {lines}"
        )));
    }
    let scenario = crate::crash::TxnScenario::new(cfg, lines);
    crate::crash::inject(
        &crate::crash::CrashPlan::exhaustive(crate::crash::Scope::Transaction),
        &scenario,
    )
}

pub const VERDICT_CSV_HEADER: &str = "txn_id,crash_point_id,stage,event,verdict,note";

/// Verdict rows; `expected` marks inconsistencies the mode does not promise to avoid.
pub fn write_verdict_csv<W: Write>(
    mut out: W,
    txn_id: u64,
    outcomes: &[CrashOutcome],
    expected: bool,
) -> std::io::Result<()> {
    writeln!(out, "{VERDICT_CSV_HEADER}")?;
    for o in outcomes {
        let stage = o.point.stage.map_or("NONE", Stage::name);
        let note = match (o.verdict.is_consistent(), expected) {
            (true, _) => "",
            (false, true) => "EXPECTED",
            (false, false) => "VIOLATION",
        };
        writeln!(
            out,
            "{txn_id},{},{stage},{},{},{note}",
            o.point.index,
            o.point.kind.name(),
            o.verdict
        )?;
    }
    Ok(())
}
