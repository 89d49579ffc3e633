//! Crash injection: boundary accounting inside the controller, crash plans,
//! replayable scenarios and the driver that recovers every snapshot.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::controller::{Controller, ControllerConfig, Mode};
use crate::error::{SimError, SimResult};
use crate::line::{MemoryLine, Ns, LINES_PER_PAGE};
use crate::nvm::CrashSnapshot;
use crate::txn::{self, RecoveryVerdict, Stage, TxnDescriptor};

/// Durability-relevant state changes; a crash may strike right after any.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum BoundaryKind {
    /// Before the first event of the scope.
    Start,
    QueueAppend,
    Drain,
    RegisterStore,
    Fence,
    RsrUpdate,
}

impl BoundaryKind {
    pub fn name(self) -> &'static str {
        match self {
            BoundaryKind::Start => "start",
            BoundaryKind::QueueAppend => "append",
            BoundaryKind::Drain => "drain",
            BoundaryKind::RegisterStore => "register",
            BoundaryKind::Fence => "fence",
            BoundaryKind::RsrUpdate => "rsr",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CrashPoint {
    pub index: u64,
    pub kind: BoundaryKind,
    pub stage: Option<Stage>,
    pub in_reencryption: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Scope {
    /// Every boundary of the scenario's crash-scoped run.
    Transaction,
    /// Only boundaries inside a page re-encryption episode.
    Reencryption,
}

impl FromStr for Scope {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "txn" | "transaction" => Ok(Scope::Transaction),
            "reencryption" | "reencrypt" => Ok(Scope::Reencryption),
            other => Err(SimError::Parse(format!("unknown crash scope `{other}`"))),
        }
    }
}

/// Counts boundaries and halts the controller at a chosen one.
#[derive(Clone, Debug)]
pub struct CrashTrigger {
    armed: bool,
    scope: Scope,
    crash_at: Option<u64>,
    next: u64,
    points: Vec<CrashPoint>,
    snapshot: Option<CrashSnapshot>,
}

impl CrashTrigger {
    pub fn disarmed() -> Self {
        CrashTrigger {
            armed: false,
            scope: Scope::Transaction,
            crash_at: None,
            next: 0,
            points: Vec::new(),
            snapshot: None,
        }
    }

    /// Record boundaries without crashing.
    pub fn counting(scope: Scope) -> Self {
        CrashTrigger {
            armed: true,
            scope,
            ..Self::disarmed()
        }
    }

    pub fn at(index: u64, scope: Scope) -> Self {
        CrashTrigger {
            crash_at: Some(index),
            ..Self::counting(scope)
        }
    }

    pub(crate) fn counts(&self, in_reencryption: bool) -> bool {
        self.armed && (self.scope == Scope::Transaction || in_reencryption)
    }

    /// Register a boundary; returns its index if the crash fires here.
    pub(crate) fn record(&mut self, kind: BoundaryKind, stage: Option<Stage>, in_reencryption: bool) -> Option<u64> {
        let index = self.next;
        self.next += 1;
        self.points.push(CrashPoint {
            index,
            kind,
            stage,
            in_reencryption,
        });
        if self.crash_at == Some(index) {
            self.armed = false;
            Some(index)
        } else {
            None
        }
    }

    pub(crate) fn capture(&mut self, snapshot: CrashSnapshot) {
        self.snapshot = Some(snapshot);
    }

    pub fn points(&self) -> &[CrashPoint] {
        &self.points
    }

    pub fn snapshot(&self) -> Option<&CrashSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn fired(&self) -> bool {
        self.snapshot.is_some()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Strategy {
    AtEvent(u64),
    Exhaustive,
    Random { count: usize, seed: u64 },
}

impl FromStr for Strategy {
    type Err = SimError;

    /// `exhaustive`, `random:N` (seed 0) or `random:N:SEED`, `at:K`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SimError::Parse(format!("unknown crash plan `{s}`"));
        let mut parts = s.trim().split(':');
        let num = |p: Option<&str>| p.and_then(|v| v.parse::<u64>().ok()).ok_or_else(bad);
        match parts.next() {
            Some("exhaustive") if parts.next().is_none() => Ok(Strategy::Exhaustive),
            Some("at") => {
                let k = num(parts.next())?;
                parts.next().map_or(Ok(Strategy::AtEvent(k)), |_| Err(bad()))
            }
            Some("random") => {
                let count = num(parts.next())? as usize;
                let seed = match parts.next() {
                    Some(v) => v.parse().map_err(|_| bad())?,
                    None => 0,
                };
                parts
                    .next()
                    .map_or(Ok(Strategy::Random { count, seed }), |_| Err(bad()))
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CrashPlan {
    pub strategy: Strategy,
    pub scope: Scope,
}

impl CrashPlan {
    pub fn exhaustive(scope: Scope) -> Self {
        CrashPlan {
            strategy: Strategy::Exhaustive,
            scope,
        }
    }

    /// Crash indices to visit, ascending, given `total` boundaries in scope.
    pub fn points(&self, total: u64) -> Vec<u64> {
        match self.strategy {
            Strategy::AtEvent(k) => (k < total).then_some(k).into_iter().collect(),
            Strategy::Exhaustive => (0..total).collect(),
            Strategy::Random { count, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = count.min(total as usize);
                let mut picked: Vec<u64> = sample(&mut rng, total as usize, n)
                    .into_iter()
                    .map(|i| i as u64)
                    .collect();
                picked.sort_unstable();
                picked
            }
        }
    }
}

/// A deterministic experiment that can be crashed and recovered.
pub trait Scenario {
    fn name(&self) -> String;
    fn config(&self) -> ControllerConfig;
    /// State built before the crash scope opens.
    fn setup(&self, ctrl: &mut Controller) -> SimResult<Ns>;
    /// The crash-scoped work; must call `scope_start` first.
    fn run(&self, ctrl: &mut Controller, now: Ns) -> SimResult<Ns>;
    /// Rebuild from a snapshot and judge the recovered state.
    fn recover(&self, snapshot: &CrashSnapshot) -> SimResult<RecoveryVerdict>;
    /// Id used in verdict reports.
    fn txn_id(&self) -> u64 {
        0
    }
}

#[derive(Clone, Debug)]
pub struct CrashOutcome {
    pub point: CrashPoint,
    pub snapshot: CrashSnapshot,
    pub verdict: RecoveryVerdict,
}

fn replay(scenario: &dyn Scenario, trigger: CrashTrigger) -> SimResult<(Controller, SimResult<Ns>)> {
    let mut ctrl = Controller::new(scenario.config())?;
    let t = scenario.setup(&mut ctrl)?;
    *ctrl.trigger_mut() = trigger;
    let result = scenario.run(&mut ctrl, t);
    Ok((ctrl, result))
}

/// Boundaries the scenario passes through in the plan's scope.
pub fn enumerate_boundaries(scenario: &dyn Scenario, scope: Scope) -> SimResult<Vec<CrashPoint>> {
    let (ctrl, result) = replay(scenario, CrashTrigger::counting(scope))?;
    result?;
    Ok(ctrl.trigger().points().to_vec())
}

/// Crash at every point the plan selects and recover each snapshot.
pub fn inject(plan: &CrashPlan, scenario: &dyn Scenario) -> SimResult<Vec<CrashOutcome>> {
    let boundaries = enumerate_boundaries(scenario, plan.scope)?;
    let mut outcomes = Vec::new();
    for k in plan.points(boundaries.len() as u64) {
        let (ctrl, result) = replay(scenario, CrashTrigger::at(k, plan.scope))?;
        match result {
            Err(SimError::Halted(hit)) if hit == k => {}
            Err(e) => return Err(e),
            Ok(_) => unreachable!("crash point {k} was enumerated but not reached"),
        }
        let snapshot = ctrl.trigger().snapshot().cloned().expect("halt captures a snapshot");
        let verdict = scenario.recover(&snapshot)?;
        log::debug!("{} crash {k}: {verdict}", scenario.name());
        outcomes.push(CrashOutcome {
            point: boundaries[k as usize],
            snapshot,
            verdict,
        });
    }
    Ok(outcomes)
}

/// Deterministic, distinguishable line contents.
pub fn pattern_line(tag: u64, index: u64) -> MemoryLine {
    let mut words = [0u64; 8];
    for (i, w) in words.iter_mut().enumerate() {
        *w = tag.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(i as u32 * 8)
            ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9)
            ^ i as u64;
    }
    MemoryLine::from_words(words)
}

fn settle(ctrl: &mut Controller, t: Ns) -> SimResult<Ns> {
    let t = ctrl.writeback_dirty(t)?;
    ctrl.drain_all(t)
}

/// An undo-logged transaction over pre-initialised data lines.
#[derive(Clone, Debug)]
pub struct TxnScenario {
    pub config: ControllerConfig,
    pub txn: TxnDescriptor,
    pub pre_image: Vec<MemoryLine>,
    pub log_region: (u64, u64),
}

impl TxnScenario {
    /// `lines` contiguous data lines on page 16, log area at page 1.
    pub fn new(config: ControllerConfig, lines: usize) -> Self {
        let data = 16 * 4096;
        let log_base = 4096;
        let write_set = (0..lines as u64).map(|i| (data + i * 64, pattern_line(2, i))).collect();
        let pre_image = (0..lines as u64).map(|i| pattern_line(1, i)).collect();
        TxnScenario {
            config,
            txn: TxnDescriptor::new(1, write_set, log_base),
            pre_image,
            log_region: (log_base, log_base + 8 * 4096),
        }
    }
}

impl Scenario for TxnScenario {
    fn name(&self) -> String {
        format!("txn-{}-lines-{}", self.txn.write_set.len(), self.config.mode)
    }

    fn config(&self) -> ControllerConfig {
        self.config.clone()
    }

    fn setup(&self, ctrl: &mut Controller) -> SimResult<Ns> {
        let mut t = 0;
        for ((addr, _), pre) in self.txn.write_set.iter().zip(&self.pre_image) {
            t = ctrl.handle_flush(*addr, *pre, t)?;
        }
        settle(ctrl, t)
    }

    fn run(&self, ctrl: &mut Controller, now: Ns) -> SimResult<Ns> {
        ctrl.set_stage(Some(Stage::Prepare));
        ctrl.scope_start()?;
        let t = txn::run_transaction(ctrl, &self.txn, now)?;
        ctrl.drain_all(t)
    }

    fn recover(&self, snapshot: &CrashSnapshot) -> SimResult<RecoveryVerdict> {
        let mut ctrl = Controller::from_snapshot(self.config.clone(), snapshot)?;
        let t = ctrl.resume_reencryption(0)?;
        let t = txn::recover_log(&mut ctrl, self.log_region, t)?.time;
        txn::judge(&mut ctrl, &self.txn, &self.pre_image, t)
    }

    fn txn_id(&self) -> u64 {
        self.txn.txn_id
    }
}

/// A single in-place line update with no log.
#[derive(Clone, Debug)]
pub struct AtomicWriteScenario {
    pub config: ControllerConfig,
    pub address: u64,
    pub old: MemoryLine,
    pub new: MemoryLine,
}

impl AtomicWriteScenario {
    pub fn new(config: ControllerConfig) -> Self {
        AtomicWriteScenario {
            config,
            address: 40 * 4096 + 5 * 64,
            old: pattern_line(3, 0),
            new: pattern_line(4, 0),
        }
    }
}

impl Scenario for AtomicWriteScenario {
    fn name(&self) -> String {
        let reg = if self.config.staging_register {
            "register"
        } else {
            "no-register"
        };
        format!("atomic-write-{}-{reg}", self.config.mode)
    }

    fn config(&self) -> ControllerConfig {
        self.config.clone()
    }

    fn setup(&self, ctrl: &mut Controller) -> SimResult<Ns> {
        let t = ctrl.handle_flush(self.address, self.old, 0)?;
        settle(ctrl, t)
    }

    fn run(&self, ctrl: &mut Controller, now: Ns) -> SimResult<Ns> {
        ctrl.set_stage(Some(Stage::Mutate));
        ctrl.scope_start()?;
        let t = ctrl.handle_flush(self.address, self.new, now)?;
        ctrl.set_stage(Some(Stage::Done));
        ctrl.drain_all(t)
    }

    fn recover(&self, snapshot: &CrashSnapshot) -> SimResult<RecoveryVerdict> {
        let mut ctrl = Controller::from_snapshot(self.config.clone(), snapshot)?;
        let t = ctrl.resume_reencryption(0)?;
        let (line, _) = ctrl.handle_read(self.address, t)?;
        Ok(if line == self.old {
            RecoveryVerdict::RolledBack
        } else if line == self.new {
            RecoveryVerdict::Committed
        } else {
            RecoveryVerdict::Inconsistent { address: self.address }
        })
    }
}

/// Drive one line of a fully written page to minor overflow; the crash
/// scope is the resulting page re-encryption.
#[derive(Clone, Debug)]
pub struct ReencryptionScenario {
    pub config: ControllerConfig,
    pub page: u64,
    pub hot_line: usize,
}

impl ReencryptionScenario {
    pub fn new(config: ControllerConfig) -> Self {
        ReencryptionScenario {
            config,
            page: 9,
            hot_line: 7,
        }
    }

    fn address(&self, i: usize) -> u64 {
        self.page * 4096 + i as u64 * 64
    }

    fn expected(&self, i: usize, hot_final: bool) -> MemoryLine {
        if i == self.hot_line {
            pattern_line(6, if hot_final { 128 } else { 127 })
        } else {
            pattern_line(5, i as u64)
        }
    }
}

impl Scenario for ReencryptionScenario {
    fn name(&self) -> String {
        format!("reencrypt-page-{}-{}", self.page, self.config.mode)
    }

    fn config(&self) -> ControllerConfig {
        self.config.clone()
    }

    fn setup(&self, ctrl: &mut Controller) -> SimResult<Ns> {
        let mut t = 0;
        for i in 0..LINES_PER_PAGE {
            if i != self.hot_line {
                t = ctrl.handle_flush(self.address(i), self.expected(i, false), t)?;
            }
        }
        // 127 writes bring the hot minor to its maximum
        for k in 1..=127 {
            t = ctrl.handle_flush(self.address(self.hot_line), pattern_line(6, k), t)?;
        }
        settle(ctrl, t)
    }

    fn run(&self, ctrl: &mut Controller, now: Ns) -> SimResult<Ns> {
        ctrl.set_stage(Some(Stage::Mutate));
        ctrl.scope_start()?;
        let t = ctrl.handle_flush(self.address(self.hot_line), self.expected(self.hot_line, true), now)?;
        ctrl.drain_all(t)
    }

    fn recover(&self, snapshot: &CrashSnapshot) -> SimResult<RecoveryVerdict> {
        let mut ctrl = Controller::from_snapshot(self.config.clone(), snapshot)?;
        let mut t = ctrl.resume_reencryption(0)?;
        let mut hot_final = false;
        for i in 0..LINES_PER_PAGE {
            let (line, done) = ctrl.handle_read(self.address(i), t)?;
            t = done;
            let ok = line == self.expected(i, false) || (i == self.hot_line && line == self.expected(i, true));
            if !ok {
                return Ok(RecoveryVerdict::Inconsistent {
                    address: self.address(i),
                });
            }
            hot_final |= i == self.hot_line && line == self.expected(i, true);
        }
        Ok(if hot_final {
            RecoveryVerdict::Committed
        } else {
            RecoveryVerdict::Intact
        })
    }
}

/// Does the mode/register combination promise crash consistency?
pub fn promises_consistency(cfg: &ControllerConfig) -> bool {
    match cfg.mode {
        Mode::UnsecPm => true,
        Mode::SecpmNoCwt => false,
        Mode::SecpmNoCwr | Mode::Secpm => cfg.staging_register,
    }
}

impl fmt::Display for CrashPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{} {}", self.index, self.kind.name())
    }
}
