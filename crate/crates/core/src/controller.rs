//! The memory controller: counter-mode flush and read paths, counter-cache
//! write-through with the staging register, write-queue draining, and
//! RSR-tracked page re-encryption.
//!
//! All timing is coarse and event-driven: each request runs to completion
//! on one global clock, and queued writes issue lazily whenever the clock
//! is advanced past their earliest legal issue time.

use std::fmt;
use std::str::FromStr;

use crate::counters::{AddressMap, CounterCache, CounterLine, MinorOverflow, COUNTER_CACHE_HIT_NS};
use crate::crash::{BoundaryKind, CrashTrigger};
use crate::crypto::{
    decrypt_line, encrypt_line, AesPad, CounterValue, EncryptionKey, OtpInput, PadFunction, AES_LATENCY_NS,
};
use crate::error::{SimError, SimResult};
use crate::line::{MemoryLine, Ns, LINES_PER_PAGE};
use crate::nvm::{take_crash_snapshot, CrashSnapshot, NvmDevice, Timing, DEFAULT_BANKS};
use crate::txn::Stage;
use crate::write_queue::{DrainPolicy, Origin, StagingRegister, WriteQueue, WriteQueueEntry};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// No encryption at all.
    UnsecPm,
    /// Encryption with a write-back counter cache; flushes never persist counters.
    SecpmNoCwt,
    /// Write-through counters and the staging register, no merging.
    SecpmNoCwr,
    /// Write-through counters, staging register and counter write reduction.
    Secpm,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::UnsecPm, Mode::SecpmNoCwt, Mode::SecpmNoCwr, Mode::Secpm];

    pub fn encrypts(self) -> bool {
        self != Mode::UnsecPm
    }

    pub fn write_through(self) -> bool {
        matches!(self, Mode::SecpmNoCwr | Mode::Secpm)
    }

    pub fn cwr(self) -> bool {
        self == Mode::Secpm
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::UnsecPm => "unsec-pm",
            Mode::SecpmNoCwt => "secpm-no-cwt",
            Mode::SecpmNoCwr => "secpm-no-cwr",
            Mode::Secpm => "secpm",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| SimError::Parse(format!("unknown mode `{s}`")))
    }
}

/// Re-encryption status register.
#[derive(Clone, Copy, Default, PartialEq, Eq, Debug)]
pub struct Rsr {
    pub page_number: u32,
    pub old_major: u64,
    pub done_bits: u64,
    pub active: bool,
}

impl Rsr {
    /// 32-bit page number + 64-bit old major + 64 done bits.
    pub const IMAGE_BYTES: usize = 20;

    pub fn to_bytes(&self) -> [u8; Self::IMAGE_BYTES] {
        let mut out = [0u8; Self::IMAGE_BYTES];
        out[..4].copy_from_slice(&self.page_number.to_le_bytes());
        out[4..12].copy_from_slice(&self.old_major.to_le_bytes());
        out[12..].copy_from_slice(&self.done_bits.to_le_bytes());
        out
    }

    /// Images exist only for in-flight re-encryptions, so a loaded RSR is active.
    pub fn from_bytes(image: &[u8; Self::IMAGE_BYTES]) -> Rsr {
        Rsr {
            page_number: u32::from_le_bytes(image[..4].try_into().unwrap()),
            old_major: u64::from_le_bytes(image[4..12].try_into().unwrap()),
            done_bits: u64::from_le_bytes(image[12..].try_into().unwrap()),
            active: true,
        }
    }

    pub fn is_done(&self, line: usize) -> bool {
        self.done_bits & (1 << line) != 0
    }

    pub fn all_done(&self) -> bool {
        self.done_bits == u64::MAX
    }
}

/// The durable RSR image written by ADR on a crash; `None` when idle.
pub fn persist_rsr_on_crash(rsr: &Rsr) -> Option<[u8; Rsr::IMAGE_BYTES]> {
    rsr.active.then(|| rsr.to_bytes())
}

#[derive(Clone, Debug)]
pub struct ControllerConfig {
    pub mode: Mode,
    /// Stage data and counter in the register and append them together.
    /// When off, the counter is appended during encryption and the data after.
    pub staging_register: bool,
    pub queue_capacity: Option<usize>,
    pub drain_policy: DrainPolicy,
    pub cache_bytes: u64,
    pub cache_ways: usize,
    pub timing: Timing,
    pub banks: usize,
    pub capacity: u64,
    pub aes_latency: Ns,
    pub cache_hit_latency: Ns,
    pub key: EncryptionKey,
    /// Check at every acknowledgement that the encrypting counter is durable.
    pub audit: bool,
    /// Log every encryption `(address, counter)` pair.
    pub record_otp: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            mode: Mode::Secpm,
            staging_register: true,
            queue_capacity: Some(32),
            drain_policy: DrainPolicy::Watermark,
            cache_bytes: 1 << 20,
            cache_ways: 8,
            timing: Timing::default(),
            banks: DEFAULT_BANKS,
            capacity: 16 << 30,
            aes_latency: AES_LATENCY_NS,
            cache_hit_latency: COUNTER_CACHE_HIT_NS,
            key: EncryptionKey::from_seed(0x5ec9_3a11),
            audit: false,
            record_otp: false,
        }
    }
}

impl ControllerConfig {
    pub fn with_mode(mode: Mode) -> Self {
        ControllerConfig {
            mode,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Default, PartialEq, Eq, Debug)]
pub struct ControllerStats {
    pub flushes: u64,
    pub reads: u64,
    pub reencryptions: u64,
    /// Data-flagged appends caused by re-encryption (lines plus the shadow copy).
    pub reencrypt_data_appends: u64,
    pub reencrypt_counter_appends: u64,
    /// Dirty counter lines written back on eviction (write-back mode only).
    pub writebacks: u64,
    pub cwt_violations: u64,
    pub audited_acks: u64,
}

pub struct Controller {
    cfg: ControllerConfig,
    map: AddressMap,
    pads: Box<dyn PadFunction>,
    cache: CounterCache,
    queue: WriteQueue,
    register: StagingRegister,
    nvm: NvmDevice,
    rsr: Rsr,
    /// Pre-reset counter line of the page under re-encryption (volatile).
    reenc_old: Option<CounterLine>,
    reenc_episode: bool,
    free_at: Ns,
    drain_clock: Ns,
    draining: bool,
    stage: Option<Stage>,
    trigger: CrashTrigger,
    stats: ControllerStats,
    otp_log: Vec<OtpInput>,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> SimResult<Controller> {
        let map = AddressMap::for_capacity(cfg.capacity)?;
        let nvm = NvmDevice::new(cfg.timing, cfg.banks);
        Controller::assemble(cfg, map, nvm)
    }

    fn assemble(cfg: ControllerConfig, map: AddressMap, nvm: NvmDevice) -> SimResult<Controller> {
        if let Some(c) = cfg.queue_capacity {
            if c < 4 {
                return Err(SimError::Config(format!(
                    "write queue of {c} entries is below the minimum of 4"
                )));
            }
        }
        let cache = CounterCache::new(cfg.cache_bytes, cfg.cache_ways)?;
        Ok(Controller {
            map,
            pads: Box::new(AesPad::new(&cfg.key)),
            cache,
            queue: WriteQueue::new(cfg.queue_capacity, cfg.mode.cwr()),
            register: StagingRegister::default(),
            nvm,
            rsr: Rsr::default(),
            reenc_old: None,
            reenc_episode: false,
            free_at: 0,
            drain_clock: 0,
            draining: false,
            stage: None,
            trigger: CrashTrigger::disarmed(),
            stats: ControllerStats::default(),
            otp_log: Vec::new(),
            cfg,
        })
    }

    /// Recovery-time controller: the durable image becomes the device store,
    /// caches and the register start cold, and a persisted RSR is reloaded.
    pub fn from_snapshot(cfg: ControllerConfig, snapshot: &CrashSnapshot) -> SimResult<Controller> {
        let map = AddressMap::for_capacity(cfg.capacity)?;
        let nvm = NvmDevice::from_image(cfg.timing, cfg.banks, snapshot.store.clone());
        let mut ctrl = Controller::assemble(cfg, map, nvm)?;
        if let Some(image) = &snapshot.rsr {
            ctrl.rsr = Rsr::from_bytes(image);
        }
        Ok(ctrl)
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn map(&self) -> &AddressMap {
        &self.map
    }

    pub fn queue(&self) -> &WriteQueue {
        &self.queue
    }

    pub fn cache(&self) -> &CounterCache {
        &self.cache
    }

    pub fn nvm(&self) -> &NvmDevice {
        &self.nvm
    }

    pub fn rsr(&self) -> &Rsr {
        &self.rsr
    }

    pub fn register(&self) -> &StagingRegister {
        &self.register
    }

    pub fn stats(&self) -> &ControllerStats {
        &self.stats
    }

    pub fn otp_log(&self) -> &[OtpInput] {
        &self.otp_log
    }

    pub fn trigger(&self) -> &CrashTrigger {
        &self.trigger
    }

    pub fn trigger_mut(&mut self) -> &mut CrashTrigger {
        &mut self.trigger
    }

    /// Earliest time the controller can accept the next request.
    pub fn free_at(&self) -> Ns {
        self.free_at
    }

    pub fn set_stage(&mut self, stage: Option<Stage>) {
        self.stage = stage;
    }

    pub fn snapshot(&self) -> CrashSnapshot {
        take_crash_snapshot(&self.nvm, &self.queue, &self.rsr, self.drain_clock)
    }

    // ---- crash boundaries -------------------------------------------------

    fn boundary(&mut self, kind: BoundaryKind) -> SimResult<()> {
        if !self.trigger.counts(self.reenc_episode) {
            return Ok(());
        }
        let hit = self.trigger.record(kind, self.stage, self.reenc_episode);
        if let Some(index) = hit {
            let snap = take_crash_snapshot(&self.nvm, &self.queue, &self.rsr, self.drain_clock);
            self.trigger.capture(snap);
            return Err(SimError::Halted(index));
        }
        Ok(())
    }

    /// Fence retirement. Flushes are acknowledged once enqueued, so a fence
    /// adds no time; it is still a crash boundary.
    pub fn fence(&mut self) -> SimResult<()> {
        self.boundary(BoundaryKind::Fence)
    }

    /// Mark the start of a crash-injection scope (before any event in it).
    pub fn scope_start(&mut self) -> SimResult<()> {
        self.boundary(BoundaryKind::Start)
    }

    // ---- queue draining ---------------------------------------------------

    fn drain_should_start(&self) -> bool {
        match self.cfg.drain_policy {
            DrainPolicy::Eager => !self.queue.is_empty(),
            DrainPolicy::Watermark => self.queue.free_slots() < 2,
        }
    }

    fn drain_target_reached(&self) -> bool {
        match self.cfg.drain_policy {
            DrainPolicy::Eager => self.queue.is_empty(),
            DrainPolicy::Watermark => match self.queue.capacity() {
                Some(c) => self.queue.len() <= c / 2,
                None => self.queue.is_empty(),
            },
        }
    }

    fn head_issue_time(&self) -> Option<Ns> {
        self.queue.front().map(|head| {
            self.nvm
                .bank_busy_until(head.address)
                .max(head.enqueue_time)
                .max(self.drain_clock)
        })
    }

    fn drain_head(&mut self, issue: Ns) -> SimResult<()> {
        self.drain_clock = issue;
        let entry = self.queue.drain_one(&mut self.nvm, issue);
        debug_assert!(entry.is_some(), "head bank must be free at its issue time");
        log::trace!("drain {:#x} at {issue}", entry.map(|e| e.address).unwrap_or(0));
        self.boundary(BoundaryKind::Drain)
    }

    /// Issue every queued write whose issue time is at or before `t`.
    fn advance_to(&mut self, t: Ns) -> SimResult<()> {
        loop {
            if !self.draining {
                if !self.drain_should_start() {
                    break;
                }
                self.draining = true;
            }
            if self.drain_target_reached() {
                self.draining = false;
                break;
            }
            match self.head_issue_time() {
                Some(issue) if issue <= t => self.drain_head(issue)?,
                _ => break,
            }
        }
        self.drain_clock = self.drain_clock.max(t);
        Ok(())
    }

    /// Stall until `slots` entries are free; returns the time they are.
    fn ensure_space(&mut self, slots: usize, mut t: Ns) -> SimResult<Ns> {
        loop {
            self.advance_to(t)?;
            if self.queue.free_slots() >= slots {
                return Ok(t);
            }
            self.draining = true;
            let issue = self.head_issue_time().expect("a full queue has a head");
            t = t.max(issue);
        }
    }

    /// Write every queued entry to the device; returns when the last issues.
    pub fn drain_all(&mut self, now: Ns) -> SimResult<Ns> {
        let mut t = now.max(self.free_at);
        self.advance_to(t)?;
        while let Some(issue) = self.head_issue_time() {
            t = t.max(issue);
            self.drain_head(issue)?;
        }
        self.draining = false;
        self.drain_clock = self.drain_clock.max(t);
        self.free_at = self.free_at.max(t);
        Ok(t)
    }

    /// Latest time any bank stays busy (the device is idle afterwards).
    pub fn quiesce_time(&self) -> Ns {
        (0..self.nvm.banks() as u64)
            .map(|b| self.nvm.bank_busy_until(b * 64))
            .max()
            .unwrap_or(0)
            .max(self.free_at)
    }

    fn append(&mut self, entry: WriteQueueEntry) -> SimResult<Ns> {
        let t = self.ensure_space(1, entry.enqueue_time)?;
        self.queue.append(WriteQueueEntry {
            enqueue_time: t,
            ..entry
        })?;
        self.boundary(BoundaryKind::QueueAppend)?;
        Ok(t)
    }

    /// Write back all dirty counter lines (write-back mode), making the
    /// durable image match the cache.
    pub fn writeback_dirty(&mut self, now: Ns) -> SimResult<Ns> {
        let mut t = now.max(self.free_at);
        for (addr, line) in self.cache.dirty_lines() {
            t = self.append(WriteQueueEntry {
                address: addr,
                payload: line.to_line(),
                origin: Origin::Counter,
                enqueue_time: t,
            })?;
            self.cache.mark_clean(addr);
            self.stats.writebacks += 1;
        }
        self.free_at = t;
        Ok(t)
    }

    // ---- line and counter access -----------------------------------------

    /// Newest copy of a line: forwarded from the queue, else read from NVM.
    /// The bool is false for a never-written line.
    fn fetch_line(&mut self, address: u64, t: Ns) -> (MemoryLine, bool, Ns) {
        if let Some(e) = self.queue.latest(address) {
            return (e.payload, true, t);
        }
        let present = self.nvm.peek(address).is_some();
        let (line, done) = self.nvm.nvm_read(address, t);
        (line, present, done)
    }

    /// Stored ciphertext of a data line. Never-written lines read as zero
    /// plaintext encrypted under the all-zero counter.
    fn fetch_ciphertext(&mut self, address: u64, t: Ns) -> (MemoryLine, Ns) {
        let (line, present, done) = self.fetch_line(address, t);
        if present {
            (line, done)
        } else {
            (self.initial_ciphertext(address), done)
        }
    }

    fn initial_ciphertext(&self, address: u64) -> MemoryLine {
        let pad = self.pads.pad(&OtpInput {
            line_address: address,
            counter: CounterValue::ZERO,
        });
        MemoryLine(pad.0)
    }

    /// Counter line through the cache; a miss fetches it from the queue or NVM.
    fn counter_line(&mut self, cl: u64, t: Ns) -> SimResult<(CounterLine, Ns)> {
        let t = t + self.cfg.cache_hit_latency;
        if let Some(line) = self.cache.lookup(cl) {
            return Ok((line, t));
        }
        let (raw, _, done) = self.fetch_line(cl, t);
        let line = CounterLine::from_line(&raw);
        let done = self.install_counter(cl, line, false, done)?;
        Ok((line, done))
    }

    fn install_counter(&mut self, cl: u64, line: CounterLine, dirty: bool, t: Ns) -> SimResult<Ns> {
        match self.cache.insert(cl, line, dirty) {
            Some(ev) if ev.dirty => {
                self.stats.writebacks += 1;
                self.append(WriteQueueEntry {
                    address: ev.address,
                    payload: ev.line.to_line(),
                    origin: Origin::Counter,
                    enqueue_time: t,
                })
            }
            _ => Ok(t),
        }
    }

    fn encrypt(&mut self, address: u64, counter: CounterValue, plaintext: &MemoryLine) -> MemoryLine {
        let input = OtpInput {
            line_address: address,
            counter,
        };
        if self.cfg.record_otp {
            self.otp_log.push(input);
        }
        encrypt_line(plaintext, &self.pads.pad(&input))
    }

    fn decrypt(&self, address: u64, counter: CounterValue, ciphertext: &MemoryLine) -> MemoryLine {
        decrypt_line(
            ciphertext,
            &self.pads.pad(&OtpInput {
                line_address: address,
                counter,
            }),
        )
    }

    /// The counter line a recovery would see: newest queued copy, else NVM.
    pub fn durable_counter_line(&self, cl: u64) -> CounterLine {
        self.queue
            .entries()
            .rev()
            .find(|e| e.address == cl && e.origin == Origin::Counter)
            .map(|e| e.payload)
            .or_else(|| self.nvm.peek(cl))
            .map(|l| CounterLine::from_line(&l))
            .unwrap_or_default()
    }

    // ---- flush path -------------------------------------------------------

    /// Encrypt and persist one flushed line; returns the acknowledgement time.
    pub fn handle_flush(&mut self, address: u64, plaintext: MemoryLine, now: Ns) -> SimResult<Ns> {
        self.map.check_data(address)?;
        let mut t = now.max(self.free_at);
        self.advance_to(t)?;
        self.stats.flushes += 1;
        if !self.cfg.mode.encrypts() {
            t = self.append(WriteQueueEntry {
                address,
                payload: plaintext,
                origin: Origin::Data,
                enqueue_time: t,
            })?;
            self.free_at = t;
            return Ok(t);
        }

        let (cl, idx) = self.map.locate_counter(address)?;
        let page = self.map.page_of(address);
        t = self.wait_for_reencryption(page, idx, t)?;
        let (line, t_ctr) = self.counter_line(cl, t)?;
        t = t_ctr;
        let updated = match line.increment_minor(idx) {
            Ok(u) => u,
            Err(MinorOverflow) => {
                t = self.reencrypt_page(page, t)?;
                let (line, t_ctr) = self.counter_line(cl, t)?;
                t = t_ctr;
                line.increment_minor(idx).expect("fresh epoch has room")
            }
        };
        let counter = updated.value(idx);
        let ciphertext = self.encrypt(address, counter, &plaintext);
        let enc_start = t;
        t += self.cfg.aes_latency;
        t = self.persist_pair(address, ciphertext, cl, updated, enc_start, t, None)?;

        if self.cfg.audit && self.cfg.mode.write_through() {
            self.stats.audited_acks += 1;
            if self.durable_counter_line(cl).value(idx) != counter {
                self.stats.cwt_violations += 1;
            }
        }
        self.free_at = t;
        log::trace!("flush {address:#x} ctr {counter:?} ack {t}");
        Ok(t)
    }

    /// Route an encrypted line and its updated counter line into the queue
    /// according to the mode. `reenc_line` marks a re-encryption write whose
    /// RSR done bit is set in the same indivisible step as its append.
    #[allow(clippy::too_many_arguments)]
    fn persist_pair(
        &mut self,
        address: u64,
        ciphertext: MemoryLine,
        cl: u64,
        updated: CounterLine,
        enc_start: Ns,
        enc_done: Ns,
        reenc_line: Option<usize>,
    ) -> SimResult<Ns> {
        let data = WriteQueueEntry {
            address,
            payload: ciphertext,
            origin: Origin::Data,
            enqueue_time: enc_done,
        };
        if reenc_line.is_some() {
            self.stats.reencrypt_data_appends += 1;
        }
        if !self.cfg.mode.write_through() {
            // write-back counter cache: the counter stays dirty on chip
            let t = self.install_counter(cl, updated, true, enc_done)?;
            let t = self.ensure_space(1, t)?;
            self.queue.append(WriteQueueEntry {
                enqueue_time: t,
                ..data
            })?;
            self.mark_done(reenc_line);
            self.boundary(BoundaryKind::QueueAppend)?;
            return Ok(t);
        }
        if reenc_line.is_some() {
            self.stats.reencrypt_counter_appends += 1;
        }
        self.cache.insert(cl, updated, false);
        if self.cfg.staging_register {
            self.register.store_counter(cl, updated);
            self.boundary(BoundaryKind::RegisterStore)?;
            self.register.store_data(address, ciphertext);
            self.boundary(BoundaryKind::RegisterStore)?;
            let t = self.ensure_space(2, enc_done)?;
            self.queue.atomic_append_pair(&mut self.register, t)?;
            self.mark_done(reenc_line);
            self.boundary(BoundaryKind::QueueAppend)?;
            Ok(t)
        } else {
            // counter goes out during encryption, data after it
            let t_ctr = self.ensure_space(1, enc_start)?;
            self.queue.append(WriteQueueEntry {
                address: cl,
                payload: updated.to_line(),
                origin: Origin::Counter,
                enqueue_time: t_ctr,
            })?;
            self.boundary(BoundaryKind::QueueAppend)?;
            let t = self.ensure_space(1, enc_done.max(t_ctr))?;
            self.queue.append(WriteQueueEntry {
                enqueue_time: t,
                ..data
            })?;
            self.mark_done(reenc_line);
            self.boundary(BoundaryKind::QueueAppend)?;
            Ok(t)
        }
    }

    fn mark_done(&mut self, reenc_line: Option<usize>) {
        if let Some(i) = reenc_line {
            self.rsr.done_bits |= 1 << i;
        }
    }

    // ---- read path --------------------------------------------------------

    /// Read and decrypt a line. The pad is generated while the data is
    /// fetched, so a cached counter hides the decryption latency.
    pub fn handle_read(&mut self, address: u64, now: Ns) -> SimResult<(MemoryLine, Ns)> {
        self.map.check_data(address)?;
        let mut t = now.max(self.free_at);
        self.advance_to(t)?;
        self.stats.reads += 1;
        if !self.cfg.mode.encrypts() {
            let (line, _, done) = self.fetch_line(address, t);
            self.free_at = done;
            return Ok((line, done));
        }
        let (cl, idx) = self.map.locate_counter(address)?;
        t = self.wait_for_reencryption(self.map.page_of(address), idx, t)?;
        let (line, ctr_ready) = self.counter_line(cl, t)?;
        let pad_ready = ctr_ready + self.cfg.aes_latency;
        let (ciphertext, data_ready) = self.fetch_ciphertext(address, t);
        let plaintext = self.decrypt(address, line.value(idx), &ciphertext);
        let done = pad_ready.max(data_ready);
        self.free_at = done;
        Ok((plaintext, done))
    }

    // ---- page re-encryption -----------------------------------------------

    fn wait_for_reencryption(&mut self, page: u64, idx: usize, mut t: Ns) -> SimResult<Ns> {
        while self.rsr.active && u64::from(self.rsr.page_number) == page && !self.rsr.is_done(idx) {
            t = self.reencrypt_step(t)?;
        }
        Ok(t)
    }

    /// Re-encrypt a whole page under `major + 1` after a minor overflow.
    pub fn reencrypt_page(&mut self, page: u64, now: Ns) -> SimResult<Ns> {
        let mut t = now;
        if self.rsr.active {
            t = self.finish_reencryption(t)?;
        }
        t = self.start_reencryption(page, t)?;
        self.finish_reencryption(t)
    }

    /// Persist the old counter line, arm the RSR and install the new epoch.
    /// Lines are then re-encrypted by [`Controller::reencrypt_step`].
    pub fn start_reencryption(&mut self, page: u64, now: Ns) -> SimResult<Ns> {
        assert!(!self.rsr.active, "only one page re-encryption may be in flight");
        self.reenc_episode = true;
        self.stats.reencryptions += 1;
        let cl = self.map.counter_line_address(page);
        let (old, t) = self.counter_line(cl, now)?;
        self.stats.reencrypt_data_appends += 1;
        let t = self.append(WriteQueueEntry {
            address: self.map.shadow_address(),
            payload: old.to_line(),
            origin: Origin::Data,
            enqueue_time: t,
        })?;
        self.rsr = Rsr {
            page_number: u32::try_from(page).expect("page number fits 32 bits"),
            old_major: old.major,
            done_bits: 0,
            active: true,
        };
        self.boundary(BoundaryKind::RsrUpdate)?;
        self.reenc_old = Some(old);
        let dirty = !self.cfg.mode.write_through();
        self.install_counter(cl, old.next_epoch(), dirty, t)
    }

    /// Re-encrypt the lowest line whose done bit is still clear.
    pub fn reencrypt_step(&mut self, now: Ns) -> SimResult<Ns> {
        assert!(self.rsr.active, "no re-encryption in flight");
        let old = self
            .reenc_old
            .expect("old counter line is loaded while the RSR is active");
        let page = u64::from(self.rsr.page_number);
        let line_idx = (!self.rsr.done_bits).trailing_zeros() as usize;
        let address = self.map.page_line_address(page, line_idx);
        let cl = self.map.counter_line_address(page);

        let mut t = now.max(self.free_at);
        self.advance_to(t)?;
        let (ciphertext, data_ready) = self.fetch_ciphertext(address, t);
        let plaintext = self.decrypt(address, old.value(line_idx), &ciphertext);
        let (current, ctr_ready) = self.counter_line(cl, t)?;
        debug_assert_eq!(current.major, self.rsr.old_major + 1);
        let enc_start = data_ready.max(ctr_ready);
        let fresh = self.encrypt(address, current.value(line_idx), &plaintext);
        t = enc_start + self.cfg.aes_latency;
        t = self.persist_pair(address, fresh, cl, current, enc_start, t, Some(line_idx))?;
        self.free_at = t;
        if self.rsr.all_done() {
            self.close_reencryption()?;
        }
        Ok(t)
    }

    fn close_reencryption(&mut self) -> SimResult<()> {
        self.rsr.active = false;
        self.reenc_old = None;
        self.boundary(BoundaryKind::RsrUpdate)?;
        self.reenc_episode = false;
        Ok(())
    }

    pub fn finish_reencryption(&mut self, now: Ns) -> SimResult<Ns> {
        let mut t = now;
        while self.rsr.active {
            if self.rsr.all_done() {
                // crashed after the last line, before the RSR was cleared
                self.close_reencryption()?;
            } else {
                t = self.reencrypt_step(t)?;
            }
        }
        Ok(t)
    }

    /// After a crash with a persisted RSR: reload the old counters from the
    /// shadow copy, install the new epoch if it is not yet durable, and
    /// re-encrypt the lines whose done bits are clear.
    pub fn resume_reencryption(&mut self, now: Ns) -> SimResult<Ns> {
        if !self.rsr.active {
            return Ok(now);
        }
        self.reenc_episode = true;
        let shadow = self
            .nvm
            .peek(self.map.shadow_address())
            .map(|l| CounterLine::from_line(&l))
            .unwrap_or_default();
        if shadow.major != self.rsr.old_major {
            return Err(SimError::Config(format!(
                "re-encryption shadow holds major {} but the RSR expects {}",
                shadow.major, self.rsr.old_major
            )));
        }
        self.reenc_old = Some(shadow);
        let page = u64::from(self.rsr.page_number);
        let cl = self.map.counter_line_address(page);
        let (current, t) = self.counter_line(cl, now)?;
        let t = if current.major == shadow.major + 1 {
            t
        } else {
            let dirty = !self.cfg.mode.write_through();
            self.install_counter(cl, shadow.next_epoch(), dirty, t)?
        };
        self.finish_reencryption(t)
    }

    /// All 64 plaintexts of a page, read without disturbing timing state.
    pub fn page_lines(&mut self, page: u64) -> SimResult<Vec<MemoryLine>> {
        let mut out = Vec::with_capacity(LINES_PER_PAGE);
        for i in 0..LINES_PER_PAGE {
            let addr = self.map.page_line_address(page, i);
            out.push(self.handle_read(addr, self.free_at)?.0);
        }
        Ok(out)
    }
}
