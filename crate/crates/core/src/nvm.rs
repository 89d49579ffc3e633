//! NVM device: sparse line store, per-bank occupancy timing and the durable
//! crash image assembled by ADR.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use crate::controller::Rsr;
use crate::line::{MemoryLine, Ns, LINE_BYTES};
use crate::write_queue::{WriteQueue, WriteQueueEntry};

/// PCM timing parameters in nanoseconds.
///
/// Only `t_rcd`, `t_cl` and `t_wr` gate the simplified timing model; the
/// rest are carried so configurations round-trip faithfully.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct Timing {
    pub t_rcd: f64,
    pub t_cl: f64,
    pub t_cwd: f64,
    pub t_faw: f64,
    pub t_wtr: f64,
    pub t_wr: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            t_rcd: 48.0,
            t_cl: 15.0,
            t_cwd: 13.0,
            t_faw: 50.0,
            t_wtr: 7.5,
            t_wr: 300.0,
        }
    }
}

impl Timing {
    pub fn read_latency(&self) -> Ns {
        (self.t_rcd + self.t_cl).round() as Ns
    }

    pub fn write_occupancy(&self) -> Ns {
        self.t_wr.round() as Ns
    }
}

pub const DEFAULT_BANKS: usize = 16;
pub const RANKS: usize = 2;

#[derive(Clone, Debug)]
pub struct NvmDevice {
    timing: Timing,
    busy_until: Vec<Ns>,
    store: BTreeMap<u64, MemoryLine>,
    pub writes: u64,
    pub reads: u64,
}

impl NvmDevice {
    pub fn new(timing: Timing, banks: usize) -> NvmDevice {
        assert!(banks > 0 && banks.is_multiple_of(RANKS));
        NvmDevice {
            timing,
            busy_until: vec![0; banks],
            store: BTreeMap::new(),
            writes: 0,
            reads: 0,
        }
    }

    pub fn from_image(timing: Timing, banks: usize, store: BTreeMap<u64, MemoryLine>) -> NvmDevice {
        let mut dev = NvmDevice::new(timing, banks);
        dev.store = store;
        dev
    }

    pub fn timing(&self) -> &Timing {
        &self.timing
    }

    pub fn banks(&self) -> usize {
        self.busy_until.len()
    }

    /// Line-interleaved mapping.
    pub fn bank_of(&self, address: u64) -> usize {
        ((address / LINE_BYTES as u64) % self.busy_until.len() as u64) as usize
    }

    pub fn rank_of(&self, address: u64) -> usize {
        self.bank_of(address) / (self.busy_until.len() / RANKS)
    }

    pub fn bank_busy_until(&self, address: u64) -> Ns {
        self.busy_until[self.bank_of(address)]
    }

    /// Occupy the bank for tWR. The line is durable from issue; no read of the
    /// same bank can complete before the write does.
    pub fn nvm_write(&mut self, address: u64, payload: MemoryLine, now: Ns) -> Ns {
        let bank = self.bank_of(address);
        let start = now.max(self.busy_until[bank]);
        let done = start + self.timing.write_occupancy();
        self.busy_until[bank] = done;
        self.store.insert(address, payload);
        self.writes += 1;
        done
    }

    /// Returns the stored line (zeros if never written) and its completion time,
    /// waiting for the bank first if it is busy.
    pub fn nvm_read(&mut self, address: u64, now: Ns) -> (MemoryLine, Ns) {
        let bank = self.bank_of(address);
        let start = now.max(self.busy_until[bank]);
        let done = start + self.timing.read_latency();
        self.busy_until[bank] = done;
        self.reads += 1;
        (self.store.get(&address).copied().unwrap_or(MemoryLine::ZERO), done)
    }

    pub fn peek(&self, address: u64) -> Option<MemoryLine> {
        self.store.get(&address).copied()
    }

    pub fn store(&self) -> &BTreeMap<u64, MemoryLine> {
        &self.store
    }

    pub fn lines_in(&self, start: u64, end: u64) -> impl Iterator<Item = (&u64, &MemoryLine)> {
        self.store.range(start..end)
    }
}

/// Everything that survives a power failure: the device image with every
/// queued write applied in FIFO order, and the RSR image when a page
/// re-encryption was in flight. Caches and the staging register are absent.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CrashSnapshot {
    pub store: BTreeMap<u64, MemoryLine>,
    pub queue: Vec<WriteQueueEntry>,
    pub rsr: Option<[u8; Rsr::IMAGE_BYTES]>,
    pub timestamp: Ns,
}

pub fn take_crash_snapshot(device: &NvmDevice, queue: &WriteQueue, rsr: &Rsr, now: Ns) -> CrashSnapshot {
    let mut store = device.store.clone();
    let queued: Vec<WriteQueueEntry> = queue.entries().copied().collect();
    for e in &queued {
        store.insert(e.address, e.payload);
    }
    CrashSnapshot {
        store,
        queue: queued,
        rsr: rsr.active.then(|| rsr.to_bytes()),
        timestamp: now,
    }
}

/// Flat dump: little-endian u64 address followed by the 64-byte payload,
/// one record per stored line in address order.
pub fn dump_image<W: Write>(store: &BTreeMap<u64, MemoryLine>, mut out: W) -> io::Result<()> {
    for (addr, line) in store {
        out.write_all(&addr.to_le_bytes())?;
        out.write_all(&line.0)?;
    }
    out.flush()
}

pub fn load_image<R: Read>(mut input: R) -> io::Result<BTreeMap<u64, MemoryLine>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    const RECORD: usize = 8 + LINE_BYTES;
    if bytes.len() % RECORD != 0 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("image length {} is not a multiple of {RECORD}", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(RECORD)
        .map(|rec| {
            let addr = u64::from_le_bytes(rec[..8].try_into().unwrap());
            (addr, MemoryLine(rec[8..].try_into().unwrap()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::write_queue::Origin;

    fn dev() -> NvmDevice {
        NvmDevice::new(Timing::default(), DEFAULT_BANKS)
    }

    #[test]
    fn write_timing() {
        let mut d = dev();
        assert_eq!(d.nvm_write(0, MemoryLine([1; 64]), 0), 300);
        assert_eq!(d.nvm_write(64, MemoryLine([2; 64]), 0), 300);
        assert_eq!(d.nvm_write(16 * 64, MemoryLine([3; 64]), 0), 600);
        assert_eq!(d.bank_of(16 * 64), 0);
        assert_eq!(d.rank_of(8 * 64), 1);
    }

    #[test]
    fn read_timing_and_zero_init() {
        let mut d = dev();
        let (line, done) = d.nvm_read(0x40, 0);
        assert_eq!(line, MemoryLine::ZERO);
        assert_eq!(done, 63);
        d.nvm_write(0, MemoryLine([7; 64]), 0);
        let (line, done) = d.nvm_read(0, 10);
        assert_eq!(done, 363);
        assert_eq!(line, MemoryLine([7; 64]));
    }

    #[test]
    fn snapshot_applies_queue_in_order() {
        let d = dev();
        let mut q = WriteQueue::new(Some(32), false);
        let rsr = Rsr::default();
        assert_eq!(take_crash_snapshot(&d, &q, &rsr, 0).store.len(), 0);
        for (fill, origin) in [(1u8, Origin::Data), (2, Origin::Data)] {
            q.append(WriteQueueEntry {
                address: 0x80,
                payload: MemoryLine([fill; 64]),
                origin,
                enqueue_time: 0,
            })
            .unwrap();
        }
        let snap = take_crash_snapshot(&d, &q, &rsr, 5);
        assert_eq!(snap.store[&0x80], MemoryLine([2; 64]));
        assert_eq!(snap.queue.len(), 2);
        assert!(snap.rsr.is_none());
    }

    #[test]
    fn image_dump_roundtrip() {
        let mut store = BTreeMap::new();
        store.insert(0x40, MemoryLine([9; 64]));
        store.insert(0x1_0000_0000, MemoryLine([3; 64]));
        let mut buf = Vec::new();
        dump_image(&store, &mut buf).unwrap();
        assert_eq!(buf.len(), 2 * 72);
        assert_eq!(&buf[..8], &0x40u64.to_le_bytes());
        assert_eq!(load_image(&buf[..]).unwrap(), store);
        assert!(load_image(&buf[..71]).is_err());
    }
}
