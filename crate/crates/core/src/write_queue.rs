//! ADR-backed write queue with counter write reduction (CWR) and the
//! two-line staging register used for counter-atomic appends.

use std::collections::VecDeque;

use crate::counters::CounterLine;
use crate::error::{SimError, SimResult};
use crate::line::{MemoryLine, Ns};
use crate::nvm::NvmDevice;

/// One-bit origin flag carried by every queue entry.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Origin {
    /// Flushed from the CPU caches (ciphertext, or plaintext without encryption).
    Data,
    /// Written through from the counter cache.
    Counter,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct WriteQueueEntry {
    pub address: u64,
    pub payload: MemoryLine,
    pub origin: Origin,
    pub enqueue_time: Ns,
}

/// When the controller issues queued writes to the device.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DrainPolicy {
    /// Issue the head as soon as its bank is free.
    Eager,
    /// Buffer writes; once fewer than two slots are free, drain in FIFO
    /// order until the queue is at most half full. An unbounded queue never
    /// starts draining on its own.
    Watermark,
}

/// Running totals, checked against `appended - merged = drained + resident`.
#[derive(Clone, Copy, Default, PartialEq, Eq, Debug)]
pub struct QueueCounters {
    pub data_appended: u64,
    pub counter_appended: u64,
    pub counter_merged: u64,
    pub data_drained: u64,
    pub counter_drained: u64,
}

impl QueueCounters {
    pub fn appended(&self) -> u64 {
        self.data_appended + self.counter_appended
    }

    pub fn drained(&self) -> u64 {
        self.data_drained + self.counter_drained
    }
}

#[derive(Clone, Debug)]
pub struct WriteQueue {
    entries: VecDeque<WriteQueueEntry>,
    capacity: Option<usize>,
    cwr_enabled: bool,
    counters: QueueCounters,
}

impl WriteQueue {
    /// `capacity = None` models an unbounded queue.
    pub fn new(capacity: Option<usize>, cwr_enabled: bool) -> WriteQueue {
        WriteQueue {
            entries: VecDeque::new(),
            capacity,
            cwr_enabled,
            counters: QueueCounters::default(),
        }
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn cwr_enabled(&self) -> bool {
        self.cwr_enabled
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn free_slots(&self) -> usize {
        match self.capacity {
            Some(c) => c.saturating_sub(self.entries.len()),
            None => usize::MAX,
        }
    }

    pub fn counters(&self) -> QueueCounters {
        self.counters
    }

    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &WriteQueueEntry> + ExactSizeIterator {
        self.entries.iter()
    }

    pub fn front(&self) -> Option<&WriteQueueEntry> {
        self.entries.front()
    }

    /// Newest queued copy of `address`, used for read forwarding.
    pub fn latest(&self, address: u64) -> Option<&WriteQueueEntry> {
        self.entries.iter().rev().find(|e| e.address == address)
    }

    /// Remove the resident counter entry sharing `incoming`'s address.
    /// Only counter-flagged entries are scanned; data entries are never merged.
    pub fn cwr_merge(&mut self, incoming: &WriteQueueEntry) -> usize {
        debug_assert_eq!(incoming.origin, Origin::Counter);
        let found = self
            .entries
            .iter()
            .position(|e| e.origin == Origin::Counter && e.address == incoming.address);
        match found {
            Some(pos) => {
                self.entries.remove(pos);
                self.counters.counter_merged += 1;
                1
            }
            None => 0,
        }
    }

    fn push(&mut self, entry: WriteQueueEntry) {
        match entry.origin {
            Origin::Data => self.counters.data_appended += 1,
            Origin::Counter => {
                self.counters.counter_appended += 1;
                if self.cwr_enabled {
                    self.cwr_merge(&entry);
                }
            }
        }
        self.entries.push_back(entry);
    }

    /// Append at the tail. Fails without side effects when no slot is free;
    /// callers stall simulated time and retry.
    pub fn append(&mut self, entry: WriteQueueEntry) -> SimResult<()> {
        if self.free_slots() == 0 {
            return Err(SimError::QueueFull);
        }
        self.push(entry);
        Ok(())
    }

    /// Move both lines of a full register into the queue in one step:
    /// the data line first, then its counter line.
    pub fn atomic_append_pair(&mut self, register: &mut StagingRegister, now: Ns) -> SimResult<()> {
        let (data, counter) = match (register.data_slot, register.counter_slot) {
            (Some(d), Some(c)) => (d, c),
            (None, _) => return Err(SimError::IncompleteRegister("data slot empty")),
            (_, None) => return Err(SimError::IncompleteRegister("counter slot empty")),
        };
        if self.free_slots() < 2 {
            return Err(SimError::QueueFull);
        }
        self.push(WriteQueueEntry {
            address: data.0,
            payload: data.1,
            origin: Origin::Data,
            enqueue_time: now,
        });
        self.push(WriteQueueEntry {
            address: counter.0,
            payload: counter.1.to_line(),
            origin: Origin::Counter,
            enqueue_time: now,
        });
        register.clear();
        Ok(())
    }

    /// Pop the head if its bank is free at `now` and issue the device write.
    /// Strict FIFO: a busy head blocks everything behind it.
    pub fn drain_one(&mut self, nvm: &mut NvmDevice, now: Ns) -> Option<WriteQueueEntry> {
        let head = self.entries.front()?;
        if nvm.bank_busy_until(head.address) > now {
            return None;
        }
        let entry = self.entries.pop_front()?;
        nvm.nvm_write(entry.address, entry.payload, now);
        match entry.origin {
            Origin::Data => self.counters.data_drained += 1,
            Origin::Counter => self.counters.counter_drained += 1,
        }
        Some(entry)
    }
}

/// Volatile two-line register: one encrypted data line and its counter line.
#[derive(Clone, Copy, Default, PartialEq, Eq, Debug)]
pub struct StagingRegister {
    pub data_slot: Option<(u64, MemoryLine)>,
    pub counter_slot: Option<(u64, CounterLine)>,
}

impl StagingRegister {
    pub fn store_data(&mut self, address: u64, line: MemoryLine) {
        self.data_slot = Some((address, line));
    }

    pub fn store_counter(&mut self, address: u64, line: CounterLine) {
        self.counter_slot = Some((address, line));
    }

    pub fn clear(&mut self) {
        *self = StagingRegister::default();
    }

    pub fn is_empty(&self) -> bool {
        self.data_slot.is_none() && self.counter_slot.is_none()
    }
}
