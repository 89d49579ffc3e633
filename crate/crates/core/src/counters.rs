//! Split counters (one 64-bit major per page, 64 seven-bit minors) and the
//! set-associative counter cache that buffers them in the controller.

use crate::crypto::CounterValue;
use crate::error::{SimError, SimResult};
use crate::line::{line_aligned, MemoryLine, Ns, LINES_PER_PAGE, LINE_BYTES, PAGE_BYTES};
use crate::write_queue::{Origin, WriteQueue, WriteQueueEntry};

pub const MINOR_MAX: u8 = 127;

/// Counter-cache hit latency: 12 CPU cycles at 2 GHz.
pub const COUNTER_CACHE_HIT_NS: Ns = 6;

/// Counters of one 4 KiB page, stored in one 64-byte line.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CounterLine {
    pub major: u64,
    pub minors: [u8; LINES_PER_PAGE],
}

/// The minor counter was already at 127; the page must be re-encrypted.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct MinorOverflow;

impl Default for CounterLine {
    fn default() -> Self {
        CounterLine {
            major: 0,
            minors: [0; LINES_PER_PAGE],
        }
    }
}

impl CounterLine {
    pub fn value(&self, minor_index: usize) -> CounterValue {
        CounterValue::new(self.major, self.minors[minor_index])
    }

    pub fn increment_minor(&self, minor_index: usize) -> Result<CounterLine, MinorOverflow> {
        assert!(minor_index < LINES_PER_PAGE, "minor index {minor_index} out of range");
        if self.minors[minor_index] >= MINOR_MAX {
            return Err(MinorOverflow);
        }
        let mut next = *self;
        next.minors[minor_index] += 1;
        Ok(next)
    }

    /// Major + 1 with every minor reset, as installed by a page re-encryption.
    pub fn next_epoch(&self) -> CounterLine {
        CounterLine {
            major: self.major + 1,
            minors: [0; LINES_PER_PAGE],
        }
    }

    /// 8 bytes of little-endian major followed by 64 × 7-bit minors packed
    /// least-significant bit first.
    pub fn to_line(&self) -> MemoryLine {
        let mut out = [0u8; LINE_BYTES];
        out[..8].copy_from_slice(&self.major.to_le_bytes());
        for (i, &m) in self.minors.iter().enumerate() {
            let v = u16::from(m & 0x7f);
            let bit = i * 7;
            let byte = 8 + bit / 8;
            let shift = bit % 8;
            out[byte] |= (v << shift) as u8;
            if shift > 1 {
                out[byte + 1] |= (v >> (8 - shift)) as u8;
            }
        }
        MemoryLine(out)
    }

    pub fn from_line(line: &MemoryLine) -> CounterLine {
        let b = &line.0;
        let major = u64::from_le_bytes(b[..8].try_into().unwrap());
        let mut minors = [0u8; LINES_PER_PAGE];
        for (i, m) in minors.iter_mut().enumerate() {
            let bit = i * 7;
            let byte = 8 + bit / 8;
            let shift = bit % 8;
            let mut v = u16::from(b[byte]) >> shift;
            if shift > 1 {
                v |= u16::from(b[byte + 1]) << (8 - shift);
            }
            *m = (v & 0x7f) as u8;
        }
        CounterLine { major, minors }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Region {
    Data,
    Counter,
    Meta,
}

/// Physical layout: `[data | counter lines | metadata page]`.
///
/// The counter line of data page `p` sits at `counter_base + 64 * p`.
/// The metadata page holds the re-encryption shadow copy of a page's old
/// counter line.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct AddressMap {
    pub data_span: u64,
    pub counter_base: u64,
    pub meta_base: u64,
}

impl AddressMap {
    /// Largest layout fitting `capacity` bytes.
    pub fn for_capacity(capacity: u64) -> SimResult<AddressMap> {
        let per_page = PAGE_BYTES + LINE_BYTES as u64;
        if capacity < 2 * PAGE_BYTES + per_page {
            return Err(SimError::Config(format!("capacity {capacity} too small")));
        }
        let pages = (capacity - 2 * PAGE_BYTES) / per_page;
        Ok(AddressMap::with_data_pages(pages))
    }

    pub fn with_data_pages(pages: u64) -> AddressMap {
        let data_span = pages * PAGE_BYTES;
        let counter_base = data_span;
        let counter_end = counter_base + pages * LINE_BYTES as u64;
        let meta_base = counter_end.div_ceil(PAGE_BYTES) * PAGE_BYTES;
        AddressMap {
            data_span,
            counter_base,
            meta_base,
        }
    }

    pub fn data_pages(&self) -> u64 {
        self.data_span / PAGE_BYTES
    }

    pub fn region(&self, address: u64) -> SimResult<Region> {
        if address < self.data_span {
            Ok(Region::Data)
        } else if address >= self.counter_base && address < self.counter_base + self.data_pages() * LINE_BYTES as u64 {
            Ok(Region::Counter)
        } else if address >= self.meta_base && address < self.meta_base + PAGE_BYTES {
            Ok(Region::Meta)
        } else {
            Err(SimError::Addressing {
                address,
                region: "physical",
            })
        }
    }

    pub fn is_counter(&self, address: u64) -> bool {
        matches!(self.region(address), Ok(Region::Counter))
    }

    pub fn check_data(&self, address: u64) -> SimResult<()> {
        if !line_aligned(address) {
            return Err(SimError::Misaligned(address));
        }
        if address >= self.data_span {
            return Err(SimError::Addressing {
                address,
                region: "data",
            });
        }
        Ok(())
    }

    pub fn page_of(&self, data_address: u64) -> u64 {
        data_address / PAGE_BYTES
    }

    pub fn counter_line_address(&self, page: u64) -> u64 {
        self.counter_base + LINE_BYTES as u64 * page
    }

    pub fn page_line_address(&self, page: u64, minor_index: usize) -> u64 {
        page * PAGE_BYTES + (minor_index * LINE_BYTES) as u64
    }

    /// Where a page's pre-re-encryption counter line is persisted.
    pub fn shadow_address(&self) -> u64 {
        self.meta_base
    }

    /// Counter line address and minor index covering `data_address`.
    pub fn locate_counter(&self, data_address: u64) -> SimResult<(u64, usize)> {
        self.check_data(data_address)?;
        let page = self.page_of(data_address);
        let minor_index = ((data_address / LINE_BYTES as u64) % LINES_PER_PAGE as u64) as usize;
        Ok((self.counter_line_address(page), minor_index))
    }
}

/// A line pushed out of the counter cache.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Evicted {
    pub address: u64,
    pub line: CounterLine,
    pub dirty: bool,
}

#[derive(Clone, Debug)]
struct Way {
    address: u64,
    line: CounterLine,
    dirty: bool,
    last_used: u64,
}

/// Set-associative, LRU counter cache. Lines are clean under write-through;
/// the dirty bit only matters for the write-back baseline.
#[derive(Clone, Debug)]
pub struct CounterCache {
    sets: Vec<Vec<Way>>,
    ways: usize,
    clock: u64,
    pub hits: u64,
    pub misses: u64,
}

impl CounterCache {
    pub fn new(capacity_bytes: u64, ways: usize) -> SimResult<CounterCache> {
        let lines = capacity_bytes / LINE_BYTES as u64;
        if ways == 0 || lines < ways as u64 || !lines.is_multiple_of(ways as u64) {
            return Err(SimError::Config(format!(
                "counter cache of {capacity_bytes} bytes cannot be {ways}-way"
            )));
        }
        let num_sets = (lines / ways as u64) as usize;
        Ok(CounterCache {
            sets: vec![Vec::with_capacity(ways); num_sets],
            ways,
            clock: 0,
            hits: 0,
            misses: 0,
        })
    }

    pub fn capacity_lines(&self) -> usize {
        self.sets.len() * self.ways
    }

    pub fn len(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn set_index(&self, address: u64) -> usize {
        ((address / LINE_BYTES as u64) % self.sets.len() as u64) as usize
    }

    /// Hit returns the line and refreshes its recency; counted in hit/miss stats.
    pub fn lookup(&mut self, address: u64) -> Option<CounterLine> {
        self.clock += 1;
        let clock = self.clock;
        let set = self.set_index(address);
        match self.sets[set].iter_mut().find(|w| w.address == address) {
            Some(way) => {
                way.last_used = clock;
                self.hits += 1;
                Some(way.line)
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    /// Look without touching recency or statistics.
    pub fn peek(&self, address: u64) -> Option<CounterLine> {
        self.sets[self.set_index(address)]
            .iter()
            .find(|w| w.address == address)
            .map(|w| w.line)
    }

    pub fn is_dirty(&self, address: u64) -> bool {
        self.sets[self.set_index(address)]
            .iter()
            .any(|w| w.address == address && w.dirty)
    }

    /// Insert or overwrite, returning the LRU victim when the set was full.
    pub fn insert(&mut self, address: u64, line: CounterLine, dirty: bool) -> Option<Evicted> {
        self.clock += 1;
        let clock = self.clock;
        let ways = self.ways;
        let set_index = self.set_index(address);
        let set = &mut self.sets[set_index];
        if let Some(way) = set.iter_mut().find(|w| w.address == address) {
            way.line = line;
            way.dirty = dirty;
            way.last_used = clock;
            return None;
        }
        let fresh = Way {
            address,
            line,
            dirty,
            last_used: clock,
        };
        if set.len() < ways {
            set.push(fresh);
            return None;
        }
        let victim = set
            .iter_mut()
            .min_by_key(|w| w.last_used)
            .expect("full set has a victim");
        let evicted = Evicted {
            address: victim.address,
            line: victim.line,
            dirty: victim.dirty,
        };
        *victim = fresh;
        Some(evicted)
    }

    pub fn dirty_lines(&self) -> Vec<(u64, CounterLine)> {
        let mut out: Vec<_> = self
            .sets
            .iter()
            .flatten()
            .filter(|w| w.dirty)
            .map(|w| (w.address, w.line))
            .collect();
        out.sort_by_key(|(a, _)| *a);
        out
    }

    pub fn mark_clean(&mut self, address: u64) {
        let set = self.set_index(address);
        if let Some(w) = self.sets[set].iter_mut().find(|w| w.address == address) {
            w.dirty = false;
        }
    }

    pub fn hit_rate(&self) -> Option<f64> {
        let total = self.hits + self.misses;
        (total > 0).then(|| self.hits as f64 / total as f64)
    }
}

/// Write-through of one updated counter line: the cache copy is replaced and
/// a counter-flagged copy is appended to the write queue (merging with any
/// resident copy when CWR is on). The caller guarantees queue space.
pub fn write_through(
    cache: &mut CounterCache,
    queue: &mut WriteQueue,
    counter_line_address: u64,
    updated: CounterLine,
    now: Ns,
) -> SimResult<()> {
    cache.insert(counter_line_address, updated, false);
    queue.append(WriteQueueEntry {
        address: counter_line_address,
        payload: updated.to_line(),
        origin: Origin::Counter,
        enqueue_time: now,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    #[test]
    fn locate_examples() {
        let map = AddressMap::with_data_pages(16);
        let base = map.counter_base;
        assert_eq!(map.locate_counter(0).unwrap(), (base, 0));
        assert_eq!(map.locate_counter(63 * 64).unwrap(), (base, 63));
        // page 5, line 7
        assert_eq!(map.locate_counter(5 * 4096 + 7 * 64).unwrap(), (base + 320, 7));
        assert!(matches!(
            map.locate_counter(16 * 4096),
            Err(SimError::Addressing { .. })
        ));
        assert!(matches!(map.locate_counter(65), Err(SimError::Misaligned(65))));
    }

    #[test]
    fn regions_are_disjoint() {
        let map = AddressMap::for_capacity(16 << 30).unwrap();
        assert!(map.counter_base >= map.data_span);
        let counter_end = map.counter_base + map.data_pages() * 64;
        assert!(map.meta_base >= counter_end);
        assert!(map.meta_base + PAGE_BYTES <= 16 << 30);
        assert_eq!(map.region(map.data_span - 64).unwrap(), Region::Data);
        assert_eq!(map.region(map.counter_base).unwrap(), Region::Counter);
        assert_eq!(map.region(map.meta_base).unwrap(), Region::Meta);
    }

    #[test]
    fn minor_increment_and_overflow() {
        let line = CounterLine::default();
        let next = line.increment_minor(3).unwrap();
        assert_eq!(next.minors[3], 1);
        assert_eq!(next.major, 0);

        let mut l = CounterLine::default();
        for _ in 0..127 {
            l = l.increment_minor(3).unwrap();
        }
        assert_eq!(l.minors[3], 127);
        assert_eq!(l.increment_minor(3), Err(MinorOverflow));
        let e = l.next_epoch();
        assert_eq!(e.major, 1);
        assert!(e.minors.iter().all(|m| *m == 0));
    }

    #[test]
    fn serialized_layout_is_one_line() {
        let mut l = CounterLine {
            major: 0x0102_0304_0506_0708,
            minors: [0; 64],
        };
        l.minors[0] = 0x7f;
        l.minors[63] = 0x55;
        let bytes = l.to_line();
        assert_eq!(&bytes.0[..8], &0x0102_0304_0506_0708u64.to_le_bytes());
        assert_eq!(bytes.0[8] & 0x7f, 0x7f);
        // 64 * 7 = 448 bits = 56 bytes after the major
        assert_eq!(CounterLine::from_line(&bytes), l);
    }

    #[test]
    fn lookup_hits_after_insert_and_misses_otherwise() {
        let mut c = CounterCache::new(1 << 20, 8).unwrap();
        assert_eq!(c.capacity_lines(), 16384);
        let line = CounterLine::default().increment_minor(1).unwrap();
        c.insert(0x4000, line, false);
        assert_eq!(c.lookup(0x4000), Some(line));
        assert_eq!(c.lookup(0x8000), None);
        assert_eq!((c.hits, c.misses), (1, 1));
    }

    #[test]
    fn overfilled_set_evicts_least_recent() {
        let mut c = CounterCache::new(64 * 16, 8).unwrap(); // 2 sets
        let sets = 2u64;
        let same_set: Vec<u64> = (0..9).map(|i| i * sets * 64).collect();
        for &a in &same_set[..8] {
            assert!(c.insert(a, CounterLine::default(), false).is_none());
        }
        // touch all but the first, making it LRU
        for &a in &same_set[1..8] {
            c.lookup(a);
        }
        let ev = c.insert(same_set[8], CounterLine::default(), false).unwrap();
        assert_eq!(ev.address, same_set[0]);
        assert_eq!(c.lookup(same_set[0]), None);
        assert!(c.len() <= c.capacity_lines());
    }

    /// Reference LRU: per-set recency list, most recent at the front.
    struct OracleLru {
        sets: Vec<VecDeque<u64>>,
        ways: usize,
    }

    impl OracleLru {
        fn access(&mut self, addr: u64) -> bool {
            let n = self.sets.len() as u64;
            let set = &mut self.sets[((addr / 64) % n) as usize];
            if let Some(pos) = set.iter().position(|a| *a == addr) {
                set.remove(pos);
                set.push_front(addr);
                true
            } else {
                if set.len() == self.ways {
                    set.pop_back();
                }
                set.push_front(addr);
                false
            }
        }
    }

    #[test]
    fn matches_reference_lru_on_random_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut cache = CounterCache::new(64 * 64, 4).unwrap(); // 16 sets
        let mut oracle = OracleLru {
            sets: vec![VecDeque::new(); 16],
            ways: 4,
        };
        for _ in 0..20_000 {
            let addr = rng.gen_range(0..200u64) * 64;
            let hit = cache.lookup(addr).is_some();
            if !hit {
                cache.insert(addr, CounterLine::default(), false);
            }
            assert_eq!(hit, oracle.access(addr), "divergence at {addr:#x}");
        }
    }

    #[test]
    fn write_through_updates_cache_and_queue() {
        let mut cache = CounterCache::new(1 << 20, 8).unwrap();
        let mut q = WriteQueue::new(Some(32), true);
        let updated = CounterLine::default().increment_minor(2).unwrap();
        write_through(&mut cache, &mut q, 0x9000, updated, 0).unwrap();
        assert_eq!(cache.lookup(0x9000), Some(updated));
        assert!(!cache.is_dirty(0x9000));
        let later = updated.increment_minor(3).unwrap();
        write_through(&mut cache, &mut q, 0x9000, later, 1).unwrap();
        let entries: Vec<_> = q.entries().collect();
        assert_eq!(entries.len(), 1);
        assert_eq!(CounterLine::from_line(&entries[0].payload), later);
    }
}
