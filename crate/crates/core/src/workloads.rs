//! Transaction-stream generators for the five evaluation workloads.
//!
//! Each generator maintains a host-side shadow of its data structure and
//! only emits the resulting address streams; item contents are seeded
//! pseudorandom bytes.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{SimError, SimResult};
use crate::line::{MemoryLine, LINE_BYTES, PAGE_BYTES};
use crate::txn::TxnDescriptor;

pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;
pub const DEFAULT_LOG_RING_BYTES: u64 = 64 * MIB;
pub const BTREE_FANOUT: usize = 16;
pub const BUCKET_ITEMS: u64 = 4;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, PartialOrd, Ord)]
pub enum WorkloadKind {
    Array,
    Queue,
    Btree,
    Hashtable,
    Rbtree,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 5] = [
        WorkloadKind::Array,
        WorkloadKind::Queue,
        WorkloadKind::Btree,
        WorkloadKind::Hashtable,
        WorkloadKind::Rbtree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::Array => "array",
            WorkloadKind::Queue => "queue",
            WorkloadKind::Btree => "btree",
            WorkloadKind::Hashtable => "hashtable",
            WorkloadKind::Rbtree => "rbtree",
        }
    }

    pub fn default_footprint(self) -> u64 {
        match self {
            WorkloadKind::Array | WorkloadKind::Queue => GIB,
            _ => 2 * GIB,
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "array" => Ok(WorkloadKind::Array),
            "queue" => Ok(WorkloadKind::Queue),
            "btree" | "b-tree" => Ok(WorkloadKind::Btree),
            "hashtable" | "hash" => Ok(WorkloadKind::Hashtable),
            "rbtree" | "rb-tree" => Ok(WorkloadKind::Rbtree),
            other => Err(SimError::Parse(format!("unknown workload `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub txn_size: u64,
    pub txn_count: u64,
    pub seed: u64,
    pub footprint: u64,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, txn_size: u64, txn_count: u64, seed: u64) -> Self {
        WorkloadSpec {
            kind,
            txn_size,
            txn_count,
            seed,
            footprint: kind.default_footprint(),
        }
    }

    pub fn validate(&self) -> SimResult<()> {
        if self.txn_size == 0 || !self.txn_size.is_multiple_of(LINE_BYTES as u64) {
            return Err(SimError::Config(format!(
                "transaction size {} is not a positive multiple of 64",
                self.txn_size
            )));
        }
        if self.txn_size > 64 * LINE_BYTES as u64 {
            return Err(SimError::Config(format!(
                "transaction size {} exceeds 4096 bytes",
                self.txn_size
            )));
        }
        let min = 64 * BTREE_FANOUT as u64 * self.txn_size;
        if !self.footprint.is_multiple_of(PAGE_BYTES) || self.footprint < min {
            return Err(SimError::Config(format!(
                "footprint {} must be page aligned and at least {min} bytes",
                self.footprint
            )));
        }
        Ok(())
    }

    fn lines(&self) -> usize {
        (self.txn_size / LINE_BYTES as u64) as usize
    }
}

/// Where a stream lives in the physical address space.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Placement {
    pub data_base: u64,
    pub log_base: u64,
    pub log_bytes: u64,
}

impl Placement {
    /// Data at `base`, log ring right after the footprint.
    pub fn contiguous(base: u64, footprint: u64, log_bytes: u64) -> Self {
        Placement {
            data_base: base,
            log_base: base + footprint,
            log_bytes,
        }
    }

    pub fn span(&self, footprint: u64) -> u64 {
        footprint + self.log_bytes
    }
}

/// Circular log area; each transaction's entry is contiguous and never wraps.
#[derive(Clone, Debug)]
pub struct LogRing {
    base: u64,
    bytes: u64,
    next: u64,
}

impl LogRing {
    pub fn new(base: u64, bytes: u64) -> Self {
        LogRing { base, bytes, next: 0 }
    }

    pub fn alloc(&mut self, lines: u64) -> u64 {
        let len = lines * LINE_BYTES as u64;
        assert!(len <= self.bytes, "log entry of {len} bytes exceeds the ring");
        if self.next + len > self.bytes {
            self.next = 0;
        }
        let at = self.base + self.next;
        self.next += len;
        at
    }

    pub fn region(&self) -> (u64, u64) {
        (self.base, self.base + self.bytes)
    }
}

/// What one transaction does to the structure, as offsets into the footprint.
#[derive(Clone, Debug)]
struct Access {
    write_offset: u64,
    touches: Vec<u64>,
}

#[derive(Clone, Debug)]
struct BNode {
    keys: Vec<u64>,
    children: Vec<usize>,
    /// Leaf items as (key, slot).
    items: Vec<(u64, usize)>,
    offset: u64,
    leaf: bool,
}

/// B+-tree shadow: inner nodes of four lines, leaves of `FANOUT` item slots.
#[derive(Clone, Debug)]
struct BTreeShadow {
    nodes: Vec<BNode>,
    root: usize,
    item: u64,
    inner_next: u64,
    inner_end: u64,
    leaf_next: u64,
    leaf_end: u64,
}

const INNER_NODE_BYTES: u64 = 4 * LINE_BYTES as u64;

impl BTreeShadow {
    fn new(footprint: u64, item: u64) -> Self {
        let inner_end = footprint / 64;
        let mut t = BTreeShadow {
            nodes: Vec::new(),
            root: 0,
            item,
            inner_next: 0,
            inner_end,
            leaf_next: inner_end,
            leaf_end: footprint,
        };
        t.root = t.alloc_leaf().expect("footprint holds one leaf");
        t
    }

    fn leaf_bytes(&self) -> u64 {
        self.item * BTREE_FANOUT as u64
    }

    fn alloc_leaf(&mut self) -> Option<usize> {
        if self.leaf_next + self.leaf_bytes() > self.leaf_end {
            return None;
        }
        let offset = self.leaf_next;
        self.leaf_next += self.leaf_bytes();
        self.nodes.push(BNode {
            keys: Vec::new(),
            children: Vec::new(),
            items: Vec::new(),
            offset,
            leaf: true,
        });
        Some(self.nodes.len() - 1)
    }

    fn alloc_inner(&mut self) -> Option<usize> {
        if self.inner_next + INNER_NODE_BYTES > self.inner_end {
            return None;
        }
        let offset = self.inner_next;
        self.inner_next += INNER_NODE_BYTES;
        self.nodes.push(BNode {
            keys: Vec::new(),
            children: Vec::new(),
            items: Vec::new(),
            offset,
            leaf: false,
        });
        Some(self.nodes.len() - 1)
    }

    fn free_slot(node: &BNode) -> usize {
        (0..BTREE_FANOUT)
            .find(|s| node.items.iter().all(|(_, used)| used != s))
            .expect("leaf has a free slot")
    }

    /// Split a full leaf; the upper half moves to a new sibling. Returns
    /// the separator and sibling, or `None` when space has run out.
    fn split_leaf(&mut self, idx: usize) -> Option<(u64, usize)> {
        let sib = self.alloc_leaf()?;
        let mut items = std::mem::take(&mut self.nodes[idx].items);
        items.sort_unstable();
        let upper = items.split_off(items.len() / 2);
        self.nodes[idx].items = items;
        self.nodes[sib].items = upper.iter().enumerate().map(|(slot, (k, _))| (*k, slot)).collect();
        Some((upper[0].0, sib))
    }

    fn split_inner(&mut self, idx: usize) -> Option<(u64, usize)> {
        let sib = self.alloc_inner()?;
        let node = &mut self.nodes[idx];
        let mid = node.keys.len() / 2;
        let sep = node.keys[mid];
        let keys = node.keys.split_off(mid + 1);
        node.keys.pop();
        let children = node.children.split_off(mid + 1);
        self.nodes[sib].keys = keys;
        self.nodes[sib].children = children;
        Some((sep, sib))
    }

    fn insert(&mut self, key: u64) -> Access {
        let mut path = Vec::new();
        let mut idx = self.root;
        while !self.nodes[idx].leaf {
            path.push(idx);
            let node = &self.nodes[idx];
            let pos = node.keys.partition_point(|k| *k <= key);
            idx = node.children[pos];
        }
        let mut touches: Vec<u64> = path.iter().map(|&n| self.nodes[n].offset).collect();
        touches.push(self.nodes[idx].offset);

        let mut leaf = idx;
        if self.nodes[leaf].items.len() == BTREE_FANOUT {
            match self.split_leaf(leaf) {
                Some((sep, sib)) => {
                    if key >= sep {
                        leaf = sib;
                    }
                    self.propagate(path, idx, sep, sib);
                }
                None => {
                    // out of space: overwrite the lowest slot in place
                    let slot = self.nodes[leaf].items[0].1;
                    self.nodes[leaf].items[0] = (key, slot);
                    let write_offset = self.nodes[leaf].offset + slot as u64 * self.item;
                    return Access { write_offset, touches };
                }
            }
        }
        let slot = Self::free_slot(&self.nodes[leaf]);
        self.nodes[leaf].items.push((key, slot));
        Access {
            write_offset: self.nodes[leaf].offset + slot as u64 * self.item,
            touches,
        }
    }

    fn propagate(&mut self, mut path: Vec<usize>, mut child: usize, mut sep: u64, mut sib: usize) {
        loop {
            let Some(parent) = path.pop() else {
                let Some(root) = self.alloc_inner() else { return };
                self.nodes[root].keys = vec![sep];
                self.nodes[root].children = vec![child, sib];
                self.root = root;
                return;
            };
            let node = &mut self.nodes[parent];
            let pos = node.keys.partition_point(|k| *k <= sep);
            node.keys.insert(pos, sep);
            node.children.insert(pos + 1, sib);
            if node.children.len() <= BTREE_FANOUT {
                return;
            }
            match self.split_inner(parent) {
                Some((s, n)) => {
                    child = parent;
                    sep = s;
                    sib = n;
                }
                None => return,
            }
        }
    }

    #[cfg(test)]
    fn depth(&self) -> usize {
        let mut d = 1;
        let mut n = self.root;
        while !self.nodes[n].leaf {
            n = self.nodes[n].children[0];
            d += 1;
        }
        d
    }
}

#[derive(Clone, Debug)]
struct RbNode {
    key: u64,
    left: Option<usize>,
    right: Option<usize>,
    red: bool,
    offset: u64,
}

/// Left-leaning red-black tree shadow; one item per node at a random slot.
#[derive(Clone, Debug, Default)]
struct RbShadow {
    nodes: Vec<RbNode>,
    root: Option<usize>,
    used_slots: HashSet<u64>,
}

impl RbShadow {
    fn is_red(&self, n: Option<usize>) -> bool {
        n.is_some_and(|i| self.nodes[i].red)
    }

    fn rotate_left(&mut self, h: usize, touched: &mut Vec<usize>) -> usize {
        let x = self.nodes[h].right.expect("right child");
        self.nodes[h].right = self.nodes[x].left;
        self.nodes[x].left = Some(h);
        self.nodes[x].red = self.nodes[h].red;
        self.nodes[h].red = true;
        touched.extend([h, x]);
        x
    }

    fn rotate_right(&mut self, h: usize, touched: &mut Vec<usize>) -> usize {
        let x = self.nodes[h].left.expect("left child");
        self.nodes[h].left = self.nodes[x].right;
        self.nodes[x].right = Some(h);
        self.nodes[x].red = self.nodes[h].red;
        self.nodes[h].red = true;
        touched.extend([h, x]);
        x
    }

    fn flip(&mut self, h: usize, touched: &mut Vec<usize>) {
        self.nodes[h].red = !self.nodes[h].red;
        for c in [self.nodes[h].left, self.nodes[h].right].into_iter().flatten() {
            self.nodes[c].red = !self.nodes[c].red;
            touched.push(c);
        }
        touched.push(h);
    }

    fn insert_at(
        &mut self,
        h: Option<usize>,
        key: u64,
        offset: u64,
        path: &mut Vec<usize>,
        touched: &mut Vec<usize>,
    ) -> usize {
        let Some(mut h) = h else {
            self.nodes.push(RbNode {
                key,
                left: None,
                right: None,
                red: true,
                offset,
            });
            return self.nodes.len() - 1;
        };
        path.push(h);
        if key < self.nodes[h].key {
            let l = self.insert_at(self.nodes[h].left, key, offset, path, touched);
            self.nodes[h].left = Some(l);
        } else {
            let r = self.insert_at(self.nodes[h].right, key, offset, path, touched);
            self.nodes[h].right = Some(r);
        }
        if self.is_red(self.nodes[h].right) && !self.is_red(self.nodes[h].left) {
            h = self.rotate_left(h, touched);
        }
        if self.is_red(self.nodes[h].left) && self.is_red(self.nodes[h].left.and_then(|l| self.nodes[l].left)) {
            h = self.rotate_right(h, touched);
        }
        if self.is_red(self.nodes[h].left) && self.is_red(self.nodes[h].right) {
            self.flip(h, touched);
        }
        h
    }

    fn insert(&mut self, key: u64, offset: u64) -> Vec<u64> {
        let mut path = Vec::new();
        let mut touched = Vec::new();
        let root = self.insert_at(self.root, key, offset, &mut path, &mut touched);
        self.nodes[root].red = false;
        self.root = Some(root);
        let mut seen = HashSet::new();
        path.into_iter()
            .chain(touched)
            .filter(|&n| n != self.nodes.len() - 1 && seen.insert(n))
            .map(|n| self.nodes[n].offset)
            .collect()
    }

    #[cfg(test)]
    fn height(&self, n: Option<usize>) -> usize {
        n.map_or(0, |i| {
            1 + self.height(self.nodes[i].left).max(self.height(self.nodes[i].right))
        })
    }
}

#[derive(Clone, Debug)]
enum Shadow {
    Array { entries: u64, pending: VecDeque<Access> },
    Queue { slots: u64, head: u64, tail: u64, len: u64 },
    Btree(Box<BTreeShadow>),
    Hashtable { buckets: u64, fill: HashMap<u64, u64> },
    Rbtree(Box<RbShadow>),
}

const QUEUE_META_BYTES: u64 = PAGE_BYTES;

/// Lazily generated, deterministic transaction stream.
#[derive(Clone, Debug)]
pub struct TxnStream {
    spec: WorkloadSpec,
    placement: Placement,
    ring: LogRing,
    shadow: Shadow,
    rng: ChaCha8Rng,
    payload: ChaCha8Rng,
    issued: u64,
}

impl TxnStream {
    pub fn new(spec: WorkloadSpec, placement: Placement) -> SimResult<TxnStream> {
        spec.validate()?;
        let item = spec.txn_size;
        let shadow = match spec.kind {
            WorkloadKind::Array => Shadow::Array {
                entries: spec.footprint / item,
                pending: VecDeque::new(),
            },
            WorkloadKind::Queue => Shadow::Queue {
                slots: (spec.footprint - QUEUE_META_BYTES) / item,
                head: 0,
                tail: 0,
                len: 0,
            },
            WorkloadKind::Btree => Shadow::Btree(Box::new(BTreeShadow::new(spec.footprint, item))),
            WorkloadKind::Hashtable => Shadow::Hashtable {
                buckets: spec.footprint / (BUCKET_ITEMS * item),
                fill: HashMap::new(),
            },
            WorkloadKind::Rbtree => Shadow::Rbtree(Box::default()),
        };
        let mut root = ChaCha8Rng::seed_from_u64(spec.seed);
        Ok(TxnStream {
            ring: LogRing::new(placement.log_base, placement.log_bytes),
            spec,
            placement,
            shadow,
            rng: ChaCha8Rng::seed_from_u64(root.next_u64()),
            payload: ChaCha8Rng::seed_from_u64(root.next_u64()),
            issued: 0,
        })
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn log_region(&self) -> (u64, u64) {
        self.ring.region()
    }

    fn next_access(&mut self) -> Access {
        let item = self.spec.txn_size;
        let rng = &mut self.rng;
        match &mut self.shadow {
            Shadow::Array { entries, pending } => {
                if let Some(a) = pending.pop_front() {
                    return a;
                }
                let i = rng.gen_range(0..*entries);
                let mut j = rng.gen_range(0..*entries - 1);
                if j >= i {
                    j += 1;
                }
                // a swap is two transactions, each copying the other entry in
                pending.push_back(Access {
                    write_offset: j * item,
                    touches: vec![i * item],
                });
                Access {
                    write_offset: i * item,
                    touches: vec![j * item],
                }
            }
            Shadow::Queue { slots, head, tail, len } => {
                let enqueue = *len == 0 || (*len < *slots && rng.gen_bool(0.6));
                let slot = if enqueue {
                    let s = *tail;
                    *tail = (*tail + 1) % *slots;
                    *len += 1;
                    s
                } else {
                    let s = *head;
                    *head = (*head + 1) % *slots;
                    *len -= 1;
                    s
                };
                Access {
                    write_offset: QUEUE_META_BYTES + slot * item,
                    touches: vec![0],
                }
            }
            Shadow::Btree(tree) => tree.insert(rng.next_u64()),
            Shadow::Hashtable { buckets, fill } => {
                let bucket = rng.gen_range(0..*buckets);
                let n = fill.entry(bucket).or_insert(0);
                let slot = *n % BUCKET_ITEMS;
                *n += 1;
                let base = bucket * BUCKET_ITEMS * item;
                Access {
                    write_offset: base + slot * item,
                    touches: vec![base],
                }
            }
            Shadow::Rbtree(tree) => {
                let slots = self.spec.footprint / item;
                let slot = loop {
                    let s = rng.gen_range(0..slots);
                    if tree.used_slots.insert(s) {
                        break s;
                    }
                };
                let touches = tree.insert(rng.next_u64(), slot * item);
                Access {
                    write_offset: slot * item,
                    touches,
                }
            }
        }
    }

    fn payload_line(&mut self) -> MemoryLine {
        let mut bytes = [0u8; LINE_BYTES];
        self.payload.fill_bytes(&mut bytes);
        MemoryLine(bytes)
    }
}

impl Iterator for TxnStream {
    type Item = TxnDescriptor;

    fn next(&mut self) -> Option<TxnDescriptor> {
        if self.issued >= self.spec.txn_count {
            return None;
        }
        let access = self.next_access();
        let base = self.placement.data_base;
        let write_set = (0..self.spec.lines() as u64)
            .map(|i| (base + access.write_offset + i * 64, self.payload_line()))
            .collect::<Vec<_>>();
        let log_base = self.ring.alloc(write_set.len() as u64 + 2);
        let mut txn = TxnDescriptor::new(self.issued, write_set, log_base);
        txn.touches = access.touches.into_iter().map(|o| base + o).collect();
        self.issued += 1;
        Some(txn)
    }
}

/// Stream for a single requester: data at 0, log ring after the footprint.
pub fn generate(spec: WorkloadSpec) -> SimResult<TxnStream> {
    TxnStream::new(spec, Placement::contiguous(0, spec.footprint, DEFAULT_LOG_RING_BYTES))
}

/// Write `TXN <id> READ|WRITE <hex-address> <len>` lines.
pub fn export_trace<W: Write>(txns: impl IntoIterator<Item = TxnDescriptor>, mut out: W) -> std::io::Result<()> {
    for t in txns {
        for a in &t.touches {
            writeln!(out, "TXN {} READ {a:#x} 64", t.txn_id)?;
        }
        writeln!(
            out,
            "TXN {} WRITE {:#x} {}",
            t.txn_id,
            t.data_address(),
            t.payload_len()
        )?;
    }
    Ok(())
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TraceTxn {
    pub id: u64,
    pub touches: Vec<u64>,
    pub address: u64,
    pub len: u64,
}

pub fn parse_trace<R: BufRead>(input: R) -> SimResult<Vec<TraceTxn>> {
    let mut out: Vec<TraceTxn> = Vec::new();
    let mut touches: Vec<u64> = Vec::new();
    let mut touch_id = None;
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| SimError::Parse(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || SimError::Parse(format!("trace line {}: `{line}`", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 || f[0] != "TXN" {
            return Err(bad());
        }
        let id: u64 = f[1].parse().map_err(|_| bad())?;
        let addr = u64::from_str_radix(f[3].trim_start_matches("0x"), 16).map_err(|_| bad())?;
        let len: u64 = f[4].parse().map_err(|_| bad())?;
        if addr % 64 != 0 || len == 0 || !len.is_multiple_of(64) {
            return Err(bad());
        }
        if touch_id.is_some_and(|t| t != id) {
            touches.clear();
        }
        match f[2] {
            "READ" => {
                touch_id = Some(id);
                touches.push(addr);
            }
            "WRITE" => {
                let t = if touch_id == Some(id) {
                    std::mem::take(&mut touches)
                } else {
                    Vec::new()
                };
                touch_id = None;
                out.push(TraceTxn {
                    id,
                    touches: t,
                    address: addr,
                    len,
                });
            }
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

/// Rebuild descriptors from a trace, with seeded payloads and a fresh log ring.
pub fn descriptors_from_trace(trace: &[TraceTxn], seed: u64, ring: &mut LogRing) -> Vec<TxnDescriptor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trace
        .iter()
        .map(|t| {
            let write_set = (0..t.len / 64)
                .map(|i| {
                    let mut bytes = [0u8; LINE_BYTES];
                    rng.fill_bytes(&mut bytes);
                    (t.address + i * 64, MemoryLine(bytes))
                })
                .collect::<Vec<_>>();
            let log_base = ring.alloc(write_set.len() as u64 + 2);
            let mut d = TxnDescriptor::new(t.id, write_set, log_base);
            d.touches = t.touches.clone();
            d
        })
        .collect()
}
