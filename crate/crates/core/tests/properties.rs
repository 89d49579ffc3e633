use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;

use proptest::collection::vec;
use proptest::prelude::*;

use secpm::config::Config;
use secpm::controller::{Controller, ControllerConfig, Mode, Rsr};
use secpm::counters::{CounterCache, CounterLine, MINOR_MAX};
use secpm::crash::pattern_line;
use secpm::nvm::{NvmDevice, Timing};
use secpm::txn::TxnDescriptor;
use secpm::workloads::{export_trace, parse_trace, WorkloadKind};
use secpm::write_queue::{DrainPolicy, Origin, WriteQueue, WriteQueueEntry};
use secpm::MemoryLine;

fn counter_line() -> impl Strategy<Value = CounterLine> {
    (any::<u64>(), vec(0u8..=MINOR_MAX, 64)).prop_map(|(major, m)| {
        let mut minors = [0u8; 64];
        minors.copy_from_slice(&m);
        CounterLine { major, minors }
    })
}

fn flush_trace(max_len: usize) -> impl Strategy<Value = Vec<(u64, u64, u64)>> {
    // (page, line, idle gap before the flush)
    vec(
        (prop::sample::select(vec![2u64, 3, 40, 41]), 0u64..64, 0u64..500),
        1..max_len,
    )
}

fn mode() -> impl Strategy<Value = Mode> {
    prop::sample::select(Mode::ALL.to_vec())
}

fn run_trace(cfg: ControllerConfig, trace: &[(u64, u64, u64)]) -> Controller {
    let mut ctrl = Controller::new(cfg).unwrap();
    let mut t = 0;
    for (k, &(page, line, gap)) in trace.iter().enumerate() {
        t = ctrl
            .handle_flush(page * 4096 + line * 64, pattern_line(3, k as u64), t + gap)
            .unwrap();
    }
    ctrl.drain_all(t).unwrap();
    ctrl
}

proptest! {
    #[test]
    fn counter_line_layout_round_trips(c in counter_line()) {
        prop_assert_eq!(CounterLine::from_line(&c.to_line()), c);
    }

    #[test]
    fn increment_touches_one_minor(c in counter_line(), i in 0usize..64) {
        match c.increment_minor(i) {
            Ok(next) => {
                prop_assert!(c.minors[i] < MINOR_MAX);
                prop_assert_eq!(next.major, c.major);
                for j in 0..64 {
                    let want = if j == i { c.minors[j] + 1 } else { c.minors[j] };
                    prop_assert_eq!(next.minors[j], want);
                }
            }
            Err(_) => prop_assert_eq!(c.minors[i], MINOR_MAX),
        }
    }

    #[test]
    fn next_epoch_resets_minors(c in counter_line().prop_filter("major not saturated", |c| c.major < u64::MAX)) {
        let n = c.next_epoch();
        prop_assert_eq!(n.major, c.major + 1);
        prop_assert!(n.minors.iter().all(|&m| m == 0));
    }

    #[test]
    fn rsr_image_round_trips(page in any::<u32>(), major in any::<u64>(), done in any::<u64>()) {
        let rsr = Rsr { page_number: page, old_major: major, done_bits: done, active: true };
        let image = rsr.to_bytes();
        prop_assert_eq!(image.len(), 20);
        prop_assert_eq!(Rsr::from_bytes(&image), rsr);
    }

    #[test]
    fn queue_conserves_entries(
        cwr in any::<bool>(),
        ops in vec((0u8..3, 0u64..6), 1..200),
    ) {
        let mut q = WriteQueue::new(Some(16), cwr);
        let mut nvm = NvmDevice::new(Timing::default(), 16);
        let mut t = 0;
        for (op, slot) in ops {
            t += 10;
            match op {
                0 if q.free_slots() > 0 => {
                    q.append(WriteQueueEntry {
                        address: slot * 64,
                        payload: MemoryLine::ZERO,
                        origin: Origin::Data,
                        enqueue_time: t,
                    }).unwrap();
                }
                1 if q.free_slots() > 0 => {
                    q.append(WriteQueueEntry {
                        address: (1 << 30) | (slot * 64),
                        payload: pattern_line(1, t),
                        origin: Origin::Counter,
                        enqueue_time: t,
                    }).unwrap();
                }
                _ => {
                    t = t.max(q.front().map_or(t, |h| nvm.bank_busy_until(h.address)));
                    q.drain_one(&mut nvm, t);
                }
            }
            let c = q.counters();
            prop_assert_eq!(c.appended() - c.counter_merged, c.drained() + q.len() as u64);
            prop_assert_eq!(nvm.writes, c.drained());
            if cwr {
                let mut seen = std::collections::HashSet::new();
                for e in q.entries().filter(|e| e.origin == Origin::Counter) {
                    prop_assert!(seen.insert(e.address), "two resident counters for {:#x}", e.address);
                }
            }
        }
    }

    #[test]
    fn queue_drains_in_fifo_order(addrs in vec(0u64..64, 1..32)) {
        let mut q = WriteQueue::new(None, false);
        let mut nvm = NvmDevice::new(Timing::default(), 16);
        for (i, a) in addrs.iter().enumerate() {
            q.append(WriteQueueEntry {
                address: a * 64,
                payload: pattern_line(2, i as u64),
                origin: Origin::Data,
                enqueue_time: 0,
            }).unwrap();
        }
        let mut t = 0;
        let mut order = Vec::new();
        while let Some(head) = q.front() {
            t = t.max(nvm.bank_busy_until(head.address));
            order.push(q.drain_one(&mut nvm, t).unwrap().payload);
        }
        let expected: Vec<_> = (0..addrs.len() as u64).map(|i| pattern_line(2, i)).collect();
        prop_assert_eq!(order, expected);
    }

    #[test]
    fn cache_matches_lru_model(ops in vec((any::<bool>(), 0u64..48), 1..300)) {
        // 4 sets of 2 ways
        let mut cache = CounterCache::new(8 * 64, 2).unwrap();
        let mut model: Vec<VecDeque<u64>> = vec![VecDeque::new(); 4];
        for (insert, line) in ops {
            let addr = line * 64;
            let set = &mut model[(line % 4) as usize];
            let pos = set.iter().position(|&a| a == addr);
            if insert {
                let evicted = cache.insert(addr, CounterLine::default(), false).map(|e| e.address);
                let want = match pos {
                    Some(p) => { set.remove(p); None }
                    None if set.len() == 2 => set.pop_front(),
                    None => None,
                };
                set.push_back(addr);
                prop_assert_eq!(evicted, want);
            } else {
                let hit = cache.lookup(addr).is_some();
                prop_assert_eq!(hit, pos.is_some());
                if let Some(p) = pos {
                    set.remove(p);
                    set.push_back(addr);
                }
            }
        }
    }

    #[test]
    fn reads_return_last_flush(m in mode(), trace in flush_trace(150)) {
        let mut ctrl = run_trace(ControllerConfig::with_mode(m), &trace);
        let mut last = HashMap::new();
        for (k, &(page, line, _)) in trace.iter().enumerate() {
            last.insert(page * 4096 + line * 64, pattern_line(3, k as u64));
        }
        let mut t = ctrl.quiesce_time();
        for (addr, want) in last {
            let (got, done) = ctrl.handle_read(addr, t).unwrap();
            prop_assert_eq!(got, want);
            t = done;
        }
    }

    #[test]
    fn counter_durable_at_every_ack(
        m in prop::sample::select(vec![Mode::Secpm, Mode::SecpmNoCwr]),
        register in any::<bool>(),
        eager in any::<bool>(),
        trace in flush_trace(150),
    ) {
        let mut cfg = ControllerConfig::with_mode(m);
        cfg.audit = true;
        cfg.staging_register = register;
        cfg.drain_policy = if eager { DrainPolicy::Eager } else { DrainPolicy::Watermark };
        let ctrl = run_trace(cfg, &trace);
        prop_assert_eq!(ctrl.stats().audited_acks, trace.len() as u64);
        prop_assert_eq!(ctrl.stats().cwt_violations, 0);
    }

    #[test]
    fn unmerged_counters_double_writes(trace in flush_trace(120)) {
        let plain = run_trace(ControllerConfig::with_mode(Mode::UnsecPm), &trace);
        let secure = run_trace(ControllerConfig::with_mode(Mode::SecpmNoCwr), &trace);
        prop_assert_eq!(secure.nvm().writes, 2 * plain.nvm().writes);
        prop_assert_eq!(plain.nvm().writes, trace.len() as u64);
    }

    #[test]
    fn merging_never_adds_writes(trace in flush_trace(120), q in 4usize..64) {
        let mut with = ControllerConfig::with_mode(Mode::Secpm);
        with.queue_capacity = Some(q);
        let mut without = ControllerConfig::with_mode(Mode::SecpmNoCwr);
        without.queue_capacity = Some(q);
        let merged = run_trace(with, &trace);
        let unmerged = run_trace(without, &trace);
        prop_assert!(merged.nvm().writes <= unmerged.nvm().writes);
        let c = merged.queue().counters();
        prop_assert_eq!(merged.nvm().writes, c.data_appended + c.counter_appended - c.counter_merged);
    }

    #[test]
    fn trace_round_trips(
        txns in vec((0u64..1 << 20, 1u64..=64, vec(0u64..1 << 20, 0..4)), 1..20),
    ) {
        let descriptors: Vec<TxnDescriptor> = txns
            .iter()
            .enumerate()
            .map(|(id, (line, n, touches))| {
                let base = line * 64;
                let ws = (0..*n).map(|i| (base + i * 64, MemoryLine::ZERO)).collect();
                let mut d = TxnDescriptor::new(id as u64, ws, 1 << 40);
                d.touches = touches.iter().map(|t| t * 64).collect();
                d
            })
            .collect();
        let mut text = Vec::new();
        export_trace(descriptors.clone(), &mut text).unwrap();
        let parsed = parse_trace(text.as_slice()).unwrap();
        prop_assert_eq!(parsed.len(), descriptors.len());
        for (p, d) in parsed.iter().zip(&descriptors) {
            prop_assert_eq!(p.id, d.txn_id);
            prop_assert_eq!(p.address, d.data_address());
            prop_assert_eq!(p.len, d.payload_len());
            prop_assert_eq!(&p.touches, &d.touches);
        }
    }

    #[test]
    fn config_round_trips(
        modes in prop::sample::subsequence(Mode::ALL.to_vec(), 1..=4),
        workloads in prop::sample::subsequence(WorkloadKind::ALL.to_vec(), 1..=5),
        sizes in vec((1u64..=64).prop_map(|n| n * 64), 1..4),
        queue_lens in vec(prop::option::of(4usize..256), 1..4),
        cores in vec(1usize..=8, 1..3),
        txn_count in 1u64..1_000_000,
        seed in any::<u64>(),
        register in any::<bool>(),
        eager in any::<bool>(),
        t_wr in 1u32..2000,
        out in prop::option::of("[a-z]{1,8}\\.csv"),
    ) {
        let cfg = Config {
            modes,
            workloads,
            txn_sizes: sizes,
            txn_count,
            queue_lens,
            cores,
            seed,
            staging_register: register,
            drain_policy: if eager { DrainPolicy::Eager } else { DrainPolicy::Watermark },
            timing: Timing { t_wr: f64::from(t_wr) / 2.0, ..Timing::default() },
            out: out.map(PathBuf::from),
            ..Config::default()
        };
        prop_assert_eq!(Config::parse(&cfg.render()).unwrap(), cfg);
    }
}
