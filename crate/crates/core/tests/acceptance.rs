//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, HashSet};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use secpm::controller::{Controller, ControllerConfig, Mode};
use secpm::counters::CounterLine;
use secpm::crash::{
    inject, pattern_line, AtomicWriteScenario, CrashOutcome, CrashPlan, ReencryptionScenario, Scenario, Scope,
};
use secpm::crypto::{decrypt_line, encrypt_line, AesPad, CounterValue, EncryptionKey, OtpInput, PadFunction};
use secpm::experiment::{run_cells, run_with_controller, ExperimentConfig};
use secpm::stats::{reduction_percentage, RunRecord, RunStats};
use secpm::txn::{enumerate_crash_points, Stage};
use secpm::workloads::{WorkloadKind, WorkloadSpec};
use secpm::{MemoryLine, SimResult};

const SIZES: [u64; 4] = [64, 256, 1024, 4096];
const QUEUE_LENS: [usize; 5] = [8, 16, 32, 64, 128];
const SWEEP_MODES: [Mode; 3] = [Mode::UnsecPm, Mode::SecpmNoCwr, Mode::Secpm];
/// Four cores, so 10^4 transactions per workload cell.
const TXNS_PER_CORE: u64 = 2500;
const SEED: u64 = 1;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn cell(mode: Mode, kind: WorkloadKind, size: u64) -> ExperimentConfig {
    ExperimentConfig::new(
        ControllerConfig::with_mode(mode),
        WorkloadSpec::new(kind, size, TXNS_PER_CORE, SEED),
    )
}

struct Sweep {
    records: Vec<RunRecord>,
    elapsed: Duration,
}

impl Sweep {
    fn run() -> SimResult<Sweep> {
        let mut cells = Vec::new();
        for kind in WorkloadKind::ALL {
            for size in SIZES {
                for mode in SWEEP_MODES {
                    cells.push(cell(mode, kind, size));
                }
            }
        }
        let start = Instant::now();
        let records = run_cells(&cells)?;
        Ok(Sweep {
            records,
            elapsed: start.elapsed(),
        })
    }

    fn get(&self, kind: WorkloadKind, size: u64, mode: Mode) -> &RunStats {
        &self
            .records
            .iter()
            .find(|r| r.key.workload == kind && r.key.txn_size == size && r.key.mode == mode)
            .expect("cell in sweep")
            .stats
    }
}

fn mean(s: &RunStats) -> f64 {
    s.mean_latency().unwrap_or(f64::NAN)
}

fn log_page_writes(mode: Mode) -> SimResult<u64> {
    let mut cfg = ControllerConfig::with_mode(mode);
    cfg.queue_capacity = None;
    let mut ctrl = Controller::new(cfg)?;
    let page_base = 0x40_0000;
    let mut t = 0;
    for i in 0..64 {
        t = ctrl.handle_flush(page_base + i * 64, pattern_line(1, i), t)?;
    }
    ctrl.drain_all(t)?;
    Ok(ctrl.nvm().writes)
}

fn criterion_1() -> SimResult<Verdict> {
    let start = Instant::now();
    let off = log_page_writes(Mode::SecpmNoCwr)?;
    let on = log_page_writes(Mode::Secpm)?;
    let took = start.elapsed();
    Ok(Verdict::new(
        off == 128 && on == 65 && took < Duration::from_secs(1),
        format!(
            "one 4 KiB log page: {off} writes without merging, {on} with ({:.3} s)",
            secs(took)
        ),
    ))
}

fn criterion_2(sweep: &Sweep) -> Verdict {
    let mut checked = 0;
    let mut bad = Vec::new();
    for kind in WorkloadKind::ALL {
        for size in SIZES {
            let nocwr = sweep.get(kind, size, Mode::SecpmNoCwr);
            let unsec = sweep.get(kind, size, Mode::UnsecPm);
            if nocwr.reencryptions > 0 {
                continue;
            }
            checked += 1;
            if nocwr.nvm_writes_total != 2 * unsec.nvm_writes_total {
                bad.push(format!(
                    "{kind}/{size}: {:.4}",
                    nocwr.nvm_writes_total as f64 / unsec.nvm_writes_total as f64
                ));
            }
        }
    }
    Verdict::new(
        checked > 0 && bad.is_empty(),
        if bad.is_empty() {
            format!(
                "write ratio 2.000 in {checked}/{} cells without overflow",
                SIZES.len() * 5
            )
        } else {
            format!("ratio off in {}", bad.join(", "))
        },
    )
}

fn count_bad(outcomes: &[CrashOutcome], stage: Option<Stage>) -> usize {
    outcomes
        .iter()
        .filter(|o| stage.is_none() || o.point.stage == stage)
        .filter(|o| !o.verdict.is_consistent())
        .count()
}

fn criterion_3() -> SimResult<Verdict> {
    let start = Instant::now();
    let secpm = enumerate_crash_points(ControllerConfig::with_mode(Mode::Secpm), 4)?;
    let nocwt = enumerate_crash_points(ControllerConfig::with_mode(Mode::SecpmNoCwt), 4)?;
    let took = start.elapsed();
    let secpm_bad = count_bad(&secpm, None);
    let prepare = count_bad(&nocwt, Some(Stage::Prepare));
    let mutate = count_bad(&nocwt, Some(Stage::Mutate));
    let commit = count_bad(&nocwt, Some(Stage::Commit));
    Ok(Verdict::new(
        secpm_bad == 0 && prepare == 0 && mutate >= 1 && commit >= 1 && took < Duration::from_secs(30),
        format!(
            "secpm {secpm_bad}/{} inconsistent; no-cwt inconsistent at prepare {prepare}, mutate {mutate}, commit {commit} ({:.2} s)",
            secpm.len(),
            secs(took)
        ),
    ))
}

fn criterion_4() -> SimResult<Verdict> {
    let plan = CrashPlan::exhaustive(Scope::Transaction);
    let mut without = ControllerConfig::with_mode(Mode::Secpm);
    without.staging_register = false;
    let off = inject(&plan, &AtomicWriteScenario::new(without))?;
    let on = inject(
        &plan,
        &AtomicWriteScenario::new(ControllerConfig::with_mode(Mode::Secpm)),
    )?;
    let (bad_off, bad_on) = (count_bad(&off, None), count_bad(&on, None));
    Ok(Verdict::new(
        bad_off >= 1 && bad_on == 0,
        format!(
            "undecryptable points: {bad_off}/{} without register, {bad_on}/{} with",
            off.len(),
            on.len()
        ),
    ))
}

fn criterion_5(sweep: &Sweep) -> Verdict {
    let mut pass = sweep.elapsed < Duration::from_secs(300);
    let mut rows = Vec::new();
    for kind in WorkloadKind::ALL {
        let r: Vec<f64> = SIZES
            .iter()
            .map(|&s| reduction_percentage(sweep.get(kind, s, Mode::Secpm)).map_or(f64::NAN, |f| f * 100.0))
            .collect();
        let monotone = r.windows(2).all(|w| w[1] >= w[0]);
        pass &= monotone && r[3] >= 85.0;
        rows.push(format!(
            "{kind} {}",
            r.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join("/")
        ));
    }
    Verdict::new(
        pass,
        format!(
            "reduction % at 64/256/1K/4K: {}; sweep {:.1} s",
            rows.join(", "),
            secs(sweep.elapsed)
        ),
    )
}

fn criterion_6(sweep: &Sweep) -> Verdict {
    let mut pass = true;
    let mut misordered = Vec::new();
    let mut ratios = Vec::new();
    for kind in WorkloadKind::ALL {
        for size in SIZES {
            let unsec = mean(sweep.get(kind, size, Mode::UnsecPm));
            let secpm = mean(sweep.get(kind, size, Mode::Secpm));
            let nocwr = mean(sweep.get(kind, size, Mode::SecpmNoCwr));
            if !(unsec <= secpm && secpm < nocwr) {
                pass = false;
                misordered.push(format!("{kind}/{size}"));
            }
            if size == 1024 {
                let ratio = nocwr / secpm;
                pass &= (1.2..=3.0).contains(&ratio);
                ratios.push(format!("{kind} {ratio:.2}"));
            }
        }
    }
    let order = if misordered.is_empty() {
        "ordering holds in all cells".to_string()
    } else {
        format!("ordering broken in {}", misordered.join(", "))
    };
    Verdict::new(pass, format!("{order}; no-cwr/secpm at 1 KiB: {}", ratios.join(", ")))
}

fn criterion_7() -> SimResult<Verdict> {
    let mut cells = Vec::new();
    for kind in WorkloadKind::ALL {
        for q in QUEUE_LENS {
            let mut c = cell(Mode::Secpm, kind, 1024);
            c.controller.queue_capacity = Some(q);
            cells.push(c);
        }
    }
    let records = run_cells(&cells)?;
    let mut pass = true;
    let mut rows = Vec::new();
    for (kind, chunk) in WorkloadKind::ALL.iter().zip(records.chunks(QUEUE_LENS.len())) {
        let r: Vec<f64> = chunk
            .iter()
            .map(|rec| reduction_percentage(&rec.stats).map_or(f64::NAN, |f| f * 100.0))
            .collect();
        pass &= r.windows(2).all(|w| w[1] >= w[0]);
        rows.push(format!(
            "{kind} {}",
            r.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join("/")
        ));
    }
    Ok(Verdict::new(
        pass,
        format!("reduction % at queue 8..128: {}", rows.join(", ")),
    ))
}

fn criterion_8(sweep: &Sweep) -> Verdict {
    let rate = |k| sweep.get(k, 1024, Mode::Secpm).hit_rate().unwrap_or(f64::NAN);
    let local = [WorkloadKind::Queue, WorkloadKind::Btree].map(rate);
    let scattered = [WorkloadKind::Array, WorkloadKind::Hashtable, WorkloadKind::Rbtree].map(rate);
    let floor = local.iter().cloned().fold(f64::INFINITY, f64::min);
    let ceiling = scattered.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Verdict::new(
        floor > ceiling,
        format!(
            "hit rate queue {:.4}, btree {:.4} vs array {:.4}, hashtable {:.4}, rbtree {:.4}",
            local[0], local[1], scattered[0], scattered[1], scattered[2]
        ),
    )
}

fn criterion_9() -> SimResult<Verdict> {
    let start = Instant::now();
    let scenario = ReencryptionScenario::new(ControllerConfig::with_mode(Mode::Secpm));
    let mut ctrl = Controller::new(scenario.config())?;
    let t = scenario.setup(&mut ctrl)?;
    scenario.run(&mut ctrl, t)?;
    let reencrypted = ctrl.stats().reencryptions;
    let outcomes = inject(&CrashPlan::exhaustive(Scope::Reencryption), &scenario)?;
    let took = start.elapsed();
    let bad = count_bad(&outcomes, None);
    Ok(Verdict::new(
        reencrypted == 1 && outcomes.len() >= 64 && bad == 0 && took < Duration::from_secs(10),
        format!(
            "{reencrypted} page re-encryption, {} crash points, {bad} undecryptable ({:.2} s)",
            outcomes.len(),
            secs(took)
        ),
    ))
}

fn round_trips(n: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);
    let mut failures = 0;
    for _ in 0..n {
        let key = EncryptionKey(rng.gen());
        let pads = AesPad::new(&key);
        let input = OtpInput {
            line_address: rng.gen_range(0..1u64 << 40) & !63,
            counter: CounterValue::new(rng.gen(), rng.gen_range(0..128)),
        };
        let mut bytes = [0u8; 64];
        rng.fill(&mut bytes[..]);
        let plain = MemoryLine(bytes);
        let cipher = encrypt_line(&plain, &pads.pad(&input));
        if decrypt_line(&cipher, &pads.pad(&input)) != plain {
            failures += 1;
        }
    }
    failures
}

fn otp_uniqueness() -> SimResult<(usize, usize)> {
    let mut cfg = cell(Mode::Secpm, WorkloadKind::Btree, 1024);
    cfg.controller.record_otp = true;
    let (_, ctrl) = run_with_controller(&cfg)?;
    let log = ctrl.otp_log();
    let distinct: HashSet<_> = log.iter().collect();
    Ok((log.len(), distinct.len()))
}

fn counter_region(ctrl: &Controller) -> BTreeMap<u64, MemoryLine> {
    ctrl.nvm()
        .store()
        .iter()
        .filter(|(a, _)| ctrl.map().is_counter(**a))
        .map(|(a, l)| (*a, *l))
        .collect()
}

/// Counter-region bytes agree with and without merging, and with a
/// per-line write count.
fn merge_oracle(traces: usize) -> SimResult<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let pages = [3u64, 4, 517];
    let mut mismatches = 0;
    for _ in 0..traces {
        let capacity = if rng.gen_bool(0.2) {
            None
        } else {
            Some(rng.gen_range(4..=64))
        };
        let len = rng.gen_range(1..=120);
        let trace: Vec<(u64, usize, u64)> = (0..len)
            .map(|_| {
                (
                    pages[rng.gen_range(0..pages.len())],
                    rng.gen_range(0..64),
                    rng.gen_range(0..400),
                )
            })
            .collect();
        let mut finals = Vec::new();
        for mode in [Mode::Secpm, Mode::SecpmNoCwr] {
            let mut cfg = ControllerConfig::with_mode(mode);
            cfg.queue_capacity = capacity;
            let mut ctrl = Controller::new(cfg)?;
            let mut t = 0;
            for (k, &(page, line, gap)) in trace.iter().enumerate() {
                t = ctrl.handle_flush(page * 4096 + line as u64 * 64, pattern_line(9, k as u64), t + gap)?;
            }
            ctrl.drain_all(t)?;
            finals.push(counter_region(&ctrl));
        }
        let mut expected = BTreeMap::new();
        for &(page, line, _) in &trace {
            let counters = expected.entry(page).or_insert_with(CounterLine::default);
            counters.minors[line] += 1;
        }
        let map = secpm::counters::AddressMap::for_capacity(ControllerConfig::default().capacity)?;
        let oracle: BTreeMap<u64, MemoryLine> = expected
            .into_iter()
            .map(|(page, c)| (map.counter_line_address(page), c.to_line()))
            .collect();
        if finals[0] != finals[1] || finals[0] != oracle {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

fn seeded_csvs_identical() -> bool {
    let dir = tempfile::tempdir().expect("temp dir");
    let paths = [dir.path().join("a.csv"), dir.path().join("b.csv")];
    for p in &paths {
        let args = [
            "secpm",
            "run",
            "--workload",
            "btree,queue",
            "--txn-size",
            "256",
            "--txn-count",
            "300",
            "--mode",
            "secpm,unsec-pm",
            "--seed",
            "7",
            "--out",
            p.to_str().expect("utf-8 path"),
        ];
        if secpm::cli::run_cli(args) != 0 {
            return false;
        }
    }
    match (std::fs::read(&paths[0]), std::fs::read(&paths[1])) {
        (Ok(a), Ok(b)) => !a.is_empty() && a == b,
        _ => false,
    }
}

fn criterion_10() -> SimResult<Verdict> {
    const LINES: usize = 100_000;
    const TRACES: usize = 1_000;
    let failures = round_trips(LINES);
    let (pads, distinct) = otp_uniqueness()?;
    let mismatches = merge_oracle(TRACES)?;
    let identical = seeded_csvs_identical();
    Ok(Verdict::new(
        failures == 0 && pads == distinct && pads > 0 && mismatches == 0 && identical,
        format!(
            "round trip {}/{LINES} ok; {distinct}/{pads} distinct pads; merge oracle {}/{TRACES} traces agree; seeded csv identical: {identical}",
            LINES - failures,
            TRACES - mismatches
        ),
    ))
}

type Check<'a> = Box<dyn Fn() -> SimResult<Verdict> + 'a>;

fn main() {
    let sweep = Sweep::run();
    let checks: Vec<(&str, Check)> = vec![
        ("analytic write count", Box::new(criterion_1)),
        (
            "2x write amplification",
            Box::new(|| sweep.as_ref().map(criterion_2).map_err(Clone::clone)),
        ),
        ("recoverability tables", Box::new(criterion_3)),
        ("register atomicity", Box::new(criterion_4)),
        (
            "merge trend vs txn size",
            Box::new(|| sweep.as_ref().map(criterion_5).map_err(Clone::clone)),
        ),
        (
            "latency ordering",
            Box::new(|| sweep.as_ref().map(criterion_6).map_err(Clone::clone)),
        ),
        ("queue-length trend", Box::new(criterion_7)),
        (
            "counter-cache locality",
            Box::new(|| sweep.as_ref().map(criterion_8).map_err(Clone::clone)),
        ),
        ("re-encryption crash consistency", Box::new(criterion_9)),
        ("property suites", Box::new(criterion_10)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let verdict = check().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        failed += usize::from(!verdict.pass);
        println!(
            "criterion {:>2} {} {name}: {}",
            i + 1,
            if verdict.pass { "PASS" } else { "FAIL" },
            verdict.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
