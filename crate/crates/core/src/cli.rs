//! Command-line front end.
//!
//! Exit statuses: 0 success, 1 consistency violation, 2 usage error.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Config;
use crate::crash::{
    inject, promises_consistency, AtomicWriteScenario, CrashPlan, ReencryptionScenario, Scenario, Scope, Strategy,
    TxnScenario,
};
use crate::error::SimError;
use crate::experiment::run_cells;
use crate::stats::{emit_report, ReportFormat};
use crate::txn::write_verdict_csv;
use crate::workloads::{export_trace, parse_trace, Placement, TxnStream, WorkloadSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "secpm", version, about = "Secure persistent memory simulator")]
pub struct Cli {
    /// Increase log verbosity (-v debug, -vv per-event trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run workload sweeps and write the metrics CSV.
    Run(Common),
    /// Enumerate crash points, recover each one and write the verdict CSV.
    Crashcheck(CrashArgs),
    /// Print the effective configuration.
    Config(Common),
}

/// Flags shared by all commands; each overrides the matching config key.
#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// unsec-pm, secpm-no-cwt, secpm-no-cwr, secpm (comma separated).
    #[arg(long)]
    pub mode: Option<String>,
    /// array, queue, btree, hashtable, rbtree (comma separated).
    #[arg(long)]
    pub workload: Option<String>,
    #[arg(long)]
    pub txn_size: Option<String>,
    #[arg(long)]
    pub txn_count: Option<String>,
    /// Write-queue entries, or `unbounded` (comma separated).
    #[arg(long)]
    pub queue_len: Option<String>,
    #[arg(long)]
    pub cache_size: Option<String>,
    #[arg(long)]
    pub cache_ways: Option<String>,
    #[arg(long)]
    pub cores: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub footprint: Option<String>,
    /// eager or watermark.
    #[arg(long)]
    pub drain_policy: Option<String>,
    /// on or off.
    #[arg(long)]
    pub staging_register: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub normalized_out: Option<String>,
    #[arg(long)]
    pub trace_in: Option<String>,
    #[arg(long)]
    pub trace_out: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScenarioKind {
    /// Undo-logged transaction of `--txn-lines` lines.
    Txn,
    /// One in-place line update without a log.
    Atomic,
    /// Page re-encryption triggered by a minor overflow.
    Reencrypt,
}

#[derive(Args, Debug)]
pub struct CrashArgs {
    #[command(flatten)]
    pub common: Common,
    /// exhaustive, random:N[:SEED] or at:K.
    #[arg(long, default_value = "exhaustive")]
    pub crash: String,
    #[arg(long, value_enum, default_value = "txn")]
    pub scenario: ScenarioKind,
    /// txn or reencryption; defaults to the scenario's natural scope.
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub txn_lines: usize,
}

impl Common {
    fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("mode", &self.mode),
            ("workload", &self.workload),
            ("txn_size", &self.txn_size),
            ("txn_count", &self.txn_count),
            ("queue_len", &self.queue_len),
            ("cache_size", &self.cache_size),
            ("cache_ways", &self.cache_ways),
            ("cores", &self.cores),
            ("seed", &self.seed),
            ("footprint", &self.footprint),
            ("drain_policy", &self.drain_policy),
            ("staging_register", &self.staging_register),
            ("out", &self.out),
            ("normalized_out", &self.normalized_out),
            ("trace_in", &self.trace_in),
            ("trace_out", &self.trace_out),
        ]
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<Config, SimError> {
        let mut cfg = Config::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| SimError::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.merge(&text)?;
        }
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.apply(key, v)?;
            }
        }
        Ok(cfg)
    }
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::Parse(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn open_out(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_run(cfg: &Config) -> Result<i32, Failure> {
    let mut cells = cfg.cells()?;
    if let Some(path) = &cfg.trace_out {
        let [kind] = cfg.workloads[..] else {
            return Err(Failure::Usage("--trace-out needs exactly one workload".into()));
        };
        let [size] = cfg.txn_sizes[..] else {
            return Err(Failure::Usage("--trace-out needs exactly one transaction size".into()));
        };
        let spec = cells
            .first()
            .map(|c| c.workload)
            .unwrap_or_else(|| WorkloadSpec::new(kind, size, cfg.txn_count, cfg.seed));
        let stream = TxnStream::new(spec, Placement::contiguous(0, spec.footprint, cfg.log_ring))?;
        let mut out = open_out(Some(path))?;
        export_trace(stream, &mut out).context("writing trace")?;
        out.flush().context("writing trace")?;
    }
    if let Some(path) = &cfg.trace_in {
        let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
        let trace = parse_trace(BufReader::new(file))?;
        for cell in &mut cells {
            cell.trace = Some(trace.clone());
        }
    }
    let records = run_cells(&cells)?;
    let mut out = open_out(cfg.out.as_deref())?;
    emit_report(&records, ReportFormat::Csv, &mut out).context("writing report")?;
    out.flush().context("writing report")?;
    if let Some(path) = &cfg.normalized_out {
        let mut out = open_out(Some(path))?;
        emit_report(&records, ReportFormat::Normalized, &mut out).context("writing report")?;
        out.flush().context("writing report")?;
    }
    Ok(EXIT_OK)
}

fn cmd_crashcheck(cfg: &Config, args: &CrashArgs) -> Result<i32, Failure> {
    let strategy: Strategy = args.crash.parse()?;
    let natural = match args.scenario {
        ScenarioKind::Reencrypt => Scope::Reencryption,
        _ => Scope::Transaction,
    };
    let scope = match &args.scope {
        Some(s) => s.parse()?,
        None => natural,
    };
    if scope == Scope::Reencryption && args.scenario != ScenarioKind::Reencrypt {
        return Err(Failure::Usage(
            "the reencryption scope applies only to --scenario reencrypt".into(),
        ));
    }
    let [mode] = cfg.modes[..] else {
        return Err(Failure::Usage("crashcheck takes exactly one --mode".into()));
    };
    let controller = cfg.controller(mode, cfg.queue_lens[0], cfg.cache_sizes[0]);
    let scenario: Box<dyn Scenario> = match args.scenario {
        ScenarioKind::Txn => {
            if args.txn_lines == 0 || args.txn_lines > 64 {
                return Err(Failure::Usage("--txn-lines must be within 1..=64".into()));
            }
            Box::new(TxnScenario::new(controller.clone(), args.txn_lines))
        }
        ScenarioKind::Atomic => Box::new(AtomicWriteScenario::new(controller.clone())),
        ScenarioKind::Reencrypt => Box::new(ReencryptionScenario::new(controller.clone())),
    };
    let outcomes = inject(&CrashPlan { strategy, scope }, scenario.as_ref())?;
    let promised = promises_consistency(&controller);
    let mut out = open_out(cfg.out.as_deref())?;
    write_verdict_csv(&mut out, scenario.txn_id(), &outcomes, !promised).context("writing verdicts")?;
    out.flush().context("writing verdicts")?;
    let bad = outcomes.iter().filter(|o| !o.verdict.is_consistent()).count();
    eprintln!(
        "{}: {} crash points, {bad} inconsistent{}",
        scenario.name(),
        outcomes.len(),
        match (bad, promised) {
            (0, _) => "",
            (_, true) => " (VIOLATION)",
            (_, false) => " (EXPECTED for this mode)",
        }
    );
    Ok(if bad > 0 && promised { EXIT_VIOLATION } else { EXIT_OK })
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .try_init();
}

/// Parse `args` (including the program name) and run; returns the exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    let result = match &cli.command {
        Command::Run(common) => common.resolve().map_err(Failure::from).and_then(|cfg| cmd_run(&cfg)),
        Command::Crashcheck(args) => args
            .common
            .resolve()
            .map_err(Failure::from)
            .and_then(|cfg| cmd_crashcheck(&cfg, args)),
        Command::Config(common) => common.resolve().map_err(Failure::from).map(|cfg| {
            print!("{}", cfg.render());
            EXIT_OK
        }),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_VIOLATION
        }
    }
}
