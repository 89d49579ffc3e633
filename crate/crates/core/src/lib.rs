//! Deterministic simulator of a secure persistent memory controller.
//!
//! Data lines flushed from the CPU are encrypted in counter mode, their
//! split counters are written through the counter cache into an ADR-backed
//! write queue, and co-resident counter writes to the same counter line are
//! merged before they reach NVM. Crash points can be injected at every
//! durability-relevant event and recovered through undo logs and the
//! re-encryption status register.

pub mod cli;
pub mod config;
pub mod controller;
pub mod counters;
pub mod crash;
pub mod crypto;
pub mod error;
pub mod experiment;
pub mod line;
pub mod nvm;
pub mod stats;
pub mod txn;
pub mod workloads;
pub mod write_queue;

pub use error::{SimError, SimResult};
pub use line::{MemoryLine, Ns, LINES_PER_PAGE, LINE_BYTES, PAGE_BYTES};
