//! Counter-mode line encryption.
//!
//! A pad is derived from `(key, line address, major ∥ minor counter)` by a
//! keyed 128-bit block function and XORed with the line. The block function
//! is treated as an opaque pseudorandom permutation; only determinism and
//! the uniqueness of its inputs matter to the simulation.

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;

use crate::line::{MemoryLine, LINE_BYTES};

/// Default latency of one pad generation, charged once per line.
pub const AES_LATENCY_NS: u64 = 40;

/// 128-bit secret, fixed for a simulation run.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct EncryptionKey(pub [u8; 16]);

impl EncryptionKey {
    pub fn from_seed(seed: u64) -> Self {
        let mut k = [0u8; 16];
        k[..8].copy_from_slice(&seed.to_le_bytes());
        k[8..].copy_from_slice(&(!seed).rotate_left(17).to_le_bytes());
        EncryptionKey(k)
    }
}

/// The 71-bit encryption counter of one line: page major ∥ line minor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct CounterValue {
    pub major: u64,
    /// Only the low 7 bits are meaningful.
    pub minor: u8,
}

impl CounterValue {
    pub const ZERO: CounterValue = CounterValue { major: 0, minor: 0 };

    pub fn new(major: u64, minor: u8) -> Self {
        debug_assert!(minor < 128);
        CounterValue { major, minor }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct OtpInput {
    pub line_address: u64,
    pub counter: CounterValue,
}

/// 64-byte one-time pad.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Pad(pub [u8; LINE_BYTES]);

/// Keyed pseudorandom function producing a full-line pad.
pub trait PadFunction: Send + Sync {
    fn pad(&self, input: &OtpInput) -> Pad;
}

/// AES-128 in a counter-like construction: four blocks, each keyed by the
/// same `(address, counter)` message with a 2-bit block index mixed in.
///
/// Block message layout (little-endian):
/// bytes 0..8 = major counter, bytes 8..16 = `line_index << 9 | minor << 2 | block`.
/// The line index must fit in 55 bits.
pub struct AesPad {
    cipher: Aes128,
}

impl AesPad {
    pub fn new(key: &EncryptionKey) -> Self {
        AesPad {
            cipher: Aes128::new(GenericArray::from_slice(&key.0)),
        }
    }
}

impl PadFunction for AesPad {
    fn pad(&self, input: &OtpInput) -> Pad {
        let line_index = input.line_address / LINE_BYTES as u64;
        debug_assert!(line_index < (1 << 55));
        let tail_base = (line_index << 9) | (u64::from(input.counter.minor & 0x7f) << 2);
        let mut blocks = [GenericArray::default(); 4];
        for (i, block) in blocks.iter_mut().enumerate() {
            block[..8].copy_from_slice(&input.counter.major.to_le_bytes());
            block[8..].copy_from_slice(&(tail_base | i as u64).to_le_bytes());
        }
        self.cipher.encrypt_blocks(&mut blocks);
        let mut out = [0u8; LINE_BYTES];
        for (chunk, block) in out.chunks_exact_mut(16).zip(blocks.iter()) {
            chunk.copy_from_slice(block);
        }
        Pad(out)
    }
}

/// One-shot pad generation. Callers on a hot path should keep an [`AesPad`].
pub fn generate_otp(key: &EncryptionKey, input: &OtpInput) -> Pad {
    AesPad::new(key).pad(input)
}

pub fn encrypt_line(plaintext: &MemoryLine, pad: &Pad) -> MemoryLine {
    plaintext.xor(&pad.0)
}

pub fn decrypt_line(ciphertext: &MemoryLine, pad: &Pad) -> MemoryLine {
    ciphertext.xor(&pad.0)
}
