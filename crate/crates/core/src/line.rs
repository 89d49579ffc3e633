use std::fmt;

/// Simulated time in nanoseconds.
pub type Ns = u64;

pub const LINE_BYTES: usize = 64;
pub const PAGE_BYTES: u64 = 4096;
pub const LINES_PER_PAGE: usize = 64;

/// A 64-byte memory line: the unit of flushes, encryption and NVM writes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemoryLine(pub [u8; LINE_BYTES]);

impl MemoryLine {
    pub const ZERO: MemoryLine = MemoryLine([0; LINE_BYTES]);

    pub fn as_bytes(&self) -> &[u8; LINE_BYTES] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|b| *b == 0)
    }

    pub fn xor(&self, other: &[u8; LINE_BYTES]) -> MemoryLine {
        let mut out = [0u8; LINE_BYTES];
        for (o, (a, b)) in out.iter_mut().zip(self.0.iter().zip(other.iter())) {
            *o = a ^ b;
        }
        MemoryLine(out)
    }

    /// Line built from eight little-endian words.
    pub fn from_words(words: [u64; 8]) -> MemoryLine {
        let mut out = [0u8; LINE_BYTES];
        for (chunk, w) in out.chunks_exact_mut(8).zip(words.iter()) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        MemoryLine(out)
    }

    pub fn word(&self, i: usize) -> u64 {
        u64::from_le_bytes(self.0[i * 8..i * 8 + 8].try_into().unwrap())
    }
}

impl Default for MemoryLine {
    fn default() -> Self {
        MemoryLine::ZERO
    }
}

impl fmt::Debug for MemoryLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MemoryLine(")?;
        for b in &self.0[..8] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

pub fn line_aligned(address: u64) -> bool {
    address.is_multiple_of(LINE_BYTES as u64)
}
