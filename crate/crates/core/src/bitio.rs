//! LSB-first bit packing.
//!
//! Bit `k` of a written value lands in stream bit `pos + k`; stream bit `p`
//! is bit `p % 8` of byte `p / 8`. Values up to 57 bits wide.

#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    buf: Vec<u8>,
    acc: u64,
    nacc: u32,
    bits: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn write(&mut self, value: u64, nbits: u32) {
        debug_assert!(nbits <= 57);
        debug_assert!(nbits == 64 || value >> nbits == 0, "value {value} wider than {nbits} bits");
        if nbits == 0 {
            return;
        }
        self.acc |= value << self.nacc;
        self.nacc += nbits;
        self.bits += nbits as u64;
        while self.nacc >= 8 {
            self.buf.push(self.acc as u8);
            self.acc >>= 8;
            self.nacc -= 8;
        }
    }

    /// Bits written so far.
    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    /// Flush, zero-filling the final partial byte.
    pub fn finish(mut self) -> Vec<u8> {
        if self.nacc > 0 {
            self.buf.push(self.acc as u8);
        }
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    data: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn remaining_bits(&self) -> u64 {
        self.data.len() as u64 * 8 - self.pos
    }

    /// `None` when fewer than `nbits` bits remain.
    #[inline]
    pub fn read(&mut self, nbits: u32) -> Option<u64> {
        debug_assert!(nbits <= 57);
        if nbits == 0 {
            return Some(0);
        }
        if self.remaining_bits() < nbits as u64 {
            return None;
        }
        let mut out = 0u64;
        let mut got = 0u32;
        while got < nbits {
            let byte = self.data[(self.pos / 8) as usize] as u64;
            let offset = (self.pos % 8) as u32;
            let take = (8 - offset).min(nbits - got);
            let chunk = (byte >> offset) & ((1u64 << take) - 1);
            out |= chunk << got;
            got += take;
            self.pos += take as u64;
        }
        Some(out)
    }
}
