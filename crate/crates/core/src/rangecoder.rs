//! Carry-less byte-oriented range coder over 16-bit frequency tables.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

/// Cumulative frequencies summing to 2^16, every symbol at least 1 wide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cum: Vec<u32>,
}

impl CdfTable {
    pub fn from_freqs(freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() || freqs.contains(&0) {
            return Err(Error::InvalidConfig("every symbol needs a nonzero frequency".into()));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0u32);
        let mut acc = 0u64;
        for &f in freqs {
            acc += f as u64;
            cum.push(acc.min(u32::MAX as u64) as u32);
        }
        if acc != PROB_TOTAL as u64 {
            return Err(Error::InvalidConfig(format!("frequencies sum to {acc}, not 65536")));
        }
        Ok(Self { cum })
    }

    /// Quantize a probability vector: symbol `s` gets `1 + floor(p_s * (65536 - n))`
    /// and the rounding remainder goes to the most probable symbol.
    pub fn from_probs(probs: &[f64]) -> Self {
        let n = probs.len();
        assert!(n >= 1 && n <= PROB_TOTAL as usize, "table size");
        let sum: f64 = probs.iter().map(|p| p.max(0.0)).sum();
        let spare = (PROB_TOTAL as usize - n) as f64;
        let mut freqs: Vec<u32> = probs
            .iter()
            .map(|&p| {
                let q = if sum > 0.0 { p.max(0.0) / sum } else { 1.0 / n as f64 };
                1 + (q * spare).floor() as u32
            })
            .collect();
        let mut best = 0;
        for (i, &f) in freqs.iter().enumerate() {
            if f > freqs[best] {
                best = i;
            }
        }
        let total: i64 = freqs.iter().map(|&f| f as i64).sum();
        freqs[best] = (freqs[best] as i64 + PROB_TOTAL as i64 - total) as u32;
        Self::from_freqs(&freqs).expect("quantized table is valid")
    }

    pub fn uniform(n: usize) -> Self {
        Self::from_probs(&vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cum(&self, s: usize) -> u32 {
        self.cum[s]
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    /// Symbol whose interval contains `target`.
    pub fn find(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Ideal code length of `s` under the quantized table.
    pub fn cost_bits(&self, s: usize) -> f64 {
        -(self.freq(s) as f64 / PROB_TOTAL as f64).log2()
    }
}

#[derive(Clone, Debug)]
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &CdfTable, symbol: usize) {
        assert!(symbol < table.len(), "symbol {symbol} outside table");
        self.encode_freq(table.cum(symbol), table.freq(symbol));
    }

    /// Code an interval `[cum, cum + freq)` of the 2^16 total.
    pub fn encode_freq(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low = self.low.wrapping_add(cum * r);
        self.range = freq * r;
        self.normalize();
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }

    /// Flush the fewest bytes that pin a value inside the final interval;
    /// the decoder reads zeros past the end.
    pub fn finish(mut self) -> Vec<u8> {
        let low = self.low as u64;
        let high = low + self.range as u64;
        for n in 0..=4u32 {
            let unit = 1u64 << (32 - 8 * n);
            let v = low.div_ceil(unit) * unit;
            if v < high && v < (1u64 << 32) {
                for i in 0..n {
                    self.out.push((v >> (24 - 8 * i)) as u8);
                }
                break;
            }
        }
        self.out
    }
}

#[derive(Clone, Debug)]
pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        let mut d = Self {
            low: 0,
            range: u32::MAX,
            code: 0,
            buf,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.buf.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Bytes consumed so far, including implicit zero padding.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<usize> {
        let target = self.decode_target()?;
        let s = table.find(target);
        self.consume(table.cum(s), table.freq(s));
        Ok(s)
    }

    /// The position inside the 2^16 total that the next symbol covers.
    pub fn decode_target(&mut self) -> Result<u32> {
        let r = self.range >> PROB_BITS;
        let q = self.code.wrapping_sub(self.low) / r;
        if q >= PROB_TOTAL || self.pos > self.buf.len() + 4 {
            return Err(Error::decode(self.pos.min(self.buf.len()), "range coder state out of bounds"));
        }
        Ok(q)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) {
        let r = self.range >> PROB_BITS;
        self.low = self.low.wrapping_add(cum * r);
        self.range = freq * r;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
    }
}
