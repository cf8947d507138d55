//! Seedable sources of fair random bits and of classical random numbers.
//!
//! Every draw is tallied in a [`CostLedger`], which keeps the two cost units
//! apart: single random bits, and calls that return a full-precision uniform
//! or Gaussian variate. Bit drivers only ever touch the first counter and the
//! classical driver only the second.
//!
//! [`BitSource`] is backed by ChaCha8, a counter-based generator whose 64-bit
//! stream selector gives independent streams for the same seed without any
//! coordination between tasks.

use std::ops::{Add, AddAssign, Sub};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::rbnormal::inv_normal_cdf_unchecked;

const INV_2_POW_53: f64 = 1.0 / 9_007_199_254_740_992.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub bits_drawn: u64,
    pub numbers_drawn: u64,
}

impl CostLedger {
    pub fn total(&self) -> u64 {
        self.bits_drawn + self.numbers_drawn
    }
}

impl Add for CostLedger {
    type Output = CostLedger;
    fn add(self, rhs: CostLedger) -> CostLedger {
        CostLedger {
            bits_drawn: self.bits_drawn + rhs.bits_drawn,
            numbers_drawn: self.numbers_drawn + rhs.numbers_drawn,
        }
    }
}

impl AddAssign for CostLedger {
    fn add_assign(&mut self, rhs: CostLedger) {
        *self = *self + rhs;
    }
}

/// Difference of two snapshots of the same monotone ledger.
impl Sub for CostLedger {
    type Output = CostLedger;
    fn sub(self, rhs: CostLedger) -> CostLedger {
        CostLedger {
            bits_drawn: self.bits_drawn - rhs.bits_drawn,
            numbers_drawn: self.numbers_drawn - rhs.numbers_drawn,
        }
    }
}

impl std::iter::Sum for CostLedger {
    fn sum<I: Iterator<Item = CostLedger>>(iter: I) -> CostLedger {
        iter.fold(CostLedger::default(), Add::add)
    }
}

/// Anything the path drivers can draw randomness from.
///
/// Bit draws are MSB-first: the first bit drawn becomes the most significant
/// bit of the returned `n`-bit integer.
pub trait RandomSource {
    /// Draws `n <= 64` fair bits packed into the low `n` bits of the result.
    fn draw_bits_u64(&mut self, n: u32) -> u64;

    /// A uniform variate on `[0, 1)`, counted as one random number.
    fn draw_uniform01(&mut self) -> f64;

    /// A standard normal variate, counted as one random number.
    fn draw_std_normal(&mut self) -> f64;

    fn ledger(&self) -> CostLedger;

    fn draw_bits(&mut self, n: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(n);
        let mut left = n;
        while left > 0 {
            let take = left.min(64) as u32;
            let word = self.draw_bits_u64(take);
            out.extend((0..take).rev().map(|b| (word >> b) & 1 == 1));
            left -= take as usize;
        }
        out
    }
}

/// Deterministic random source keyed by `(seed, stream_id)`.
///
/// Single owner; parallel work creates one source per task with distinct
/// stream ids and sums the ledgers afterwards.
#[derive(Debug, Clone)]
pub struct BitSource {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
    // unread bits are kept left-aligned
    buf: u64,
    avail: u32,
    ledger: CostLedger,
}

impl BitSource {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        BitSource {
            seed,
            stream_id,
            rng,
            buf: 0,
            avail: 0,
            ledger: CostLedger::default(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    #[inline]
    fn take(&mut self, n: u32) -> u64 {
        debug_assert!(n >= 1 && n <= self.avail);
        let out = self.buf >> (64 - n);
        self.buf = if n == 64 { 0 } else { self.buf << n };
        self.avail -= n;
        out
    }
}

impl RandomSource for BitSource {
    #[inline]
    fn draw_bits_u64(&mut self, n: u32) -> u64 {
        assert!(n <= 64, "at most 64 bits per call");
        if n == 0 {
            return 0;
        }
        self.ledger.bits_drawn += u64::from(n);
        if n <= self.avail {
            return self.take(n);
        }
        let have = self.avail;
        let hi = if have > 0 { self.take(have) } else { 0 };
        self.buf = self.rng.next_u64();
        self.avail = 64;
        let rest = n - have;
        let lo = self.take(rest);
        if rest == 64 {
            lo
        } else {
            (hi << rest) | lo
        }
    }

    #[inline]
    fn draw_uniform01(&mut self) -> f64 {
        self.ledger.numbers_drawn += 1;
        (self.rng.next_u64() >> 11) as f64 * INV_2_POW_53
    }

    #[inline]
    fn draw_std_normal(&mut self) -> f64 {
        self.ledger.numbers_drawn += 1;
        // midpoint of a 2^-53 cell, so the argument is never 0
        let u = ((self.rng.next_u64() >> 11) as f64 + 0.5) * INV_2_POW_53;
        inv_normal_cdf_unchecked(u)
    }

    fn ledger(&self) -> CostLedger {
        self.ledger
    }
}

/// Replays a fixed bit string, for exhaustive enumeration of bit drivers.
///
/// Only bit draws are supported; asking for numbers, or for more bits than
/// were supplied, panics.
#[derive(Debug, Clone)]
pub struct ReplayBits {
    bits: Vec<bool>,
    pos: usize,
    ledger: CostLedger,
}

impl ReplayBits {
    pub fn new(bits: Vec<bool>) -> Self {
        ReplayBits {
            bits,
            pos: 0,
            ledger: CostLedger::default(),
        }
    }

    /// The `len` low bits of `pattern`, most significant first.
    pub fn from_pattern(pattern: u64, len: u32) -> Self {
        assert!(len <= 64);
        Self::new((0..len).rev().map(|b| (pattern >> b) & 1 == 1).collect())
    }

    pub fn remaining(&self) -> usize {
        self.bits.len() - self.pos
    }
}

impl RandomSource for ReplayBits {
    fn draw_bits_u64(&mut self, n: u32) -> u64 {
        assert!(n <= 64);
        let end = self.pos + n as usize;
        assert!(end <= self.bits.len(), "replay bit string exhausted");
        let word = self.bits[self.pos..end]
            .iter()
            .fold(0u64, |acc, &b| (acc << 1) | u64::from(b));
        self.pos = end;
        self.ledger.bits_drawn += u64::from(n);
        word
    }

    fn draw_uniform01(&mut self) -> f64 {
        panic!("ReplayBits supplies bits only")
    }

    fn draw_std_normal(&mut self) -> f64 {
        panic!("ReplayBits supplies bits only")
    }

    fn ledger(&self) -> CostLedger {
        self.ledger
    }
}
