//! Exact, deterministic checks of the bit-level construction, run by the
//! `selftest` command. Each check enumerates or sums; none samples.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::bitcore::{BitSource, RandomSource, ReplayBits};
use crate::drivers::{
    bit_budget, lc_coupled_increments, lc_skeleton_from_coefficients, schauder_increment,
    total_bits, SchauderIndex,
};
use crate::error::Result;
use crate::rbnormal::{dyadic_grid, rb_normal_table, round_down};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn from_result(name: &'static str, r: Result<std::result::Result<String, String>>) -> Self {
        match r {
            Ok(Ok(detail)) => CheckOutcome { name, passed: true, detail },
            Ok(Err(detail)) => CheckOutcome { name, passed: false, detail },
            Err(e) => CheckOutcome { name, passed: false, detail: e.to_string() },
        }
    }
}

type Check = Result<std::result::Result<String, String>>;

/// The Schauder index `(i, j)` whose tent is nonzero on step `k` (1-based)
/// of level `level`; for `i = 0` the only index is `(0, 1)`.
fn covering_index(i: u32, k: u64, level: u32) -> Result<SchauderIndex> {
    if i == 0 {
        SchauderIndex::new(0, 1)
    } else {
        SchauderIndex::new(i, ((k - 1) >> (level - i + 1)) + 1)
    }
}

/// Squared increments of all Schauder functions over step `k`, weighted.
fn weighted_increment_square(level: u32, k: u64, weight: impl Fn(u32) -> Result<f64>) -> Result<f64> {
    let mut sum = 0.0;
    for i in 0..=level {
        let d = schauder_increment(covering_index(i, k, level)?, k, level)?;
        sum += d * d * weight(i)?;
    }
    Ok(sum)
}

/// `Σ_(i,j) (Δ^(i,j)_k)² = 2^-ℓ` for every step `k`.
pub fn increment_variance_identity(max_level: u32) -> Check {
    let mut worst = 0.0f64;
    for level in 0..=max_level {
        let target = (-f64::from(level)).exp2();
        for k in 1..=(1u64 << level) {
            let s = weighted_increment_square(level, k, |_| Ok(1.0))?;
            worst = worst.max((s / target - 1.0).abs());
        }
    }
    Ok(if worst <= 1e-12 {
        Ok(format!("max relative error {worst:.2e} for levels 0..={max_level}"))
    } else {
        Err(format!("relative error {worst:.2e} exceeds 1e-12"))
    })
}

/// Increment variance with the unnormalized `ν_q` coefficients is at most
/// `0.9 · 2^-ℓ`.
pub fn unnormalized_variance_bound(min_level: u32, max_level: u32) -> Check {
    let mut worst = 0.0f64;
    for level in min_level..=max_level {
        let target = (-f64::from(level)).exp2();
        for k in 1..=(1u64 << level) {
            let s = weighted_increment_square(level, k, |i| {
                Ok(rb_normal_table(bit_budget(i, level)?)?.variance())
            })?;
            worst = worst.max(s / target);
        }
    }
    Ok(if worst <= 0.9 {
        Ok(format!("max ratio {worst:.6} for levels {min_level}..={max_level}"))
    } else {
        Err(format!("ratio {worst:.6} exceeds 0.9"))
    })
}

pub fn two_bit_variance() -> Check {
    let v = rb_normal_table(2)?.variance();
    Ok(if (v - 0.712417).abs() <= 1e-4 && v <= 0.8 {
        Ok(format!("variance {v:.6}"))
    } else {
        Err(format!("variance {v:.6}, expected 0.712417 and at most 4/5"))
    })
}

pub fn bit_count_identity(max_level: u32, max_dim: usize) -> Check {
    for level in 0..=max_level {
        for dim in 1..=max_dim {
            let mut src = BitSource::new(u64::from(level), dim as u64);
            lc_coupled_increments(level, dim, &mut src)?;
            let got = src.ledger();
            let want = dim as u64 * ((1u64 << (level + 2)) - 2);
            if got.bits_drawn != want || got.numbers_drawn != 0 || total_bits(level, dim) != want {
                return Ok(Err(format!(
                    "level {level}, dim {dim}: {} bits, expected {want}",
                    got.bits_drawn
                )));
            }
        }
    }
    Ok(Ok(format!("levels 0..={max_level}, dims 1..={max_dim}")))
}

fn law(level: u32, coarse: bool) -> Result<BTreeMap<Vec<u64>, u64>> {
    let bits = total_bits(level, 1) as u32;
    let mut counts = BTreeMap::new();
    for p in 0..(1u64 << bits) {
        let inc = lc_coupled_increments(level, 1, &mut ReplayBits::from_pattern(p, bits))?;
        let v = if coarse { &inc.coarse } else { &inc.fine };
        *counts.entry(v.iter().map(|x| x.to_bits()).collect()).or_insert(0) += 1;
    }
    Ok(counts)
}

/// The coarse vector at level `ℓ` has exactly the law of the fine vector at
/// level `ℓ - 1`, by enumeration of all bit patterns.
pub fn coarse_law_matches(level: u32) -> Check {
    let coarse = law(level, true)?;
    let fine = law(level - 1, false)?;
    let total_c = 1u64 << total_bits(level, 1);
    let total_f = 1u64 << total_bits(level - 1, 1);
    if coarse.len() != fine.len() {
        return Ok(Err(format!(
            "level {level}: {} coarse atoms vs {} fine atoms",
            coarse.len(),
            fine.len()
        )));
    }
    for (atom, &c) in &coarse {
        let f = fine.get(atom).copied().unwrap_or(0);
        if c * total_f != f * total_c {
            return Ok(Err(format!("level {level}: probability mismatch at an atom")));
        }
    }
    Ok(Ok(format!("level {level}: {total_c} outcomes, {} atoms", coarse.len())))
}

/// `round_down(q, ·)` maps the `2^(q+2)` points of `D_(q+2)` four-to-one
/// onto `D_q`.
pub fn rounding_is_uniform(max_q: u32) -> Check {
    for q in 1..=max_q {
        let coarse = dyadic_grid(q)?;
        let mut hits = vec![0u32; coarse.len() as usize];
        for x in dyadic_grid(q + 2)?.iter() {
            let y = round_down(q, x);
            let m = (y * coarse.len() as f64).floor() as usize;
            if m >= hits.len() || coarse.point(m as u64) != y {
                return Ok(Err(format!("q = {q}: {y} is not a grid point")));
            }
            hits[m] += 1;
        }
        if hits.iter().any(|&h| h != 4) {
            return Ok(Err(format!("q = {q}: uneven preimages")));
        }
    }
    Ok(Ok(format!("q = 1..={max_q}")))
}

/// A skeleton at level `fine` restricted to the level-`coarse` grid equals
/// the skeleton built from the first `2^coarse` coefficients.
pub fn skeleton_nesting(fine: u32, coarse: u32, seed: u64) -> Check {
    let mut src = BitSource::new(seed, 0);
    let coeffs: Vec<f64> = (0..(1usize << fine)).map(|_| src.draw_std_normal()).collect();
    let big = lc_skeleton_from_coefficients(fine, &coeffs)?;
    let small = lc_skeleton_from_coefficients(coarse, &coeffs[..1usize << coarse])?;
    let stride = 1usize << (fine - coarse);
    let worst = small
        .iter()
        .enumerate()
        .map(|(k, v)| (v - big[k * stride]).abs())
        .fold(0.0, f64::max);
    Ok(if worst <= 1e-12 {
        Ok(format!("max deviation {worst:.2e}"))
    } else {
        Err(format!("deviation {worst:.2e} exceeds 1e-12"))
    })
}

/// All exact checks in order.
pub fn selftest() -> Vec<CheckOutcome> {
    vec![
        CheckOutcome::from_result("increment variance identity", increment_variance_identity(12)),
        CheckOutcome::from_result("unnormalized variance bound", unnormalized_variance_bound(1, 10)),
        CheckOutcome::from_result("two-bit normal variance", two_bit_variance()),
        CheckOutcome::from_result("bit count identity", bit_count_identity(12, 3)),
        CheckOutcome::from_result("coarse law at level 1", coarse_law_matches(1)),
        CheckOutcome::from_result("coarse law at level 2", coarse_law_matches(2)),
        CheckOutcome::from_result("rounding pushforward", rounding_is_uniform(12)),
        CheckOutcome::from_result("skeleton nesting", skeleton_nesting(8, 4, 2024)),
    ]
}
