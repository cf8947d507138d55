//! Random-bit approximations of the standard normal distribution.
//!
//! With `q` fair bits one can draw an index `m` uniformly from `0..2^q`; the
//! dyadic midpoint `(m + 1/2) 2^-q` pushed through the inverse normal CDF is
//! a `q`-bit approximation of N(0, 1). Tables of these quantiles, their exact
//! variance and its square root are built once per `q` and shared globally.

use std::sync::OnceLock;

use crate::bitcore::RandomSource;
use crate::error::{invalid, Result};

pub const MAX_BITS: u32 = 62;

/// Largest budget whose quantiles are materialized; larger budgets evaluate
/// quantiles on demand (few coefficients use them).
const MATERIALIZE_MAX_Q: u32 = 20;

/// Largest budget whose variance is an exact sum over all cells.
const EXACT_VARIANCE_MAX_Q: u32 = 24;

/// Cells summed exactly at each end before switching to the integral.
const TAIL_CELLS: u64 = 1 << 16;

fn check_bits(q: u32) -> Result<()> {
    if (1..=MAX_BITS).contains(&q) {
        Ok(())
    } else {
        Err(invalid(format!("bit budget q = {q} outside 1..={MAX_BITS}")))
    }
}

#[inline]
fn cell_midpoint(q: u32, m: u64) -> f64 {
    // (2m + 1) / 2^(q+1); exact for q <= 52
    (2.0 * m as f64 + 1.0) * (-f64::from(q as i32 + 1)).exp2()
}

/// The `2^q` midpoints of the dyadic cells of `[0, 1)`, generated lazily.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DyadicGrid {
    q: u32,
}

impl DyadicGrid {
    pub fn bits(&self) -> u32 {
        self.q
    }

    pub fn len(&self) -> u64 {
        1u64 << self.q
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, m: u64) -> f64 {
        assert!(m < self.len(), "grid index out of range");
        cell_midpoint(self.q, m)
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(move |m| cell_midpoint(self.q, m))
    }
}

pub fn dyadic_grid(q: u32) -> Result<DyadicGrid> {
    check_bits(q)?;
    Ok(DyadicGrid { q })
}

/// `T_q`: maps `x` in `[0, 1)` to the midpoint of the level-`q` dyadic cell
/// containing it.
pub fn round_down(q: u32, x: f64) -> f64 {
    let scale = f64::from(q as i32).exp2();
    (scale * x).floor() / scale + (-f64::from(q as i32 + 1)).exp2()
}

/// Inverse of the standard normal distribution function.
pub fn inv_normal_cdf(p: f64) -> Result<f64> {
    if p > 0.0 && p < 1.0 {
        Ok(inv_normal_cdf_unchecked(p))
    } else {
        Err(invalid(format!("probability {p} outside (0, 1)")))
    }
}

/// Wichura's AS 241 (PPND16), relative accuracy about 1e-16.
#[allow(clippy::excessive_precision)]
pub(crate) fn inv_normal_cdf_unchecked(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
            + 6.7265770927008700853e4)
            * r
            + 4.5921953931549871457e4)
            * r
            + 1.3731693765509461125e4)
            * r
            + 1.9715909503065514427e3)
            * r
            + 1.3314166789178437745e2)
            * r
            + 3.3871328727963666080e0;
        let den = ((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
            + 3.9307895800092710610e4)
            * r
            + 2.1213794301586595867e4)
            * r
            + 5.3941960214247511077e3)
            * r
            + 6.8718700749205790830e2)
            * r
            + 4.2313330701600911252e1)
            * r
            + 1.0;
        return q * num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
            + 2.41780725177450611770e-1)
            * r
            + 1.27045825245236838258e0)
            * r
            + 3.64784832476320460504e0)
            * r
            + 5.76949722146069140550e0)
            * r
            + 4.63033784615654529590e0)
            * r
            + 1.42343711074968357734e0;
        let den = ((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
            + 1.51986665636164571966e-2)
            * r
            + 1.48103976427480074590e-1)
            * r
            + 6.89767334985100004550e-1)
            * r
            + 1.67638483018380384940e0)
            * r
            + 2.05319162663775882187e0)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 1.24266094738807843860e-3)
            * r
            + 2.65321895265761230930e-2)
            * r
            + 2.96560571828504891230e-1)
            * r
            + 1.78482653991729133580e0)
            * r
            + 5.46378491116411436990e0)
            * r
            + 6.65790464350110377720e0;
        let den = ((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
            + 1.84631831751005468180e-5)
            * r
            + 7.86869131145613259100e-4)
            * r
            + 1.48753612908506148525e-2)
            * r
            + 1.36929880922735805310e-1)
            * r
            + 5.99832206555887937690e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Quantiles of the `q`-bit normal approximation with its exact moments.
#[derive(Debug, Clone)]
pub struct RbNormalTable {
    q: u32,
    quantiles: Option<Vec<f64>>,
    variance: f64,
    sigma: f64,
}

/// Quantile of cell `m`, built from the lower half so the table is exactly
/// antisymmetric.
#[inline]
fn raw_quantile(q: u32, m: u64) -> f64 {
    let half = 1u64 << (q - 1);
    if m < half {
        inv_normal_cdf_unchecked(cell_midpoint(q, m))
    } else {
        -inv_normal_cdf_unchecked(cell_midpoint(q, (1u64 << q) - 1 - m))
    }
}

/// Neumaier-compensated sum of squared lower-half quantiles over `0..end`.
fn sum_sq_lower(q: u32, end: u64) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for m in 0..end {
        let x = inv_normal_cdf_unchecked(cell_midpoint(q, m));
        let v = x * x;
        let t = sum + v;
        if sum.abs() >= v {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `2^-q Σ Φ⁻¹(x)²` over the grid.
fn grid_variance(q: u32) -> f64 {
    let h = (-f64::from(q as i32)).exp2();
    let half = 1u64 << (q - 1);
    if q <= EXACT_VARIANCE_MAX_Q {
        return 2.0 * h * sum_sq_lower(q, half);
    }
    // Exact sum over the outer cells, then the midpoint rule on the smooth
    // interior: ∫_a^{1/2} Φ⁻¹(u)² du = 1/2 - a + x_a φ(x_a), corrected by
    // the h²/24 derivative term (g'(u) = 2x/φ(x), g'(1/2) = 0).
    let a = TAIL_CELLS as f64 * h;
    let xa = inv_normal_cdf_unchecked(a);
    let pdf = std_normal_pdf(xa);
    let integral = 0.5 - a + xa * pdf;
    let correction = h * h / 24.0 * (2.0 * xa / pdf);
    2.0 * (h * sum_sq_lower(q, TAIL_CELLS) + integral + correction)
}

impl RbNormalTable {
    fn build(q: u32) -> Self {
        let quantiles = (q <= MATERIALIZE_MAX_Q).then(|| {
            let n = 1u64 << q;
            (0..n).map(|m| raw_quantile(q, m)).collect::<Vec<_>>()
        });
        let variance = match &quantiles {
            Some(values) => {
                let half = values.len() / 2;
                let (mut sum, mut comp) = (0.0f64, 0.0f64);
                for &x in &values[..half] {
                    let v = x * x;
                    let t = sum + v;
                    if sum.abs() >= v {
                        comp += (sum - t) + v;
                    } else {
                        comp += (v - t) + sum;
                    }
                    sum = t;
                }
                2.0 * (sum + comp) * (-f64::from(q as i32)).exp2()
            }
            None => grid_variance(q),
        };
        RbNormalTable {
            q,
            quantiles,
            variance,
            sigma: variance.sqrt(),
        }
    }

    pub fn bits(&self) -> u32 {
        self.q
    }

    pub fn len(&self) -> u64 {
        1u64 << self.q
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Materialized quantiles, present for small budgets only.
    pub fn quantiles(&self) -> Option<&[f64]> {
        self.quantiles.as_deref()
    }

    #[inline]
    pub fn quantile(&self, m: u64) -> f64 {
        match &self.quantiles {
            Some(values) => values[m as usize],
            None => raw_quantile(self.q, m),
        }
    }

    /// Exact mean of the quantiles: zero by construction.
    pub fn mean(&self) -> f64 {
        0.0
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

static TABLES: [OnceLock<RbNormalTable>; MAX_BITS as usize + 1] =
    [const { OnceLock::new() }; MAX_BITS as usize + 1];

/// Shared, lazily built table for budget `q`.
pub fn rb_normal_table(q: u32) -> Result<&'static RbNormalTable> {
    check_bits(q)?;
    Ok(TABLES[q as usize].get_or_init(|| RbNormalTable::build(q)))
}

/// One draw from the `q`-bit approximation: `q` bits read MSB-first as a cell
/// index.
pub fn sample_nu_q<R: RandomSource + ?Sized>(table: &RbNormalTable, src: &mut R) -> f64 {
    table.quantile(src.draw_bits_u64(table.q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcore::ReplayBits;

    // Test-only oracle: Marsaglia's series for Φ and a continued fraction for
    // the far tail, inverted by bisection.
    fn phi_oracle(x: f64) -> f64 {
        if x < -6.0 {
            // Q(|x|) = φ(x) / (|x| + 1/(|x| + 2/(|x| + ...)))
            let t = -x;
            let mut frac = t;
            for k in (1..200).rev() {
                frac = t + k as f64 / frac;
            }
            return std_normal_pdf(x) / frac;
        }
        let (mut term, mut sum) = (x, x);
        let mut k = 1.0;
        while term.abs() > 1e-18 * sum.abs() {
            term *= x * x / (2.0 * k + 1.0);
            sum += term;
            k += 1.0;
        }
        0.5 + std_normal_pdf(x) * sum
    }

    fn inv_oracle(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0f64, 40.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if phi_oracle(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn grid_midpoints() {
        let g1: Vec<f64> = dyadic_grid(1).unwrap().iter().collect();
        assert_eq!(g1, vec![0.25, 0.75]);
        let g2: Vec<f64> = dyadic_grid(2).unwrap().iter().collect();
        assert_eq!(g2, vec![0.125, 0.375, 0.625, 0.875]);
        let g3 = dyadic_grid(3).unwrap();
        assert_eq!(g3.point(0), 1.0 / 16.0);
        assert_eq!(g3.point(7), 15.0 / 16.0);
        let g5 = dyadic_grid(5).unwrap();
        for m in 0..32 {
            assert_eq!(g5.point(m) + g5.point(31 - m), 1.0);
        }
    }

    #[test]
    fn bad_budgets_rejected() {
        assert!(dyadic_grid(0).is_err());
        assert!(dyadic_grid(63).is_err());
        assert!(rb_normal_table(0).is_err());
    }

    #[test]
    fn inverse_cdf_values() {
        assert_eq!(inv_normal_cdf(0.5).unwrap(), 0.0);
        assert!((inv_normal_cdf(0.125).unwrap() + 1.150349).abs() < 1e-6);
        assert!((inv_normal_cdf(0.975).unwrap() - 1.959964).abs() < 1e-6);
        assert!(inv_normal_cdf(0.0).is_err());
        assert!(inv_normal_cdf(1.0).is_err());
        assert!(inv_normal_cdf(f64::NAN).is_err());
    }

    #[test]
    fn inverse_cdf_matches_bisection_oracle() {
        let mut probes = vec![2f64.powi(-64), 1e-15, 1e-10, 1e-5, 0.01, 0.02425, 0.1];
        probes.extend((1..100).map(|k| k as f64 / 100.0));
        probes.extend([0.9, 0.97575, 0.99, 1.0 - 1e-5, 1.0 - 1e-10, 1.0 - 2f64.powi(-40)]);
        for p in probes {
            let got = inv_normal_cdf(p).unwrap();
            let want = if p > 0.5 { -inv_oracle(1.0 - p) } else { inv_oracle(p) };
            assert!((got - want).abs() <= 1e-9, "p={p} got={got} want={want}");
        }
    }

    #[test]
    fn q2_table() {
        let t = rb_normal_table(2).unwrap();
        let a = inv_oracle(0.125);
        let b = inv_oracle(0.375);
        let want = (a * a + b * b) / 2.0;
        assert!((want - 0.712417).abs() < 1e-5);
        assert!((t.variance() - want).abs() < 1e-12);
        assert!((t.sigma() - 0.844048).abs() < 1e-5);
        assert!(t.variance() <= 0.8);
    }

    #[test]
    fn table_structure() {
        let mut prev = 0.0;
        for q in 1..=12u32 {
            let t = rb_normal_table(q).unwrap();
            let values = t.quantiles().unwrap();
            let n = values.len();
            for m in 0..n {
                assert_eq!(values[m], -values[n - 1 - m]);
                if m > 0 {
                    assert!(values[m] > values[m - 1]);
                }
            }
            let direct: f64 = values.iter().map(|x| x * x).sum::<f64>() / n as f64;
            assert!((direct - t.variance()).abs() < 1e-13);
            assert!((t.sigma() - direct.sqrt()).abs() < 1e-13);
            assert!(t.variance() <= 1.0);
            assert!(t.variance() > prev, "variance must grow with q");
            prev = t.variance();
        }
    }

    #[test]
    fn tail_integral_variance_matches_exact_sum() {
        for q in [20u32, 22, 24] {
            let exact = grid_variance(q);
            let h = (-f64::from(q as i32)).exp2();
            let a = TAIL_CELLS as f64 * h;
            let xa = inv_normal_cdf_unchecked(a);
            let pdf = std_normal_pdf(xa);
            let approx = 2.0
                * (h * sum_sq_lower(q, TAIL_CELLS)
                    + (0.5 - a + xa * pdf)
                    + h * h / 24.0 * (2.0 * xa / pdf));
            assert!((exact - approx).abs() < 1e-12, "q={q} {exact} {approx}");
        }
        // large budgets stay below one and keep increasing
        let v30 = rb_normal_table(30).unwrap().variance();
        let v40 = rb_normal_table(40).unwrap().variance();
        assert!(v30 < v40 && v40 < 1.0);
    }

    #[test]
    fn on_demand_quantiles_match_formula() {
        let t = rb_normal_table(26).unwrap();
        assert!(t.quantiles().is_none());
        let n = t.len();
        assert_eq!(t.quantile(0), -t.quantile(n - 1));
        assert_eq!(t.quantile(n / 2 - 1), -t.quantile(n / 2));
        assert_eq!(
            t.quantile(12345),
            inv_normal_cdf_unchecked(dyadic_grid(26).unwrap().point(12345))
        );
    }

    #[test]
    fn nu_q_samples() {
        let t1 = rb_normal_table(1).unwrap();
        let lo = sample_nu_q(t1, &mut ReplayBits::from_pattern(0, 1));
        let hi = sample_nu_q(t1, &mut ReplayBits::from_pattern(1, 1));
        assert!((lo - inv_oracle(0.25)).abs() < 1e-9);
        assert!((lo + 0.674490).abs() < 1e-6);
        assert_eq!(lo + hi, 0.0);
        let t2 = rb_normal_table(2).unwrap();
        let v = sample_nu_q(t2, &mut ReplayBits::from_pattern(0b11, 2));
        assert!((v - 1.150349).abs() < 1e-6);
        for q in 1..=8u32 {
            let t = rb_normal_table(q).unwrap();
            for m in 0..(1u64 << q) {
                let a = sample_nu_q(t, &mut ReplayBits::from_pattern(m, q));
                let b = sample_nu_q(t, &mut ReplayBits::from_pattern(!m & ((1 << q) - 1), q));
                assert_eq!(a + b, 0.0);
            }
        }
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(round_down(2, 0.625), 0.625);
        assert_eq!(round_down(2, 0.30), 0.375);
        assert_eq!(round_down(1, 1.0 / 16.0), 0.25);
    }

    #[test]
    fn rounding_pushforward_is_uniform() {
        for q in 1..=12u32 {
            let fine = dyadic_grid(q + 2).unwrap();
            let mut hits = vec![0u32; 1 << q];
            for x in fine.iter() {
                let y = round_down(q, x);
                let m = (y * f64::from(1u32 << q)).floor() as usize;
                assert_eq!(cell_midpoint(q, m as u64), y);
                hits[m] += 1;
            }
            assert!(hits.iter().all(|&h| h == 4), "q={q}");
        }
    }
}
