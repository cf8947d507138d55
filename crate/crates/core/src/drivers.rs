//! Coupled fine/coarse increment vectors for one multilevel sample.
//!
//! A level-`ℓ` sample holds `2^ℓ` fine increments on the grid `k 2^-ℓ` and,
//! for `ℓ >= 1`, `2^(ℓ-1)` coarse increments on the grid of twice the step.
//! Four constructions are provided:
//!
//! * classical Brownian increments, coarse ones obtained by pairwise sums;
//! * the Lévy-Ciesielski random-bit driver, which expands the path in
//!   Schauder functions with bit-approximated normal coefficients and builds
//!   the coarse path from the same bits with the two trailing bits of every
//!   coefficient index dropped;
//! * iid random-bit increments with a fixed bit budget per entry;
//! * Bernoulli increments, sums of `±2^(-L/2)` on the finest grid.
//!
//! The last two depend on a fixed maximal level and are meant for
//! fixed-level comparisons only.
//!
//! Vector values (`d > 1`) are stored step-major: entry `k` component `c`
//! lives at `k * d + c`.

use crate::bitcore::RandomSource;
use crate::error::{invalid, Result};
use crate::rbnormal::{rb_normal_table, RbNormalTable};

/// Deepest level any driver accepts.
pub const MAX_LEVEL: u32 = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledIncrements {
    pub level: u32,
    pub dim: usize,
    pub fine: Vec<f64>,
    pub coarse: Vec<f64>,
}

impl CoupledIncrements {
    pub fn empty(dim: usize) -> Self {
        CoupledIncrements {
            level: 0,
            dim,
            fine: Vec::new(),
            coarse: Vec::new(),
        }
    }

    pub fn fine_steps(&self) -> usize {
        self.fine.len() / self.dim
    }

    pub fn coarse_steps(&self) -> usize {
        self.coarse.len() / self.dim
    }

    /// Fine increment `k` (0-based).
    pub fn fine_step(&self, k: usize) -> &[f64] {
        &self.fine[k * self.dim..(k + 1) * self.dim]
    }

    pub fn coarse_step(&self, k: usize) -> &[f64] {
        &self.coarse[k * self.dim..(k + 1) * self.dim]
    }

    fn reset(&mut self, level: u32, dim: usize) {
        let n = 1usize << level;
        self.level = level;
        self.dim = dim;
        self.fine.clear();
        self.fine.resize(n * dim, 0.0);
        self.coarse.clear();
        self.coarse.resize((n / 2) * dim, 0.0);
    }

    fn sum_pairs_into_coarse(&mut self) {
        let d = self.dim;
        for k in 0..self.coarse_steps() {
            for c in 0..d {
                self.coarse[k * d + c] = self.fine[2 * k * d + c] + self.fine[(2 * k + 1) * d + c];
            }
        }
    }
}

fn check_level(level: u32) -> Result<()> {
    if level > MAX_LEVEL {
        Err(invalid(format!("level {level} exceeds {MAX_LEVEL}")))
    } else {
        Ok(())
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        Err(invalid("driving dimension must be at least 1"))
    } else {
        Ok(())
    }
}

/// Index `(i, j)` of a Schauder function; `j` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SchauderIndex {
    i: u32,
    j: u64,
}

impl SchauderIndex {
    pub fn new(i: u32, j: u64) -> Result<Self> {
        let ok = if i == 0 {
            j == 1
        } else {
            i <= 62 && j >= 1 && j <= 1u64 << (i - 1)
        };
        if ok {
            Ok(SchauderIndex { i, j })
        } else {
            Err(invalid(format!("Schauder index ({i}, {j}) out of range")))
        }
    }

    pub fn resolution(&self) -> u32 {
        self.i
    }

    pub fn shift(&self) -> u64 {
        self.j
    }

    /// Position in the flat order (0,1), (1,1), (2,1), (2,2), (3,1), ...
    pub fn flat(&self) -> u64 {
        if self.i == 0 {
            0
        } else {
            (1u64 << (self.i - 1)) + self.j - 1
        }
    }

    /// `s^(i,j)(t)`, the integral of the Haar function over `[0, t]`.
    pub fn value(&self, t: f64) -> f64 {
        if self.i == 0 {
            return t;
        }
        let width = (-f64::from(self.i as i32 - 1)).exp2();
        let left = (self.j - 1) as f64 * width;
        let mid = left + 0.5 * width;
        let right = left + width;
        let height = (0.5 * f64::from(self.i as i32 - 1)).exp2();
        height * ((t.clamp(left, mid) - left) - (t.clamp(mid, right) - mid))
    }
}

/// Peak of `s^(i,j)`, attained at the midpoint of its support.
#[inline]
fn schauder_peak(i: u32) -> f64 {
    (-0.5 * f64::from(i as i32 + 1)).exp2()
}

/// `Δ^(i,j)_{k,ℓ}`: increment of `s^(i,j)` over the `k`-th cell (1-based) of
/// the level-`ℓ` grid.
pub fn schauder_increment(idx: SchauderIndex, k: u64, level: u32) -> Result<f64> {
    if level > 62 || k < 1 || k > 1u64 << level {
        return Err(invalid(format!("cell {k} outside level-{level} grid")));
    }
    let h = (-f64::from(level as i32)).exp2();
    Ok(idx.value(k as f64 * h) - idx.value((k - 1) as f64 * h))
}

/// Bits spent on each coefficient of resolution `i` at level `ℓ`.
pub fn bit_budget(i: u32, level: u32) -> Result<u32> {
    if i > level {
        Err(invalid(format!("resolution {i} exceeds level {level}")))
    } else {
        Ok(2 * (level + 1 - i))
    }
}

/// Random bits consumed by one Lévy-Ciesielski sample at level `ℓ`.
pub fn total_bits(level: u32, dim: usize) -> u64 {
    dim as u64 * ((1u64 << (level + 2)) - 2)
}

/// Fills `path` (length `2^ℓ + 1`) with the Schauder expansion truncated at
/// resolution `ℓ`, evaluated on the level-`ℓ` grid. `coefficient(i, p)`
/// supplies the coefficient with flat index `p`; coefficients are requested
/// in flat order, which is also the order in which midpoints get refined.
fn bridge_fill(path: &mut [f64], level: u32, mut coefficient: impl FnMut(u32, usize) -> f64) {
    let n = 1usize << level;
    debug_assert_eq!(path.len(), n + 1);
    path[0] = 0.0;
    path[n] = coefficient(0, 0);
    for i in 1..=level {
        let peak = schauder_peak(i);
        let stride = n >> (i - 1);
        let half = stride / 2;
        let first = 1usize << (i - 1);
        for j in 0..first {
            let left = j * stride;
            let y = coefficient(i, first + j);
            path[left + half] = 0.5 * (path[left] + path[left + stride]) + peak * y;
        }
    }
}

/// Path values `W_ℓ(k 2^-ℓ)` of the Schauder expansion with the given
/// coefficients (flat order, at least `2^ℓ` of them).
pub fn lc_skeleton_from_coefficients(level: u32, coefficients: &[f64]) -> Result<Vec<f64>> {
    check_level(level)?;
    let n = 1usize << level;
    if coefficients.len() < n {
        return Err(invalid(format!(
            "level {level} needs {n} coefficients, got {}",
            coefficients.len()
        )));
    }
    let mut path = vec![0.0; n + 1];
    bridge_fill(&mut path, level, |_, p| coefficients[p]);
    Ok(path)
}

#[derive(Debug, Clone, Copy)]
struct ScaledTable {
    table: &'static RbNormalTable,
    inv_sigma: f64,
}

impl ScaledTable {
    fn new(q: u32) -> Result<Self> {
        let table = rb_normal_table(q)?;
        Ok(ScaledTable {
            table,
            inv_sigma: 1.0 / table.sigma(),
        })
    }

    #[inline]
    fn normalized(&self, m: u64) -> f64 {
        self.table.quantile(m) * self.inv_sigma
    }
}

/// Scratch state for the Lévy-Ciesielski driver at one level; reused across
/// samples.
#[derive(Debug, Clone, Default)]
pub struct LcWorkspace {
    level: Option<u32>,
    fine_tables: Vec<ScaledTable>,
    coarse_tables: Vec<ScaledTable>,
    indices: Vec<u64>,
    fine_path: Vec<f64>,
    coarse_path: Vec<f64>,
}

impl LcWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn prepare(&mut self, level: u32) -> Result<()> {
        if self.level == Some(level) {
            return Ok(());
        }
        self.fine_tables = (0..=level)
            .map(|i| ScaledTable::new(bit_budget(i, level)?))
            .collect::<Result<_>>()?;
        self.coarse_tables = if level == 0 {
            Vec::new()
        } else {
            (0..level)
                .map(|i| ScaledTable::new(bit_budget(i, level - 1)?))
                .collect::<Result<_>>()?
        };
        let n = 1usize << level;
        self.indices = vec![0; n];
        self.fine_path = vec![0.0; n + 1];
        self.coarse_path = vec![0.0; n / 2 + 1];
        self.level = Some(level);
        Ok(())
    }

    pub fn generate<R: RandomSource + ?Sized>(
        &mut self,
        level: u32,
        dim: usize,
        src: &mut R,
        out: &mut CoupledIncrements,
    ) -> Result<()> {
        check_level(level)?;
        check_dim(dim)?;
        self.prepare(level)?;
        out.reset(level, dim);
        let n = 1usize << level;

        for c in 0..dim {
            // cell indices U^(i,j), MSB-first, in flat order
            self.indices[0] = src.draw_bits_u64(bit_budget(0, level)?);
            for i in 1..=level {
                let q = 2 * (level + 1 - i);
                let first = 1usize << (i - 1);
                for slot in &mut self.indices[first..2 * first] {
                    *slot = src.draw_bits_u64(q);
                }
            }

            let indices = &self.indices;
            let fine_tables = &self.fine_tables;
            bridge_fill(&mut self.fine_path, level, |i, p| {
                fine_tables[i as usize].normalized(indices[p])
            });
            for k in 0..n {
                out.fine[k * dim + c] = self.fine_path[k + 1] - self.fine_path[k];
            }

            if level >= 1 {
                // T at budget q - 2 keeps the leading q - 2 bits
                let coarse_tables = &self.coarse_tables;
                bridge_fill(&mut self.coarse_path, level - 1, |i, p| {
                    coarse_tables[i as usize].normalized(indices[p] >> 2)
                });
                for k in 0..n / 2 {
                    out.coarse[k * dim + c] = self.coarse_path[k + 1] - self.coarse_path[k];
                }
            }
        }
        Ok(())
    }
}

/// Which construction produces the increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriverKind {
    Classic,
    BitLc,
    BitIid { max_level: u32 },
    BitBernoulli { max_level: u32 },
}

impl DriverKind {
    /// Drivers whose construction does not depend on a maximal level.
    pub fn is_level_extensible(&self) -> bool {
        matches!(self, DriverKind::Classic | DriverKind::BitLc)
    }

    pub fn uses_bits(&self) -> bool {
        !matches!(self, DriverKind::Classic)
    }
}

/// A driver together with its reusable scratch space.
#[derive(Debug, Clone)]
pub struct Driver {
    kind: DriverKind,
    lc: LcWorkspace,
}

impl Driver {
    pub fn new(kind: DriverKind) -> Self {
        Driver {
            kind,
            lc: LcWorkspace::new(),
        }
    }

    pub fn kind(&self) -> DriverKind {
        self.kind
    }

    pub fn generate<R: RandomSource + ?Sized>(
        &mut self,
        level: u32,
        dim: usize,
        src: &mut R,
        out: &mut CoupledIncrements,
    ) -> Result<()> {
        match self.kind {
            DriverKind::Classic => classic_into(level, dim, src, out),
            DriverKind::BitLc => self.lc.generate(level, dim, src, out),
            DriverKind::BitIid { max_level } => iid_into(level, max_level, dim, src, out),
            DriverKind::BitBernoulli { max_level } => {
                bernoulli_into(level, max_level, dim, src, out)
            }
        }
    }
}

fn classic_into<R: RandomSource + ?Sized>(
    level: u32,
    dim: usize,
    src: &mut R,
    out: &mut CoupledIncrements,
) -> Result<()> {
    check_level(level)?;
    check_dim(dim)?;
    out.reset(level, dim);
    let scale = (-0.5 * f64::from(level)).exp2();
    for v in out.fine.iter_mut() {
        *v = scale * src.draw_std_normal();
    }
    out.sum_pairs_into_coarse();
    Ok(())
}

fn check_fixed_levels(level: u32, max_level: u32) -> Result<()> {
    if level > max_level {
        return Err(invalid(format!(
            "level {level} exceeds fixed maximal level {max_level}"
        )));
    }
    check_level(max_level)
}

fn iid_into<R: RandomSource + ?Sized>(
    level: u32,
    max_level: u32,
    dim: usize,
    src: &mut R,
    out: &mut CoupledIncrements,
) -> Result<()> {
    check_fixed_levels(level, max_level)?;
    check_dim(dim)?;
    let table = rb_normal_table(max_level)?;
    out.reset(level, dim);
    let scale = (-0.5 * f64::from(level)).exp2();
    for v in out.fine.iter_mut() {
        *v = scale * table.quantile(src.draw_bits_u64(max_level));
    }
    out.sum_pairs_into_coarse();
    Ok(())
}

fn bernoulli_into<R: RandomSource + ?Sized>(
    level: u32,
    max_level: u32,
    dim: usize,
    src: &mut R,
    out: &mut CoupledIncrements,
) -> Result<()> {
    check_fixed_levels(level, max_level)?;
    check_dim(dim)?;
    out.reset(level, dim);
    let unit = (-0.5 * f64::from(max_level)).exp2();
    let per_entry = 1u64 << (max_level - level);
    for v in out.fine.iter_mut() {
        let mut ones = 0u64;
        let mut left = per_entry;
        while left > 0 {
            let take = left.min(64) as u32;
            ones += u64::from(src.draw_bits_u64(take).count_ones());
            left -= u64::from(take);
        }
        *v = unit * (2.0 * ones as f64 - per_entry as f64);
    }
    out.sum_pairs_into_coarse();
    Ok(())
}

/// Brownian increments from `d 2^ℓ` standard normal draws.
pub fn classic_coupled_increments<R: RandomSource + ?Sized>(
    level: u32,
    dim: usize,
    src: &mut R,
) -> Result<CoupledIncrements> {
    let mut out = CoupledIncrements::empty(dim);
    classic_into(level, dim, src, &mut out)?;
    Ok(out)
}

/// Lévy-Ciesielski random-bit increments; draws exactly
/// [`total_bits`]`(ℓ, d)` bits.
pub fn lc_coupled_increments<R: RandomSource + ?Sized>(
    level: u32,
    dim: usize,
    src: &mut R,
) -> Result<CoupledIncrements> {
    let mut out = CoupledIncrements::empty(dim);
    LcWorkspace::new().generate(level, dim, src, &mut out)?;
    Ok(out)
}

/// Increments `2^(-ℓ/2) ξ` with iid `ξ` from the `L`-bit normal
/// approximation.
pub fn iid_coupled_increments<R: RandomSource + ?Sized>(
    level: u32,
    max_level: u32,
    dim: usize,
    src: &mut R,
) -> Result<CoupledIncrements> {
    let mut out = CoupledIncrements::empty(dim);
    iid_into(level, max_level, dim, src, &mut out)?;
    Ok(out)
}

/// Scaled symmetric binomial increments built from `d 2^L` bits.
pub fn bernoulli_coupled_increments<R: RandomSource + ?Sized>(
    level: u32,
    max_level: u32,
    dim: usize,
    src: &mut R,
) -> Result<CoupledIncrements> {
    let mut out = CoupledIncrements::empty(dim);
    bernoulli_into(level, max_level, dim, src, &mut out)?;
    Ok(out)
}
