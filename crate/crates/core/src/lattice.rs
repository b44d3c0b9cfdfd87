//! Dual-lattice indexing, quasimomentum cells and the index maps between
//! refinement levels.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_config::{Config, DerivedExponents};

pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub struct LatticeIndex {
    pub j1: i64,
    pub j2: i64,
}

impl LatticeIndex {
    pub const ZERO: LatticeIndex = LatticeIndex { j1: 0, j2: 0 };

    pub const fn new(j1: i64, j2: i64) -> Self {
        LatticeIndex { j1, j2 }
    }

    pub fn is_zero(self) -> bool {
        self.j1 == 0 && self.j2 == 0
    }

    pub fn scale(self, n: i64) -> Self {
        LatticeIndex::new(self.j1 * n, self.j2 * n)
    }

    pub fn norm_sq(self) -> i64 {
        self.j1 * self.j1 + self.j2 * self.j2
    }
}

impl std::ops::Add for LatticeIndex {
    type Output = LatticeIndex;
    fn add(self, o: Self) -> Self {
        LatticeIndex::new(self.j1 + o.j1, self.j2 + o.j2)
    }
}

impl std::ops::Sub for LatticeIndex {
    type Output = LatticeIndex;
    fn sub(self, o: Self) -> Self {
        LatticeIndex::new(self.j1 - o.j1, self.j2 - o.j2)
    }
}

impl std::ops::Neg for LatticeIndex {
    type Output = LatticeIndex;
    fn neg(self) -> Self {
        LatticeIndex::new(-self.j1, -self.j2)
    }
}

/// Period cell at refinement level `level`: the spatial cell `Q_n` of size
/// `N_hat a` and the quasimomentum cell `K_n` of size `2 pi / (N_hat a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeriodCell {
    pub level: u32,
    /// Level-1 periods `a_i = 2^{M_1 - 1} beta_i`.
    pub a: Vec2,
    /// `N_hat = N_{n-1} ... N_1`.
    pub refinement: u64,
}

impl PeriodCell {
    pub fn new(level: u32, a: Vec2, refinement: u64) -> Self {
        PeriodCell { level, a, refinement }
    }

    pub fn from_config(cfg: &Config, exps: &DerivedExponents, level: u32) -> Self {
        let base = 2f64.powi(exps.m(1) as i32 - 1);
        PeriodCell {
            level,
            a: [base * cfg.beta1, base * cfg.beta2],
            refinement: exps.cumulative_refinement(level),
        }
    }

    /// Cell `K_n` side lengths, which are also the dual-lattice spacings.
    pub fn extent(&self) -> Vec2 {
        let n = self.refinement as f64;
        [2.0 * PI / (n * self.a[0]), 2.0 * PI / (n * self.a[1])]
    }

    /// Spatial periods of `Q_n`.
    pub fn period(&self) -> Vec2 {
        let n = self.refinement as f64;
        [n * self.a[0], n * self.a[1]]
    }

    pub fn area(&self) -> f64 {
        let p = self.period();
        p[0] * p[1]
    }

    /// `2 pi q / (N_hat a)`.
    pub fn offset(&self, q: LatticeIndex) -> Vec2 {
        let e = self.extent();
        [q.j1 as f64 * e[0], q.j2 as f64 * e[1]]
    }

    pub fn refined(&self, factor: u64) -> Self {
        PeriodCell { level: self.level + 1, a: self.a, refinement: self.refinement * factor }
    }

    /// All `j` with `|p_j(0)| <= radius`, in lexicographic order.
    pub fn indices_within(&self, radius: f64) -> Vec<LatticeIndex> {
        let e = self.extent();
        let n1 = (radius / e[0]).floor() as i64;
        let n2 = (radius / e[1]).floor() as i64;
        let mut out = Vec::new();
        for j1 in -n1..=n1 {
            for j2 in -n2..=n2 {
                let p = [j1 as f64 * e[0], j2 as f64 * e[1]];
                if p[0] * p[0] + p[1] * p[1] <= radius * radius {
                    out.push(LatticeIndex::new(j1, j2));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quasimomentum {
    pub t: Vec2,
    pub level: u32,
}

impl Quasimomentum {
    pub fn new(t1: f64, t2: f64, level: u32) -> Self {
        Quasimomentum { t: [t1, t2], level }
    }
}

/// `p_j(t) = 2 pi j / (N_hat a) + t`.
pub fn dual_vector(j: LatticeIndex, t: &Quasimomentum, cell: &PeriodCell) -> Result<Vec2> {
    if t.level != cell.level {
        return Err(Error::LevelMismatch { expected: cell.level, found: t.level });
    }
    let o = cell.offset(j);
    Ok([o[0] + t.t[0], o[1] + t.t[1]])
}

/// `|p|^{2l}`.
pub fn symbol(p: Vec2, l: u32) -> f64 {
    (p[0] * p[0] + p[1] * p[1]).powi(l as i32)
}

/// `|c + o|^{2l} - |c|^{2l}` without cancellation: the squared-norm
/// difference `2 c.o + |o|^2` is formed first and the power difference is
/// factored as `(A - B) sum A^i B^{l-1-i}`.
pub fn symbol_shift(c: Vec2, o: Vec2, l: u32) -> f64 {
    let base = c[0] * c[0] + c[1] * c[1];
    let diff = 2.0 * (c[0] * o[0] + c[1] * o[1]) + (o[0] * o[0] + o[1] * o[1]);
    power_difference(base + diff, base, diff, l)
}

/// `A^l - B^l` given `A - B` accurately.
pub fn power_difference(a: f64, b: f64, a_minus_b: f64, l: u32) -> f64 {
    let mut sum = 0.0;
    let mut ap = 1.0;
    for i in 0..l {
        sum += ap * b.powi((l - 1 - i) as i32);
        ap *= a;
    }
    a_minus_b * sum
}

/// Complex analogue of [`power_difference`].
pub fn power_difference_c(a: Complex64, b: Complex64, a_minus_b: Complex64, l: u32) -> Complex64 {
    let mut sum = Complex64::new(0.0, 0.0);
    let mut ap = Complex64::new(1.0, 0.0);
    for i in 0..l {
        sum += ap * b.powi((l - 1 - i) as i32);
        ap *= a;
    }
    a_minus_b * sum
}

/// `(k + h)^{2l} - k^{2l}` for tiny `h`.
pub fn radial_symbol_shift(k: f64, h: f64, l: u32) -> f64 {
    k.powi(2 * l as i32) * (2.0 * l as f64 * (h / k).ln_1p()).exp_m1()
}

/// Unique `(t, j)` with `v = p_j(t)` and `t` in the half-open cell.
pub fn reduce_to_cell(v: Vec2, cell: &PeriodCell) -> (Quasimomentum, LatticeIndex) {
    let e = cell.extent();
    let mut j = [0i64; 2];
    let mut t = [0.0; 2];
    for i in 0..2 {
        let mut ji = (v[i] / e[i]).floor() as i64;
        let mut ti = v[i] - ji as f64 * e[i];
        if ti >= e[i] {
            ji += 1;
            ti = v[i] - ji as f64 * e[i];
        }
        if ti < 0.0 {
            ji -= 1;
            ti = v[i] - ji as f64 * e[i];
        }
        j[i] = ji;
        t[i] = ti.clamp(0.0, e[i] * (1.0 - f64::EPSILON));
    }
    (Quasimomentum { t, level: cell.level }, LatticeIndex::new(j[0], j[1]))
}

/// `m = N j + p` componentwise.
pub fn refine_index(j: LatticeIndex, p: LatticeIndex, n: i64) -> Result<LatticeIndex> {
    if n < 1 {
        return Err(Error::InvalidRefinement(n));
    }
    if !(0..n).contains(&p.j1) || !(0..n).contains(&p.j2) {
        return Err(Error::ShiftOutOfRange { p1: p.j1, p2: p.j2, n });
    }
    Ok(LatticeIndex::new(n * j.j1 + p.j1, n * j.j2 + p.j2))
}

/// Inverse of [`refine_index`] with remainders in `0..N`.
pub fn split_index(m: LatticeIndex, n: i64) -> Result<(LatticeIndex, LatticeIndex)> {
    if n < 1 {
        return Err(Error::InvalidRefinement(n));
    }
    Ok((
        LatticeIndex::new(m.j1.div_euclid(n), m.j2.div_euclid(n)),
        LatticeIndex::new(m.j1.rem_euclid(n), m.j2.rem_euclid(n)),
    ))
}

/// The `N^2` shifts `0 <= p_i < N` in row-major order.
pub fn shift_set(n: i64) -> Vec<LatticeIndex> {
    let mut out = Vec::with_capacity((n * n).max(0) as usize);
    for p1 in 0..n {
        for p2 in 0..n {
            out.push(LatticeIndex::new(p1, p2));
        }
    }
    out
}

pub fn shift_set_nonzero(n: i64) -> Vec<LatticeIndex> {
    shift_set(n).into_iter().filter(|p| !p.is_zero()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_cell() -> PeriodCell {
        PeriodCell::new(1, [2.0 * PI, 2.0 * PI], 1)
    }

    #[test]
    fn dual_vector_examples() {
        let c = unit_cell();
        let t = Quasimomentum::new(0.1, 0.2, 1);
        assert_eq!(dual_vector(LatticeIndex::ZERO, &t, &c).unwrap(), [0.1, 0.2]);
        let p = dual_vector(LatticeIndex::new(1, 0), &Quasimomentum::new(0.0, 0.0, 1), &c).unwrap();
        assert_relative_eq!(p[0], 1.0, epsilon = 1e-15);
        assert_eq!(p[1], 0.0);
        let c2 = PeriodCell::new(1, [2.0 * PI, 4.0 * PI], 1);
        let p = dual_vector(LatticeIndex::new(2, -1), &Quasimomentum::new(0.3, 0.4, 1), &c2).unwrap();
        assert_relative_eq!(p[0], 2.3, epsilon = 1e-14);
        assert_relative_eq!(p[1], -0.1, epsilon = 1e-14);
    }

    #[test]
    fn level_mismatch() {
        let r = dual_vector(LatticeIndex::ZERO, &Quasimomentum::new(0.0, 0.0, 2), &unit_cell());
        assert_eq!(r, Err(Error::LevelMismatch { expected: 1, found: 2 }));
    }

    #[test]
    fn reduce_examples() {
        let c = unit_cell();
        let (t, j) = reduce_to_cell([2.5, 0.3], &c);
        assert_relative_eq!(t.t[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(t.t[1], 0.3, epsilon = 1e-12);
        assert_eq!(j, LatticeIndex::new(2, 0));
        let (t, j) = reduce_to_cell([-0.25, 0.0], &c);
        assert_relative_eq!(t.t[0], 0.75, epsilon = 1e-12);
        assert_eq!(t.t[1], 0.0);
        assert_eq!(j, LatticeIndex::new(-1, 0));
    }

    #[test]
    fn boundary_goes_to_lower_cell() {
        let c = unit_cell();
        let (t, j) = reduce_to_cell([1.0, 0.0], &c);
        assert_eq!(j, LatticeIndex::new(1, 0));
        assert_eq!(t.t[0], 0.0);
    }

    #[test]
    fn refine_split_examples() {
        let m = refine_index(LatticeIndex::new(1, 0), LatticeIndex::new(2, 3), 4).unwrap();
        assert_eq!(m, LatticeIndex::new(6, 3));
        assert_eq!(split_index(m, 4).unwrap(), (LatticeIndex::new(1, 0), LatticeIndex::new(2, 3)));
        assert_eq!(
            split_index(LatticeIndex::new(-1, 0), 4).unwrap(),
            (LatticeIndex::new(-1, 0), LatticeIndex::new(3, 0))
        );
        assert!(matches!(
            refine_index(LatticeIndex::ZERO, LatticeIndex::new(4, 0), 4),
            Err(Error::ShiftOutOfRange { .. })
        ));
        assert!(matches!(split_index(LatticeIndex::ZERO, 0), Err(Error::InvalidRefinement(0))));
    }

    #[test]
    fn shift_sets() {
        assert_eq!(shift_set(1), vec![LatticeIndex::ZERO]);
        assert_eq!(
            shift_set(2),
            vec![LatticeIndex::new(0, 0), LatticeIndex::new(0, 1), LatticeIndex::new(1, 0), LatticeIndex::new(1, 1)]
        );
        for n in 1..=8 {
            assert_eq!(shift_set(n).len() as i64, n * n);
            assert_eq!(shift_set_nonzero(n).len() as i64, n * n - 1);
        }
    }

    #[test]
    fn cell_scaling() {
        let c = PeriodCell::new(1, [1.0, 2.0], 1);
        let r = c.refined(4);
        assert_relative_eq!(c.extent()[0] / r.extent()[0], 4.0);
        assert_relative_eq!(r.period()[1] / c.period()[1], 4.0);
    }

    #[test]
    fn symbol_shift_matches_direct() {
        let c = [3.0, 4.0];
        let o = [0.5, -0.25];
        let direct = symbol([3.5, 3.75], 6) - symbol(c, 6);
        assert_relative_eq!(symbol_shift(c, o, 6), direct, max_relative = 1e-12);
    }

    #[test]
    fn radial_shift_tiny_h() {
        let v = radial_symbol_shift(10.0, 1e-30, 6);
        assert_relative_eq!(v, 12.0 * 1e11 * 1e-30, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn reduce_round_trip(x in -1e3f64..1e3, y in -1e3f64..1e3) {
            let c = PeriodCell::new(1, [1.3, 2.0 * PI], 2);
            let (t, j) = reduce_to_cell([x, y], &c);
            let e = c.extent();
            prop_assert!(t.t[0] >= 0.0 && t.t[0] < e[0]);
            prop_assert!(t.t[1] >= 0.0 && t.t[1] < e[1]);
            let v = dual_vector(j, &t, &c).unwrap();
            prop_assert!((v[0] - x).abs() <= 1e-12 * x.abs().max(1.0));
            prop_assert!((v[1] - y).abs() <= 1e-12 * y.abs().max(1.0));
        }

        #[test]
        fn refine_split_bijection(j1 in -1000i64..1000, j2 in -1000i64..1000, n in 1i64..9, p1 in 0i64..9, p2 in 0i64..9) {
            let p = LatticeIndex::new(p1 % n, p2 % n);
            let j = LatticeIndex::new(j1, j2);
            let m = refine_index(j, p, n).unwrap();
            prop_assert_eq!(split_index(m, n).unwrap(), (j, p));
            let (jj, pp) = split_index(j, n).unwrap();
            prop_assert_eq!(refine_index(jj, pp, n).unwrap(), j);
        }

        #[test]
        fn dual_vector_linear_in_t(t1 in 0.0f64..1.0, s1 in 0.0f64..1.0, j1 in -20i64..20) {
            let c = unit_cell();
            let j = LatticeIndex::new(j1, 3);
            let a = dual_vector(j, &Quasimomentum::new(t1, 0.0, 1), &c).unwrap();
            let b = dual_vector(j, &Quasimomentum::new(t1 + s1, 0.0, 1), &c).unwrap();
            prop_assert!((b[0] - a[0] - s1).abs() < 1e-12);
        }
    }
}
