//! Fourier data of the limit-periodic potential `V = sum_r V_r` and the
//! window sums `W_n` re-indexed onto finer lattices.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{LatticeIndex, PeriodCell, Vec2};
use crate::model_config::{Config, DerivedExponents};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Harmonic {
    pub level: u32,
    pub index: LatticeIndex,
    pub amplitude: Complex64,
}

/// Desk budget `C_hat 10^{-decades (r - offset)}` for `sum_q |w_q|` on level `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayBudget {
    pub amplitude: f64,
    pub decades_per_level: f64,
    pub level_offset: i32,
    /// Decay exponent of the strict bound `C_hat exp(-2^{eta r})`.
    pub eta: f64,
}

impl DecayBudget {
    pub fn from_config(cfg: &Config) -> Self {
        DecayBudget { amplitude: cfg.amplitude, decades_per_level: cfg.budget_decades, level_offset: 1, eta: cfg.eta }
    }

    pub fn level_budget(&self, r: u32) -> f64 {
        self.amplitude * 10f64.powf(-self.decades_per_level * (r as i32 - self.level_offset) as f64)
    }

    pub fn strict_bound(&self, r: u32) -> f64 {
        self.amplitude * (-(2f64.powf(self.eta * r as f64))).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FourierPotential {
    pub level: u32,
    pub coefficients: BTreeMap<LatticeIndex, Complex64>,
    /// `sum |w_q|`, an upper bound for the sup norm.
    pub sup_norm_bound: f64,
    pub budget: f64,
    pub strict_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetWarning {
    pub level: u32,
    pub requested: f64,
    pub budget: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitPeriodic {
    /// `levels[r - 1]` is `V_r`.
    pub levels: Vec<FourierPotential>,
    pub warnings: Vec<BudgetWarning>,
}

impl LimitPeriodic {
    pub fn level(&self, r: u32) -> Option<&FourierPotential> {
        if r == 0 {
            None
        } else {
            self.levels.get((r - 1) as usize)
        }
    }

    pub fn is_zero(&self) -> bool {
        self.levels.iter().all(|v| v.coefficients.is_empty())
    }

    /// Multiplies every coefficient by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.levels {
            for c in v.coefficients.values_mut() {
                *c *= alpha;
            }
            v.sup_norm_bound *= alpha.abs();
        }
        out
    }
}

/// Explicit harmonics from the config followed by the expanded random blocks.
pub fn harmonics_from_config(cfg: &Config) -> Vec<Harmonic> {
    let mut out: Vec<Harmonic> = cfg
        .harmonics
        .iter()
        .map(|h| Harmonic {
            level: h.level,
            index: LatticeIndex::new(h.index[0], h.index[1]),
            amplitude: Complex64::new(h.re, h.im),
        })
        .collect();
    for block in &cfg.random_harmonics {
        let mut rng = ChaCha8Rng::seed_from_u64(block.seed);
        let n = block.radius.floor() as i64;
        for j1 in 0..=n {
            for j2 in -n..=n {
                let q = LatticeIndex::new(j1, j2);
                let canonical = j1 > 0 || (j1 == 0 && j2 > 0);
                if !canonical || (q.norm_sq() as f64) > block.radius * block.radius {
                    continue;
                }
                let theta: f64 = rng.random::<f64>() * 2.0 * PI;
                out.push(Harmonic { level: block.level, index: q, amplitude: Complex64::from_polar(block.amplitude, theta) });
            }
        }
    }
    out
}

/// Builds `V_1 .. V_{levels}` from conjugate-pair harmonics. Each entry
/// contributes `c` at `q` and `conj(c)` at `-q`; levels whose `sum |w_q|`
/// exceeds the budget are scaled down and a warning is recorded.
pub fn build_limit_periodic(harmonics: &[Harmonic], budget: &DecayBudget, min_levels: u32) -> Result<LimitPeriodic> {
    let top = harmonics.iter().map(|h| h.level).max().unwrap_or(0).max(min_levels).max(1);
    let mut maps: Vec<BTreeMap<LatticeIndex, Complex64>> = vec![BTreeMap::new(); top as usize];
    for h in harmonics {
        if h.index.is_zero() {
            return Err(Error::ZeroHarmonic { level: h.level });
        }
        if h.level == 0 {
            return Err(Error::ParameterDomain { name: "level", value: 0.0 });
        }
        let m = &mut maps[(h.level - 1) as usize];
        *m.entry(h.index).or_default() += h.amplitude;
        *m.entry(-h.index).or_default() += h.amplitude.conj();
    }
    let mut levels = Vec::with_capacity(top as usize);
    let mut warnings = Vec::new();
    for (i, mut coefficients) in maps.into_iter().enumerate() {
        let r = i as u32 + 1;
        coefficients.retain(|_, c| c.norm() > 0.0);
        let level_budget = budget.level_budget(r);
        let mut sup: f64 = coefficients.values().map(|c| c.norm()).sum();
        if sup > level_budget {
            let scale = level_budget / sup;
            for c in coefficients.values_mut() {
                *c *= scale;
            }
            warnings.push(BudgetWarning { level: r, requested: sup, budget: level_budget, scale });
            sup = coefficients.values().map(|c| c.norm()).sum();
        }
        levels.push(FourierPotential {
            level: r,
            coefficients,
            sup_norm_bound: sup,
            budget: level_budget,
            strict_bound: budget.strict_bound(r),
        });
    }
    Ok(LimitPeriodic { levels, warnings })
}

pub fn build_from_config(cfg: &Config, exps: &DerivedExponents) -> Result<LimitPeriodic> {
    build_limit_periodic(&harmonics_from_config(cfg), &DecayBudget::from_config(cfg), exps.m(exps.levels()))
}

/// Fourier coefficients of a finite sum of levels on the level-`lattice_level`
/// dual lattice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowPotential {
    pub window: u32,
    pub lattice_level: u32,
    pub coefficients: BTreeMap<LatticeIndex, Complex64>,
    pub sup_norm: f64,
}

impl WindowPotential {
    pub fn zero(window: u32, lattice_level: u32) -> Self {
        WindowPotential { window, lattice_level, coefficients: BTreeMap::new(), sup_norm: 0.0 }
    }

    pub fn lookup(&self, q: LatticeIndex) -> Complex64 {
        self.coefficients.get(&q).copied().unwrap_or_default()
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.is_empty()
    }

    /// Same function viewed on a lattice refined by `factor`.
    pub fn refined(&self, factor: i64) -> Self {
        WindowPotential {
            window: self.window,
            lattice_level: self.lattice_level,
            coefficients: self.coefficients.iter().map(|(q, c)| (q.scale(factor), *c)).collect(),
            sup_norm: self.sup_norm,
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        WindowPotential {
            window: self.window,
            lattice_level: self.lattice_level,
            coefficients: self.coefficients.iter().map(|(q, c)| (*q, c * alpha)).collect(),
            sup_norm: self.sup_norm * alpha.abs(),
        }
    }

    pub fn add(&self, other: &WindowPotential) -> Self {
        let mut coefficients = self.coefficients.clone();
        for (q, c) in &other.coefficients {
            *coefficients.entry(*q).or_default() += c;
        }
        coefficients.retain(|_, c| c.norm() > 0.0);
        let sup_norm = coefficients.values().map(|c| c.norm()).sum();
        WindowPotential { window: self.window.max(other.window), lattice_level: self.lattice_level, coefficients, sup_norm }
    }

    /// Largest `max(|q1|, |q2|)` among stored indices.
    pub fn max_index(&self) -> i64 {
        self.coefficients.keys().map(|q| q.j1.abs().max(q.j2.abs())).max().unwrap_or(0)
    }

    /// Value at a spatial point, given the cell whose dual lattice carries
    /// the coefficients.
    pub fn evaluate(&self, cell: &PeriodCell, x: Vec2) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (q, c) in &self.coefficients {
            let b = cell.offset(*q);
            acc += c * Complex64::from_polar(1.0, b[0] * x[0] + b[1] * x[1]);
        }
        acc
    }
}

pub fn coefficient_lookup(w: &WindowPotential, q: LatticeIndex) -> Complex64 {
    w.lookup(q)
}

fn sum_levels(pot: &LimitPeriodic, levels: std::ops::RangeInclusive<u32>, target: u32, window: u32) -> Result<WindowPotential> {
    let mut coefficients: BTreeMap<LatticeIndex, Complex64> = BTreeMap::new();
    for r in levels {
        let v = pot.level(r).ok_or(Error::MissingLevel { level: r })?;
        let factor = 1i64 << (target - r);
        for (q, c) in &v.coefficients {
            *coefficients.entry(q.scale(factor)).or_default() += c;
        }
    }
    coefficients.retain(|_, c| c.norm() > 0.0);
    let sup_norm = coefficients.values().map(|c| c.norm()).sum();
    Ok(WindowPotential { window, lattice_level: target, coefficients, sup_norm })
}

/// `W_n = sum_{r = M_{n-1}+1}^{M_n} V_r` on the level-`M_n` lattice.
pub fn window_sum(pot: &LimitPeriodic, n: u32, exps: &DerivedExponents) -> Result<WindowPotential> {
    let (lo, hi) = (exps.m(n - 1) + 1, exps.m(n));
    sum_levels(pot, lo..=hi, hi, n)
}

/// `W_1 + ... + W_n` on the level-`M_n` lattice, the potential of `H^{(n)}`.
pub fn cumulative_window(pot: &LimitPeriodic, n: u32, exps: &DerivedExponents) -> Result<WindowPotential> {
    let hi = exps.m(n);
    sum_levels(pot, 1..=hi, hi, n)
}

/// `W_{n'}` for `n' <= n`, viewed on the level-`M_n` lattice.
pub fn window_on_level(pot: &LimitPeriodic, window: u32, n: u32, exps: &DerivedExponents) -> Result<WindowPotential> {
    let w = window_sum(pot, window, exps)?;
    let factor = 1i64 << (exps.m(n) - exps.m(window));
    let mut out = w.refined(factor);
    out.lattice_level = exps.m(n);
    Ok(out)
}
