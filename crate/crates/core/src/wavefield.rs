//! Quasi-plane waves `Psi_n(x) = sum_r c_r e^{i <kappa + p_r(0), x>}` on the
//! level-`n` lattice, normalized by `sum |c_r|^2 = 1` (so that
//! `||Psi_n||^2_{L_2(Q_n)} = |Q_n|`), with the phase fixed against the
//! previous step.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::Serialize;

use crate::bloch_oracle::{assemble_anchored, refine_eigenpair, refine_on};
use crate::error::{Error, Result};
use crate::isoenergetic::{carve_chi1, kappa_value};
use crate::lattice::{symbol, symbol_shift, LatticeIndex, PeriodCell, Vec2};
use crate::model::Model;
use crate::model_config::Config;
use crate::perturbation::{eigenvalue_series, projection_series};

type C64 = Complex64;

#[derive(Debug, Clone, Serialize)]
pub struct BlochWave {
    pub step: u32,
    pub kappa: Vec2,
    pub cell: PeriodCell,
    /// Offsets relative to the anchor on the level-`step` lattice.
    pub coefficients: BTreeMap<LatticeIndex, C64>,
    /// Eigenvalue minus `|kappa|^{2l}`.
    pub shift: f64,
    pub series_shift: Option<f64>,
    /// `<Psi_n, Psi~_{n-1}> / |Q_n|` after the phase rotation.
    pub overlap: C64,
}

impl BlochWave {
    /// `Psi_0 = e^{i <kappa, x>}` on the level-1 lattice.
    pub fn plane(model: &Model, kappa: Vec2) -> Result<Self> {
        let mut coefficients = BTreeMap::new();
        coefficients.insert(LatticeIndex::ZERO, C64::new(1.0, 0.0));
        Ok(BlochWave { step: 0, kappa, cell: model.cell(1)?, coefficients, shift: 0.0, series_shift: None, overlap: C64::new(1.0, 0.0) })
    }

    pub fn norm_sq(&self) -> f64 {
        self.coefficients.values().map(|c| c.norm_sqr()).sum()
    }

    /// Coefficients re-indexed onto the finer `target` lattice.
    pub fn embedded(&self, target: &PeriodCell) -> BTreeMap<LatticeIndex, C64> {
        let f = (target.refinement / self.cell.refinement) as i64;
        self.coefficients.iter().map(|(r, c)| (r.scale(f), *c)).collect()
    }

    pub fn evaluate(&self, x: Vec2) -> C64 {
        self.coefficients
            .iter()
            .map(|(r, c)| {
                let o = self.cell.offset(*r);
                let ph = (self.kappa[0] + o[0]) * x[0] + (self.kappa[1] + o[1]) * x[1];
                c * C64::from_polar(1.0, ph)
            })
            .sum()
    }

    pub fn max_index(&self) -> i64 {
        self.coefficients.keys().map(|r| r.j1.abs().max(r.j2.abs())).max().unwrap_or(0)
    }
}

fn inner(a: &BTreeMap<LatticeIndex, C64>, b: &BTreeMap<LatticeIndex, C64>) -> C64 {
    a.iter().filter_map(|(r, c)| b.get(r).map(|d| c * d.conj())).sum()
}

/// Rotates `wave` so that `<wave, reference>` is real and positive.
pub fn fix_phase(wave: &mut BlochWave, reference: &BlochWave) -> Result<()> {
    let ov = inner(&wave.coefficients, &reference.embedded(&wave.cell));
    if ov.norm() < 1e-8 {
        return Err(Error::PhaseUndetermined { overlap: ov.norm() });
    }
    let rot = ov.conj() / ov.norm();
    for c in wave.coefficients.values_mut() {
        *c *= rot;
    }
    wave.overlap = C64::new(ov.norm(), 0.0);
    Ok(())
}

/// Oracle eigenvector of `H^{(n)}` attached to `kappa`, normalized and
/// phase-fixed against `reference` (the previous step's wave; the plane
/// wave at `n = 1`, built when `None`).
pub fn assemble_wave(model: &Model, kappa: Vec2, step: u32, reference: Option<&BlochWave>) -> Result<BlochWave> {
    let prev = match reference {
        Some(r) => r.clone(),
        None if step == 1 => BlochWave::plane(model, kappa)?,
        None => assemble_wave(model, kappa, step - 1, None)?,
    };
    if prev.kappa != kappa {
        return Err(Error::MismatchedKappa);
    }
    let cell = model.cell(step)?;
    let w = model.cumulative(step)?;
    let m = assemble_anchored(kappa, w, &cell, &model.cfg)?;
    let pos = m.anchor.expect("anchored matrix");
    let pair = refine_eigenpair(&m, pos)?;
    let j = m.indices[pos];
    let nrm = pair.vector.norm();
    let coefficients = m.indices.iter().zip(pair.vector.iter()).map(|(i, c)| (*i - j, c / nrm)).collect();
    let series_shift = eigenvalue_series(model, 1.0, kappa, step, model.cfg.r_max as usize, true).ok().map(|s| s.shift());
    let mut wave = BlochWave { step, kappa, cell, coefficients, shift: pair.value, series_shift, overlap: C64::new(0.0, 0.0) };
    fix_phase(&mut wave, &prev)?;
    Ok(wave)
}

/// Step-1 wave with the eigenvector from the Schur complement on a ball
/// of `hops` couplings; coefficients outside the ball are zero.
pub fn assemble_wave_local(model: &Model, kappa: Vec2, hops: usize) -> Result<BlochWave> {
    let plane = BlochWave::plane(model, kappa)?;
    if model.potential.is_zero() {
        let mut w = plane;
        w.step = 1;
        return Ok(w);
    }
    let cell = model.cell(1)?;
    let m = assemble_anchored(kappa, model.cumulative(1)?, &cell, &model.cfg)?;
    let pos = m.anchor.expect("anchored matrix");
    let scope: Vec<usize> = m.ball(pos, hops).into_iter().filter(|&b| b != pos).collect();
    let pair = refine_on(&m, pos, &scope)?;
    let j = m.indices[pos];
    let coefficients = m
        .indices
        .iter()
        .zip(pair.vector.iter())
        .filter(|(_, c)| c.norm() > 0.0)
        .map(|(i, c)| (*i - j, *c))
        .collect();
    let mut wave = BlochWave { step: 1, kappa, cell, coefficients, shift: pair.value, series_shift: None, overlap: C64::new(0.0, 0.0) };
    fix_phase(&mut wave, &plane)?;
    Ok(wave)
}

/// Wave from the first column of the projection series at `r_max`,
/// restricted to the projection's ball.
pub fn wave_from_projection(model: &Model, kappa: Vec2, step: u32, r_max: usize) -> Result<BlochWave> {
    let p = projection_series(model, 1.0, kappa, step, r_max, true, false)?;
    let col = p.projector.column(0);
    let nrm = col.norm();
    let coefficients = p.problem.nodes.iter().zip(col.iter()).map(|(q, c)| (*q, c / nrm)).collect();
    let mut wave = BlochWave {
        step,
        kappa,
        cell: model.cell(step)?,
        coefficients,
        shift: eigenvalue_series(model, 1.0, kappa, step, r_max, true)?.shift(),
        series_shift: None,
        overlap: C64::new(0.0, 0.0),
    };
    let plane = BlochWave::plane(model, kappa)?;
    fix_phase(&mut wave, &plane)?;
    Ok(wave)
}

/// `||(H^{(n)} - lambda) Psi||_2 / ||Psi||_2` in coefficient space, with
/// `lambda = |kappa|^{2l} + shift`; rows outside the support included.
pub fn residual(model: &Model, wave: &BlochWave, shift: f64) -> Result<f64> {
    let l = model.l();
    let w = model.cumulative(wave.step.max(1))?;
    let f = (wave.cell.refinement / model.cell(wave.step.max(1))?.refinement) as i64;
    let mut out: BTreeMap<LatticeIndex, C64> = BTreeMap::new();
    for (r, c) in &wave.coefficients {
        let d = symbol_shift(wave.kappa, wave.cell.offset(*r), l) - shift;
        *out.entry(*r).or_default() += d * c;
        for (q, v) in &w.coefficients {
            *out.entry(*r + q.scale(f)).or_default() += v * c;
        }
    }
    let num: f64 = out.values().map(|z| z.norm_sqr()).sum();
    Ok((num / wave.norm_sq()).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct Field {
    pub cell: PeriodCell,
    pub coefficients: BTreeMap<LatticeIndex, C64>,
    /// Max over the grid.
    pub sampled_sup: f64,
    /// `sum |coefficient|`, an upper bound for the sup norm.
    pub l1_bound: f64,
    pub grid: usize,
}

/// Grid size per period: 8 points per shortest potential period.
pub fn grid_size(model: &Model, step: u32) -> Result<usize> {
    let w = model.cumulative(step)?;
    Ok(8 * w.max_index().max(1) as usize)
}

fn periodic_sup(cell: &PeriodCell, coeffs: &BTreeMap<LatticeIndex, C64>, grid: usize) -> f64 {
    let per = cell.period();
    let mut best: f64 = 0.0;
    for a in 0..grid {
        for b in 0..grid {
            let y = [per[0] * a as f64 / grid as f64, per[1] * b as f64 / grid as f64];
            let v: C64 = coeffs
                .iter()
                .map(|(r, c)| {
                    let o = cell.offset(*r);
                    c * C64::from_polar(1.0, o[0] * y[0] + o[1] * y[1])
                })
                .sum();
            best = best.max(v.norm());
        }
    }
    best
}

/// `u~_n = e^{-i<kappa, x>} (Psi_n - Psi~_{n-1})`, periodic on the
/// level-`n` lattice.
pub fn u_component(model: &Model, psi: &BlochWave, prev: &BlochWave) -> Result<Field> {
    if psi.kappa != prev.kappa {
        return Err(Error::MismatchedKappa);
    }
    let mut coefficients = psi.coefficients.clone();
    for (r, c) in prev.embedded(&psi.cell) {
        *coefficients.entry(r).or_default() -= c;
    }
    let grid = grid_size(model, psi.step.max(1))?;
    let sampled_sup = periodic_sup(&psi.cell, &coefficients, grid);
    let l1_bound = coefficients.values().map(|c| c.norm()).sum();
    Ok(Field { cell: psi.cell, coefficients, sampled_sup, l1_bound, grid })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SupGap {
    pub grid_max: f64,
    pub l1_bound: f64,
    pub grid: usize,
}

/// `||Psi_{n+1} - Psi~_n||_inf` on a grid over `Q_{n+1}` and its
/// coefficient-l1 bound.
pub fn sup_norm_gap(model: &Model, next: &BlochWave, prev: &BlochWave) -> Result<SupGap> {
    let u = u_component(model, next, prev)?;
    Ok(SupGap { grid_max: u.sampled_sup, l1_bound: u.l1_bound, grid: u.grid })
}

/// `(sum (1 + |kappa + p_r|^2)^{2l} |d_r|^2)^{1/2}` for a coefficient difference.
pub fn sobolev_norm(kappa: Vec2, cell: &PeriodCell, coeffs: &BTreeMap<LatticeIndex, C64>, l: u32) -> f64 {
    coeffs
        .iter()
        .map(|(r, c)| {
            let o = cell.offset(*r);
            let p2 = (kappa[0] + o[0]).powi(2) + (kappa[1] + o[1]).powi(2);
            (1.0 + p2).powi(2 * l as i32) * c.norm_sqr()
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaTrack {
    pub kappa: Vec2,
    pub free: f64,
    /// `lambda^{(n)} - |kappa|^{2l}`, `n = 1..N`.
    pub shifts: Vec<f64>,
    /// `|lambda^{(n+1)} - lambda^{(n)}|`.
    pub gaps: Vec<f64>,
    /// Each gap at most `10 x` the square of the previous.
    pub cauchy: bool,
}

pub fn lambda_track(model: &Model, kappa: Vec2, steps: u32) -> Result<LambdaTrack> {
    let free = symbol(kappa, model.l());
    if model.potential.is_zero() {
        return Ok(LambdaTrack { kappa, free, shifts: vec![0.0; steps as usize], gaps: vec![0.0; steps.saturating_sub(1) as usize], cauchy: true });
    }
    let mut shifts = Vec::new();
    for n in 1..=steps {
        let s = eigenvalue_series(model, 1.0, kappa, n, model.cfg.r_max as usize, true).map_err(|_| Error::ResonanceEntered { step: n })?;
        shifts.push(s.shift());
    }
    let gaps: Vec<f64> = shifts.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let first = shifts.first().map(|s| s.abs()).unwrap_or(0.0);
    let mut cauchy = true;
    let mut prev = first;
    for g in &gaps {
        if *g > 10.0 * prev * prev && *g > 0.0 {
            cauchy = false;
        }
        prev = *g;
    }
    Ok(LambdaTrack { kappa, free, shifts, gaps, cauchy })
}

#[derive(Debug, Clone, Serialize)]
pub struct StepConvergence {
    pub step: u32,
    pub residual: f64,
    pub u_sup: f64,
    pub u_l1: f64,
    pub sobolev: f64,
    /// `||Psi_n - Psi~_{n-1}||_{L_2(Q_n)} / |Q_n|^{1/2}`.
    pub l2_gap: f64,
    /// Bound shape for the step (`4k^{-gamma_0}` at step 1).
    pub l2_bound: Option<f64>,
    pub u_bound: Option<f64>,
    /// `gap / (k^{2l} eps_{n-1}^3)` for `n >= 2`, the empirical constant.
    pub constant: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub kappa: Vec2,
    pub lambda: f64,
    pub steps: Vec<StepConvergence>,
}

pub fn convergence_report(model: &Model, kappa: Vec2, steps: u32) -> Result<ConvergenceReport> {
    let mut prev = BlochWave::plane(model, kappa)?;
    let mut out = Vec::new();
    let k = model.k();
    let mut lambda = symbol(kappa, model.l());
    for n in 1..=steps {
        let psi = assemble_wave(model, kappa, n, Some(&prev))?;
        let u = u_component(model, &psi, &prev)?;
        let l2_gap = u.coefficients.values().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let constant = if n >= 2 {
            let e = model.epsilon(n - 1)?.value;
            Some(u.sampled_sup / (k.powi(2 * model.l() as i32) * e.powi(3)))
        } else {
            None
        };
        out.push(StepConvergence {
            step: n,
            residual: residual(model, &psi, psi.shift)?,
            u_sup: u.sampled_sup,
            u_l1: u.l1_bound,
            sobolev: sobolev_norm(kappa, &psi.cell, &u.coefficients, model.l()),
            l2_gap,
            l2_bound: (n == 1).then(|| 4.0 * k.powf(-model.exps.gamma0)),
            u_bound: (n == 1).then(|| 9.0 * k.powf(-model.exps.gamma1)),
            constant,
        });
        lambda = symbol(kappa, model.l()) + psi.shift;
        prev = psi;
    }
    Ok(ConvergenceReport { kappa, lambda, steps: out })
}

#[derive(Debug, Clone, Serialize)]
pub struct BetheSommerfeldPoint {
    pub lambda: f64,
    pub phi: f64,
    pub kappa: f64,
    /// `|lambda^{(N)}(kappa nu) - lambda|`.
    pub mismatch: f64,
    pub tolerance: f64,
}

/// For each energy, solves the step-`steps` curve at the midpoint of the
/// longest arc of `Theta_1` and reports the eigenvalue mismatch.
pub fn bethe_sommerfeld_probe(cfg: &Config, lambdas: &[f64], steps: u32) -> Result<Vec<BetheSommerfeldPoint>> {
    let mut out = Vec::new();
    for &lam in lambdas {
        let k = lam.powf(1.0 / (2.0 * cfg.l as f64));
        let model = Model::new(cfg.with_k(k))?;
        let theta = carve_chi1(&model)?;
        let (a, b) = theta.arcs().iter().copied().max_by(|x, y| (x.1 - x.0).total_cmp(&(y.1 - y.0))).ok_or(Error::EmptyDomain)?;
        let phi = 0.5 * (a + b);
        let h = kappa_value(&model, phi, steps, model.cfg.r_max as usize)?;
        let x = [(k + h) * phi.cos(), (k + h) * phi.sin()];
        let s = eigenvalue_series(&model, 1.0, x, steps, model.cfg.r_max as usize, true)?;
        let radial = crate::lattice::radial_symbol_shift(k, h, cfg.l);
        let tol = model.epsilon(steps)?.value;
        out.push(BetheSommerfeldPoint { lambda: lam, phi, kappa: k + h, mismatch: (radial + s.shift()).abs(), tolerance: tol });
    }
    Ok(out)
}

/// `x1, x2, Re Psi, Im Psi, |u|` on a `grid x grid` sample of the period.
pub fn wave_csv(wave: &BlochWave, grid: usize) -> String {
    let per = wave.cell.period();
    let mut s = String::from("x1,x2,re_psi,im_psi,abs_u\n");
    for a in 0..grid {
        for b in 0..grid {
            let y = [per[0] * a as f64 / grid as f64, per[1] * b as f64 / grid as f64];
            let psi = wave.evaluate(y);
            let carrier = C64::from_polar(1.0, wave.kappa[0] * y[0] + wave.kappa[1] * y[1]);
            let u = psi / carrier - 1.0;
            let _ = writeln!(s, "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}", y[0], y[1], psi.re, psi.im, u.norm());
        }
    }
    s
}

/// Heatmap of `|u|` over one period.
pub fn wave_svg(wave: &BlochWave, grid: usize) -> String {
    let per = wave.cell.period();
    let cellpx = 320.0 / grid as f64;
    let mut vals = Vec::with_capacity(grid * grid);
    for a in 0..grid {
        for b in 0..grid {
            let y = [per[0] * (a as f64 + 0.5) / grid as f64, per[1] * (b as f64 + 0.5) / grid as f64];
            let carrier = C64::from_polar(1.0, wave.kappa[0] * y[0] + wave.kappa[1] * y[1]);
            vals.push((wave.evaluate(y) / carrier - 1.0).norm());
        }
    }
    let max = vals.iter().copied().fold(0.0, f64::max);
    let mut s = String::from("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"320\" height=\"320\" viewBox=\"0 0 320 320\">\n");
    for a in 0..grid {
        for b in 0..grid {
            let v = if max > 0.0 { vals[a * grid + b] / max } else { 0.0 };
            let g = (255.0 * (1.0 - v)).round() as u8;
            let _ = writeln!(s, "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({g},{g},255)\"/>", a as f64 * cellpx, 320.0 - (b + 1) as f64 * cellpx, cellpx, cellpx);
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_config::HarmonicEntry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(k: f64, c: f64) -> Model {
        let mut cfg = Config::new(6, k);
        if c != 0.0 {
            cfg.harmonics.push(HarmonicEntry { level: 1, index: [1, 0], re: c, im: 0.0 });
        }
        Model::new(cfg).unwrap()
    }

    fn two_level(k: f64) -> Model {
        let mut cfg = Config::new(6, k);
        cfg.s1 = 0.2;
        cfg.n_steps = 2;
        cfg.harmonics.push(HarmonicEntry { level: 1, index: [1, 0], re: 0.25, im: 0.0 });
        cfg.harmonics.push(HarmonicEntry { level: 1, index: [0, 1], re: 0.25, im: 0.0 });
        cfg.harmonics.push(HarmonicEntry { level: 2, index: [1, 0], re: 2.5e-4, im: 0.0 });
        cfg.harmonics.push(HarmonicEntry { level: 2, index: [1, 1], re: 2.5e-4, im: 0.0 });
        Model::new(cfg).unwrap()
    }

    fn anchor(k: f64, phi: f64) -> Vec2 {
        [k * phi.cos(), k * phi.sin()]
    }

    #[test]
    fn free_wave_is_plane() {
        let m = model(16.0, 0.0);
        let x = anchor(16.0, 0.4);
        let w = assemble_wave(&m, x, 1, None).unwrap();
        assert_eq!(w.coefficients[&LatticeIndex::ZERO], C64::new(1.0, 0.0));
        assert!(w.coefficients.iter().all(|(r, c)| r.is_zero() || c.norm() == 0.0));
        let u = u_component(&m, &w, &BlochWave::plane(&m, x).unwrap()).unwrap();
        assert_eq!(u.l1_bound, 0.0);
        assert!(residual(&m, &w, 0.0).unwrap() < 1e-14 * m.lambda());
    }

    #[test]
    fn normalization_phase_and_quasiperiodicity() {
        let m = model(16.0, 1e-3);
        let x = anchor(16.0, 0.3);
        let w = assemble_wave(&m, x, 1, None).unwrap();
        assert!((w.norm_sq() - 1.0).abs() < 1e-10);
        let c0 = w.coefficients[&LatticeIndex::ZERO];
        assert!(c0.im.abs() < 1e-10 * c0.norm() && c0.re > 0.0);
        let mut again = w.clone();
        fix_phase(&mut again, &BlochWave::plane(&m, x).unwrap()).unwrap();
        let drift = w.coefficients.iter().map(|(r, c)| (c - again.coefficients[r]).norm()).fold(0.0, f64::max);
        assert!(drift < 1e-12);
        assert!(residual(&m, &w, w.shift).unwrap() < 1e-9 * m.lambda());
        let per = w.cell.period();
        let (t, _) = crate::lattice::reduce_to_cell(x, &w.cell);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let y = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
            for d in [[per[0], 0.0], [0.0, per[1]]] {
                let lhs = w.evaluate([y[0] + d[0], y[1] + d[1]]);
                let rhs = C64::from_polar(1.0, t.t[0] * d[0] + t.t[1] * d[1]) * w.evaluate(y);
                assert!((lhs - rhs).norm() < 1e-10, "{lhs} {rhs}");
            }
        }
    }

    #[test]
    fn residual_decreases_with_order() {
        let m = model(16.0, 1e-3);
        let x = anchor(16.0, 0.3);
        let exact = assemble_wave(&m, x, 1, None).unwrap();
        let r2 = residual(&m, &wave_from_projection(&m, x, 1, 2).unwrap(), exact.shift).unwrap();
        let r4 = residual(&m, &wave_from_projection(&m, x, 1, 4).unwrap(), exact.shift).unwrap();
        assert!(r4 <= r2, "{r2} {r4}");
    }

    #[test]
    fn two_step_waves() {
        let m = two_level(16.0);
        let x = anchor(16.0, 0.3);
        let rep = convergence_report(&m, x, 2).unwrap();
        let (s1, s2) = (&rep.steps[0], &rep.steps[1]);
        assert!(s1.residual < 1e-9 * m.lambda() && s2.residual < 1e-9 * m.lambda());
        assert!(s2.u_sup < 1e-2 * s1.u_sup, "{} {}", s1.u_sup, s2.u_sup);
        assert!(s1.u_sup <= s1.u_l1 && s2.u_sup <= s2.u_l1);
        // telescoping: u_1 + u_2 = Psi_2 e^{-i kappa x} - 1 in coefficients
        let p0 = BlochWave::plane(&m, x).unwrap();
        let p1 = assemble_wave(&m, x, 1, None).unwrap();
        let p2 = assemble_wave(&m, x, 2, Some(&p1)).unwrap();
        let u1 = u_component(&m, &p1, &p0).unwrap();
        let u2 = u_component(&m, &p2, &p1).unwrap();
        let f = (p2.cell.refinement / p1.cell.refinement) as i64;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let y = [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)];
            let carrier = C64::from_polar(1.0, x[0] * y[0] + x[1] * y[1]);
            let lhs = p2.evaluate(y) / carrier - 1.0;
            let ev = |cell: &PeriodCell, c: &BTreeMap<LatticeIndex, C64>| -> C64 {
                c.iter().map(|(r, v)| {
                    let o = cell.offset(*r);
                    v * C64::from_polar(1.0, o[0] * y[0] + o[1] * y[1])
                }).sum()
            };
            let rhs = ev(&u1.cell, &u1.coefficients) + ev(&u2.cell, &u2.coefficients);
            assert!((lhs - rhs).norm() < 1e-10);
        }
        assert!(f >= 1);
        let track = lambda_track(&m, x, 2).unwrap();
        assert!(track.gaps[0] < 1e-2 * track.shifts[0].abs());
    }
}
