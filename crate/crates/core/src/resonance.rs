//! Perturbation determinants `det[(H^{(n-1)}(y) - lambda - eps)(H_0(y) + lambda)^{-1}]`
//! along the shifted curve `y(phi) = kappa_{n-1}(phi) nu(phi) + b`, zero
//! counting by the argument principle, and the Swiss-cheese regions.
//!
//! Diagonal entries are kept relative to `lambda = k^{2l}`: with
//! `c = b + p_i`, `(y + p_i)^2 - k^2 = 2kh + h^2 + 2(k + h) nu.c + c.c`.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::isoenergetic::{AngleSet, HoleTag, IsoCurve};
use crate::lattice::{power_difference_c, shift_set_nonzero, symbol_shift, LatticeIndex, PeriodCell, Vec2};
use crate::model::Model;
use crate::perturbation::{eigenvalue_series, oracle_shift};
use crate::potential::WindowPotential;

type C64 = Complex64;

/// Remainder beyond the far shell, in `log|det|`.
pub const FAR_TAIL: f64 = 1e-10;
/// Zero-location tolerance of the Newton refinement.
pub const ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum DetScope {
    /// LU over every index with `|y + p| <= trunc_radius`.
    Full,
    /// LU over the coupling ball of `hops` hops around the near-resonant
    /// indices; other factors diagonal.
    Local { hops: usize },
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DetSample {
    pub phi: C64,
    pub shift: Vec2,
    pub eps: f64,
    pub step: u32,
    /// `log det`, imaginary part modulo `2 pi`.
    pub log_value: C64,
    /// `min |pivot / normalizer|`.
    pub min_factor: f64,
    /// Bound on the omitted factors beyond the far shell.
    pub tail: f64,
    pub lu_dim: usize,
}

impl DetSample {
    pub fn value(&self) -> C64 {
        self.log_value.exp()
    }
}

/// Degree-4 local continuation of `h = kappa - k` from the real samples.
#[derive(Debug, Clone)]
pub struct CurveContinuation {
    phis: Vec<f64>,
    hs: Vec<f64>,
    /// Start index of the run each sample belongs to.
    run: Vec<usize>,
    run_end: Vec<usize>,
}

impl CurveContinuation {
    pub fn new(curve: &IsoCurve) -> Self {
        let n = curve.samples.len();
        let phis: Vec<f64> = curve.samples.iter().map(|s| s.phi).collect();
        let hs = curve.samples.iter().map(|s| s.h).collect();
        let mut run = vec![0; n];
        let mut run_end = vec![n; n];
        let mut start = 0;
        for i in 1..=n {
            let brk = i == n || (phis[i] - phis[i - 1] - curve.spacing[i]).abs() > 1e-12;
            if brk {
                for j in start..i {
                    run[j] = start;
                    run_end[j] = i;
                }
                start = i;
            }
        }
        CurveContinuation { phis, hs, run, run_end }
    }

    fn stencil(&self, i0: usize, z: C64) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for a in i0..i0 + 5 {
            let mut w = C64::new(1.0, 0.0);
            for b in i0..i0 + 5 {
                if a != b {
                    w *= (z - self.phis[b]) / (self.phis[a] - self.phis[b]);
                }
            }
            acc += w * self.hs[a];
        }
        acc
    }

    /// `(h(z), error)`, the error from a second stencil shifted by one sample.
    pub fn eval(&self, z: C64) -> (C64, f64) {
        if self.phis.is_empty() {
            return (C64::new(0.0, 0.0), 0.0);
        }
        let re = z.re.rem_euclid(TAU);
        let z = C64::new(re, z.im);
        let i = match self.phis.binary_search_by(|p| p.total_cmp(&re)) {
            Ok(i) => i,
            Err(i) => i.min(self.phis.len() - 1),
        };
        let (lo, hi) = (self.run[i], self.run_end[i]);
        if hi - lo < 6 {
            return (C64::new(self.hs[i], 0.0), 0.0);
        }
        let i0 = i.saturating_sub(2).clamp(lo, hi - 5);
        let alt = if i0 + 6 <= hi { i0 + 1 } else { i0 - 1 };
        let a = self.stencil(i0, z);
        let b = self.stencil(alt, z);
        (a, (a - b).norm())
    }
}

/// Evaluation context for the step-`n` determinant.
#[derive(Debug, Clone)]
pub struct DetContext {
    pub step: u32,
    pub k: f64,
    pub l: u32,
    pub lambda: f64,
    pub scope: DetScope,
    pub near_radius: f64,
    pub far_radius: f64,
    cell: PeriodCell,
    window: WindowPotential,
    curve: Option<CurveContinuation>,
    candidates: Vec<(LatticeIndex, Vec2)>,
}

fn tail_estimate(lambda: f64, l: u32, dual_area: f64, r: f64) -> f64 {
    2.0 * lambda * TAU * r.powf(2.0 - 2.0 * l as f64) / ((2.0 * l as f64 - 2.0) * dual_area)
}

impl DetContext {
    /// Step `n >= 1`; `curve` is the step-`(n-1)` curve (ignored at `n = 1`).
    pub fn new(model: &Model, step: u32, curve: Option<&IsoCurve>, scope: DetScope) -> Result<Self> {
        if step == 0 {
            return Err(Error::ParameterDomain { name: "step", value: 0.0 });
        }
        let lvl = (step - 1).max(1);
        let cell = model.cell(lvl)?;
        let window = if step == 1 { WindowPotential::zero(0, model.exps.m(1)) } else { model.cumulative(step - 1)?.clone() };
        let k = model.k();
        let l = model.l();
        let lambda = model.lambda();
        let e = cell.extent();
        let area = e[0] * e[1];
        let mut far = model.cfg.trunc_radius;
        while tail_estimate(lambda, l, area, far) > FAR_TAIL {
            far *= 1.25;
        }
        let margin = 2.0 * k + 2.0 * e[0].max(e[1]) + 1.0;
        let candidates = cell.indices_within(far + margin).into_iter().map(|i| (i, cell.offset(i))).collect();
        Ok(DetContext {
            step,
            k,
            l,
            lambda,
            scope,
            near_radius: model.cfg.trunc_radius,
            far_radius: far,
            cell,
            window,
            curve: if step == 1 { None } else { curve.map(CurveContinuation::new) },
            candidates,
        })
    }

    pub fn with_scope(&self, scope: DetScope) -> Self {
        DetContext { scope, ..self.clone() }
    }

    pub fn cell(&self) -> &PeriodCell {
        &self.cell
    }

    /// `h_{n-1}(phi)` continued to complex `phi`.
    pub fn h(&self, phi: C64) -> C64 {
        self.curve.as_ref().map(|c| c.eval(phi).0).unwrap_or(C64::new(0.0, 0.0))
    }

    /// `log det` of the step's determinant at `phi`.
    pub fn eval(&self, phi: C64, b: Vec2, eps: f64) -> Result<DetSample> {
        let k = self.k;
        let h = self.h(phi);
        let nu = [phi.cos(), phi.sin()];
        let kh = C64::new(k, 0.0) + h;
        let y_re = [kh.re * nu[0].re + b[0], kh.re * nu[1].re + b[1]];
        let k2 = C64::new(k * k, 0.0);
        let lam = C64::new(self.lambda, 0.0);
        let mut idx = Vec::new();
        let mut diag = Vec::new();
        let mut norm = Vec::new();
        let mut near = Vec::new();
        for (i, o) in &self.candidates {
            let r = ((y_re[0] + o[0]).powi(2) + (y_re[1] + o[1]).powi(2)).sqrt();
            if r > self.far_radius {
                continue;
            }
            let c = [b[0] + o[0], b[1] + o[1]];
            let dd = 2.0 * k * h + h * h + 2.0 * kh * (nu[0] * c[0] + nu[1] * c[1]) + C64::new(c[0] * c[0] + c[1] * c[1], 0.0);
            let d = power_difference_c(k2 + dd, k2, dd, self.l);
            let nv = d + 2.0 * lam;
            if nv.norm() < 1e-12 * self.lambda {
                return Err(Error::SingularNormalizer { value: nv.norm() });
            }
            idx.push(*i);
            diag.push(d - eps);
            norm.push(nv);
            near.push(r <= self.near_radius);
        }
        let lu_set: Vec<usize> = match self.scope {
            DetScope::Full => (0..idx.len()).filter(|&a| near[a]).collect(),
            DetScope::Local { hops } => {
                let thr = 2.0 * self.l as f64 * k.powi(2 * self.l as i32 - 1);
                let seeds: Vec<usize> = (0..idx.len()).filter(|&a| near[a] && diag[a].norm() <= thr).collect();
                self.ball(&idx, &near, &seeds, hops)
            }
        };
        let mut in_lu = vec![false; idx.len()];
        for &a in &lu_set {
            in_lu[a] = true;
        }
        let mut log = C64::new(0.0, 0.0);
        let mut min_factor = f64::INFINITY;
        for a in 0..idx.len() {
            if !in_lu[a] {
                let f = diag[a] / norm[a];
                min_factor = min_factor.min(f.norm());
                log += f.ln();
            }
        }
        if !lu_set.is_empty() {
            let (l_lu, mf) = log_det_ratio(&self.lu_matrix(&idx, &diag, &lu_set), &lu_set.iter().map(|&a| norm[a]).collect::<Vec<_>>());
            log += l_lu;
            min_factor = min_factor.min(mf);
        }
        let e = self.cell.extent();
        Ok(DetSample {
            phi,
            shift: b,
            eps,
            step: self.step,
            log_value: log,
            min_factor,
            tail: tail_estimate(self.lambda, self.l, e[0] * e[1], self.far_radius),
            lu_dim: lu_set.len(),
        })
    }

    fn ball(&self, idx: &[LatticeIndex], near: &[bool], seeds: &[usize], hops: usize) -> Vec<usize> {
        let pos: HashMap<LatticeIndex, usize> = idx.iter().enumerate().filter(|(a, _)| near[*a]).map(|(a, i)| (*i, a)).collect();
        let mut seen: Vec<bool> = vec![false; idx.len()];
        let mut frontier: Vec<usize> = seeds.to_vec();
        for &s in seeds {
            seen[s] = true;
        }
        for _ in 0..hops {
            let mut next = Vec::new();
            for &a in &frontier {
                for q in self.window.coefficients.keys() {
                    if let Some(&b) = pos.get(&(idx[a] - *q)) {
                        if !seen[b] {
                            seen[b] = true;
                            next.push(b);
                        }
                    }
                }
            }
            frontier = next;
        }
        (0..idx.len()).filter(|&a| seen[a]).collect()
    }

    fn lu_matrix(&self, idx: &[LatticeIndex], diag: &[C64], set: &[usize]) -> DMatrix<C64> {
        let n = set.len();
        let pos: HashMap<LatticeIndex, usize> = set.iter().enumerate().map(|(r, &a)| (idx[a], r)).collect();
        let mut m = DMatrix::<C64>::zeros(n, n);
        for (r, &a) in set.iter().enumerate() {
            m[(r, r)] += diag[a];
            for (q, c) in &self.window.coefficients {
                if let Some(&s) = pos.get(&(idx[a] - *q)) {
                    m[(r, s)] += c;
                }
            }
        }
        m
    }
}

/// `log(det m / prod normalizer)` by partial-pivoting LU, and the smallest
/// `|u_ii / normalizer_i|`.
pub fn log_det_ratio(m: &DMatrix<C64>, normalizer: &[C64]) -> (C64, f64) {
    let lu = m.clone().lu();
    let u = lu.u();
    let mut log = C64::new(0.0, 0.0);
    let mut min_factor = f64::INFINITY;
    for (i, nv) in normalizer.iter().enumerate() {
        let f = u[(i, i)] / nv;
        min_factor = min_factor.min(f.norm());
        log += f.ln();
    }
    if lu.p().determinant::<f64>() < 0.0 {
        log += C64::new(0.0, PI);
    }
    (log, min_factor)
}

/// Free determinant `prod (p_i^{2l}(y_0) - lambda) / (p_i^{2l}(y_0) + lambda)`,
/// `y_0 = k nu(phi) + b`, over the level-1 lattice out to the far shell.
#[allow(non_snake_case)]
pub fn detA_free(model: &Model, phi: C64, b: Vec2) -> Result<DetSample> {
    DetContext::new(model, 1, None, DetScope::Local { hops: 0 })?.eval(phi, b, 0.0)
}

/// Step-`n` determinant with the full LU scope.
#[allow(non_snake_case)]
pub fn detA(ctx: &DetContext, phi: C64, b: Vec2, eps: f64) -> Result<DetSample> {
    ctx.eval(phi, b, eps)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct WindingCount {
    pub count: i64,
    pub raw: f64,
    pub nodes: usize,
    pub min_log_modulus: f64,
    pub max_log_modulus: f64,
}

/// Argument principle on the circle `|z - center| = radius`. `log_f`
/// returns `log f`; `f'` comes from central differences along the nodes.
pub fn count_zeros_disk<F>(log_f: F, center: C64, radius: f64, nodes: usize) -> Result<WindingCount>
where
    F: Fn(C64) -> Result<C64>,
{
    let dt = TAU / nodes as f64;
    let z: Vec<C64> = (0..nodes).map(|j| center + radius * C64::from_polar(1.0, j as f64 * dt)).collect();
    let logs: Vec<C64> = z.iter().map(|&p| log_f(p)).collect::<Result<_>>()?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for l in &logs {
        lo = lo.min(l.re);
        hi = hi.max(l.re);
    }
    if !(lo.is_finite() && hi.is_finite()) || lo - hi < (1e3 * f64::EPSILON).ln() {
        return Err(Error::ZeroOnContour { min: (lo - hi).exp() });
    }
    let mut sum = C64::new(0.0, 0.0);
    for j in 0..nodes {
        let (a, c) = ((j + nodes - 1) % nodes, (j + 1) % nodes);
        let fp_over_f = ((logs[c] - logs[j]).exp() - (logs[a] - logs[j]).exp()) / (z[c] - z[a]);
        let dz = C64::new(0.0, 1.0) * (z[j] - center) * dt;
        sum += fp_over_f * dz;
    }
    let raw = (sum / C64::new(0.0, TAU)).re;
    let count = raw.round();
    if (raw - count).abs() > 0.1 {
        return Err(Error::NonIntegerWinding { value: raw });
    }
    Ok(WindingCount { count: count as i64, raw, nodes, min_log_modulus: lo, max_log_modulus: hi })
}

/// Count with `nodes` and `2 nodes`; errors if they disagree.
pub fn count_zeros_stable<F>(log_f: F, center: C64, radius: f64, nodes: usize) -> Result<WindingCount>
where
    F: Fn(C64) -> Result<C64>,
{
    let a = count_zeros_disk(&log_f, center, radius, nodes)?;
    let b = count_zeros_disk(&log_f, center, radius, 2 * nodes)?;
    if a.count != b.count {
        return Err(Error::NonIntegerWinding { value: b.raw });
    }
    Ok(a)
}

/// Refines a zero of the determinant by Newton on `f / f'`, with `f'/f`
/// from a central difference of `log f`.
pub fn newton_zero<F>(log_f: F, seed: C64, max_step: f64) -> Result<(C64, usize)>
where
    F: Fn(C64) -> Result<C64>,
{
    let hd = 1e-9;
    let mut z = seed;
    for it in 1..=40 {
        let l0 = log_f(z)?;
        let lp = log_f(z + hd)?;
        let lm = log_f(z - hd)?;
        let g = ((lp - l0).exp() - (lm - l0).exp()) / (2.0 * hd);
        if g.norm() == 0.0 || !g.is_finite() {
            return Err(Error::Linalg("stalled zero refinement".into()));
        }
        let mut step = -g.inv();
        if step.norm() > max_step {
            step *= max_step / step.norm();
        }
        z += step;
        if (z - seed).norm() > 50.0 * max_step {
            return Err(Error::Linalg("zero refinement diverged".into()));
        }
        if step.norm() < 0.1 * ZERO_TOL {
            return Ok((z, it));
        }
    }
    Ok((z, 40))
}

/// `r^{(1)} = k^{-4-6 s_1-3 delta}`, `r^{(m+1)} = r^{(m)} k^{-2-4 s_{m+1}-delta}`.
pub fn nominal_radius(model: &Model, m: u32) -> f64 {
    let c = &model.cfg;
    let mut r = c.k.powf(-4.0 - 6.0 * c.s1 - 3.0 * c.delta);
    for j in 2..=m {
        r *= c.k.powf(-2.0 - 4.0 * model.exps.s(j) - c.delta);
    }
    r
}

/// `4^{n-1} c_0 k^{2 + 2 s_n}`.
pub fn disk_count_bound(model: &Model, n: u32) -> f64 {
    4f64.powi(n as i32 - 1) * model.exps.c0 * model.k().powf(2.0 + 2.0 * model.exps.s(n))
}

pub fn strip_half_width(model: &Model) -> f64 {
    let c = &model.cfg;
    c.k.powf(-2.0 - 4.0 * c.s1 - 2.0 * c.delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiskTag {
    pub step: u32,
    pub shift: LatticeIndex,
    /// Level-`(n-1)` index `i` of the vanishing factor, `c = b + p_i`.
    pub partner: LatticeIndex,
    pub seed: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Disk {
    pub center: C64,
    pub radius: f64,
    pub nominal_radius: f64,
    pub tag: DiskTag,
}

#[derive(Debug, Clone, Serialize)]
pub struct CountEntry {
    pub step: u32,
    pub count: usize,
    pub bound: f64,
    pub seeds: usize,
    pub newton_failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheeseRegion {
    pub step: u32,
    pub base: AngleSet,
    pub strip: f64,
    pub disks: Vec<Disk>,
    pub ledger: Vec<CountEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Membership {
    pub inside: bool,
    pub distance: f64,
}

impl CheeseRegion {
    pub fn strip(model: &Model, base: &AngleSet) -> Self {
        CheeseRegion { step: 1, base: base.clone(), strip: strip_half_width(model), disks: Vec::new(), ledger: Vec::new() }
    }

    pub fn membership(&self, z: C64) -> Membership {
        let re = z.re.rem_euclid(TAU);
        let in_base = self.base.contains(re);
        let d_re = self.base.distance_to_boundary(re);
        let d_im = self.strip - z.im.abs();
        let mut inside = in_base && d_im > 0.0;
        let mut dist = d_re.min(d_im.abs());
        for d in &self.disks {
            let mut delta = z - d.center;
            delta.re = (delta.re + PI).rem_euclid(TAU) - PI;
            let r = delta.norm();
            if r < d.radius {
                inside = false;
            }
            dist = dist.min((r - d.radius).abs());
        }
        Membership { inside, distance: dist }
    }

    /// `Phi_n` on the real axis.
    pub fn real_trace(&self) -> AngleSet {
        let mut set = self.base.clone();
        for d in &self.disks {
            if d.center.im.abs() < d.radius {
                let w = (d.radius * d.radius - d.center.im * d.center.im).sqrt();
                set.remove(d.center.re - w, d.center.re + w, d.center.re, HoleTag::DeterminantDisk { shift: d.tag.shift });
            }
        }
        set
    }

    pub fn ledger_json(&self) -> serde_json::Value {
        serde_json::json!({
            "step": self.step,
            "strip": self.strip,
            "disks": self.disks,
            "counts": self.ledger,
        })
    }

    /// Strip with holes; disks drawn at their recorded radius with a
    /// minimum visible size.
    pub fn svg(&self) -> String {
        let (w, h) = (800.0, 200.0);
        let sx = w / TAU;
        let sy = (h / 2.0 - 10.0) / self.strip;
        let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
        for (a, b) in self.base.arcs() {
            let _ = writeln!(s, "<rect x=\"{:.3}\" y=\"10\" width=\"{:.3}\" height=\"{:.3}\" fill=\"#dde\"/>", a * sx, (b - a) * sx, h - 20.0);
        }
        for d in &self.disks {
            let _ = writeln!(
                s,
                "<ellipse cx=\"{:.3}\" cy=\"{:.3}\" rx=\"{:.3}\" ry=\"{:.3}\" fill=\"white\" stroke=\"black\" stroke-width=\"0.3\"/>",
                d.center.re.rem_euclid(TAU) * sx,
                h / 2.0 - d.center.im * sy,
                (d.radius * sx).max(1.0),
                (d.radius * sy).max(1.0)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Refined shifts `b = 2 pi p / (N a)` on the step-`n` lattice, `p != 0`.
pub fn refined_shifts(model: &Model, step: u32) -> Result<Vec<(LatticeIndex, Vec2)>> {
    if step < 2 {
        return Ok(Vec::new());
    }
    let n = model.refinement(step - 1) as i64;
    let cell = model.cell(step)?;
    Ok(shift_set_nonzero(n).into_iter().map(|p| (p, cell.offset(p))).collect())
}

/// Free intersection angles of the factors of the step-`n` determinant:
/// `(shift, partner i, phi)` with `|k nu + b + p_i| = k`.
pub fn free_zero_seeds(model: &Model, step: u32) -> Result<Vec<(LatticeIndex, Vec2, LatticeIndex, f64)>> {
    use crate::isoenergetic::{circle_intersections, Intersections};
    let k = model.k();
    let cell = model.cell((step - 1).max(1))?;
    let mut out = Vec::new();
    for (p, b) in refined_shifts(model, step)? {
        let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
        for i in cell.indices_within(2.0 * k + nb + 1.0) {
            let o = cell.offset(i);
            let c = [b[0] + o[0], b[1] + o[1]];
            match circle_intersections(c, k) {
                Intersections::Two(a, z) => {
                    out.push((p, b, i, a));
                    out.push((p, b, i, z));
                }
                Intersections::Tangent(a) => out.push((p, b, i, a)),
                _ => {}
            }
        }
    }
    Ok(out)
}

/// Locates the zeros of the step-`n` determinant seeded at the free
/// intersection angles inside `base`, refines them, deduplicates at
/// `1e-10` and surrounds each with `max(nominal radius, 10 ZERO_TOL)`.
pub fn build_disk_set(model: &Model, step: u32, curve: Option<&IsoCurve>, base: &AngleSet, eps: f64) -> Result<(Vec<Disk>, CountEntry)> {
    let ctx = DetContext::new(model, step, curve, DetScope::Local { hops: 2 })?;
    let seeds = free_zero_seeds(model, step)?;
    let nominal = nominal_radius(model, step.saturating_sub(1).max(1));
    let radius = nominal.max(10.0 * ZERO_TOL);
    let strip = strip_half_width(model);
    let mut disks: Vec<Disk> = Vec::new();
    let mut failures = 0;
    let mut used = 0;
    for (si, (p, b, i, phi)) in seeds.iter().enumerate() {
        if !base.contains(*phi) && base.distance_to_boundary(*phi) > radius {
            continue;
        }
        used += 1;
        let f = |z: C64| ctx.eval(z, *b, eps).map(|s| s.log_value);
        let z = match newton_zero(f, C64::new(*phi, 0.0), strip) {
            Ok((z, _)) => z,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        let z = C64::new(z.re.rem_euclid(TAU), z.im);
        if disks.iter().any(|d| d.tag.shift == *p && (d.center - z).norm() < 1e-10) {
            continue;
        }
        disks.push(Disk { center: z, radius, nominal_radius: nominal, tag: DiskTag { step, shift: *p, partner: *i, seed: si } });
    }
    let bound = disk_count_bound(model, step);
    if disks.len() as f64 > bound {
        return Err(Error::DiskBoundViolation { count: disks.len(), bound });
    }
    Ok((disks.clone(), CountEntry { step, count: disks.len(), bound, seeds: used, newton_failures: failures }))
}

/// `Phi_n`: the strip over `base` minus the disks of steps `2..=n`.
/// `curves[m-1]` is the step-`m` curve.
pub fn swiss_cheese(model: &Model, n: u32, base: &AngleSet, curves: &[IsoCurve]) -> Result<CheeseRegion> {
    let mut region = CheeseRegion::strip(model, base);
    for step in 2..=n {
        let curve = curves.get(step as usize - 2);
        let (disks, entry) = build_disk_set(model, step, curve, base, 0.0)?;
        region.disks.extend(disks);
        region.ledger.push(entry);
        region.step = step;
    }
    Ok(region)
}

#[derive(Debug, Clone, Serialize)]
pub struct RoucheRow {
    pub alpha: f64,
    pub eps: f64,
    pub count: Option<i64>,
    pub radius: f64,
    pub attempts: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoucheReport {
    pub shift: LatticeIndex,
    pub component: Vec<f64>,
    pub merged: bool,
    pub center: f64,
    pub radius: f64,
    pub free_count: i64,
    pub rows: Vec<RoucheRow>,
    pub preserved: bool,
    /// First scale, from bisection, at which the count changes.
    pub margin: Option<f64>,
}

fn count_with_retry(ctx: &DetContext, b: Vec2, eps: f64, center: f64, radius: f64, nodes: usize) -> (Option<i64>, f64, usize) {
    let mut r = radius;
    for attempt in 1..=3 {
        let f = |z: C64| ctx.eval(z, b, eps).map(|s| s.log_value);
        match count_zeros_stable(f, C64::new(center, 0.0), r, nodes) {
            Ok(w) => return (Some(w.count), r, attempt),
            Err(_) => r *= 1.5,
        }
    }
    (None, r, 3)
}

/// Zero counts inside the bounding circle of the free disk component that
/// contains the free zero `phi0`, while the potential inside the
/// determinant is ramped through `alphas` and `eps` through `0, +-eps1`.
/// The curve `kappa_{n-1}` stays fixed.
pub fn rouche_experiment(model: &Model, step: u32, curve: Option<&IsoCurve>, shift: LatticeIndex, phi0: f64, alphas: &[f64]) -> Result<RoucheReport> {
    let seeds: Vec<f64> = free_zero_seeds(model, step)?.into_iter().filter(|s| s.0 == shift).map(|s| s.3).collect();
    let b = refined_shifts(model, step)?.into_iter().find(|(p, _)| *p == shift).map(|(_, b)| b).ok_or(Error::MissingLevel { level: step })?;
    let r = nominal_radius(model, step.saturating_sub(1).max(1)).max(10.0 * ZERO_TOL);
    let mut comp = vec![phi0];
    loop {
        let before = comp.len();
        for s in &seeds {
            if !comp.iter().any(|c| (c - s).abs() < 1e-15) && comp.iter().any(|c| (c - s).abs() < 2.0 * r) {
                comp.push(*s);
            }
        }
        if comp.len() == before {
            break;
        }
    }
    comp.sort_by(f64::total_cmp);
    let (lo, hi) = (comp[0], comp[comp.len() - 1]);
    let center = 0.5 * (lo + hi);
    let radius = 0.5 * (hi - lo) + 2.0 * r;
    let nodes = 64;
    let free_ctx = DetContext::new(model, 1, None, DetScope::Local { hops: 0 })?;
    let free = count_zeros_stable(|z| free_ctx.eval(z, b, 0.0).map(|s| s.log_value), C64::new(center, 0.0), radius, nodes)?;
    let eps1 = if step >= 2 { model.epsilon(step - 1)?.value } else { 0.0 };
    let count_at = |alpha: f64, eps: f64| -> Result<RoucheRow> {
        let scaled = model.scaled(alpha)?;
        let ctx = DetContext::new(&scaled, step, curve, DetScope::Local { hops: 2 })?;
        let (count, rr, attempts) = count_with_retry(&ctx, b, eps, center, radius, nodes);
        Ok(RoucheRow { alpha, eps, count, radius: rr, attempts })
    };
    let mut rows = Vec::new();
    for &alpha in alphas {
        for eps in [0.0, eps1, -eps1] {
            if eps1 == 0.0 && eps != 0.0 {
                continue;
            }
            rows.push(count_at(alpha, eps)?);
        }
    }
    let preserved = rows.iter().all(|r| r.count == Some(free.count));
    let mut margin = None;
    if !preserved {
        let first_bad = rows.iter().position(|r| r.count != Some(free.count)).unwrap();
        let bad = rows[first_bad].alpha;
        let good = rows.iter().take(first_bad).map(|r| r.alpha).fold(0.0, f64::max);
        let eps = rows[first_bad].eps;
        let (mut a, mut z) = (good.max(bad * 1e-12), bad);
        for _ in 0..30 {
            let mid = (a * z).sqrt();
            if count_at(mid, eps)?.count == Some(free.count) {
                a = mid;
            } else {
                z = mid;
            }
        }
        margin = Some(z);
    }
    Ok(RoucheReport { shift, component: comp.clone(), merged: comp.len() > 1, center, radius, free_count: free.count, rows, preserved, margin })
}

/// Shift of the level-`step` eigenvalue attached to the anchor `y`
/// relative to `|y|^{2l}`; series first, oracle on failure.
pub fn level_shift(model: &Model, y: Vec2, step: u32, r_max: usize) -> Result<f64> {
    match eigenvalue_series(model, 1.0, y, step, r_max, true) {
        Ok(s) => Ok(s.shift()),
        Err(_) => Ok(oracle_shift(model, y, step, 1.0, false)?.shift),
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GapWitness {
    pub shift: LatticeIndex,
    pub partner: LatticeIndex,
    /// `lambda^{(1)}(x + c) - lambda^{(1)}(x)`.
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GapTest {
    pub member: bool,
    pub witness: Option<GapWitness>,
    pub candidates: usize,
}

/// Gap test at the curve point `x = kappa_1(phi) nu`: member iff some
/// shifted point `x + c`, `c = b_p + p_i` with `p != 0`, carries a level-1
/// eigenvalue within `eps1` of the one at `x`. Pairs not involving the
/// eigenvalue at `x` are outside the `lambda`-window and not examined.
pub fn omega1_gap_test(model: &Model, x: Vec2, eps1: f64, r_max: usize) -> Result<GapTest> {
    let l = model.l();
    let cell = model.cell(1)?;
    let nx = (x[0] * x[0] + x[1] * x[1]).sqrt();
    let own = level_shift(model, x, 1, r_max)?;
    let scale = 2.0 * l as f64 * nx.powi(2 * l as i32 - 2);
    let mut best: Option<GapWitness> = None;
    let mut candidates = 0;
    for (p, b) in refined_shifts(model, 2)? {
        for i in cell.indices_within(2.0 * nx + 10.0) {
            let o = cell.offset(i);
            let c = [b[0] + o[0], b[1] + o[1]];
            let free = symbol_shift(x, c, l);
            // |Delta(p^2)| <= 1 covers eps1 plus any level-1 shift
            if free.abs() > scale + 10.0 * eps1 {
                continue;
            }
            candidates += 1;
            let y = [x[0] + c[0], x[1] + c[1]];
            let gap = free + level_shift(model, y, 1, r_max)? - own;
            if best.is_none_or(|w| gap.abs() < w.gap.abs()) {
                best = Some(GapWitness { shift: p, partner: i, gap });
            }
        }
    }
    let member = best.is_some_and(|w| w.gap.abs() <= eps1);
    Ok(GapTest { member, witness: if member { best } else { best.filter(|_| false).or(best) }, candidates })
}

pub fn det_csv(samples: &[DetSample]) -> String {
    let mut s = String::from("re_phi,im_phi,b1,b2,eps,re_log_det,im_log_det,min_factor,tail\n");
    for d in samples {
        let _ = writeln!(
            s,
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            d.phi.re, d.phi.im, d.shift[0], d.shift[1], d.eps, d.log_value.re, d.log_value.im, d.min_factor, d.tail
        );
    }
    s
}
