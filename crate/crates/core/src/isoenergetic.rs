//! Angle sets on the circle, non-resonance carving and the distorted
//! isoenergetic curves `kappa_n(phi) nu`.
//!
//! Radii are stored as the deviation `h = kappa - k`; at desk scale `h` is
//! far below the spacing of doubles near `k`.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{radial_symbol_shift, reduce_to_cell, symbol_shift, LatticeIndex, PeriodCell, Quasimomentum, Vec2};
use crate::model::Model;
use crate::perturbation::eigenvalue_series;
use crate::resonance::{free_zero_seeds, level_shift, swiss_cheese, CheeseRegion};

/// Holes narrower than this are not represented.
pub const MIN_HOLE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum HoleTag {
    /// Near-degeneracy with the free partner at lattice offset `offset`.
    Circle { offset: LatticeIndex },
    /// Gap-test resonance with the refined offset `offset` (shift class `shift`).
    GapTest { offset: LatticeIndex, shift: LatticeIndex },
    /// Real trace of a determinant-zero disk for shift `shift`.
    DeterminantDisk { shift: LatticeIndex },
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hole {
    pub lo: f64,
    pub hi: f64,
    /// Angle at which the defining quantity vanishes.
    pub center: f64,
    pub tag: HoleTag,
}

/// Disjoint sorted half-open arcs in `[0, 2 pi)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngleSet {
    arcs: Vec<(f64, f64)>,
    pub holes: Vec<Hole>,
    pub dropped: Vec<Hole>,
}

fn wrap(phi: f64) -> f64 {
    let r = phi.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Splits `[lo, hi)` (any real bounds, `hi - lo < 2 pi`) into pieces inside `[0, 2 pi)`.
fn split_interval(lo: f64, hi: f64) -> Vec<(f64, f64)> {
    if hi - lo >= TAU {
        return vec![(0.0, TAU)];
    }
    let a = wrap(lo);
    let b = a + (hi - lo);
    if b <= TAU {
        vec![(a, b)]
    } else {
        vec![(a, TAU), (0.0, b - TAU)]
    }
}

fn normalize(mut arcs: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    arcs.retain(|(a, b)| b > a);
    arcs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (a, b) in arcs {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn intersect_lists(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            out.push((lo, hi));
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

fn complement_list(a: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut cur = 0.0;
    for &(lo, hi) in a {
        if lo > cur {
            out.push((cur, lo));
        }
        cur = hi;
    }
    if cur < TAU {
        out.push((cur, TAU));
    }
    out
}

impl AngleSet {
    pub fn full() -> Self {
        AngleSet { arcs: vec![(0.0, TAU)], holes: Vec::new(), dropped: Vec::new() }
    }

    pub fn empty() -> Self {
        AngleSet { arcs: Vec::new(), holes: Vec::new(), dropped: Vec::new() }
    }

    /// Union of the given arcs; bounds may wrap.
    pub fn from_arcs(arcs: &[(f64, f64)]) -> Self {
        let pieces = arcs.iter().flat_map(|(a, b)| split_interval(*a, *b)).collect();
        AngleSet { arcs: normalize(pieces), holes: Vec::new(), dropped: Vec::new() }
    }

    pub fn arcs(&self) -> &[(f64, f64)] {
        &self.arcs
    }

    pub fn is_empty(&self) -> bool {
        self.arcs.is_empty()
    }

    /// Total length, summed in arc order.
    pub fn measure(&self) -> f64 {
        self.arcs.iter().map(|(a, b)| b - a).sum()
    }

    pub fn contains(&self, phi: f64) -> bool {
        let p = wrap(phi);
        self.arcs.iter().any(|(a, b)| p >= *a && p < *b)
    }

    /// Distance from `phi` to the nearest arc endpoint.
    pub fn distance_to_boundary(&self, phi: f64) -> f64 {
        let p = wrap(phi);
        let mut d = f64::INFINITY;
        for (a, b) in &self.arcs {
            for e in [*a, *b] {
                if (e == 0.0 || e == TAU) && self.arcs.len() == 1 && self.measure() == TAU {
                    continue;
                }
                let x = (p - e).abs();
                d = d.min(x.min(TAU - x));
            }
        }
        d
    }

    /// Removes `[lo, hi)` (bounds may wrap). Holes narrower than [`MIN_HOLE`]
    /// are recorded in `dropped` and leave the set unchanged.
    pub fn remove(&mut self, lo: f64, hi: f64, center: f64, tag: HoleTag) {
        let hole = Hole { lo, hi, center, tag };
        if hi - lo < MIN_HOLE {
            self.dropped.push(hole);
            return;
        }
        let cut = normalize(split_interval(lo, hi));
        self.arcs = intersect_lists(&self.arcs, &complement_list(&cut));
        self.holes.push(hole);
    }

    pub fn complement(&self) -> AngleSet {
        AngleSet { arcs: complement_list(&self.arcs), holes: Vec::new(), dropped: Vec::new() }
    }

    pub fn intersection(&self, other: &AngleSet) -> AngleSet {
        AngleSet { arcs: intersect_lists(&self.arcs, &other.arcs), holes: Vec::new(), dropped: Vec::new() }
    }

    pub fn difference(&self, other: &AngleSet) -> AngleSet {
        AngleSet { arcs: intersect_lists(&self.arcs, &complement_list(&other.arcs)), holes: Vec::new(), dropped: Vec::new() }
    }

    pub fn is_subset_of(&self, other: &AngleSet) -> bool {
        self.arcs.iter().all(|(a, b)| other.arcs.iter().any(|(c, d)| c <= a && b <= d))
    }

    /// Same arcs, provenance cleared.
    pub fn bare(&self) -> AngleSet {
        AngleSet { arcs: self.arcs.clone(), holes: Vec::new(), dropped: Vec::new() }
    }
}

pub fn measure(set: &AngleSet) -> f64 {
    set.measure()
}

/// `|A delta B|`.
pub fn compare_sets(a: &AngleSet, b: &AngleSet) -> f64 {
    a.difference(b).measure() + b.difference(a).measure()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Intersections {
    None,
    Tangent(f64),
    Two(f64, f64),
    /// `b = 0`: the circles coincide.
    Everywhere,
}

/// Angles `phi` with `|k nu(phi) + b| = k`, i.e. `cos(phi - theta_b) = -|b| / 2k`.
pub fn circle_intersections(b: Vec2, k: f64) -> Intersections {
    let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
    if nb == 0.0 {
        return Intersections::Everywhere;
    }
    let theta = b[1].atan2(b[0]);
    let c = -nb / (2.0 * k);
    if (nb - 2.0 * k).abs() <= 1e-14 * 2.0 * k {
        return Intersections::Tangent(wrap(theta + PI));
    }
    if c < -1.0 {
        return Intersections::None;
    }
    let a = c.acos();
    Intersections::Two(wrap(theta - a), wrap(theta + a))
}

/// Angular half-width of the removal band, `2k^{-4 s_1 - delta}` in `|p|^2`.
pub fn chi1_epsilon(model: &Model) -> f64 {
    let c = &model.cfg;
    2.0 * c.k.powf(-4.0 * c.s1 - c.delta)
}

/// Padding that turns the band into a neighborhood of width
/// `2k^{-1-4 s_1-2 delta}` in the quasimomentum.
pub fn chi1_padding(model: &Model) -> f64 {
    let c = &model.cfg;
    2.0 * c.k.powf(-2.0 - 4.0 * c.s1 - 2.0 * c.delta)
}

/// Offsets of the level-1 lattice that can resonate with the circle.
pub fn chi1_offsets(model: &Model) -> Result<Vec<(LatticeIndex, Vec2)>> {
    let cell = model.cell(1)?;
    let k = model.k();
    let eps = chi1_epsilon(model);
    Ok(cell
        .indices_within(2.0 * k + eps / k + 1e-9)
        .into_iter()
        .filter(|q| !q.is_zero())
        .map(|q| (q, cell.offset(q)))
        .collect())
}

fn carve_chi1_with(model: &Model, pad: f64) -> Result<AngleSet> {
    let k = model.k();
    let eps = chi1_epsilon(model);
    let mut set = AngleSet::full();
    for (q, b) in chi1_offsets(model)? {
        let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
        let theta = b[1].atan2(b[0]);
        let c_lo = (-nb * nb - eps) / (2.0 * k * nb);
        let c_hi = (-nb * nb + eps) / (2.0 * k * nb);
        if c_hi < -1.0 || c_lo > 1.0 {
            continue;
        }
        let a_in = c_hi.min(1.0).acos();
        let a_out = c_lo.max(-1.0).acos();
        let mid = (-nb / (2.0 * k)).max(-1.0).acos();
        let tag = HoleTag::Circle { offset: q };
        if a_out >= PI {
            set.remove(theta + a_in - pad, theta + TAU - a_in + pad, theta + PI.min(mid.max(a_in)), tag);
        } else {
            set.remove(theta + a_in - pad, theta + a_out + pad, theta + mid, tag);
            set.remove(theta - a_out - pad, theta - a_in + pad, theta - mid, tag);
        }
    }
    Ok(set)
}

/// `Theta_1`: the circle minus, for every offset `b_q` with `|b_q| <= 2k`
/// plus margin, the angles where `| |k nu + b_q|^2 - k^2 | <= 2k^{-4 s_1 - delta}`,
/// each padded by [`chi1_padding`]. An empty result is data, not an error.
pub fn carve_chi1(model: &Model) -> Result<AngleSet> {
    carve_chi1_with(model, chi1_padding(model))
}

/// The carve without padding, the set classified by the defining inequality.
pub fn carve_chi1_unpadded(model: &Model) -> Result<AngleSet> {
    carve_chi1_with(model, 0.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct BruteScan {
    pub points: usize,
    pub mismatches: usize,
    /// Mismatches farther than one grid step from an endpoint.
    pub far_mismatches: usize,
}

/// Classifies a uniform grid directly by the pairwise condition and compares
/// with the unpadded carve.
pub fn brute_scan(model: &Model, points: usize) -> Result<BruteScan> {
    let k = model.k();
    let eps = chi1_epsilon(model);
    let offsets = chi1_offsets(model)?;
    let set = carve_chi1_unpadded(model)?;
    let step = TAU / points as f64;
    let mut mismatches = 0;
    let mut far = 0;
    for i in 0..points {
        let phi = (i as f64 + 0.5) * step;
        let nu = [phi.cos(), phi.sin()];
        let good = offsets.iter().all(|(_, b)| {
            let v = 2.0 * k * (nu[0] * b[0] + nu[1] * b[1]) + b[0] * b[0] + b[1] * b[1];
            v.abs() > eps
        });
        if good != set.contains(phi) {
            mismatches += 1;
            if set.distance_to_boundary(phi) > step {
                far += 1;
            }
        }
    }
    Ok(BruteScan { points, mismatches, far_mismatches: far })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KappaSolution {
    pub phi: f64,
    /// `kappa - k`.
    pub h: f64,
    pub dh_dphi: f64,
    /// `lambda^{(n)}(kappa nu) - kappa^{2l}`.
    pub shift: f64,
    pub iterations: usize,
}

/// Bracket half-width for `kappa_n - kappa_{n-1}`.
pub fn kappa_bracket(model: &Model, step: u32) -> Result<f64> {
    let c = &model.cfg;
    if step == 1 {
        Ok(2.0 * c.k.powf(-1.0 - 4.0 * c.s1 - 2.0 * c.delta))
    } else {
        Ok(model.epsilon(step - 1)?.value * c.k.powf(-2.0 * c.l as f64 + 1.0 - c.delta))
    }
}

fn solve_h(model: &Model, phi: f64, step: u32, base: f64, r_max: usize) -> Result<(f64, f64, usize)> {
    let k = model.k();
    let l = model.l();
    let nu = [phi.cos(), phi.sin()];
    let width = kappa_bracket(model, step)?;
    let f = |h: f64| -> Result<(f64, f64)> {
        let x = [(k + h) * nu[0], (k + h) * nu[1]];
        let s = eigenvalue_series(model, 1.0, x, step, r_max, true)?.shift();
        Ok((radial_symbol_shift(k, h, l) + s, s))
    };
    let slope = |h: f64| 2.0 * l as f64 * (k + h).powi(2 * l as i32 - 1);
    let (f0, s0) = f(base)?;
    let mut h = base - f0 / slope(base);
    let mut shift = s0;
    let mut iterations = 1;
    let mut ok = false;
    for it in 2..=30 {
        iterations = it;
        if (h - base).abs() >= width {
            break;
        }
        let (fv, s) = f(h)?;
        shift = s;
        let next = h - fv / slope(h);
        let dh = (next - h).abs();
        h = next;
        if dh <= 1e-13 * h.abs() || dh == 0.0 {
            ok = true;
            break;
        }
    }
    if ok && (h - base).abs() < width {
        return Ok((h, shift, iterations));
    }
    // bisection on the bracket
    let (mut lo, mut hi) = (base - width, base + width);
    let (flo, _) = f(lo)?;
    let (fhi, _) = f(hi)?;
    if flo.signum() == fhi.signum() {
        return Err(Error::NoRootInBracket { phi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (fm, s) = f(mid)?;
        shift = s;
        if fm.signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
        if hi - lo <= 1e-13 * mid.abs() {
            break;
        }
    }
    Ok((0.5 * (lo + hi), shift, iterations))
}

/// Solves `lambda^{(n)}(kappa nu) = k^{2l}` for `kappa = k + h` by Newton on
/// the series eigenvalue (bisection fallback) within the step's bracket
/// around the previous radius; `dh/dphi` by central differences with
/// `delta phi = 1e-5`.
pub fn kappa_solve(model: &Model, phi: f64, step: u32, prior: Option<f64>, r_max: usize) -> Result<KappaSolution> {
    let base = |p: f64| -> Result<f64> {
        if step == 1 {
            Ok(0.0)
        } else {
            Ok(kappa_value(model, p, step - 1, r_max)?)
        }
    };
    let b0 = match prior {
        Some(h) => h,
        None => base(phi)?,
    };
    let (h, shift, iterations) = solve_h(model, phi, step, b0, r_max)?;
    let dphi = 1e-5;
    let hp = solve_h(model, phi + dphi, step, base(phi + dphi)?, r_max)?.0;
    let hm = solve_h(model, phi - dphi, step, base(phi - dphi)?, r_max)?.0;
    Ok(KappaSolution { phi, h, dh_dphi: (hp - hm) / (2.0 * dphi), shift, iterations })
}

/// `h_n(phi)` without the derivative.
pub fn kappa_value(model: &Model, phi: f64, step: u32, r_max: usize) -> Result<f64> {
    let base = if step == 1 { 0.0 } else { kappa_value(model, phi, step - 1, r_max)? };
    Ok(solve_h(model, phi, step, base, r_max)?.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct IsoCurve {
    pub step: u32,
    pub lambda: f64,
    pub k: f64,
    pub domain: AngleSet,
    pub samples: Vec<KappaSolution>,
    /// Per-arc sample spacing, aligned with `samples`.
    pub spacing: Vec<f64>,
    pub failures: usize,
    pub tolerance: f64,
}

impl IsoCurve {
    pub fn max_abs_h(&self) -> f64 {
        self.samples.iter().fold(0.0, |a, s| a.max(s.h.abs()))
    }

    /// Arc length `sum sqrt(kappa^2 + kappa'^2) dphi`.
    pub fn length(&self) -> f64 {
        self.samples
            .iter()
            .zip(&self.spacing)
            .map(|(s, d)| {
                let kappa = self.k + s.h;
                (kappa * kappa + s.dh_dphi * s.dh_dphi).sqrt() * d
            })
            .sum()
    }

    pub fn h_at(&self, phi: f64) -> Option<f64> {
        self.samples.iter().find(|s| s.phi == phi).map(|s| s.h)
    }

    /// Largest mismatch between the stored derivative and a central
    /// difference of the neighbouring table entries on the same arc.
    pub fn derivative_consistency(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 1..self.samples.len().saturating_sub(1) {
            let (a, b, c) = (&self.samples[i - 1], &self.samples[i], &self.samples[i + 1]);
            let d = self.spacing[i];
            if (b.phi - a.phi - d).abs() > 1e-12 || (c.phi - b.phi - d).abs() > 1e-12 {
                continue;
            }
            let fd = (c.h - a.h) / (2.0 * d);
            worst = worst.max((fd - b.dh_dphi).abs());
        }
        worst
    }
}

/// Sample angles: per arc `max(8, round(total * len / 2 pi))` points,
/// uniform with endpoints inset by half a step.
pub fn sample_angles(domain: &AngleSet, total: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for (a, b) in domain.arcs() {
        let len = b - a;
        let n = ((total as f64 * len / TAU).round() as usize).max(8);
        let d = len / n as f64;
        for i in 0..n {
            out.push((a + (i as f64 + 0.5) * d, d));
        }
    }
    out
}

/// Solves `kappa_n` over a sample of `domain`. Fails when more than 1% of
/// the points fail; `prior` supplies `kappa_{n-1}` at the same angles.
pub fn build_isocurve(model: &Model, step: u32, domain: &AngleSet, samples: usize, prior: Option<&IsoCurve>, r_max: usize) -> Result<IsoCurve> {
    if domain.is_empty() {
        return Err(Error::EmptyDomain);
    }
    let angles = sample_angles(domain, samples);
    let mut out = Vec::with_capacity(angles.len());
    let mut spacing = Vec::with_capacity(angles.len());
    let mut failures = 0;
    for (phi, d) in &angles {
        let p = prior.and_then(|c| c.h_at(*phi));
        match kappa_solve(model, *phi, step, p, r_max) {
            Ok(s) => {
                out.push(s);
                spacing.push(*d);
            }
            Err(Error::NoRootInBracket { .. }) | Err(Error::ResonantDenominator { .. }) | Err(Error::ContourEnclosure { .. }) | Err(Error::ContourThroughSpectrum { .. }) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    if failures * 100 > angles.len() {
        return Err(Error::CurveFailures { failed: failures, total: angles.len() });
    }
    Ok(IsoCurve { step, lambda: model.lambda(), k: model.k(), domain: domain.clone(), samples: out, spacing, failures, tolerance: 1e-13 })
}

#[derive(Debug, Clone, Serialize)]
pub struct ChiStarPoint {
    pub phi: f64,
    pub t: Vec2,
    pub index: LatticeIndex,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChiStar {
    pub level: u32,
    pub points: Vec<ChiStarPoint>,
    /// Sample pairs, not adjacent in `phi`, whose images lie within `1e-10`.
    pub collisions: Vec<(usize, usize)>,
}

/// Parallel shift of the sampled curve into the cell, with an injectivity
/// check on the samples.
pub fn chi_star(curve: &IsoCurve, cell: &PeriodCell) -> ChiStar {
    let points: Vec<ChiStarPoint> = curve
        .samples
        .iter()
        .map(|s| {
            let kappa = curve.k + s.h;
            let (t, j) = reduce_to_cell([kappa * s.phi.cos(), kappa * s.phi.sin()], cell);
            ChiStarPoint { phi: s.phi, t: t.t, index: j }
        })
        .collect();
    let e = cell.extent();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|a, b| points[*a].t[0].total_cmp(&points[*b].t[0]));
    let n = points.len();
    let mut collisions = Vec::new();
    let torus = |a: f64, b: f64, p: f64| {
        let d = (a - b).abs();
        d.min(p - d)
    };
    for (oi, &i) in order.iter().enumerate() {
        for &j in order.iter().skip(oi + 1) {
            if points[j].t[0] - points[i].t[0] > 1e-10 {
                break;
            }
            let adjacent = i.abs_diff(j) == 1 || i.abs_diff(j) == n - 1;
            if !adjacent && torus(points[i].t[1], points[j].t[1], e[1]) < 1e-10 {
                collisions.push((i.min(j), i.max(j)));
            }
        }
    }
    ChiStar { level: cell.level, points, collisions }
}

/// Back-reference from a `chi_star` point to the quasimomentum.
pub fn chi_star_quasimomentum(p: &ChiStarPoint, level: u32) -> Quasimomentum {
    Quasimomentum { t: p.t, level }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SelfIntersection {
    pub phi: f64,
    pub shift: LatticeIndex,
    pub partner: LatticeIndex,
    /// `|k nu + c|^{2l} - k^{2l}` at the recorded angle.
    pub gap: f64,
}

/// Free self-intersections of the step-`n` picture: angles where
/// `|k nu + b_p + p_i| = k` for a refined shift `p != 0`.
pub fn self_intersections(model: &Model, step: u32) -> Result<Vec<SelfIntersection>> {
    let k = model.k();
    let cell = model.cell((step - 1).max(1))?;
    Ok(free_zero_seeds(model, step)?
        .into_iter()
        .map(|(p, b, i, phi)| {
            let o = cell.offset(i);
            let c = [b[0] + o[0], b[1] + o[1]];
            SelfIntersection { phi, shift: p, partner: i, gap: symbol_shift([k * phi.cos(), k * phi.sin()], c, model.l()) }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Chi2Method {
    GapTest,
    DeterminantDisk,
}

/// `Theta_2` by the gap test: around each free self-intersection inside
/// `theta1`, the angle where `lambda^{(1)}(x + c) = lambda^{(1)}(x)` on the
/// step-1 curve is located by one Newton step and the `eps_1`-window
/// `|gap| <= eps_1` is removed.
pub fn carve_chi2_gap(model: &Model, theta1: &AngleSet, r_max: usize) -> Result<AngleSet> {
    let k = model.k();
    let l = model.l();
    let eps1 = model.epsilon(1)?.value;
    let cell = model.cell(1)?;
    let mut set = theta1.clone();
    for (p, b, i, phi) in free_zero_seeds(model, 2)? {
        if !theta1.contains(phi) {
            continue;
        }
        let o = cell.offset(i);
        let c = [b[0] + o[0], b[1] + o[1]];
        let h = kappa_value(model, phi, 1, r_max)?;
        let nu = [phi.cos(), phi.sin()];
        let x = [(k + h) * nu[0], (k + h) * nu[1]];
        let own = level_shift(model, x, 1, r_max)?;
        let gap = symbol_shift(x, c, l) + level_shift(model, [x[0] + c[0], x[1] + c[1]], 1, r_max)? - own;
        let q = (k * nu[0] + c[0]).powi(2) + (k * nu[1] + c[1]).powi(2);
        let slope = l as f64 * q.powi(l as i32 - 1) * 2.0 * k * (-nu[1] * c[0] + nu[0] * c[1]);
        let center = phi - gap / slope;
        let w = eps1 / slope.abs();
        set.remove(center - w, center + w, center, HoleTag::GapTest { offset: i, shift: p });
    }
    Ok(set)
}

/// `Theta_2` as the real trace of `Phi_2`, with the region.
pub fn carve_chi2_disks(model: &Model, theta1: &AngleSet, curve1: &IsoCurve) -> Result<(AngleSet, CheeseRegion)> {
    let region = swiss_cheese(model, 2, theta1, std::slice::from_ref(curve1))?;
    Ok((region.real_trace(), region))
}

pub fn carve_chi2(model: &Model, theta1: &AngleSet, curve1: &IsoCurve, method: Chi2Method, r_max: usize) -> Result<AngleSet> {
    match method {
        Chi2Method::GapTest => carve_chi2_gap(model, theta1, r_max),
        Chi2Method::DeterminantDisk => Ok(carve_chi2_disks(model, theta1, curve1)?.0),
    }
}

pub fn curve_csv(curve: &IsoCurve) -> String {
    let mut s = String::from("phi,kappa,h,dkappa_dphi\n");
    for p in &curve.samples {
        let _ = writeln!(s, "{:.17e},{:.17e},{:.17e},{:.17e}", p.phi, curve.k + p.h, p.h, p.dh_dphi);
    }
    s
}

#[derive(Serialize)]
struct HoleLedger<'a> {
    measure: f64,
    arcs: &'a [(f64, f64)],
    holes: &'a [Hole],
    dropped: usize,
    dropped_holes: &'a [Hole],
}

pub fn holes_json(set: &AngleSet) -> serde_json::Value {
    serde_json::to_value(HoleLedger { measure: set.measure(), arcs: set.arcs(), holes: &set.holes, dropped: set.dropped.len(), dropped_holes: &set.dropped })
        .expect("serializable")
}

fn svg_header(size: f64) -> String {
    format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n")
}

/// The distorted circle with holes; radial deviations exaggerated to 5% of
/// the radius at the largest `|h|`.
pub fn curve_svg(curve: &IsoCurve) -> String {
    let size = 400.0;
    let c = size / 2.0;
    let r0 = 160.0;
    let hmax = curve.max_abs_h();
    let mut s = svg_header(size);
    let _ = writeln!(s, "<circle cx=\"{c}\" cy=\"{c}\" r=\"{r0}\" fill=\"none\" stroke=\"#ccc\" stroke-width=\"0.5\"/>");
    let mut path = String::new();
    let mut prev: Option<f64> = None;
    for (p, d) in curve.samples.iter().zip(&curve.spacing) {
        let rr = if hmax > 0.0 { r0 * (1.0 + 0.05 * p.h / hmax) } else { r0 };
        let (x, y) = (c + rr * p.phi.cos(), c - rr * p.phi.sin());
        let cmd = match prev {
            Some(q) if (p.phi - q - d).abs() < 1e-9 => 'L',
            _ => 'M',
        };
        let _ = write!(path, "{cmd}{x:.3},{y:.3} ");
        prev = Some(p.phi);
    }
    let _ = writeln!(s, "<path d=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>", path.trim_end());
    s.push_str("</svg>\n");
    s
}

/// `Theta_n` drawn as arcs on a ring.
pub fn ring_svg(set: &AngleSet) -> String {
    let size = 400.0;
    let c = size / 2.0;
    let r = 160.0;
    let mut s = svg_header(size);
    for (a, b) in set.arcs() {
        let (x0, y0) = (c + r * a.cos(), c - r * a.sin());
        let (x1, y1) = (c + r * b.cos(), c - r * b.sin());
        let large = if b - a > PI { 1 } else { 0 };
        if b - a >= TAU - 1e-12 {
            let _ = writeln!(s, "<circle cx=\"{c}\" cy=\"{c}\" r=\"{r}\" fill=\"none\" stroke=\"black\" stroke-width=\"6\"/>");
        } else {
            let _ = writeln!(s, "<path d=\"M{x0:.3},{y0:.3} A{r},{r} 0 {large} 0 {x1:.3},{y1:.3}\" fill=\"none\" stroke=\"black\" stroke-width=\"6\"/>");
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_config::{Config, HarmonicEntry};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn model(k: f64, c: f64) -> Model {
        let mut cfg = Config::new(6, k);
        if c != 0.0 {
            cfg.harmonics.push(HarmonicEntry { level: 1, index: [1, 0], re: c, im: 0.0 });
        }
        Model::new(cfg).unwrap()
    }

    #[test]
    fn intersections_closed_form() {
        let k = 3.0;
        match circle_intersections([2.0 * k, 0.0], k) {
            Intersections::Tangent(p) => assert_relative_eq!(p, PI, epsilon = 1e-15),
            other => panic!("{other:?}"),
        }
        match circle_intersections([k, 0.0], k) {
            Intersections::Two(a, b) => {
                assert_relative_eq!(a, TAU - 2.0 * PI / 3.0, epsilon = 1e-14);
                assert_relative_eq!(b, 2.0 * PI / 3.0, epsilon = 1e-14);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(circle_intersections([2.0 * k + 0.1, 0.0], k), Intersections::None);
        assert_eq!(circle_intersections([0.0, 0.0], k), Intersections::Everywhere);
    }

    #[test]
    fn set_algebra() {
        let full = AngleSet::full();
        assert_eq!(full.measure(), TAU);
        assert_eq!(compare_sets(&full, &full), 0.0);
        let mut a = AngleSet::full();
        a.remove(-0.1, 0.2, 0.05, HoleTag::Manual);
        a.remove(1.0, 1.5, 1.25, HoleTag::Manual);
        assert_relative_eq!(a.measure(), TAU - 0.8, epsilon = 1e-14);
        assert!(!a.contains(6.25) && !a.contains(0.1) && a.contains(0.3));
        assert_eq!(a.complement().complement(), a.bare());
        let mut b = a.clone();
        b.remove(3.0, 3.1, 3.05, HoleTag::Manual);
        assert!(b.is_subset_of(&a));
        assert_relative_eq!(compare_sets(&a, &b), a.measure() - b.measure(), epsilon = 1e-14);
        let mut c = a.clone();
        c.remove(2.0, 2.0 + 1e-10, 2.0, HoleTag::Manual);
        assert_eq!(c.measure(), a.measure());
        assert_eq!(c.dropped.len(), 1);
    }

    #[test]
    fn carve_tags_and_brute_scan() {
        let m = model(16.0, 1e-3);
        let set = carve_chi1(&m).unwrap();
        assert!(set.measure() > 0.0 && set.measure() < TAU);
        let cell = m.cell(1).unwrap();
        for h in &set.holes {
            let HoleTag::Circle { offset } = h.tag else { panic!() };
            let b = cell.offset(offset);
            let p = [16.0 * h.center.cos() + b[0], 16.0 * h.center.sin() + b[1]];
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 16.0).abs() < 1e-8 * 16.0 || (b[0].hypot(b[1]) > 32.0), "{h:?}");
        }
        let scan = brute_scan(&m, 100_000).unwrap();
        assert_eq!(scan.far_mismatches, 0, "{scan:?}");
    }

    #[test]
    fn removed_fraction_decreases() {
        let frac = |k: f64| 1.0 - carve_chi1(&model(k, 0.0)).unwrap().measure() / TAU;
        let (a, b) = (frac(8.0), frac(64.0));
        let slope = (b.ln() - a.ln()) / (64f64.ln() - 8f64.ln());
        assert!(slope <= -0.01 / 4.0, "{a} {b} {slope}");
    }

    #[test]
    fn free_curve_is_circle() {
        let m = model(16.0, 0.0);
        let dom = carve_chi1(&m).unwrap();
        let curve = build_isocurve(&m, 1, &dom, 512, None, 4).unwrap();
        assert!(curve.samples.iter().all(|s| s.h == 0.0 && s.dh_dphi == 0.0));
        assert_relative_eq!(curve.length(), 16.0 * dom.measure(), max_relative = 1e-12);
        let star = chi_star(&curve, &m.cell(1).unwrap());
        assert_eq!(star.points.len(), curve.samples.len());
        assert!(star.collisions.is_empty());
        let cell = m.cell(1).unwrap();
        for (p, s) in star.points.iter().zip(&curve.samples) {
            let v = crate::lattice::dual_vector(p.index, &chi_star_quasimomentum(p, 1), &cell).unwrap();
            assert!((v[0] - 16.0 * s.phi.cos()).abs() < 1e-12 && (v[1] - 16.0 * s.phi.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbed_curve_derivatives() {
        let m = model(16.0, 1e-3);
        let dom = carve_chi1(&m).unwrap();
        let curve = build_isocurve(&m, 1, &dom, 2048, None, 2).unwrap();
        assert_eq!(curve.failures, 0);
        let scale = curve.samples.iter().fold(0.0f64, |a, s| a.max(s.dh_dphi.abs()));
        let fd = curve.derivative_consistency();
        assert!(fd <= 1e-6 * curve.k);
        // table spacing ~3e-3 rad; worst case sits next to a hole
        assert!(fd <= 2e-2 * scale, "{fd} vs {scale}");
        let bracket = kappa_bracket(&m, 1).unwrap();
        assert!(curve.max_abs_h() < bracket);
    }

    fn two_level(k: f64) -> Model {
        let mut cfg = Config::new(6, k);
        cfg.s1 = 0.2;
        cfg.n_steps = 2;
        cfg.harmonics.push(HarmonicEntry { level: 1, index: [1, 0], re: 1e-3, im: 0.0 });
        cfg.harmonics.push(HarmonicEntry { level: 2, index: [1, 1], re: 1e-6, im: 0.0 });
        Model::new(cfg).unwrap()
    }

    #[test]
    fn chi2_without_refinement_is_chi1() {
        let m = model(16.0, 1e-3);
        assert_eq!(m.refinement(1), 1);
        let t1 = carve_chi1(&m).unwrap();
        assert_eq!(carve_chi2_gap(&m, &t1, 2).unwrap().bare(), t1.bare());
    }

    #[test]
    fn chi2_methods_nest_and_audit() {
        let m = two_level(8.0);
        let t1 = carve_chi1(&m).unwrap();
        let curve = build_isocurve(&m, 1, &t1, 512, None, 2).unwrap();
        let gap = carve_chi2(&m, &t1, &curve, Chi2Method::GapTest, 2).unwrap();
        let (disk, region) = carve_chi2_disks(&m, &t1, &curve).unwrap();
        assert!(gap.is_subset_of(&t1) && disk.is_subset_of(&t1));
        assert_relative_eq!(compare_sets(&t1, &disk), t1.measure() - disk.measure(), max_relative = 1e-12);
        assert!(!region.disks.is_empty());
        let eps1 = m.epsilon(1).unwrap().value;
        for h in gap.holes.iter().chain(&gap.dropped).filter(|h| matches!(h.tag, HoleTag::GapTest { .. })).take(10) {
            let hh = kappa_value(&m, h.center, 1, 2).unwrap();
            let x = [(8.0 + hh) * h.center.cos(), (8.0 + hh) * h.center.sin()];
            let t = crate::resonance::omega1_gap_test(&m, x, eps1, 2).unwrap();
            assert!(t.member, "{h:?} {t:?}");
        }
        assert!(gap.holes.iter().chain(&gap.dropped).any(|h| matches!(h.tag, HoleTag::GapTest { .. })));
        let si = self_intersections(&m, 2).unwrap();
        assert!(si.iter().all(|s| s.gap.abs() < 1e-6 * 8f64.powi(12)));
    }

    proptest! {
        #[test]
        fn complement_round_trip(cuts in proptest::collection::vec((0.0..TAU, 1e-6..0.5f64), 0..8)) {
            let mut s = AngleSet::full();
            for (lo, w) in &cuts {
                s.remove(*lo, lo + w, lo + w / 2.0, HoleTag::Manual);
            }
            prop_assert_eq!(s.complement().complement(), s.bare());
            prop_assert!((s.measure() + s.complement().measure() - TAU).abs() < 1e-12);
        }
    }
}
