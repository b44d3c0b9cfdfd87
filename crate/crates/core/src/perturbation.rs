//! Perturbation series for a simple eigenvalue and its spectral projection,
//! evaluated by contour quadrature and checked against closed forms and the
//! Bloch oracle.
//!
//! All quantities live in the frame anchored at a dual vector `x`: energies
//! are `|p|^{2l} - |x|^{2l}`. Step 1 perturbs the free operator by `W_1`; step
//! `n` perturbs a local ball of `H^{(n-1)}` (diagonalized densely) by `W_n`.
//!
//! Only closed walks that visit the anchor contribute to the contour
//! integrals: every other term is analytic inside the contour. The
//! integrand is therefore assembled from anchor excursions
//! `a_m = (M (C M)^{m-1})_{cc}`, where `C` is the resolvent with the anchor
//! removed, which reduces a node evaluation to matrix-vector products.

use std::collections::{HashMap, HashSet, VecDeque};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::bloch_oracle::{assemble_anchored, refine_eigenpair};
use crate::error::{Error, Result};
use crate::lattice::{reduce_to_cell, symbol, symbol_shift, LatticeIndex, PeriodCell, Vec2};
use crate::model::Model;
use crate::potential::WindowPotential;

const RESONANCE_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContourSpec {
    pub step: u32,
    /// Center in the anchored frame.
    pub center: f64,
    pub radius: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadValue {
    pub value: Complex64,
    /// Node-doubling difference plus a roundoff floor.
    pub error: f64,
}

/// Perturbation problem on a ball of lattice offsets around the anchor,
/// expressed in the eigenbasis of the reference operator.
#[derive(Debug, Clone)]
pub struct LocalProblem {
    pub step: u32,
    pub anchor: Vec2,
    pub cell: PeriodCell,
    /// Anchor index `j` with `p_j(tau) = anchor`.
    pub anchor_index: LatticeIndex,
    pub tau: Vec2,
    /// Lattice offsets relative to the anchor; `nodes[0]` is zero.
    pub nodes: Vec<LatticeIndex>,
    /// `|x + b_q|^{2l} - |x|^{2l}` per node.
    pub diag: Vec<f64>,
    /// Reference energies in the frame.
    pub energies: Vec<f64>,
    /// Reference eigenvectors in the node basis; `None` for the free reference.
    pub basis: Option<DMatrix<Complex64>>,
    /// Perturbation in the reference basis.
    pub coupling: DMatrix<Complex64>,
    /// Reference state carrying the anchor.
    pub center: usize,
}

fn ball_offsets(support: &[LatticeIndex], hops: usize) -> Vec<LatticeIndex> {
    let mut seen = HashSet::from([LatticeIndex::ZERO]);
    let mut order = vec![LatticeIndex::ZERO];
    let mut queue = VecDeque::from([(LatticeIndex::ZERO, 0usize)]);
    while let Some((q, d)) = queue.pop_front() {
        if d == hops {
            continue;
        }
        for s in support {
            let r = q + *s;
            if seen.insert(r) {
                order.push(r);
                queue.push_back((r, d + 1));
            }
        }
    }
    order[1..].sort();
    order
}

fn coupling_matrix(nodes: &[LatticeIndex], w: &WindowPotential) -> DMatrix<Complex64> {
    let n = nodes.len();
    let pos: HashMap<LatticeIndex, usize> = nodes.iter().enumerate().map(|(i, q)| (*q, i)).collect();
    let mut m = DMatrix::<Complex64>::zeros(n, n);
    for a in 0..n {
        for (q, c) in &w.coefficients {
            if let Some(&b) = pos.get(&(nodes[a] - *q)) {
                m[(a, b)] += c;
            }
        }
    }
    m
}

fn argmax_norm(v: impl Iterator<Item = Complex64>) -> usize {
    let mut best = (0, -1.0);
    for (i, z) in v.enumerate() {
        if z.norm() > best.1 {
            best = (i, z.norm());
        }
    }
    best.0
}

impl LocalProblem {
    /// Ball of `hops` couplings around the anchor `x` for step `step`.
    pub fn new(model: &Model, x: Vec2, step: u32, hops: usize) -> Result<Self> {
        let cell = model.cell(step)?;
        let l = model.l();
        let (tau, anchor_index) = reduce_to_cell(x, &cell);
        let pert = model.window(step)?.clone();
        let pert = if step == 1 { pert } else { model.window_on(step, step)? };
        let reference = model.cumulative_on(step - 1, step)?;
        let mut support: Vec<LatticeIndex> = pert.coefficients.keys().copied().collect();
        support.extend(reference.coefficients.keys().copied());
        support.sort();
        support.dedup();
        let nodes = ball_offsets(&support, hops);
        let diag: Vec<f64> = nodes.iter().map(|q| symbol_shift(x, cell.offset(*q), l)).collect();
        let w = coupling_matrix(&nodes, &pert);
        let (energies, basis, coupling, center) = if reference.is_zero() {
            (diag.clone(), None, w, 0)
        } else {
            let mut h = coupling_matrix(&nodes, &reference);
            for (a, d) in diag.iter().enumerate() {
                h[(a, a)] += Complex64::new(*d, 0.0);
            }
            let se = h.symmetric_eigen();
            let v = se.eigenvectors;
            let center = argmax_norm(v.row(0).iter().copied());
            let m = v.adjoint() * &w * &v;
            (se.eigenvalues.iter().copied().collect(), Some(v), m, center)
        };
        Ok(LocalProblem { step, anchor: x, cell, anchor_index, tau: tau.t, nodes, diag, energies, basis, coupling, center })
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    /// Node position of the offset `q`.
    pub fn position(&self, q: LatticeIndex) -> Option<usize> {
        self.nodes.iter().position(|r| *r == q)
    }

    /// Reference projector `v_c v_c*` in the node basis.
    pub fn reference_projector(&self) -> DMatrix<Complex64> {
        let n = self.dim();
        match &self.basis {
            None => {
                let mut e = DMatrix::zeros(n, n);
                e[(self.center, self.center)] = Complex64::new(1.0, 0.0);
                e
            }
            Some(v) => {
                let c = v.column(self.center).into_owned();
                &c * c.adjoint()
            }
        }
    }

    /// Maps a matrix from the reference basis to the node basis.
    pub fn to_nodes(&self, m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        match &self.basis {
            None => m.clone(),
            Some(v) => v * m * v.adjoint(),
        }
    }
}

/// `C_1`: radius `k^{2l-2-4 s_1-delta}` around the anchor energy.
pub fn step1_contour(model: &Model) -> ContourSpec {
    let c = &model.cfg;
    ContourSpec {
        step: 1,
        center: 0.0,
        radius: c.k.powf(2.0 * c.l as f64 - 2.0 - 4.0 * c.s1 - c.delta),
        nodes: c.quad_points as usize,
    }
}

/// `C_n`: radius `eps_{n-1} / 2` around the reference eigenvalue of the
/// local problem.
pub fn step_contour(model: &Model, problem: &LocalProblem) -> Result<ContourSpec> {
    if problem.step == 1 {
        return Ok(step1_contour(model));
    }
    let eps = model.epsilon(problem.step - 1)?.value;
    Ok(ContourSpec {
        step: problem.step,
        center: problem.energies[problem.center],
        radius: eps / 2.0,
        nodes: model.cfg.quad_points as usize,
    })
}

fn check_enclosure(problem: &LocalProblem, contour: &ContourSpec) -> Result<()> {
    let mut inside = 0;
    let mut closest = f64::INFINITY;
    for (a, e) in problem.energies.iter().enumerate() {
        let d = (e - contour.center).abs();
        closest = closest.min((d - contour.radius).abs());
        if d < contour.radius && a != problem.center {
            inside += 1;
        }
    }
    if closest < 1e-6 * contour.radius {
        return Err(Error::ContourThroughSpectrum { distance: closest });
    }
    if inside > 0 {
        return Err(Error::ContourEnclosure { count: inside + 1 });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ContourValues {
    pub contour: ContourSpec,
    /// `g[r-1] = g_r`.
    pub g: Vec<QuadValue>,
    /// `G[r-1] = G_r` in the node basis, with its quadrature error (max entry).
    pub projections: Option<Vec<(DMatrix<Complex64>, f64)>>,
}

struct NodeTerms {
    traces: Vec<Complex64>,
    projections: Vec<DMatrix<Complex64>>,
}

fn node_terms(problem: &LocalProblem, contour: &ContourSpec, omega: Complex64, r_max: usize, with_projection: bool) -> NodeTerms {
    let n = problem.dim();
    let c = problem.center;
    let m = &problem.coupling;
    let ec = problem.energies[c];
    let rw = omega * contour.radius;
    let s = -1.0 / (rw + (contour.center - ec));
    let cres: DVector<Complex64> = DVector::from_iterator(
        n,
        problem.energies.iter().enumerate().map(|(a, e)| {
            if a == c {
                Complex64::new(0.0, 0.0)
            } else {
                1.0 / (Complex64::new((e - ec) - (contour.center - ec), 0.0) - rw)
            }
        }),
    );
    // excursions a_1..a_rmax
    let mut a = vec![Complex64::new(0.0, 0.0); r_max + 1];
    let mut z: DVector<Complex64> = m.column(c).into_owned();
    a[1] = z[c];
    for k in 2..=r_max {
        z = m * z.component_mul(&cres);
        a[k] = z[c];
    }
    // compositions: comp[r][p] = sum over compositions of r into p parts of prod a
    let mut comp = vec![vec![Complex64::new(0.0, 0.0); r_max + 1]; r_max + 1];
    comp[0][0] = Complex64::new(1.0, 0.0);
    for r in 1..=r_max {
        for p in 1..=r {
            let mut acc = Complex64::new(0.0, 0.0);
            for mm in 1..=r {
                if r >= mm {
                    acc += a[mm] * comp[r - mm][p - 1];
                }
            }
            comp[r][p] = acc;
        }
    }
    let mut traces = Vec::with_capacity(r_max);
    for r in 1..=r_max {
        let mut t = Complex64::new(0.0, 0.0);
        let mut sp = Complex64::new(1.0, 0.0);
        for p in 1..=r {
            sp *= s;
            t += sp * comp[r][p] * (r as f64 / p as f64);
        }
        traces.push(t);
    }
    let mut projections = Vec::new();
    if with_projection {
        let mut kk = vec![Complex64::new(0.0, 0.0); r_max + 1];
        kk[0] = s;
        for mm in 1..=r_max {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 1..=mm {
                acc += a[i] * kk[mm - i];
            }
            kk[mm] = s * acc;
        }
        let mut left = vec![DVector::<Complex64>::zeros(n)];
        left[0][c] = Complex64::new(1.0, 0.0);
        let mut right = left.clone();
        let mt = m.transpose();
        for i in 1..=r_max {
            left.push((m * &left[i - 1]).component_mul(&cres));
            right.push((&mt * &right[i - 1]).component_mul(&cres));
        }
        for r in 1..=r_max {
            let mut x = DMatrix::<Complex64>::zeros(n, n);
            for i0 in 0..=r {
                for i1 in 0..=(r - i0) {
                    let coef = kk[r - i0 - i1];
                    if coef.norm() == 0.0 {
                        continue;
                    }
                    x += (&left[i0] * coef) * right[i1].transpose();
                }
            }
            projections.push(x);
        }
    }
    NodeTerms { traces, projections }
}

/// `g_r = (-1)^r / (2 pi i r) oint Tr[(R W)^r]` and optionally
/// `G_r = (-1)^{r+1} / (2 pi i) oint (R W)^r R`, for `r = 1..=r_max`, by the
/// trapezoidal rule on `nodes` and `2 nodes` points.
pub fn contour_integrals(problem: &LocalProblem, contour: &ContourSpec, r_max: usize, with_projection: bool) -> Result<ContourValues> {
    check_enclosure(problem, contour)?;
    let n = contour.nodes;
    let total = 2 * n;
    let dim = problem.dim();
    let mut sum_all = vec![Complex64::new(0.0, 0.0); r_max];
    let mut sum_even = vec![Complex64::new(0.0, 0.0); r_max];
    let mut abs_all = vec![0.0; r_max];
    let mut psum_all = vec![DMatrix::<Complex64>::zeros(dim, dim); if with_projection { r_max } else { 0 }];
    let mut psum_even = psum_all.clone();
    for k in 0..total {
        let omega = Complex64::from_polar(1.0, 2.0 * PI * k as f64 / total as f64);
        let rw = omega * contour.radius;
        let terms = node_terms(problem, contour, omega, r_max, with_projection);
        for r in 0..r_max {
            let v = terms.traces[r] * rw;
            sum_all[r] += v;
            abs_all[r] += v.norm();
            if k % 2 == 0 {
                sum_even[r] += v;
            }
        }
        for (r, p) in terms.projections.into_iter().enumerate() {
            let v = p * rw;
            if k % 2 == 0 {
                psum_even[r] += &v;
            }
            psum_all[r] += v;
        }
    }
    let floor_scale = 16.0 * dim.max(1) as f64 * f64::EPSILON;
    let g = (0..r_max)
        .map(|r| {
            let sign = if (r + 1) % 2 == 0 { 1.0 } else { -1.0 };
            let f = sign / (r + 1) as f64;
            let fine = sum_all[r] * f / total as f64;
            let coarse = sum_even[r] * f / n as f64;
            QuadValue { value: fine, error: (fine - coarse).norm() + floor_scale * abs_all[r] / ((r + 1) as f64 * total as f64) }
        })
        .collect();
    let projections = if with_projection {
        Some(
            (0..r_max)
                .map(|r| {
                    let sign = if (r + 1) % 2 == 0 { -1.0 } else { 1.0 };
                    let fine = psum_all[r].map(|z| z * sign / total as f64);
                    let coarse = psum_even[r].map(|z| z * sign / n as f64);
                    let err = (&fine - &coarse).iter().fold(0.0f64, |acc, z| acc.max(z.norm()));
                    (fine, err)
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(ContourValues { contour: *contour, g, projections })
}

pub fn contour_g(r: usize, contour: &ContourSpec, problem: &LocalProblem) -> Result<QuadValue> {
    Ok(contour_integrals(problem, contour, r, false)?.g[r - 1])
}

#[derive(Debug, Clone)]
pub struct ProjectionCoefficient {
    pub matrix: DMatrix<Complex64>,
    pub trace_norm: f64,
    pub error: f64,
}

/// `G_r` in the node basis with its trace norm.
#[allow(non_snake_case)]
pub fn contour_G(r: usize, contour: &ContourSpec, problem: &LocalProblem) -> Result<ProjectionCoefficient> {
    let vals = contour_integrals(problem, contour, r, true)?;
    let (g, error) = vals.projections.unwrap().pop().unwrap();
    let matrix = problem.to_nodes(&g);
    Ok(ProjectionCoefficient { trace_norm: trace_norm(&matrix), matrix, error })
}

pub fn trace_norm(m: &DMatrix<Complex64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().iter().sum()
}

fn free_denominators(problem: &LocalProblem, model: &Model) -> Result<()> {
    let guard = RESONANCE_GUARD * model.k().powi(2 * model.l() as i32);
    for (q, d) in problem.nodes.iter().zip(&problem.diag).skip(1) {
        if d.abs() < guard {
            return Err(Error::ResonantDenominator { offset: *q, value: *d });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct G2ClosedForm {
    pub direct: f64,
    pub symmetrized: f64,
}

/// `g_2 = sum_q |w_q|^2 / (p_j^{2l} - p_{j+q}^{2l})` and its symmetrized
/// pair form, for the free reference at the anchor `x`.
pub fn g2_closed_form(model: &Model, x: Vec2) -> Result<G2ClosedForm> {
    let cell = model.cell(1)?;
    let w = model.window(1)?;
    let l = model.l();
    let guard = RESONANCE_GUARD * model.k().powi(2 * l as i32);
    let mut direct = 0.0;
    let mut symmetrized = 0.0;
    for (q, c) in &w.coefficients {
        let dq = symbol_shift(x, cell.offset(*q), l);
        let dm = symbol_shift(x, cell.offset(-*q), l);
        for (o, d) in [(*q, dq), (-*q, dm)] {
            if d.abs() < guard {
                return Err(Error::ResonantDenominator { offset: o, value: d });
            }
        }
        let a = c.norm_sqr();
        direct += a / -dq;
        symmetrized += a * (-dq - dm) / (2.0 * dq * dm);
    }
    if (direct - symmetrized).abs() > 1e-10 * direct.abs().max(symmetrized.abs()) {
        return Err(Error::Linalg(format!("g2 forms disagree: {direct:e} vs {symmetrized:e}")));
    }
    Ok(G2ClosedForm { direct, symmetrized })
}

/// `G_1` for the free reference: row and column of the anchor only.
#[allow(non_snake_case)]
pub fn G1_closed_form(model: &Model, problem: &LocalProblem) -> Result<DMatrix<Complex64>> {
    if problem.step != 1 {
        return Err(Error::Config("G1 closed form is defined for the free reference".into()));
    }
    free_denominators(problem, model)?;
    let n = problem.dim();
    let c = problem.center;
    let mut g = DMatrix::<Complex64>::zeros(n, n);
    for a in 0..n {
        if a == c {
            continue;
        }
        let d = -problem.diag[a];
        g[(c, a)] = problem.coupling[(c, a)] / d;
        g[(a, c)] = problem.coupling[(a, c)] / d;
    }
    Ok(g)
}

#[derive(Debug, Clone, Serialize)]
pub struct SeriesResult {
    pub step: u32,
    pub anchor: Vec2,
    pub tau: Vec2,
    pub alpha: f64,
    /// `g_1..g_{r_max}` of this step.
    pub g: Vec<Complex64>,
    pub g_error: Vec<f64>,
    /// `|x|^{2l}`.
    pub frame: f64,
    /// `lambda^{(n-1)} - |x|^{2l}` from the earlier steps.
    pub previous_shift: f64,
    /// `sum_r alpha^r g_r` of this step.
    pub step_shift: f64,
    pub tail_ratio: f64,
    pub tail_bound: f64,
    pub quadrature_error: f64,
    pub contour: ContourSpec,
    pub oracle_gap: Option<f64>,
    pub earlier: Vec<SeriesResult>,
}

impl SeriesResult {
    /// `lambda^{(n)} - |x|^{2l}`.
    pub fn shift(&self) -> f64 {
        self.previous_shift + self.step_shift
    }

    pub fn eigenvalue(&self) -> f64 {
        self.frame + self.shift()
    }

    /// Accumulated tail and quadrature error over all steps.
    pub fn total_uncertainty(&self) -> f64 {
        self.tail_bound + self.quadrature_error + self.earlier.iter().map(|e| e.tail_bound + e.quadrature_error).sum::<f64>()
    }
}

fn tail_cap(model: &Model, step: u32) -> Result<f64> {
    if step == 1 {
        Ok(model.k().powf(-model.exps.gamma0))
    } else {
        Ok(4.0 * model.epsilon(step - 1)?.value.powi(3))
    }
}

/// Geometric tail from the last two coefficients, ratio capped at `cap`.
pub fn tail_bound(g: &[Complex64], alpha: f64, cap: f64) -> (f64, f64) {
    let n = g.len();
    if n == 0 {
        return (cap, 0.0);
    }
    let last = g[n - 1].norm() * alpha.abs().powi(n as i32);
    let ratio = if n >= 2 && g[n - 2].norm() > 0.0 {
        let r = alpha.abs() * g[n - 1].norm() / g[n - 2].norm();
        if r.is_finite() {
            r.min(cap)
        } else {
            cap
        }
    } else {
        cap
    };
    let ratio = ratio.min(cap);
    (ratio, last * ratio / (1.0 - ratio))
}

fn hops_for(step: u32, r_max: usize) -> usize {
    if step == 1 {
        (r_max / 2).max(1)
    } else {
        r_max.div_ceil(2) + 1
    }
}

/// `lambda^{(n)}(alpha, x) = lambda^{(n-1)}(x) + sum_{r <= r_max} alpha^r g_r^{(n)}`
/// at the anchor `x`; earlier steps use `alpha = 1`. `in_domain` is the
/// caller's non-resonance membership flag.
pub fn eigenvalue_series(model: &Model, alpha: f64, x: Vec2, step: u32, r_max: usize, in_domain: bool) -> Result<SeriesResult> {
    if !in_domain {
        return Err(Error::NonResonanceViolation);
    }
    if step == 0 {
        return Err(Error::ParameterDomain { name: "step", value: 0.0 });
    }
    let mut earlier = Vec::new();
    let mut previous_shift = 0.0;
    if step > 1 {
        let prev = eigenvalue_series(model, 1.0, x, step - 1, r_max, true)?;
        previous_shift = prev.shift();
        earlier = prev.earlier.clone();
        let mut p = prev;
        p.earlier.clear();
        earlier.push(p);
    }
    let problem = LocalProblem::new(model, x, step, hops_for(step, r_max))?;
    if step == 1 {
        free_denominators(&problem, model)?;
    }
    let contour = step_contour(model, &problem)?;
    let vals = contour_integrals(&problem, &contour, r_max, false)?;
    let g: Vec<Complex64> = vals.g.iter().map(|q| q.value).collect();
    let g_error: Vec<f64> = vals.g.iter().map(|q| q.error).collect();
    let step_shift = g.iter().enumerate().map(|(i, z)| alpha.powi(i as i32 + 1) * z.re).sum();
    let quadrature_error = g_error.iter().enumerate().map(|(i, e)| alpha.abs().powi(i as i32 + 1) * e).sum();
    let (tail_ratio, tail) = tail_bound(&g, alpha, tail_cap(model, step)?);
    Ok(SeriesResult {
        step,
        anchor: x,
        tau: problem.tau,
        alpha,
        g,
        g_error,
        frame: symbol(x, model.l()),
        previous_shift,
        step_shift,
        tail_ratio,
        tail_bound: tail,
        quadrature_error,
        contour,
        oracle_gap: None,
        earlier,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OracleShift {
    /// Refined eigenvalue minus `|x|^{2l}`.
    pub shift: f64,
    /// Dense eigenvalue nearest the anchor energy, same frame.
    pub dense: f64,
    /// Dense eigenvalues within the step's contour radius of the anchor.
    pub dense_count: usize,
    pub dim: usize,
}

/// Eigenvalue of `H^{(n-1)} + alpha W_n` attached to the anchor, from the
/// truncated Bloch matrix.
pub fn oracle_shift(model: &Model, x: Vec2, step: u32, alpha: f64, with_dense: bool) -> Result<OracleShift> {
    let cell = model.cell(step)?;
    let w = model.cumulative_on(step - 1, step)?.add(&model.window_on(step, step)?.scaled(alpha));
    let m = assemble_anchored(x, &w, &cell, &model.cfg)?;
    let pos = m.anchor.expect("anchored matrix");
    let r = refine_eigenpair(&m, pos)?;
    let (dense, dense_count) = if with_dense {
        let spec = crate::bloch_oracle::eig(&m)?;
        let radius = if step == 1 { step1_contour(model).radius } else { model.epsilon(step - 1)?.value / 2.0 + r.shift.abs() };
        let near = crate::bloch_oracle::eigenvalue_near(&spec, 0.0, radius);
        let nearest = spec.values.iter().copied().fold(f64::INFINITY, |b, v| if v.abs() < b.abs() { v } else { b });
        (nearest, near.count)
    } else {
        (f64::NAN, 0)
    };
    Ok(OracleShift { shift: r.value, dense, dense_count, dim: m.dim() })
}

/// Fills `oracle_gap` with `|series - oracle|` for the shift.
pub fn attach_oracle(model: &Model, result: &mut SeriesResult) -> Result<OracleShift> {
    let o = oracle_shift(model, result.anchor, result.step, result.alpha, false)?;
    result.oracle_gap = Some((result.shift() - o.shift).abs());
    Ok(o)
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub step: u32,
    pub alpha: f64,
    pub problem: LocalProblem,
    /// `E + sum alpha^r G_r` in the node basis.
    pub projector: DMatrix<Complex64>,
    /// `sum alpha^r G_r` in the node basis.
    pub correction: DMatrix<Complex64>,
    pub coefficient_norms: Vec<f64>,
    pub quadrature_error: f64,
    /// `||P - P_oracle||_1`, the oracle vector restricted to the ball.
    pub oracle_distance: Option<f64>,
}

impl ProjectionResult {
    /// `max |P^2 - P|` formed as `EQ + QE + Q^2 - Q` so the unit entry never
    /// absorbs the correction.
    pub fn idempotency_defect(&self) -> f64 {
        let e = self.problem.reference_projector();
        let q = &self.correction;
        let d = &e * q + q * &e + q * q - q;
        d.iter().fold(0.0f64, |a, z| a.max(z.norm()))
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.projector.nrows()).map(|i| self.projector[(i, i)]).sum()
    }

    pub fn correction_trace(&self) -> Complex64 {
        (0..self.correction.nrows()).map(|i| self.correction[(i, i)]).sum()
    }
}

pub fn projection_series(model: &Model, alpha: f64, x: Vec2, step: u32, r_max: usize, in_domain: bool, with_oracle: bool) -> Result<ProjectionResult> {
    if !in_domain {
        return Err(Error::NonResonanceViolation);
    }
    let problem = LocalProblem::new(model, x, step, r_max.max(1) + usize::from(step > 1))?;
    if step == 1 {
        free_denominators(&problem, model)?;
    }
    let contour = step_contour(model, &problem)?;
    let vals = contour_integrals(&problem, &contour, r_max, true)?;
    let n = problem.dim();
    let mut correction = DMatrix::<Complex64>::zeros(n, n);
    let mut coefficient_norms = Vec::new();
    let mut quadrature_error = 0.0;
    for (i, (g, err)) in vals.projections.unwrap().into_iter().enumerate() {
        let f = alpha.powi(i as i32 + 1);
        let gn = problem.to_nodes(&g);
        coefficient_norms.push(trace_norm(&gn));
        correction += gn * Complex64::new(f, 0.0);
        quadrature_error += err * f.abs();
    }
    let projector = problem.reference_projector() + &correction;
    let oracle_distance = if with_oracle {
        let cell = model.cell(step)?;
        let w = model.cumulative_on(step - 1, step)?.add(&model.window_on(step, step)?.scaled(alpha));
        let m = assemble_anchored(x, &w, &cell, &model.cfg)?;
        let r = refine_eigenpair(&m, m.anchor.unwrap())?;
        let j = problem.anchor_index;
        let v = DVector::from_iterator(n, problem.nodes.iter().map(|q| m.position_of(j + *q).map_or(Complex64::new(0.0, 0.0), |p| r.vector[p])));
        Some(trace_norm(&(&projector - &v * v.adjoint())))
    } else {
        None
    };
    Ok(ProjectionResult { step, alpha, problem, projector, correction, coefficient_norms, quadrature_error, oracle_distance })
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    pub r: usize,
    pub value: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    pub step: u32,
    pub surrogate: bool,
    pub coefficients: Vec<BoundCheck>,
    /// `|lambda^{(n)} - lambda^{(n-1)}|` against its corollary bound.
    pub remainder: BoundCheck,
}

impl BoundsReport {
    pub fn all_hold(&self) -> bool {
        self.remainder.holds && self.coefficients.iter().all(|c| c.holds)
    }
}

/// Coefficient bounds `|g_r^{(1)}| < k^{2l-2-4s_1-gamma_0 r-delta}` and
/// `|g_r^{(n)}| < (3 eps/2)(4 eps^3)^r` with `eps = eps_{n-1}` (surrogate
/// when the true value underflows), plus the corollary remainder bounds.
pub fn verify_bounds(result: &SeriesResult, model: &Model) -> Result<BoundsReport> {
    let c = &model.cfg;
    let k = c.k;
    let l = c.l as f64;
    let g0 = model.exps.gamma0;
    let (surrogate, coef_bound, rem_bound): (bool, Box<dyn Fn(usize) -> f64>, f64) = if result.step == 1 {
        (
            false,
            Box::new(move |r| k.powf(2.0 * l - 2.0 - 4.0 * c.s1 - g0 * r as f64 - c.delta)),
            2.0 * result.alpha * result.alpha * k.powf(2.0 * l - 2.0 - 4.0 * c.s1 - 2.0 * g0 - c.delta),
        )
    } else {
        let e = model.epsilon(result.step - 1)?;
        let eps = e.value;
        (e.surrogate, Box::new(move |r| 1.5 * eps * (4.0 * eps.powi(3)).powi(r as i32)), 12.0 * result.alpha.abs() * eps.powi(4))
    };
    let coefficients = result
        .g
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let b = coef_bound(i + 1);
            BoundCheck { r: i + 1, value: g.norm(), bound: b, holds: g.norm() < b }
        })
        .collect();
    let rem = result.step_shift.abs();
    Ok(BoundsReport {
        step: result.step,
        surrogate,
        coefficients,
        remainder: BoundCheck { r: 0, value: rem, bound: rem_bound, holds: rem <= rem_bound },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeProbe {
    pub step: u32,
    pub order: [u32; 2],
    pub h: f64,
    /// `T(m)` of the full eigenvalue.
    pub eigenvalue: f64,
    /// `T(m)` of the free symbol `|x|^{2l}`, analytic.
    pub free_analytic: f64,
    /// `T(m)` of the shift `lambda^{(n)} - |x|^{2l}`.
    pub shift: f64,
    /// Same derivative with half the step.
    pub shift_half_step: f64,
    /// Bound shape `2 m! k^{2l-2-4s_1-2 gamma_0-delta+|m|(1+4 s_1+2 delta)}`.
    pub bound: f64,
}

fn stencil(order: u32) -> Vec<(i32, f64)> {
    match order {
        0 => vec![(0, 1.0)],
        1 => vec![(-2, 1.0 / 12.0), (-1, -8.0 / 12.0), (1, 8.0 / 12.0), (2, -1.0 / 12.0)],
        _ => vec![(-2, -1.0 / 12.0), (-1, 16.0 / 12.0), (0, -30.0 / 12.0), (1, 16.0 / 12.0), (2, -1.0 / 12.0)],
    }
}

fn mixed_derivative(f: &dyn Fn(Vec2) -> Result<f64>, x: Vec2, order: [u32; 2], h: f64) -> Result<f64> {
    let mut acc = 0.0;
    for (i, wi) in stencil(order[0]) {
        for (j, wj) in stencil(order[1]) {
            acc += wi * wj * f([x[0] + i as f64 * h, x[1] + j as f64 * h])?;
        }
    }
    Ok(acc / h.powi((order[0] + order[1]) as i32))
}

/// Symbolic `T(m)|x|^{2l}` for `|m| <= 2`.
fn free_symbol_derivative(x: Vec2, order: [u32; 2], l: u32) -> f64 {
    let r2 = x[0] * x[0] + x[1] * x[1];
    let l = l as f64;
    let d1 = |i: usize| 2.0 * l * r2.powf(l - 1.0) * x[i];
    let d2 = |i: usize, j: usize| {
        let delta = if i == j { 1.0 } else { 0.0 };
        2.0 * l * r2.powf(l - 1.0) * delta + 4.0 * l * (l - 1.0) * r2.powf(l - 2.0) * x[i] * x[j]
    };
    match order {
        [0, 0] => r2.powf(l),
        [1, 0] => d1(0),
        [0, 1] => d1(1),
        [2, 0] => d2(0, 0),
        [0, 2] => d2(1, 1),
        _ => d2(0, 1),
    }
}

/// Fourth-order central differences of the series eigenvalue in `t`, which
/// moves the anchor by the same vector. The stencil must stay inside the
/// step's neighborhood of the anchor, of width `2k^{-1-4s_1-2 delta}` at step 1.
pub fn derivative_probe(model: &Model, x: Vec2, step: u32, order: [u32; 2], h: f64, r_max: usize) -> Result<DerivativeProbe> {
    if order[0] + order[1] > 2 {
        return Err(Error::ParameterDomain { name: "order", value: (order[0] + order[1]) as f64 });
    }
    let c = &model.cfg;
    let width = if step == 1 {
        2.0 * c.k.powf(-1.0 - 4.0 * c.s1 - 2.0 * c.delta)
    } else {
        model.epsilon(step - 1)?.value * c.k.powf(-2.0 * c.l as f64 + 1.0 - c.delta)
    };
    if 2.0 * h * std::f64::consts::SQRT_2 > width {
        return Err(Error::StencilLeavesRegion);
    }
    let shift_at = |y: Vec2| -> Result<f64> { Ok(eigenvalue_series(model, 1.0, y, step, r_max, true)?.shift()) };
    let full_at = |y: Vec2| -> Result<f64> { Ok(symbol(y, c.l) + shift_at(y)?) };
    let shift = mixed_derivative(&shift_at, x, order, h)?;
    let shift_half_step = mixed_derivative(&shift_at, x, order, h / 2.0)?;
    let eigenvalue = mixed_derivative(&full_at, x, order, h)?;
    let m = (order[0] + order[1]) as f64;
    let mfact: f64 = order.iter().map(|&o| if o == 2 { 2.0 } else { 1.0 }).product();
    let bound = 2.0 * mfact * c.k.powf(2.0 * c.l as f64 - 2.0 - 4.0 * c.s1 - 2.0 * model.exps.gamma0 - c.delta + m * (1.0 + 4.0 * c.s1 + 2.0 * c.delta));
    Ok(DerivativeProbe { step, order, h, eigenvalue, free_analytic: free_symbol_derivative(x, order, c.l), shift, shift_half_step, bound })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeriesReportEntry {
    pub r: usize,
    pub re: f64,
    pub im: f64,
    pub error: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeriesReport {
    pub step: u32,
    pub anchor: Vec2,
    pub shift: f64,
    pub tail_bound: f64,
    pub quadrature_error: f64,
    pub oracle_gap: Option<f64>,
    pub surrogate: bool,
    pub coefficients: Vec<SeriesReportEntry>,
}

/// JSON-ready view of a series result with its bound table.
pub fn series_report(result: &SeriesResult, model: &Model) -> Result<SeriesReport> {
    let bounds = verify_bounds(result, model)?;
    Ok(SeriesReport {
        step: result.step,
        anchor: result.anchor,
        shift: result.shift(),
        tail_bound: result.tail_bound,
        quadrature_error: result.quadrature_error,
        oracle_gap: result.oracle_gap,
        surrogate: bounds.surrogate,
        coefficients: result
            .g
            .iter()
            .zip(&result.g_error)
            .zip(&bounds.coefficients)
            .enumerate()
            .map(|(i, ((g, e), b))| SeriesReportEntry { r: i + 1, re: g.re, im: g.im, error: *e, bound: b.bound })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_config::{Config, HarmonicEntry};
    use approx::assert_relative_eq;

    fn cosine_model(k: f64, c: f64) -> Model {
        let mut cfg = Config::new(6, k);
        if c != 0.0 {
            cfg.harmonics.push(HarmonicEntry { level: 1, index: [1, 0], re: c, im: 0.0 });
        }
        Model::new(cfg).unwrap()
    }

    fn two_level(k: f64) -> Model {
        let mut cfg = Config::new(6, k);
        cfg.s1 = 0.2;
        cfg.harmonics = vec![
            HarmonicEntry { level: 1, index: [1, 0], re: 0.25, im: 0.0 },
            HarmonicEntry { level: 1, index: [0, 1], re: 0.25, im: 0.0 },
            HarmonicEntry { level: 2, index: [1, 0], re: 2.5e-4, im: 0.0 },
            HarmonicEntry { level: 2, index: [1, 1], re: 2.5e-4, im: 0.0 },
        ];
        Model::new(cfg).unwrap()
    }

    fn on_circle(k: f64, phi: f64) -> Vec2 {
        [k * phi.cos(), k * phi.sin()]
    }

    #[test]
    fn free_series_vanishes() {
        let m = cosine_model(16.0, 0.0);
        let x = on_circle(16.0, 0.3);
        let s = eigenvalue_series(&m, 1.0, x, 1, 4, true).unwrap();
        assert!(s.g.iter().all(|g| g.norm() == 0.0));
        assert_eq!(s.shift(), 0.0);
        assert!(verify_bounds(&s, &m).unwrap().all_hold());
        let p = projection_series(&m, 1.0, x, 1, 3, true, false).unwrap();
        assert!(p.correction.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn first_coefficient_vanishes_and_g2_matches() {
        let m = cosine_model(16.0, 1e-3);
        let x = on_circle(16.0, 0.3);
        let p = LocalProblem::new(&m, x, 1, 2).unwrap();
        let c = step1_contour(&m);
        let g1 = contour_g(1, &c, &p).unwrap();
        assert!(g1.value.norm() < 1e-10 * 16f64.powi(12));
        let g2 = contour_g(2, &c, &p).unwrap();
        let closed = g2_closed_form(&m, x).unwrap();
        assert_relative_eq!(g2.value.re, closed.direct, max_relative = 1e-8);
        assert!(g2.value.im.abs() < 1e-8 * closed.direct.abs());
        // two-term instance: c^2 [1/(p_j - p_{j+q}) + 1/(p_j - p_{j-q})]
        let e = m.cell(1).unwrap().extent();
        let two = 1e-6 * (1.0 / -symbol_shift(x, [e[0], 0.0], 6) + 1.0 / -symbol_shift(x, [-e[0], 0.0], 6));
        assert_relative_eq!(closed.direct, two, max_relative = 1e-14);
    }

    #[test]
    fn g1_matrix_matches_contour() {
        let m = cosine_model(16.0, 1e-3);
        let x = on_circle(16.0, 1.1);
        let p = LocalProblem::new(&m, x, 1, 1).unwrap();
        let closed = G1_closed_form(&m, &p).unwrap();
        let quad = contour_G(1, &step1_contour(&m), &p).unwrap();
        let scale = closed.iter().fold(0.0f64, |a, z| a.max(z.norm()));
        assert_eq!(closed.iter().filter(|z| z.norm() > 0.0).count(), 4);
        assert_eq!(closed[(p.center, p.center)], Complex64::new(0.0, 0.0));
        for (a, b) in closed.iter().zip(quad.matrix.iter()) {
            assert!((a - b).norm() <= 1e-8 * scale);
        }
    }

    #[test]
    fn series_matches_oracle() {
        let m = cosine_model(16.0, 1e-3);
        for phi in [0.3, 0.9, 2.0, 4.4] {
            let x = on_circle(16.0, phi);
            let mut s = eigenvalue_series(&m, 1.0, x, 1, 4, true).unwrap();
            attach_oracle(&m, &mut s).unwrap();
            let gap = s.oracle_gap.unwrap();
            assert!(gap <= s.tail_bound + s.quadrature_error, "phi {phi}: gap {gap:e} vs {:e}", s.tail_bound + s.quadrature_error);
        }
    }

    #[test]
    fn alpha_zero_is_base() {
        let m = cosine_model(16.0, 1e-3);
        let s = eigenvalue_series(&m, 0.0, on_circle(16.0, 0.3), 1, 4, true).unwrap();
        assert_eq!(s.shift(), 0.0);
        assert_eq!(s.eigenvalue(), symbol(on_circle(16.0, 0.3), 6));
        let p = projection_series(&m, 0.0, on_circle(16.0, 0.3), 1, 2, true, false).unwrap();
        assert_eq!(p.projector, p.problem.reference_projector());
        assert!(matches!(eigenvalue_series(&m, 1.0, on_circle(16.0, 0.3), 1, 4, false), Err(Error::NonResonanceViolation)));
    }

    #[test]
    fn alpha_polynomial_fit() {
        let m = cosine_model(16.0, 1e-3);
        let x = on_circle(16.0, 0.7);
        let s = eigenvalue_series(&m, 1.0, x, 1, 4, true).unwrap();
        for a in [0.25, -0.25, 0.5, -0.5, 1.0, -1.0] {
            let sa = eigenvalue_series(&m, a, x, 1, 4, true).unwrap();
            let poly: f64 = s.g.iter().enumerate().map(|(i, g)| a.powi(i as i32 + 1) * g.re).sum();
            assert!((sa.shift() - poly).abs() <= s.tail_bound + s.quadrature_error + 1e-15 * poly.abs());
            let o = oracle_shift(&m, x, 1, a, false).unwrap();
            assert!((o.shift - poly).abs() <= s.tail_bound + s.quadrature_error + 1e-12 * poly.abs());
        }
    }

    #[test]
    fn node_doubling_within_estimate() {
        let m = cosine_model(16.0, 1e-3);
        let x = on_circle(16.0, 0.7);
        let p = LocalProblem::new(&m, x, 1, 2).unwrap();
        let c = step1_contour(&m);
        let base = contour_integrals(&p, &c, 4, false).unwrap();
        let fine = contour_integrals(&p, &ContourSpec { nodes: 2 * c.nodes, ..c }, 4, false).unwrap();
        for (a, b) in base.g.iter().zip(&fine.g) {
            assert!((a.value - b.value).norm() <= a.error.max(1e-300));
        }
    }

    #[test]
    fn projection_series_properties() {
        let m = cosine_model(16.0, 1e-3);
        let x = on_circle(16.0, 0.7);
        let mut defects = Vec::new();
        for r in 1..=4 {
            let p = projection_series(&m, 1.0, x, 1, r, true, r == 4).unwrap();
            defects.push(p.idempotency_defect());
            if r == 4 {
                let norm = trace_norm(&p.correction);
                assert!(norm <= 2.0 * 16f64.powf(-m.exps.gamma0));
                assert!(p.correction_trace().norm() <= 10.0 * norm * f64::EPSILON + 1e-300);
                let d = p.oracle_distance.unwrap();
                assert!(d <= 1e-6 * norm, "oracle distance {d:e} vs norm {norm:e}");
            }
        }
        for w in defects.windows(2) {
            assert!(w[1] <= w[0], "{defects:?}");
        }
    }

    #[test]
    fn derivative_of_free_symbol() {
        let m = cosine_model(16.0, 0.0);
        let x = on_circle(16.0, 0.4);
        for order in [[1, 0], [0, 1], [2, 0], [1, 1]] {
            let p = derivative_probe(&m, x, 1, order, 1e-3, 2).unwrap();
            assert_relative_eq!(p.eigenvalue, p.free_analytic, max_relative = 1e-6);
            assert_eq!(p.shift, 0.0);
        }
        assert!(matches!(derivative_probe(&m, x, 1, [1, 0], 1.0, 2), Err(Error::StencilLeavesRegion)));
    }

    #[test]
    fn derivative_richardson() {
        let m = cosine_model(16.0, 1e-3);
        let x = on_circle(16.0, 0.4);
        let p = derivative_probe(&m, x, 1, [1, 0], 2e-3, 2).unwrap();
        assert!(p.shift.abs() < p.bound);
        assert_relative_eq!(p.shift, p.shift_half_step, max_relative = 1e-6);
    }

    #[test]
    fn rayleigh_schrodinger_ramp() {
        // integer dual lattice, anchor (10, 0), harmonic on (1, 0)
        let mut cfg = Config::new(6, 10.0);
        cfg.beta1 = 2.0 * PI;
        cfg.beta2 = 2.0 * PI;
        cfg.harmonics.push(HarmonicEntry { level: 1, index: [1, 0], re: 1e-3, im: 0.0 });
        let m = Model::new(cfg).unwrap();
        let x = [10.0, 0.0];
        let g2 = g2_closed_form(&m, x).unwrap().direct;
        let alphas = [0.25, 0.5, 1.0];
        let ys: Vec<f64> = alphas.iter().map(|a| oracle_shift(&m, x, 1, *a, false).unwrap().shift).collect();
        // lambda(alpha) = g2 a^2 + g4 a^4: eliminate g4 between the two smallest ramps.
        let (a1, a2) = (alphas[0], alphas[1]);
        let fit = (ys[0] / a1.powi(4) - ys[1] / a2.powi(4)) / (1.0 / (a1 * a1) - 1.0 / (a2 * a2));
        assert_relative_eq!(fit, g2, max_relative = 1e-6);
        assert_relative_eq!(ys[2], g2, max_relative = 1e-6);
    }

    #[test]
    fn step_two_series() {
        let m = two_level(16.0);
        assert_eq!(m.refinement(1), 2);
        let x = on_circle(16.0, 0.37);
        let mut s = eigenvalue_series(&m, 1.0, x, 2, 4, true).unwrap();
        let o = attach_oracle(&m, &mut s).unwrap();
        let b = verify_bounds(&s, &m).unwrap();
        assert!(b.surrogate);
        assert!(b.all_hold(), "{b:?}");
        assert!(s.oracle_gap.unwrap() <= s.total_uncertainty() + 1e-12 * o.shift.abs(), "{:e} vs {:e}", s.oracle_gap.unwrap(), s.total_uncertainty());
        assert!(s.step_shift.abs() < s.previous_shift.abs());
    }
}
