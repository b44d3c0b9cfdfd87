//! Finite-step level sets `{x in G_n : lambda_n(x) < lambda}` in `(lambda, phi)`
//! coordinates, the transforms `T_n`/`S_n` on Gaussian test functions and the
//! epsilon-linearity checks standing in for absolute continuity.
//!
//! Fourier convention: `F^(xi) = int F(x) e^{-i<xi, x>} dx`, so
//! `||F||^2 = (1/4 pi^2) ||F^||^2` and `<F, e^{i<kappa, x>}> = F^(kappa)`.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::isoenergetic::{build_isocurve, carve_chi1, carve_chi2, compare_sets, kappa_value, sample_angles, AngleSet, Chi2Method};
use crate::lattice::Vec2;
use crate::model::Model;
use crate::perturbation::eigenvalue_series;
use crate::wavefield::{assemble_wave, assemble_wave_local, BlochWave};

type C64 = Complex64;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub const GL8_NODES: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (-0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
];

/// Radial step for the derivative of the series shift.
const DERIV_STEP: f64 = 1e-3;
/// Couplings kept around the anchor for step-1 waves in the ring.
const WAVE_HOPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SliceMethod {
    /// `2l kappa^{2l-1}` plus a central difference of the series shift.
    Series,
    /// `epsilon / (kappa(lambda + epsilon) - kappa(lambda))`.
    FiniteDifference,
}

#[derive(Debug, Clone, Serialize)]
pub struct SliceSample {
    pub phi: f64,
    /// Angular quadrature weight.
    pub weight: f64,
    /// `kappa_n(lambda, phi)`.
    pub kappa: f64,
    pub dlam_dkappa: f64,
    pub method: SliceMethod,
}

/// One node of the `(lambda, phi)` product rule; `measure` is the area
/// element `kappa / (d lambda_n / d kappa) d lambda d phi`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RingNode {
    pub phi: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub measure: f64,
}

impl RingNode {
    pub fn point(&self) -> Vec2 {
        [self.kappa * self.phi.cos(), self.kappa * self.phi.sin()]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RingQuadrature {
    pub step: u32,
    pub lambda: f64,
    pub eps: f64,
    pub nodes: Vec<RingNode>,
    pub samples: Vec<SliceSample>,
    /// Angles where the kappa solve failed and the free radius was used.
    pub failures: usize,
    /// Largest `|h(lambda + eps) - h(lambda)|`; inner nodes interpolate `h`
    /// linearly between the two solves.
    pub h_drift: f64,
}

/// Product rule on `{x : lambda <= lambda_n(x) < lambda + eps, phi in domain}`:
/// curve samples in `phi`, 8-point Gauss-Legendre in `lambda`.
pub fn ring_quadrature(model: &Model, step: u32, eps: f64, domain: &AngleSet, samples: usize) -> Result<RingQuadrature> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::ParameterDomain { name: "eps", value: eps });
    }
    if domain.is_empty() {
        return Err(Error::EmptyDomain);
    }
    let l = model.l();
    let twol = 2.0 * l as f64;
    let lam = model.lambda();
    let k0 = model.k();
    let k1 = (lam + eps).powf(1.0 / twol);
    let outer = Model::with_potential(model.cfg.with_k(k1), model.exps.clone(), model.potential.clone())?;
    let r_max = model.cfg.r_max as usize;
    let angles = sample_angles(domain, samples);
    let mut nodes = Vec::with_capacity(angles.len() * GL8_NODES.len());
    let mut out = Vec::with_capacity(angles.len());
    let mut failures = 0;
    let mut h_drift = 0.0f64;
    for (phi, d) in angles {
        let h0 = kappa_value(model, phi, step, r_max);
        let h1 = kappa_value(&outer, phi, step, r_max);
        if h0.is_err() || h1.is_err() {
            failures += 1;
        }
        let (h0, h1) = (h0.unwrap_or(0.0), h1.unwrap_or(0.0));
        h_drift = h_drift.max((h1 - h0).abs());
        let kappa = k0 + h0;
        let nu = [phi.cos(), phi.sin()];
        let series = |r: f64| eigenvalue_series(model, 1.0, [r * nu[0], r * nu[1]], step, r_max, true).map(|s| s.shift());
        let (method, df) = match (series(kappa + DERIV_STEP), series(kappa - DERIV_STEP)) {
            (Ok(a), Ok(b)) => (SliceMethod::Series, (a - b) / (2.0 * DERIV_STEP)),
            _ => (SliceMethod::FiniteDifference, 0.0),
        };
        let dk = k1 + h1 - kappa;
        let derivative = |r: f64| match method {
            SliceMethod::Series => twol * r.powi(2 * l as i32 - 1) + df,
            SliceMethod::FiniteDifference => eps / dk,
        };
        out.push(SliceSample { phi, weight: d, kappa, dlam_dkappa: derivative(kappa), method });
        for (t, w) in GL8_NODES {
            let s = 0.5 * (1.0 + t);
            let lam_g = lam + eps * s;
            let r = lam_g.powf(1.0 / twol) + h0 + (h1 - h0) * s;
            nodes.push(RingNode { phi, lambda: lam_g, kappa: r, measure: d * 0.5 * eps * w * r / derivative(r) });
        }
    }
    let total = out.len();
    if failures * 100 > total {
        return Err(Error::CurveFailures { failed: failures, total });
    }
    Ok(RingQuadrature { step, lambda: lam, eps, nodes, samples: out, failures, h_drift })
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelSetSlice {
    pub step: u32,
    pub lambda: f64,
    pub eps: f64,
    /// `|G_{n, lambda + eps} \ G_{n, lambda}|`.
    pub area: f64,
    /// Free annulus over the same angles, `|domain|/2 * [(lambda+eps)^{1/l} - lambda^{1/l}]`.
    pub free_area: f64,
    /// `2 pi lambda^{-(l-1)/l} eps`.
    pub bound: f64,
    /// `1 - area / bound`; nonnegative when the bound holds.
    pub slack: f64,
    pub samples: Vec<SliceSample>,
    pub failures: usize,
    pub h_drift: f64,
}

/// Area of the step-`n` ring between `lambda` and `lambda + eps` over `domain`.
pub fn ring_area(model: &Model, step: u32, eps: f64, domain: &AngleSet, samples: usize) -> Result<LevelSetSlice> {
    let q = ring_quadrature(model, step, eps, domain, samples)?;
    let area: f64 = q.nodes.iter().map(|n| n.measure).sum();
    let lam = q.lambda;
    let li = 1.0 / model.l() as f64;
    let free_area = 0.5 * domain.measure() * ((lam + eps).powf(li) - lam.powf(li));
    let bound = TAU * lam.powf(li - 1.0) * eps;
    Ok(LevelSetSlice {
        step,
        lambda: lam,
        eps,
        area,
        free_area,
        bound,
        slack: 1.0 - area / bound,
        samples: q.samples,
        failures: q.failures,
        h_drift: q.h_drift,
    })
}

/// `ring_area` at `samples` and `2 samples`; rejects the run when doubling
/// moves the area by more than a tenth of `tol` (relative).
pub fn ring_area_checked(model: &Model, step: u32, eps: f64, domain: &AngleSet, samples: usize, tol: f64) -> Result<LevelSetSlice> {
    let coarse = ring_area(model, step, eps, domain, samples)?;
    let fine = ring_area(model, step, eps, domain, 2 * samples)?;
    let change = (fine.area - coarse.area).abs() / fine.area.abs().max(f64::MIN_POSITIVE);
    if change > 0.1 * tol {
        return Err(Error::RefinementUnstable { change, limit: 0.1 * tol });
    }
    Ok(fine)
}

/// `A exp(-|x - center|^2 / (2 width^2)) e^{i <carrier, x>}`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TestFunction {
    pub center: Vec2,
    pub width: f64,
    pub amplitude: f64,
    pub carrier: Vec2,
}

impl TestFunction {
    pub fn gaussian(center: Vec2, width: f64, amplitude: f64) -> Self {
        TestFunction { center, width, amplitude, carrier: [0.0, 0.0] }
    }

    pub fn with_carrier(mut self, carrier: Vec2) -> Self {
        self.carrier = carrier;
        self
    }

    pub fn value(&self, x: Vec2) -> C64 {
        let d = [x[0] - self.center[0], x[1] - self.center[1]];
        let g = self.amplitude * (-(d[0] * d[0] + d[1] * d[1]) / (2.0 * self.width * self.width)).exp();
        C64::from_polar(g, self.carrier[0] * x[0] + self.carrier[1] * x[1])
    }

    pub fn transform(&self, xi: Vec2) -> C64 {
        let e = [xi[0] - self.carrier[0], xi[1] - self.carrier[1]];
        let w2 = self.width * self.width;
        let g = self.amplitude * TAU * w2 * (-0.5 * w2 * (e[0] * e[0] + e[1] * e[1])).exp();
        C64::from_polar(g, -(e[0] * self.center[0] + e[1] * self.center[1]))
    }

    pub fn l2_norm(&self) -> f64 {
        self.amplitude.abs() * PI.sqrt() * self.width
    }

    pub fn l1_norm(&self) -> f64 {
        self.amplitude.abs() * TAU * self.width * self.width
    }
}

/// `<F, Psi> = sum_r F^(kappa + p_r) conj(c_r)`.
#[allow(non_snake_case)]
pub fn transform_T(f: &TestFunction, wave: &BlochWave) -> C64 {
    wave.coefficients
        .iter()
        .map(|(r, c)| {
            let o = wave.cell.offset(*r);
            f.transform([wave.kappa[0] + o[0], wave.kappa[1] + o[1]]) * c.conj()
        })
        .sum()
}

/// Step-`n` wave at `kappa`: ball-local at step 1, full oracle chain above.
pub fn wave_at(model: &Model, kappa: Vec2, step: u32) -> Result<BlochWave> {
    if step == 1 {
        assemble_wave_local(model, kappa, WAVE_HOPS)
    } else {
        assemble_wave(model, kappa, step, None)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionForm {
    pub step: u32,
    pub lambda: f64,
    pub eps: f64,
    /// `(1/4 pi^2) int_ring |<F, Psi_n>|^2`.
    pub value: f64,
    /// `value / ||F||^2`; at most 1 for a projection.
    pub operator_ratio: f64,
    /// `max |<F, Psi_n>| / ||F||_2` over the nodes.
    pub max_ratio: f64,
    pub nodes: usize,
}

pub fn projection_form(model: &Model, f: &TestFunction, step: u32, eps: f64, domain: &AngleSet, samples: usize) -> Result<ProjectionForm> {
    let q = ring_quadrature(model, step, eps, domain, samples)?;
    let norm = f.l2_norm();
    let mut value = 0.0;
    let mut max_ratio = 0.0f64;
    for n in &q.nodes {
        let t = transform_T(f, &wave_at(model, n.point(), step)?);
        value += n.measure * t.norm_sqr();
        max_ratio = max_ratio.max(t.norm() / norm);
    }
    value /= 4.0 * PI * PI;
    Ok(ProjectionForm { step, lambda: q.lambda, eps, value, operator_ratio: value / (norm * norm), max_ratio, nodes: q.nodes.len() })
}

/// A wave with its weight and quadrature measure.
#[derive(Debug, Clone)]
pub struct SynthesisNode {
    pub wave: BlochWave,
    pub weight: C64,
    pub measure: f64,
}

/// Nodes on the step-`n` curve at `lambda` with arc-length measure.
pub fn curve_nodes(model: &Model, step: u32, domain: &AngleSet, samples: usize, weight: impl Fn(f64) -> C64) -> Result<Vec<SynthesisNode>> {
    let curve = build_isocurve(model, step, domain, samples, None, model.cfg.r_max as usize)?;
    curve
        .samples
        .iter()
        .zip(&curve.spacing)
        .map(|(s, d)| {
            let r = curve.k + s.h;
            let wave = wave_at(model, [r * s.phi.cos(), r * s.phi.sin()], step)?;
            Ok(SynthesisNode { wave, weight: weight(s.phi), measure: r * d })
        })
        .collect()
}

/// Nodes of the `(lambda, phi)` ring rule with area measure.
pub fn ring_nodes(model: &Model, step: u32, eps: f64, domain: &AngleSet, samples: usize, weight: impl Fn(f64) -> C64) -> Result<Vec<SynthesisNode>> {
    let q = ring_quadrature(model, step, eps, domain, samples)?;
    q.nodes
        .iter()
        .map(|n| Ok(SynthesisNode { wave: wave_at(model, n.point(), step)?, weight: weight(n.phi), measure: n.measure }))
        .collect()
}

/// `S w (x) = sum w Psi(x) measure` at each point.
#[allow(non_snake_case)]
pub fn synthesize_S(nodes: &[SynthesisNode], points: &[Vec2]) -> Vec<C64> {
    points.iter().map(|x| nodes.iter().map(|n| n.weight * n.measure * n.wave.evaluate(*x)).sum()).collect()
}

/// `sum w conj(T F) measure`.
pub fn weight_pairing(nodes: &[SynthesisNode], f: &TestFunction) -> C64 {
    nodes.iter().map(|n| n.weight * transform_T(f, &n.wave).conj() * n.measure).sum()
}

/// Uniform grid over `[c - half, c + half]^2` with `per_side` points.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpatialBox {
    pub center: Vec2,
    pub half: f64,
    pub per_side: usize,
}

impl SpatialBox {
    pub fn spacing(&self) -> f64 {
        2.0 * self.half / self.per_side as f64
    }

    pub fn points(&self) -> Vec<Vec2> {
        let h = self.spacing();
        let mut out = Vec::with_capacity(self.per_side * self.per_side);
        for i in 0..self.per_side {
            for j in 0..self.per_side {
                out.push([self.center[0] - self.half + (i as f64 + 0.5) * h, self.center[1] - self.half + (j as f64 + 0.5) * h]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityAudit {
    /// `<S w, F>` by spatial quadrature.
    pub spatial: C64,
    /// `<w, T F>` over the sampled measure.
    pub spectral: C64,
    pub relative_gap: f64,
    /// `||S w||_{L2(box)} / (2 pi ||w||)`.
    pub synthesis_ratio: f64,
}

pub fn duality_audit(nodes: &[SynthesisNode], f: &TestFunction, grid: &SpatialBox) -> DualityAudit {
    let pts = grid.points();
    let s = synthesize_S(nodes, &pts);
    let h2 = grid.spacing().powi(2);
    let spatial: C64 = s.iter().zip(&pts).map(|(v, x)| v * f.value(*x).conj()).sum::<C64>() * h2;
    let spectral = weight_pairing(nodes, f);
    let box_norm = (s.iter().map(|v| v.norm_sqr()).sum::<f64>() * h2).sqrt();
    let w_norm = nodes.iter().map(|n| n.weight.norm_sqr() * n.measure).sum::<f64>().sqrt();
    DualityAudit {
        spatial,
        spectral,
        relative_gap: (spatial - spectral).norm() / spectral.norm().max(f64::MIN_POSITIVE),
        synthesis_ratio: box_norm / (TAU * w_norm),
    }
}

/// `Theta_n` at the model's energy; step 2 carves with `method`.
pub fn level_domain(model: &Model, step: u32, method: Chi2Method) -> Result<AngleSet> {
    let theta1 = carve_chi1(model)?;
    match step {
        1 => Ok(theta1),
        2 => {
            let r_max = model.cfg.r_max as usize;
            let curve1 = match method {
                Chi2Method::DeterminantDisk => build_isocurve(model, 1, &theta1, model.cfg.phi_samples, None, r_max)?,
                Chi2Method::GapTest => build_isocurve(model, 1, &theta1, 64, None, r_max)?,
            };
            carve_chi2(model, &theta1, &curve1, method, r_max)
        }
        n => Err(Error::MissingLevel { level: n }),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SymDiffRow {
    pub from: u32,
    pub to: u32,
    pub measure_from: f64,
    pub measure_to: f64,
    pub symmetric_difference: f64,
    pub lost: f64,
    pub gained: f64,
    /// Symmetric difference times `kappa * radial width`.
    pub area: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SymDiffReport {
    pub lambda: f64,
    pub eps: f64,
    pub radial_width: f64,
    /// Step-1 removed length times `kappa * radial width`.
    pub step1_removal: f64,
    pub rows: Vec<SymDiffRow>,
}

/// Surrogate for `|G_{n, lambda} delta G_{n+1, lambda}|` over consecutive
/// steps up to `steps`, each angle weighted by the ring `[lambda, lambda + eps]`.
pub fn symmetric_difference_trend(model: &Model, steps: u32, eps: f64, method: Chi2Method) -> Result<SymDiffReport> {
    let lam = model.lambda();
    let twol = 2.0 * model.l() as f64;
    let width = (lam + eps).powf(1.0 / twol) - lam.powf(1.0 / twol);
    let weight = model.k() * width;
    let sets = (1..=steps.min(model.steps())).map(|n| level_domain(model, n, method)).collect::<Result<Vec<_>>>()?;
    let rows = sets
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (a, b) = (&w[0], &w[1]);
            let sd = compare_sets(a, b);
            SymDiffRow {
                from: i as u32 + 1,
                to: i as u32 + 2,
                measure_from: a.measure(),
                measure_to: b.measure(),
                symmetric_difference: sd,
                lost: a.difference(b).measure(),
                gained: b.difference(a).measure(),
                area: sd * weight,
            }
        })
        .collect();
    Ok(SymDiffReport { lambda: lam, eps, radial_width: width, step1_removal: (TAU - sets[0].measure()) * weight, rows })
}

/// `lambda, eps, area, form value, bound, slack` rows; `forms` aligns with
/// `slices` and may be shorter.
pub fn measure_csv(slices: &[LevelSetSlice], forms: &[ProjectionForm]) -> String {
    let mut s = String::from("step,lambda,eps,area,form_value,bound,slack\n");
    for (i, sl) in slices.iter().enumerate() {
        let form = forms.get(i).map(|f| format!("{:.12e}", f.value)).unwrap_or_default();
        let _ = writeln!(s, "{},{:.12e},{:.6e},{:.12e},{},{:.12e},{:.6e}", sl.step, sl.lambda, sl.eps, sl.area, form, sl.bound, sl.slack);
    }
    s
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (num, den) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| {
        let dx = x.ln() - mx;
        (a + dx * (y.ln() - my), b + dx * dx)
    });
    num / den
}
