//! Truncated Bloch matrices in the plane-wave basis and their dense
//! eigendecompositions.
//!
//! Matrices are stored in an energy frame: the diagonal holds
//! `|p_m|^{2l} - frame`. An anchored matrix uses `frame = |x|^{2l}` for a
//! chosen dual vector `x = p_j(t)` and forms every diagonal entry with
//! [`symbol_shift`], so differences of order `|w|^2 / k^{2l-1}` survive.
//! Dense eigenvalues carry an absolute error of order `eps * max|diag|`;
//! [`refine_eigenpair`] recovers a high relative accuracy for the shift of a
//! simple eigenvalue from its anchor.

use std::collections::{HashMap, HashSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{reduce_to_cell, symbol, symbol_shift, LatticeIndex, PeriodCell, Quasimomentum, Vec2};
use crate::model_config::Config;
use crate::potential::WindowPotential;

const DEGENERACY_TOL: f64 = 1e-10;
const FULL_SCHUR_LIMIT: usize = 700;
const BALL_HOPS: usize = 6;

#[derive(Debug, Clone)]
pub struct BlochMatrix {
    pub window: u32,
    pub t: Quasimomentum,
    pub cell: PeriodCell,
    pub l: u32,
    pub indices: Vec<LatticeIndex>,
    pub momenta: Vec<Vec2>,
    /// Energy subtracted from the diagonal.
    pub frame: f64,
    /// Position of the anchor index for anchored matrices.
    pub anchor: Option<usize>,
    pub diag: Vec<f64>,
    pub matrix: DMatrix<Complex64>,
    support: Vec<LatticeIndex>,
    position: HashMap<LatticeIndex, usize>,
}

impl BlochMatrix {
    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    pub fn position_of(&self, j: LatticeIndex) -> Option<usize> {
        self.position.get(&j).copied()
    }

    /// `max |M - M*|`.
    pub fn hermiticity_residual(&self) -> f64 {
        let n = self.dim();
        let mut r: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                r = r.max((self.matrix[(a, b)] - self.matrix[(b, a)].conj()).norm());
            }
        }
        r
    }

    /// Positions reachable from `pos` in at most `hops` potential couplings.
    pub fn ball(&self, pos: usize, hops: usize) -> Vec<usize> {
        let mut seen = HashSet::from([pos]);
        let mut queue = VecDeque::from([(pos, 0usize)]);
        while let Some((a, d)) = queue.pop_front() {
            if d == hops {
                continue;
            }
            for q in &self.support {
                if let Some(b) = self.position_of(self.indices[a] + *q) {
                    if seen.insert(b) {
                        queue.push_back((b, d + 1));
                    }
                }
            }
        }
        let mut out: Vec<usize> = seen.into_iter().collect();
        out.sort_unstable();
        out
    }
}

fn check_truncation(cfg: &Config) -> Result<()> {
    if cfg.trunc_radius < 2.0 * cfg.k {
        return Err(Error::TruncationTooSmall { radius: cfg.trunc_radius, min: 2.0 * cfg.k });
    }
    Ok(())
}

fn build(
    t: Quasimomentum,
    cell: &PeriodCell,
    w: &WindowPotential,
    l: u32,
    indices: Vec<LatticeIndex>,
    momenta: Vec<Vec2>,
    diag: Vec<f64>,
    frame: f64,
    anchor: Option<usize>,
) -> BlochMatrix {
    let n = indices.len();
    let position: HashMap<LatticeIndex, usize> = indices.iter().enumerate().map(|(i, j)| (*j, i)).collect();
    let mut matrix = DMatrix::<Complex64>::zeros(n, n);
    for a in 0..n {
        matrix[(a, a)] = Complex64::new(diag[a], 0.0);
        for (q, c) in &w.coefficients {
            if let Some(&b) = position.get(&(indices[a] - *q)) {
                matrix[(a, b)] += c;
            }
        }
    }
    BlochMatrix {
        window: w.window,
        t,
        cell: *cell,
        l,
        indices,
        momenta,
        frame,
        anchor,
        diag,
        matrix,
        support: w.coefficients.keys().copied().collect(),
        position,
    }
}

/// `H(t)_{mq} = p_m^{2l}(t) delta_{mq} + w_{m-q}` over all `m` with
/// `|p_m(0)| <= trunc_radius`, in the plain frame (`frame = 0`). The
/// potential must live on the dual lattice of `cell`.
pub fn assemble(t: &Quasimomentum, w: &WindowPotential, cell: &PeriodCell, cfg: &Config) -> Result<BlochMatrix> {
    assemble_in_frame(t, w, cell, cfg, 0.0)
}

/// As [`assemble`] with `frame` subtracted from the diagonal.
pub fn assemble_in_frame(
    t: &Quasimomentum,
    w: &WindowPotential,
    cell: &PeriodCell,
    cfg: &Config,
    frame: f64,
) -> Result<BlochMatrix> {
    check_truncation(cfg)?;
    if t.level != cell.level {
        return Err(Error::LevelMismatch { expected: cell.level, found: t.level });
    }
    let indices = cell.indices_within(cfg.trunc_radius);
    let momenta: Vec<Vec2> = indices
        .iter()
        .map(|j| {
            let o = cell.offset(*j);
            [o[0] + t.t[0], o[1] + t.t[1]]
        })
        .collect();
    let diag = momenta.iter().map(|p| symbol(*p, cfg.l) - frame).collect();
    Ok(build(*t, cell, w, cfg.l, indices, momenta, diag, frame, None))
}

/// Matrix anchored at the dual vector `x`: `t` and the anchor index come
/// from reducing `x` to the cell, momenta are `x + 2 pi (m - j) / (N a)` and
/// the frame is `|x|^{2l}`.
pub fn assemble_anchored(x: Vec2, w: &WindowPotential, cell: &PeriodCell, cfg: &Config) -> Result<BlochMatrix> {
    check_truncation(cfg)?;
    let (t, j) = reduce_to_cell(x, cell);
    let indices = cell.indices_within(cfg.trunc_radius);
    let anchor = indices.iter().position(|m| *m == j).ok_or(Error::TruncationTooSmall {
        radius: cfg.trunc_radius,
        min: (x[0] * x[0] + x[1] * x[1]).sqrt(),
    })?;
    let offsets: Vec<Vec2> = indices.iter().map(|m| cell.offset(*m - j)).collect();
    let momenta = offsets.iter().map(|o| [x[0] + o[0], x[1] + o[1]]).collect();
    let diag = offsets.iter().map(|o| symbol_shift(x, *o, cfg.l)).collect();
    Ok(build(t, cell, w, cfg.l, indices, momenta, diag, symbol(x, cfg.l), Some(anchor)))
}

/// Non-Hermitian matrix at complex quasimomentum, with the holomorphic
/// symbol `(p . p)^l`.
pub fn assemble_complex(
    t: [Complex64; 2],
    w: &WindowPotential,
    cell: &PeriodCell,
    cfg: &Config,
) -> Result<(Vec<LatticeIndex>, DMatrix<Complex64>)> {
    check_truncation(cfg)?;
    let indices = cell.indices_within(cfg.trunc_radius);
    let position: HashMap<LatticeIndex, usize> = indices.iter().enumerate().map(|(i, j)| (*j, i)).collect();
    let n = indices.len();
    let mut m = DMatrix::<Complex64>::zeros(n, n);
    for a in 0..n {
        let o = cell.offset(indices[a]);
        let p = [t[0] + o[0], t[1] + o[1]];
        m[(a, a)] = (p[0] * p[0] + p[1] * p[1]).powi(cfg.l as i32);
        for (q, c) in &w.coefficients {
            if let Some(&b) = position.get(&(indices[a] - *q)) {
                m[(a, b)] += c;
            }
        }
    }
    Ok((indices, m))
}

#[derive(Debug, Clone)]
pub struct BlochSpectrum {
    pub window: u32,
    pub t: Quasimomentum,
    pub frame: f64,
    /// Ascending, in the matrix frame.
    pub values: Vec<f64>,
    /// Column `i` belongs to `values[i]`.
    pub vectors: DMatrix<Complex64>,
}

impl BlochSpectrum {
    pub fn vector(&self, i: usize) -> DVector<Complex64> {
        self.vectors.column(i).into_owned()
    }

    /// Position of the largest-magnitude component of eigenvector `i`.
    pub fn dominant_position(&self, i: usize) -> usize {
        argmax_norm(self.vectors.column(i).iter())
    }
}

fn argmax_norm<'a>(it: impl Iterator<Item = &'a Complex64>) -> usize {
    let mut best = (0, -1.0);
    for (i, z) in it.enumerate() {
        if z.norm() > best.1 {
            best = (i, z.norm());
        }
    }
    best.0
}

fn fix_phase(v: &mut DVector<Complex64>) {
    let i = argmax_norm(v.iter());
    let z = v[i];
    if z.norm() > 0.0 {
        let rot = z.conj() / z.norm();
        *v *= rot;
        v[i] = Complex64::new(v[i].re, 0.0);
    }
}

/// Full dense eigendecomposition; eigenvalues ascending, each eigenvector
/// rotated so its largest component is real positive.
pub fn eig(m: &BlochMatrix) -> Result<BlochSpectrum> {
    let scale = m.diag.iter().fold(1.0f64, |a, d| a.max(d.abs()));
    let herm = m.hermiticity_residual();
    if herm > 1e-12 * scale {
        return Err(Error::Linalg(format!("matrix is not Hermitian (residual {herm:e}); use eig_general")));
    }
    let se = m.matrix.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..se.eigenvalues.len()).collect();
    order.sort_by(|a, b| se.eigenvalues[*a].total_cmp(&se.eigenvalues[*b]));
    let n = m.dim();
    let mut vectors = DMatrix::<Complex64>::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (c, &i) in order.iter().enumerate() {
        values.push(se.eigenvalues[i]);
        let mut v = se.eigenvectors.column(i).into_owned();
        fix_phase(&mut v);
        vectors.set_column(c, &v);
    }
    Ok(BlochSpectrum { window: m.window, t: m.t, frame: m.frame, values, vectors })
}

/// Eigenvalues of a general complex matrix, sorted by real then imaginary part.
pub fn eig_general(m: &DMatrix<Complex64>) -> Result<Vec<Complex64>> {
    let schur = m.clone().schur();
    let mut ev: Vec<Complex64> = schur.eigenvalues().ok_or_else(|| Error::Linalg("complex Schur failed".into()))?.iter().copied().collect();
    ev.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(ev)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NearEigen {
    pub index: Option<usize>,
    pub value: Option<f64>,
    pub count: usize,
}

/// The eigenvalue in `(center - radius, center + radius)` if it is unique;
/// `center` is in the spectrum's frame.
pub fn eigenvalue_near(spec: &BlochSpectrum, center: f64, radius: f64) -> NearEigen {
    let hits: Vec<usize> = (0..spec.values.len()).filter(|i| (spec.values[*i] - center).abs() < radius).collect();
    if hits.len() == 1 {
        NearEigen { index: Some(hits[0]), value: Some(spec.values[hits[0]]), count: 1 }
    } else {
        NearEigen { index: None, value: None, count: hits.len() }
    }
}

/// Gap from eigenvalue `i` to its neighbours relative to its absolute size.
pub fn relative_gap(spec: &BlochSpectrum, i: usize) -> f64 {
    let v = spec.values[i];
    let mut gap = f64::INFINITY;
    if i > 0 {
        gap = gap.min(v - spec.values[i - 1]);
    }
    if i + 1 < spec.values.len() {
        gap = gap.min(spec.values[i + 1] - v);
    }
    gap / (v + spec.frame).abs().max(1.0)
}

/// `P = v v*` for a simple eigenvalue.
pub fn projection_matrix(spec: &BlochSpectrum, i: usize) -> Result<DMatrix<Complex64>> {
    let gap = relative_gap(spec, i);
    if gap < DEGENERACY_TOL {
        return Err(Error::NearDegenerate { gap });
    }
    let v = spec.vector(i);
    Ok(&v * v.adjoint())
}

#[derive(Debug, Clone, Serialize)]
pub struct BandPoint {
    pub t: Vec2,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BandField {
    pub window: u32,
    pub grid: usize,
    pub bands: usize,
    pub points: Vec<BandPoint>,
}

impl BandField {
    /// `(q_n, Q_n)`: minimum and maximum of each band over the grid.
    pub fn edges(&self) -> Vec<(f64, f64)> {
        (0..self.bands)
            .map(|b| {
                self.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.values[b]), hi.max(p.values[b])))
            })
            .collect()
    }

    /// Largest change of any band between grid neighbours.
    pub fn max_jump(&self) -> f64 {
        let g = self.grid;
        let mut jump: f64 = 0.0;
        for i in 0..g {
            for k in 0..g {
                let a = &self.points[i * g + k];
                for nb in [(i + 1, k), (i, k + 1)] {
                    if nb.0 < g && nb.1 < g {
                        let b = &self.points[nb.0 * g + nb.1];
                        for (x, y) in a.values.iter().zip(&b.values) {
                            jump = jump.max((x - y).abs());
                        }
                    }
                }
            }
        }
        jump
    }

    /// CSV rows `t1,t2,band_index,eigenvalue` in grid order.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        for p in &self.points {
            for (b, v) in p.values.iter().enumerate() {
                rows.push(format!("{:.17e},{:.17e},{},{:.17e}", p.t[0], p.t[1], b, v));
            }
        }
        rows
    }
}

/// Lowest `bands` eigenvalues on a `grid x grid` sample of the cell (grid
/// points at cell-relative coordinates `(i + 1/2) / grid`).
pub fn band_sample(cell: &PeriodCell, w: &WindowPotential, cfg: &Config, grid: usize, bands: usize) -> Result<BandField> {
    if grid < 8 {
        return Err(Error::GridTooCoarse(format!("band grid {grid} < 8")));
    }
    let e = cell.extent();
    let mut points = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for k in 0..grid {
            let t = Quasimomentum::new((i as f64 + 0.5) / grid as f64 * e[0], (k as f64 + 0.5) / grid as f64 * e[1], cell.level);
            let spec = eig(&assemble(&t, w, cell, cfg)?)?;
            points.push(BandPoint { t: t.t, values: spec.values.iter().take(bands).copied().collect() });
        }
    }
    Ok(BandField { window: w.window, grid, bands: bands.min(points.first().map_or(0, |p| p.values.len())), points })
}

#[derive(Debug, Clone)]
pub struct RefinedEigenpair {
    pub position: usize,
    /// Eigenvalue minus the diagonal entry at `position`.
    pub shift: f64,
    /// Eigenvalue in the matrix frame.
    pub value: f64,
    /// Unit eigenvector over the full index list; the anchor component is real positive.
    pub vector: DVector<Complex64>,
    pub iterations: usize,
    pub scope: usize,
}

/// Eigenpair attached to diagonal position `pos` by Newton iteration on the
/// Schur complement `mu + H_jB (H_BB - d_j - mu)^{-1} H_Bj = 0`. Large
/// matrices restrict `B` to a ball of potential couplings around `pos`.
pub fn refine_eigenpair(m: &BlochMatrix, pos: usize) -> Result<RefinedEigenpair> {
    let scope: Vec<usize> = if m.dim() <= FULL_SCHUR_LIMIT {
        (0..m.dim()).filter(|&b| b != pos).collect()
    } else {
        m.ball(pos, BALL_HOPS).into_iter().filter(|&b| b != pos).collect()
    };
    refine_on(m, pos, &scope)
}

pub fn refine_on(m: &BlochMatrix, pos: usize, scope: &[usize]) -> Result<RefinedEigenpair> {
    let nb = scope.len();
    let d_j = m.diag[pos];
    let h_bj = DVector::from_iterator(nb, scope.iter().map(|&b| m.matrix[(b, pos)]));
    let mut base = DMatrix::<Complex64>::zeros(nb, nb);
    for (r, &a) in scope.iter().enumerate() {
        for (c, &b) in scope.iter().enumerate() {
            base[(r, c)] = m.matrix[(a, b)];
        }
        base[(r, r)] = Complex64::new(m.diag[a] - d_j, 0.0);
    }
    let mut mu = 0.0f64;
    let mut x = DVector::<Complex64>::zeros(nb);
    let mut iterations = 0;
    if h_bj.iter().any(|z| z.norm() > 0.0) {
        for it in 1..=60 {
            iterations = it;
            let mut a = base.clone();
            for r in 0..nb {
                a[(r, r)] -= mu;
            }
            x = a.lu().solve(&h_bj).ok_or_else(|| Error::Linalg("singular Schur block".into()))?;
            let s = h_bj.dotc(&x).re;
            let f = mu + s;
            let fp = 1.0 + x.norm_squared();
            let next = mu - f / fp;
            let done = (next - mu).abs() <= 1e-15 * next.abs() || next == mu;
            mu = next;
            if done {
                break;
            }
        }
    }
    let mut v = DVector::<Complex64>::zeros(m.dim());
    v[pos] = Complex64::new(1.0, 0.0);
    for (r, &b) in scope.iter().enumerate() {
        v[b] = -x[r];
    }
    let nrm = v.norm();
    v /= Complex64::new(nrm, 0.0);
    Ok(RefinedEigenpair { position: pos, shift: mu, value: d_j + mu, vector: v, iterations, scope: nb })
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelMatch {
    pub shift: LatticeIndex,
    pub anchor: LatticeIndex,
    pub coarse_shift: f64,
    pub fine_shift: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelConsistency {
    pub tau: Vec2,
    pub coarse_values: Vec<f64>,
    pub fine_values: Vec<f64>,
    /// Largest dense-eigenvalue mismatch relative to `lambda`.
    pub dense_mismatch: f64,
    /// Largest refined-shift mismatch relative to the shift size.
    pub refined_mismatch: f64,
    pub matches: Vec<LevelMatch>,
}

/// Compares the spectrum of the refined-lattice matrix at `tau` (carrying a
/// coarse potential re-indexed onto the fine lattice) inside
/// `[lambda - width, lambda + width]` with the union of coarse spectra at
/// `t_p = tau + 2 pi p / (N a)`.
pub fn level_consistency(
    tau: &Quasimomentum,
    coarse_w: &WindowPotential,
    coarse_cell: &PeriodCell,
    fine_cell: &PeriodCell,
    cfg: &Config,
    lambda: f64,
    width: f64,
) -> Result<LevelConsistency> {
    let n = (fine_cell.refinement / coarse_cell.refinement) as i64;
    let fine_w = coarse_w.refined(n);
    let in_window = |v: f64| v.abs() <= width;
    let fine = assemble_in_frame(tau, &fine_w, fine_cell, cfg, lambda)?;
    let fine_spec = eig(&fine)?;
    let mut fine_values: Vec<f64> = fine_spec.values.iter().copied().filter(|v| in_window(*v)).collect();
    let mut coarse_values = Vec::new();
    let mut matches = Vec::new();
    let mut refined_mismatch: f64 = 0.0;
    for p in crate::lattice::shift_set(n) {
        let o = fine_cell.offset(p);
        let tp = Quasimomentum::new(tau.t[0] + o[0], tau.t[1] + o[1], coarse_cell.level);
        let coarse = assemble_in_frame(&tp, coarse_w, coarse_cell, cfg, lambda)?;
        let spec = eig(&coarse)?;
        for i in 0..spec.values.len() {
            if !in_window(spec.values[i]) {
                continue;
            }
            coarse_values.push(spec.values[i]);
            let j = coarse.indices[spec.dominant_position(i)];
            let x = coarse.momenta[spec.dominant_position(i)];
            let c = assemble_anchored(x, coarse_w, coarse_cell, cfg)?;
            let f = assemble_anchored(x, &fine_w, fine_cell, cfg)?;
            let rc = refine_eigenpair(&c, c.anchor.unwrap())?;
            let rf = refine_eigenpair(&f, f.anchor.unwrap())?;
            let scale = rc.shift.abs().max(f64::MIN_POSITIVE);
            refined_mismatch = refined_mismatch.max((rc.shift - rf.shift).abs() / scale);
            matches.push(LevelMatch { shift: p, anchor: j, coarse_shift: rc.shift, fine_shift: rf.shift });
        }
    }
    coarse_values.sort_by(f64::total_cmp);
    fine_values.sort_by(f64::total_cmp);
    let dense_mismatch = if coarse_values.len() == fine_values.len() {
        coarse_values.iter().zip(&fine_values).map(|(a, b)| (a - b).abs() / lambda).fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    Ok(LevelConsistency { tau: tau.t, coarse_values, fine_values, dense_mismatch, refined_mismatch, matches })
}
