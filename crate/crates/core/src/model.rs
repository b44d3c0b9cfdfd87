//! A validated configuration together with everything derived from it: the
//! exponent ladder, the potential levels, the window sums and the cells.

use crate::error::{Error, Result};
use crate::lattice::PeriodCell;
use crate::model_config::{derive_exponents, epsilon_n, Config, DerivedExponents, Epsilon};
use crate::potential::{build_from_config, cumulative_window, window_sum, LimitPeriodic, WindowPotential};

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: Config,
    pub exps: DerivedExponents,
    pub potential: LimitPeriodic,
    windows: Vec<WindowPotential>,
    cumulative: Vec<WindowPotential>,
    cells: Vec<PeriodCell>,
}

impl Model {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let exps = derive_exponents(&cfg)?;
        let potential = build_from_config(&cfg, &exps)?;
        Self::with_potential(cfg, exps, potential)
    }

    pub fn with_potential(cfg: Config, exps: DerivedExponents, potential: LimitPeriodic) -> Result<Self> {
        let steps = cfg.n_steps.max(2).min(exps.levels());
        let mut windows = Vec::new();
        let mut cumulative = Vec::new();
        let mut cells = Vec::new();
        for n in 1..=steps {
            windows.push(window_sum(&potential, n, &exps)?);
            cumulative.push(cumulative_window(&potential, n, &exps)?);
            cells.push(PeriodCell::from_config(&cfg, &exps, n));
        }
        Ok(Model { cfg, exps, potential, windows, cumulative, cells })
    }

    /// Same model with every potential coefficient multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        Self::with_potential(self.cfg.clone(), self.exps.clone(), self.potential.scaled(alpha))
    }

    pub fn steps(&self) -> u32 {
        self.windows.len() as u32
    }

    fn check(&self, n: u32) -> Result<usize> {
        if n == 0 || n > self.steps() {
            return Err(Error::MissingLevel { level: n });
        }
        Ok((n - 1) as usize)
    }

    pub fn k(&self) -> f64 {
        self.cfg.k
    }

    pub fn l(&self) -> u32 {
        self.cfg.l
    }

    pub fn lambda(&self) -> f64 {
        self.cfg.lambda()
    }

    /// `W_n` on the level-`M_n` lattice.
    pub fn window(&self, n: u32) -> Result<&WindowPotential> {
        Ok(&self.windows[self.check(n)?])
    }

    /// `W_1 + ... + W_n` on the level-`M_n` lattice.
    pub fn cumulative(&self, n: u32) -> Result<&WindowPotential> {
        Ok(&self.cumulative[self.check(n)?])
    }

    fn lift(&self, w: &WindowPotential, from: u32, to: u32) -> WindowPotential {
        let factor = 1i64 << (self.exps.m(to) - self.exps.m(from));
        let mut out = w.refined(factor);
        out.lattice_level = self.exps.m(to);
        out
    }

    /// `W_{<=n}` re-indexed onto the lattice of step `target >= n`; the
    /// empty sum for `n = 0`.
    pub fn cumulative_on(&self, n: u32, target: u32) -> Result<WindowPotential> {
        self.check(target)?;
        if n == 0 {
            return Ok(WindowPotential::zero(0, self.exps.m(target)));
        }
        Ok(self.lift(self.cumulative(n)?, n, target))
    }

    pub fn window_on(&self, n: u32, target: u32) -> Result<WindowPotential> {
        self.check(target)?;
        Ok(self.lift(self.window(n)?, n, target))
    }

    pub fn cell(&self, n: u32) -> Result<PeriodCell> {
        Ok(self.cells[self.check(n)?])
    }

    pub fn epsilon(&self, n: u32) -> Result<Epsilon> {
        epsilon_n(&self.cfg, n)
    }

    /// `N_n` for step `n`, the refinement between the lattices of steps `n`
    /// and `n + 1`.
    pub fn refinement(&self, n: u32) -> u64 {
        self.exps.refinement(n)
    }
}
