//! Model parameters, the derived exponent ledger and the small-parameter
//! ladder `epsilon_n`.
//!
//! A [`Config`] is loaded once (from a flat TOML file, with optional
//! `key=value` overrides) and never mutated afterwards; every other module
//! reads the same record.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One conjugate pair of plane waves `c e^{i q.x} + conj(c) e^{-i q.x}` on
/// the dual lattice of period level `level`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonicEntry {
    pub level: u32,
    pub index: [i64; 2],
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

/// Harmonics with random phases filling the disk `|q| <= radius` (lattice
/// units) on one level, drawn from a seeded ChaCha stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomBlock {
    pub level: u32,
    pub radius: f64,
    pub amplitude: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    /// Order of the polyharmonic operator.
    pub l: u32,
    pub eta: f64,
    pub delta: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Energy parameter, `lambda = k^{2l}`.
    pub k: f64,
    pub s1: f64,
    pub n_steps: u32,
    pub trunc_radius: f64,
    pub r_max: u32,
    pub quad_points: u32,
    pub eps_surrogate: Option<f64>,
    /// Overall potential amplitude `C_hat`.
    pub amplitude: f64,
    pub strict_regime: bool,
    /// Decades of decay per level in the desk budget `C_hat 10^{-d (r-1)}`.
    pub budget_decades: f64,
    pub phi_samples: usize,
    pub band_grid: usize,
    pub harmonics: Vec<HarmonicEntry>,
    pub random_harmonics: Vec<RandomBlock>,
}

/// On-disk form: every key optional except `k`, defaults resolved in
/// [`Config::from_raw`].
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    l: Option<u32>,
    eta: Option<f64>,
    delta: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    k: Option<f64>,
    s1: Option<f64>,
    n_steps: Option<u32>,
    trunc_radius: Option<f64>,
    r_max: Option<u32>,
    quad_points: Option<u32>,
    eps_surrogate: Option<f64>,
    amplitude: Option<f64>,
    strict_regime: Option<bool>,
    budget_decades: Option<f64>,
    phi_samples: Option<usize>,
    band_grid: Option<usize>,
    #[serde(default)]
    harmonics: Vec<HarmonicEntry>,
    #[serde(default)]
    random_harmonics: Vec<RandomBlock>,
}

pub const DEFAULT_BETA: f64 = 2.0 * PI / 5.0;

impl Config {
    /// Desk defaults at operator order `l` and energy parameter `k`, with no
    /// potential.
    pub fn new(l: u32, k: f64) -> Self {
        let s1 = if 2 * l > 11 { (2.0 * l as f64 - 11.0) / 32.0 } else { 1.0 / 32.0 };
        Config {
            l,
            eta: 67.0,
            delta: 0.01,
            beta1: DEFAULT_BETA,
            beta2: DEFAULT_BETA,
            k,
            s1,
            n_steps: 1,
            trunc_radius: 3.0 * k,
            r_max: 4,
            quad_points: 64,
            eps_surrogate: Some(1e-2),
            amplitude: 1.0,
            strict_regime: false,
            budget_decades: 3.0,
            phi_samples: 4096,
            band_grid: 16,
            harmonics: Vec::new(),
            random_harmonics: Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses a config file and applies `key=value` overrides before the
    /// defaults are resolved. Override values use TOML syntax.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            let parsed: toml::Table = toml::from_str(&format!("{key} = {}", value.trim()))
                .map_err(|e| Error::Config(format!("override `{key}`: {e}")))?;
            let v = parsed
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Config(format!("override `{key}` has no value")))?;
            table.insert(key.to_string(), v);
        }
        let raw: RawConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_raw(raw)
    }

    fn from_raw(raw: RawConfig) -> Result<Self> {
        let k = raw.k.ok_or_else(|| Error::Config("missing key `k`".into()))?;
        let l = raw.l.unwrap_or(6);
        let mut cfg = Config::new(l, k);
        if let Some(s1) = raw.s1 {
            cfg.s1 = s1;
        } else if 2 * l <= 11 {
            return Err(Error::Config(format!("key `s1` is required when l = {l}")));
        }
        cfg.eta = raw.eta.unwrap_or(cfg.eta);
        cfg.delta = raw.delta.unwrap_or(cfg.delta);
        cfg.beta1 = raw.beta1.unwrap_or(cfg.beta1);
        cfg.beta2 = raw.beta2.unwrap_or(cfg.beta2);
        cfg.n_steps = raw.n_steps.unwrap_or(cfg.n_steps);
        cfg.trunc_radius = raw.trunc_radius.unwrap_or(3.0 * k);
        cfg.r_max = raw.r_max.unwrap_or(cfg.r_max);
        cfg.quad_points = raw.quad_points.unwrap_or(cfg.quad_points);
        cfg.eps_surrogate = raw.eps_surrogate.or(cfg.eps_surrogate);
        cfg.amplitude = raw.amplitude.unwrap_or(cfg.amplitude);
        cfg.strict_regime = raw.strict_regime.unwrap_or(false);
        cfg.budget_decades = raw.budget_decades.unwrap_or(cfg.budget_decades);
        cfg.phi_samples = raw.phi_samples.unwrap_or(cfg.phi_samples);
        cfg.band_grid = raw.band_grid.unwrap_or(cfg.band_grid);
        cfg.harmonics = raw.harmonics;
        cfg.random_harmonics = raw.random_harmonics;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with a different energy parameter; the truncation radius is
    /// rescaled to keep its ratio to `k`.
    pub fn with_k(&self, k: f64) -> Self {
        let mut c = self.clone();
        c.trunc_radius = self.trunc_radius / self.k * k;
        c.k = k;
        c
    }

    pub fn lambda(&self) -> f64 {
        self.k.powi(2 * self.l as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::ParameterDomain { name, value: v })
            }
        };
        if self.l < 1 {
            return Err(Error::ParameterDomain { name: "l", value: self.l as f64 });
        }
        if !(self.k > 1.0) || !self.k.is_finite() {
            return Err(Error::ParameterDomain { name: "k", value: self.k });
        }
        positive("eta", self.eta)?;
        positive("delta", self.delta)?;
        positive("beta1", self.beta1)?;
        positive("beta2", self.beta2)?;
        positive("s1", self.s1)?;
        positive("amplitude", self.amplitude)?;
        if self.n_steps < 1 {
            return Err(Error::ParameterDomain { name: "n_steps", value: 0.0 });
        }
        if self.r_max < 2 {
            return Err(Error::ParameterDomain { name: "r_max", value: self.r_max as f64 });
        }
        if self.quad_points < 16 {
            return Err(Error::ParameterDomain { name: "quad_points", value: self.quad_points as f64 });
        }
        if self.trunc_radius < 3.0 * self.k * (1.0 - 1e-12) {
            return Err(Error::ParameterDomain { name: "trunc_radius", value: self.trunc_radius });
        }
        if let Some(e) = self.eps_surrogate {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::ParameterDomain { name: "eps_surrogate", value: e });
            }
        }
        if self.strict_regime {
            let report = check_admissibility(self);
            if let Some(bad) = report.checks.iter().find(|c| c.structural && !c.holds) {
                return Err(Error::Config(format!("strict_regime: `{}` does not hold", bad.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedExponents {
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
    pub gamma5: f64,
    /// `s[n-1] = s_n`.
    pub s: Vec<f64>,
    /// `m[n-1] = M_n`, with `2^{M_n}` the smallest power of two `>= k^{s_n}`.
    pub m: Vec<u32>,
    /// `refinement[n-1] = N_n = 2^{M_{n+1} - M_n}`.
    pub refinement: Vec<u64>,
    /// `script_s[n-1]`, the cumulative exponent `2 sum_{i<n} (1 + s_i)`.
    pub script_s: Vec<f64>,
    pub c0: f64,
    pub c_star: f64,
}

impl DerivedExponents {
    pub fn s(&self, n: u32) -> f64 {
        self.s[(n - 1) as usize]
    }

    pub fn m(&self, n: u32) -> u32 {
        if n == 0 {
            0
        } else {
            self.m[(n - 1) as usize]
        }
    }

    /// `N_n`, the refinement between levels `n` and `n + 1`.
    pub fn refinement(&self, n: u32) -> u64 {
        self.refinement[(n - 1) as usize]
    }

    /// `N_{n-1} ... N_1`, the total refinement of the level-`n` lattice
    /// relative to level 1.
    pub fn cumulative_refinement(&self, n: u32) -> u64 {
        1u64 << (self.m(n) - self.m(1))
    }

    pub fn script_s(&self, n: u32) -> f64 {
        self.script_s[(n - 1) as usize]
    }

    pub fn levels(&self) -> u32 {
        self.s.len() as u32
    }
}

fn dyadic_ceiling(x: f64) -> u32 {
    let m = (x.log2() - 1e-12).ceil();
    if m < 1.0 {
        1
    } else {
        m as u32
    }
}

pub fn derive_exponents(cfg: &Config) -> Result<DerivedExponents> {
    for (name, v) in [("k", cfg.k), ("delta", cfg.delta), ("s1", cfg.s1)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::ParameterDomain { name, value: v });
        }
    }
    let l = cfg.l as f64;
    let (s1, d) = (cfg.s1, cfg.delta);
    let levels = cfg.n_steps.max(3) as usize + 1;
    let mut s = Vec::with_capacity(levels);
    let mut m = Vec::with_capacity(levels);
    let mut acc = s1;
    for _ in 0..levels {
        s.push(acc);
        m.push(dyadic_ceiling(cfg.k.powf(acc)));
        acc *= 2.0;
    }
    // M_n is nondecreasing even when rounding ties at the floor of 2^1.
    for i in 1..levels {
        m[i] = m[i].max(m[i - 1]);
    }
    let refinement = (0..levels - 1).map(|i| 1u64 << (m[i + 1] - m[i])).collect();
    let mut script_s = Vec::with_capacity(levels);
    let mut sum = 0.0;
    for (i, si) in s.iter().enumerate() {
        script_s.push(2.0 * sum);
        if i + 1 < levels {
            sum += 1.0 + si;
        }
    }
    let c0 = 32.0 * cfg.beta1 * cfg.beta2;
    Ok(DerivedExponents {
        gamma0: 2.0 * l - 2.0 - 4.0 * s1 - 2.0 * d,
        gamma1: 2.0 * l - 4.0 - 7.0 * s1 - 2.0 * d,
        gamma2: 2.0 * l - 2.0 - 4.0 * s1 - 3.0 * d,
        gamma3: d / 2.0,
        gamma4: (4.0 * l - 3.0 - 4.0 * s1 - 3.0 * d) / (2.0 * l),
        gamma5: (4.0 * l - 5.0 - 8.0 * s1 - 4.0 * d) / (2.0 * l),
        s,
        m,
        refinement,
        script_s,
        c0,
        c_star: 400.0 * l * (c0 + 1.0).powi(2),
    })
}

/// `2(n-1) + (2^n - 2) s1`.
pub fn script_s_closed_form(n: u32, s1: f64) -> f64 {
    2.0 * (n as f64 - 1.0) + (2f64.powi(n as i32) - 2.0) * s1
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityCheck {
    pub name: &'static str,
    pub holds: bool,
    /// Natural log of rhs/lhs for `kstar`, `rhs - lhs` otherwise.
    pub margin: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// Regime conditions that do not depend on `k`.
    pub structural: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub k: f64,
    pub checks: Vec<AdmissibilityCheck>,
}

impl AdmissibilityReport {
    pub fn get(&self, name: &str) -> Option<&AdmissibilityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }
}

/// Evaluates the regime inequalities at the configured `k`. Never fails.
pub fn check_admissibility(cfg: &Config) -> AdmissibilityReport {
    let l = cfg.l as f64;
    let (s1, d, k, eta) = (cfg.s1, cfg.delta, cfg.k, cfg.eta);
    let c0 = 32.0 * cfg.beta1 * cfg.beta2;
    let c_star = 400.0 * l * (c0 + 1.0).powi(2);
    // Compared in logs: k^{eta s1} overflows long before the regime is reached.
    let ln_lhs = c_star.ln() + (1.0 + s1).ln() + (2.0 + 2.0 * s1) * k.ln() + k.ln().ln();
    let ln_rhs = eta * s1 * k.ln();
    let mut checks = vec![AdmissibilityCheck {
        name: "kstar",
        holds: ln_lhs < ln_rhs,
        margin: ln_rhs - ln_lhs,
        lhs: ln_lhs.exp(),
        rhs: ln_rhs.exp(),
        structural: false,
    }];
    let mut push = |name: &'static str, lhs: f64, rhs: f64| {
        checks.push(AdmissibilityCheck { name, holds: lhs < rhs, margin: rhs - lhs, lhs, rhs, structural: true });
    };
    push("order", 5.5, l);
    push("two_delta", 2.0 * d, 2.0 * l - 2.0 - 4.0 * s1);
    push("nine_delta", 9.0 * d, 2.0 * l - 11.0 - 16.0 * s1);
    push("eta", if 2.0 * l > 11.0 { 2.0 + 64.0 / (2.0 * l - 11.0) } else { f64::INFINITY }, eta);
    AdmissibilityReport { k, checks }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Epsilon {
    pub n: u32,
    pub value: f64,
    pub surrogate: bool,
}

fn true_epsilon(cfg: &Config, n: u32) -> f64 {
    let s_n = cfg.s1 * 2f64.powi(n as i32 - 1);
    (-cfg.k.powf(cfg.eta * s_n) / 4.0).exp()
}

/// `exp(-k^{eta s_n} / 4)`, or the surrogate ladder `eps^{2^{n-1}}` when the
/// true value is not a normal double. The mode is decided once per config
/// (at `max(n, n_steps)`) so the ladder stays monotone.
pub fn epsilon_n(cfg: &Config, n: u32) -> Result<Epsilon> {
    if n < 1 {
        return Err(Error::ParameterDomain { name: "n", value: 0.0 });
    }
    let probe = true_epsilon(cfg, n.max(cfg.n_steps));
    if probe.is_normal() {
        return Ok(Epsilon { n, value: true_epsilon(cfg, n), surrogate: false });
    }
    let eps = cfg.eps_surrogate.ok_or(Error::EpsilonUnset { n })?;
    let value = eps.powf(2f64.powi(n as i32 - 1));
    if !value.is_normal() {
        return Err(Error::EpsilonUnset { n });
    }
    Ok(Epsilon { n, value, surrogate: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> Config {
        let mut c = Config::new(6, 10.0);
        c.s1 = 1.0 / 32.0;
        c
    }

    #[test]
    fn gamma_values() {
        let e = derive_exponents(&cfg()).unwrap();
        assert_relative_eq!(e.gamma0, 9.855, epsilon = 1e-12);
        assert_relative_eq!(e.gamma3, 0.005, epsilon = 1e-15);
    }

    #[test]
    fn script_s_three() {
        assert_relative_eq!(script_s_closed_form(3, 0.03125), 4.1875, epsilon = 1e-15);
        let e = derive_exponents(&cfg()).unwrap();
        for n in 1..=e.levels() {
            assert_relative_eq!(e.script_s(n), script_s_closed_form(n, e.s1()), epsilon = 1e-12);
        }
    }

    impl DerivedExponents {
        fn s1(&self) -> f64 {
            self.s[0]
        }
    }

    #[test]
    fn s_doubles_and_m_rounds_up() {
        let mut c = Config::new(6, 16.0);
        c.s1 = 0.2;
        let e = derive_exponents(&c).unwrap();
        for w in e.s.windows(2) {
            assert_eq!(w[1], 2.0 * w[0]);
        }
        // 16^0.2 = 1.74 -> 2^1, 16^0.4 = 3.03 -> 2^2, 16^0.8 = 9.19 -> 2^4.
        assert_eq!(&e.m[..3], &[1, 2, 4]);
        assert_eq!(e.refinement(1), 2);
        assert_eq!(e.refinement(2), 4);
        assert_eq!(e.cumulative_refinement(3), 8);
    }

    #[test]
    fn exact_power_of_two_is_not_bumped() {
        let mut c = Config::new(6, 32.0);
        c.s1 = 0.2;
        let e = derive_exponents(&c).unwrap();
        assert_eq!(&e.m[..2], &[1, 2]);
    }

    #[test]
    fn rejects_nonpositive_inputs() {
        let mut c = cfg();
        c.delta = 0.0;
        assert!(matches!(derive_exponents(&c), Err(Error::ParameterDomain { name: "delta", .. })));
        let mut c = cfg();
        c.s1 = -1.0;
        assert!(matches!(derive_exponents(&c), Err(Error::ParameterDomain { name: "s1", .. })));
        let mut c = cfg();
        c.k = -2.0;
        assert!(matches!(derive_exponents(&c), Err(Error::ParameterDomain { name: "k", .. })));
    }

    #[test]
    fn idempotent() {
        assert_eq!(derive_exponents(&cfg()).unwrap(), derive_exponents(&cfg()).unwrap());
    }

    #[test]
    fn kstar_fails_at_desk_scale() {
        let r = check_admissibility(&cfg());
        let ks = r.get("kstar").unwrap();
        // lhs = C*(1+s1) k^{2+2s1} ln k with C* = 400*6*(32 beta^2+1)^2.
        let c0 = 32.0 * DEFAULT_BETA * DEFAULT_BETA;
        let lhs = 2400.0 * (c0 + 1.0).powi(2) * (1.0 + 1.0 / 32.0) * 10f64.powf(2.0 + 1.0 / 16.0) * 10f64.ln();
        let rhs = 10f64.powf(67.0 / 32.0);
        assert!(lhs > rhs);
        assert!(!ks.holds);
        assert_relative_eq!(ks.lhs, lhs, max_relative = 1e-12);
        assert_relative_eq!(ks.rhs, rhs, max_relative = 1e-12);
    }

    #[test]
    fn structural_checks() {
        let r = check_admissibility(&cfg());
        let nine = r.get("nine_delta").unwrap();
        assert!(nine.holds);
        assert_relative_eq!(nine.rhs, 0.5, epsilon = 1e-12);
        assert_relative_eq!(nine.lhs, 0.09, epsilon = 1e-12);
        let mut c = cfg();
        c.delta = 5.0;
        assert!(!check_admissibility(&c).get("two_delta").unwrap().holds);
    }

    #[test]
    fn strict_regime_rejects_bad_delta() {
        let mut c = cfg();
        c.strict_regime = true;
        assert!(c.validate().is_ok());
        c.delta = 0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn strict_regime_gammas_positive() {
        let c = cfg();
        let e = derive_exponents(&c).unwrap();
        for g in [e.gamma0, e.gamma1, e.gamma2, e.gamma3, e.gamma4, e.gamma5] {
            assert!(g > 0.0);
        }
    }

    #[test]
    fn epsilon_plug_in() {
        // k^{eta s1} = 4 exactly: k = 16, eta s1 = 1/2.
        let mut c = Config::new(6, 16.0);
        c.s1 = 0.125;
        c.eta = 4.0;
        let e = epsilon_n(&c, 1).unwrap();
        assert!(!e.surrogate);
        assert_relative_eq!(e.value, (-1.0f64).exp(), max_relative = 1e-14);
        assert!(epsilon_n(&c, 2).unwrap().value < e.value);
    }

    #[test]
    fn epsilon_underflow_uses_surrogate() {
        let mut c = cfg();
        // 10^{67/32} / 4 ~ 31: representable. The second step is not.
        c.n_steps = 3;
        let e1 = epsilon_n(&c, 1).unwrap();
        assert!(e1.surrogate);
        assert_relative_eq!(e1.value, 1e-2);
        assert_relative_eq!(epsilon_n(&c, 2).unwrap().value, 1e-4, max_relative = 1e-12);
        c.eps_surrogate = None;
        assert!(matches!(epsilon_n(&c, 1), Err(Error::EpsilonUnset { .. })));
    }

    #[test]
    fn epsilon_monotone() {
        let mut c = cfg();
        c.n_steps = 4;
        let v: Vec<f64> = (1..=4).map(|n| epsilon_n(&c, n).unwrap().value).collect();
        assert!(v.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn parses_and_overrides() {
        let text = "k = 16.0\nl = 6\nharmonics = [{ level = 1, index = [1, 0], re = 1e-3 }]\n";
        let c = Config::from_toml_with_overrides(text, &["k=8.0".into(), "r_max = 3".into()]).unwrap();
        assert_eq!(c.k, 8.0);
        assert_eq!(c.r_max, 3);
        assert_eq!(c.trunc_radius, 24.0);
        assert_eq!(c.harmonics.len(), 1);
        assert_relative_eq!(c.s1, 1.0 / 32.0);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::from_toml_str("k = 16.0\nbogus_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn truncation_invariant() {
        let err = Config::from_toml_str("k = 16.0\ntrunc_radius = 20.0\n").unwrap_err();
        assert!(matches!(err, Error::ParameterDomain { name: "trunc_radius", .. }));
        assert!(Config::from_toml_str("k = 1.0\n").is_err());
    }
}
