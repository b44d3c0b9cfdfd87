//! Batch pipelines behind the `limper` binary. Each command loads one config,
//! drives a module pipeline end to end and writes CSV/JSON/SVG artifacts
//! stamped with the config hash, plus a manifest cross-linking them.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use limper::bloch_oracle::band_sample;
use limper::isoenergetic::{build_isocurve, carve_chi1, carve_chi2_disks, curve_csv, curve_svg, holes_json, kappa_value, ring_svg, AngleSet, Chi2Method, IsoCurve};
use limper::model::Model;
use limper::model_config::{check_admissibility, Config};
use limper::spectral_measure::{level_domain, log_log_slope, projection_form, ring_area, LevelSetSlice, ProjectionForm, TestFunction};
use limper::wavefield::{assemble_wave, convergence_report, wave_csv, wave_svg, BlochWave};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Bands,
    Nonres,
    Curve,
    Cheese,
    Wave,
    Dos,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Bands => "bands",
            Command::Nonres => "nonres",
            Command::Curve => "curve",
            Command::Cheese => "cheese",
            Command::Wave => "wave",
            Command::Dos => "dos",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{module}::{op} failed: {source}")]
    Pipeline {
        module: &'static str,
        op: &'static str,
        #[source]
        source: limper::Error,
    },
    #[error("acceptance assertion failed: {0}")]
    Acceptance(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Pipeline { .. } | CliError::Io { .. } => 3,
            CliError::Acceptance(_) => 4,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

trait Stage<T> {
    fn stage(self, module: &'static str, op: &'static str) -> CliResult<T>;
}

impl<T> Stage<T> for limper::Result<T> {
    fn stage(self, module: &'static str, op: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Pipeline { module, op, source })
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out_dir: PathBuf,
    pub steps: Option<u32>,
    pub overrides: Vec<String>,
}

/// Loads the config file, applies overrides and `--steps`, and returns the
/// config with the hex SHA-256 of its canonical JSON echo.
pub fn load_config(opts: &RunOptions) -> CliResult<(Config, String)> {
    let text = fs::read_to_string(&opts.config).map_err(|e| CliError::Config(format!("{}: {e}", opts.config.display())))?;
    let mut cfg = Config::from_toml_with_overrides(&text, &opts.overrides).map_err(|e| CliError::Config(format!("{}: {e}", opts.config.display())))?;
    if let Some(n) = opts.steps {
        if n == 0 {
            return Err(CliError::Config("--steps must be at least 1".into()));
        }
        cfg.n_steps = n;
    }
    let hash = config_hash(&cfg);
    Ok((cfg, hash))
}

pub fn config_hash(cfg: &Config) -> String {
    let echo = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(echo.as_bytes()))
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Record of one command run. Work counters replace wall-clock timing so
/// that reruns stay byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: Command,
    pub config_hash: String,
    pub config: Config,
    pub exponents: Value,
    pub admissibility: Value,
    pub outputs: Vec<Artifact>,
    pub work: Value,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

struct Writer<'a> {
    dir: &'a Path,
    hash: &'a str,
    outputs: Vec<Artifact>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, body: String) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, body.as_bytes()).map_err(|source| CliError::Io { path: path.clone(), source })?;
        self.outputs.push(Artifact { path: name.to_string(), sha256: hex::encode(Sha256::digest(body.as_bytes())), bytes: body.len() });
        Ok(())
    }

    fn csv(&mut self, name: &str, body: &str) -> CliResult<()> {
        self.put(name, format!("# config_hash={}\n{body}", self.hash))
    }

    fn json(&mut self, name: &str, mut value: Value) -> CliResult<()> {
        if let Value::Object(map) = &mut value {
            map.insert("config_hash".into(), Value::String(self.hash.to_string()));
        } else {
            value = json!({ "config_hash": self.hash, "data": value });
        }
        self.put(name, serde_json::to_string_pretty(&value).expect("json serializes") + "\n")
    }

    fn svg(&mut self, name: &str, body: &str) -> CliResult<()> {
        let stamped = match body.find('>') {
            Some(i) => format!("{}<!-- config_hash={} -->{}", &body[..=i], self.hash, &body[i + 1..]),
            None => body.to_string(),
        };
        self.put(name, stamped)
    }
}

/// Runs `cmd` and writes its artifacts and `manifest_<cmd>.json` into the
/// output directory. Acceptance-style checks are recorded in the manifest;
/// `report` turns a failed check into [`CliError::Acceptance`] after writing.
pub fn run(cmd: Command, opts: &RunOptions) -> CliResult<RunManifest> {
    let (cfg, hash) = load_config(opts)?;
    let model = Model::new(cfg.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(&opts.out_dir).map_err(|source| CliError::Io { path: opts.out_dir.clone(), source })?;
    let mut w = Writer { dir: &opts.out_dir, hash: &hash, outputs: Vec::new() };
    let mut checks = Vec::new();
    let work = match cmd {
        Command::Bands => bands(&model, &mut w)?,
        Command::Nonres => nonres(&model, &mut w)?,
        Command::Curve => curve(&model, &mut w, &mut checks)?,
        Command::Cheese => cheese(&model, &mut w, &mut checks)?,
        Command::Wave => wave(&model, &mut w, &mut checks)?,
        Command::Dos => dos(&model, &mut w, &mut checks)?,
        Command::Report => {
            let mut all = serde_json::Map::new();
            all.insert("nonres".into(), nonres(&model, &mut w)?);
            all.insert("curve".into(), curve(&model, &mut w, &mut checks)?);
            all.insert("dos".into(), dos(&model, &mut w, &mut checks)?);
            Value::Object(all)
        }
    };
    let manifest = RunManifest {
        command: cmd,
        config_hash: hash.clone(),
        config: cfg.clone(),
        exponents: serde_json::to_value(&model.exps).expect("exponents serialize"),
        admissibility: serde_json::to_value(check_admissibility(&cfg)).expect("report serializes"),
        outputs: w.outputs.clone(),
        work,
        checks: checks.clone(),
    };
    let name = format!("manifest_{}.json", cmd.name());
    w.json(&name, serde_json::to_value(&manifest).expect("manifest serializes"))?;
    if cmd == Command::Report {
        let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        if !failed.is_empty() {
            return Err(CliError::Acceptance(failed.join(", ")));
        }
    }
    Ok(manifest)
}

const BANDS: usize = 8;

fn bands(model: &Model, w: &mut Writer) -> CliResult<Value> {
    let field = band_sample(&model.cell(1).stage("model", "cell")?, model.cumulative(1).stage("model", "cumulative")?, &model.cfg, model.cfg.band_grid, BANDS)
        .stage("bloch_oracle", "band_sample")?;
    let mut csv = String::from("t1,t2,band,eigenvalue\n");
    for row in field.csv_rows() {
        csv.push_str(&row);
        csv.push('\n');
    }
    w.csv("bands.csv", &csv)?;
    let edges: Vec<Value> = field.edges().iter().map(|(lo, hi)| json!({ "lo": lo, "hi": hi })).collect();
    w.json("bands.json", json!({ "grid": field.grid, "bands": field.bands, "edges": edges, "max_jump": field.max_jump() }))?;
    Ok(json!({ "eigen_solves": field.points.len() }))
}

fn nonres(model: &Model, w: &mut Writer) -> CliResult<Value> {
    let theta = carve_chi1(model).stage("isoenergetic", "carve_chi1")?;
    let mut csv = String::from("lo,hi\n");
    for (a, b) in theta.arcs() {
        let _ = writeln!(csv, "{a:.17e},{b:.17e}");
    }
    w.csv("nonres_arcs.csv", &csv)?;
    let mut holes = holes_json(&theta);
    if let Value::Object(m) = &mut holes {
        m.insert("measure".into(), json!(theta.measure()));
        m.insert("removed_fraction".into(), json!(1.0 - theta.measure() / TAU));
    }
    w.json("nonres_holes.json", holes)?;
    w.svg("nonres_ring.svg", &ring_svg(&theta))?;
    Ok(json!({ "arcs": theta.arcs().len(), "holes": theta.holes.len() }))
}

/// Domains `Theta_1 .. Theta_n` and the curves over them.
fn curves(model: &Model) -> CliResult<Vec<(AngleSet, IsoCurve)>> {
    let r_max = model.cfg.r_max as usize;
    let mut out: Vec<(AngleSet, IsoCurve)> = Vec::new();
    for n in 1..=model.cfg.n_steps.min(model.steps()) {
        let domain = level_domain(model, n, Chi2Method::GapTest).stage("spectral_measure", "level_domain")?;
        let prior = out.last().map(|(_, c)| c);
        let curve = build_isocurve(model, n, &domain, model.cfg.phi_samples, prior, r_max).stage("isoenergetic", "build_isocurve")?;
        out.push((domain, curve));
    }
    Ok(out)
}

fn curve(model: &Model, w: &mut Writer, checks: &mut Vec<Check>) -> CliResult<Value> {
    let all = curves(model)?;
    let mut summary = Vec::new();
    for (_, c) in &all {
        w.csv(&format!("curve_step{}.csv", c.step), &curve_csv(c))?;
        w.svg(&format!("curve_step{}.svg", c.step), &curve_svg(c))?;
        summary.push(json!({ "step": c.step, "samples": c.samples.len(), "failures": c.failures, "max_abs_h": c.max_abs_h() }));
    }
    if let Some((_, c1)) = all.first() {
        if !model.potential.is_zero() {
            let positive = c1.samples.iter().filter(|s| s.h >= 0.0).count();
            checks.push(Check { name: "h1_negative".into(), pass: positive == 0, detail: format!("{positive} of {} samples with h_1 >= 0", c1.samples.len()) });
        }
    }
    if let [(_, c1), (_, c2), ..] = all.as_slice() {
        let d = c2.samples.iter().zip(&c1.samples).map(|(a, b)| (a.h - b.h).abs()).fold(0.0, f64::max);
        let ratio = if d == 0.0 { 0.0 } else { d / c1.max_abs_h() };
        checks.push(Check { name: "two_step_contraction".into(), pass: ratio < 1e-2, detail: format!("ratio {ratio:.3e}") });
    }
    w.json("curves.json", json!({ "curves": summary }))?;
    let solves: usize = all.iter().map(|(_, c)| c.samples.len()).sum();
    Ok(json!({ "kappa_solves": solves }))
}

fn cheese(model: &Model, w: &mut Writer, checks: &mut Vec<Check>) -> CliResult<Value> {
    let theta1 = carve_chi1(model).stage("isoenergetic", "carve_chi1")?;
    let curve1 = build_isocurve(model, 1, &theta1, model.cfg.phi_samples, None, model.cfg.r_max as usize).stage("isoenergetic", "build_isocurve")?;
    let (trace, region) = carve_chi2_disks(model, &theta1, &curve1).stage("resonance", "swiss_cheese")?;
    for e in &region.ledger {
        checks.push(Check { name: format!("disk_count_step{}", e.step), pass: (e.count as f64) <= e.bound, detail: format!("{} disks, bound {:.3e}", e.count, e.bound) });
    }
    let mut ledger = region.ledger_json();
    if let Value::Object(m) = &mut ledger {
        m.insert("trace_measure".into(), json!(trace.measure()));
    }
    w.json("cheese_ledger.json", ledger)?;
    w.svg("cheese_region.svg", &region.svg())?;
    Ok(json!({ "disks": region.disks.len() }))
}

/// `kappa_n` at the middle of the widest arc of `Theta_n`.
fn wave_point(model: &Model, step: u32) -> CliResult<[f64; 2]> {
    let domain = level_domain(model, step, Chi2Method::GapTest).stage("spectral_measure", "level_domain")?;
    let (a, b) = domain.arcs().iter().cloned().fold((0.0, 0.0), |acc, r| if r.1 - r.0 > acc.1 - acc.0 { r } else { acc });
    let phi = 0.5 * (a + b);
    let h = kappa_value(model, phi, step, model.cfg.r_max as usize).stage("isoenergetic", "kappa_value")?;
    let r = model.k() + h;
    Ok([r * phi.cos(), r * phi.sin()])
}

const WAVE_GRID: usize = 48;

fn wave(model: &Model, w: &mut Writer, checks: &mut Vec<Check>) -> CliResult<Value> {
    let steps = model.cfg.n_steps.min(model.steps());
    let kappa = wave_point(model, steps)?;
    let report = convergence_report(model, kappa, steps).stage("wavefield", "convergence_report")?;
    let lam = model.lambda();
    for s in &report.steps {
        checks.push(Check { name: format!("residual_step{}", s.step), pass: s.residual < 1e-9 * lam, detail: format!("{:.3e}", s.residual / lam) });
    }
    let mut psi: Option<BlochWave> = None;
    for n in 1..=steps {
        psi = Some(assemble_wave(model, kappa, n, psi.as_ref()).stage("wavefield", "assemble_wave")?);
    }
    let psi = psi.expect("steps >= 1");
    w.json("wave_convergence.json", serde_json::to_value(&report).expect("report serializes"))?;
    w.csv(&format!("wave_step{steps}.csv"), &wave_csv(&psi, WAVE_GRID))?;
    w.svg(&format!("wave_step{steps}.svg"), &wave_svg(&psi, WAVE_GRID))?;
    Ok(json!({ "waves": steps, "coefficients": psi.coefficients.len() }))
}

const DOS_POINTS: usize = 4;
const DOS_EPS: [f64; 3] = [1e-4, 1e-3, 1e-2];
const DOS_SAMPLES: usize = 256;

/// Gaussian bump whose spectrum is centred on the ring at angle 0.9.
fn dos_test_function(k: f64) -> TestFunction {
    TestFunction::gaussian([0.0, 0.0], 0.3, 1.0).with_carrier([k * 0.9f64.cos(), k * 0.9f64.sin()])
}

fn dos(model: &Model, w: &mut Writer, checks: &mut Vec<Check>) -> CliResult<Value> {
    let l = model.l();
    let lam0 = model.lambda();
    let mut slices: Vec<LevelSetSlice> = Vec::new();
    let mut forms: Vec<ProjectionForm> = Vec::new();
    // Dyadic sweep: lambda_j = lambda_0 2^{j / (DOS_POINTS - 1)}.
    let mut scaling = Vec::new();
    for j in 0..DOS_POINTS {
        let lam = lam0 * 2f64.powf(j as f64 / (DOS_POINTS - 1) as f64);
        let m = Model::with_potential(model.cfg.with_k(lam.powf(0.5 / l as f64)), model.exps.clone(), model.potential.clone()).stage("model", "with_potential")?;
        let theta = carve_chi1(&m).stage("isoenergetic", "carve_chi1")?;
        let s = ring_area(&m, 1, 1e-3 * lam, &theta, DOS_SAMPLES).stage("spectral_measure", "ring_area")?;
        scaling.push((lam, s.area / s.eps));
        slices.push(s);
    }
    let slope = log_log_slope(&scaling);
    let target = -((l - 1) as f64) / l as f64;
    checks.push(Check { name: "dos_slope".into(), pass: (slope - target).abs() <= 0.05, detail: format!("slope {slope:.4} vs {target:.4}") });
    let theta = carve_chi1(model).stage("isoenergetic", "carve_chi1")?;
    let f = dos_test_function(model.k());
    let mut linear = Vec::new();
    for e in DOS_EPS {
        let s = ring_area(model, 1, e * lam0, &theta, DOS_SAMPLES).stage("spectral_measure", "ring_area")?;
        let p = projection_form(model, &f, 1, e * lam0, &theta, DOS_SAMPLES / 4).stage("spectral_measure", "projection_form")?;
        linear.push((s.area / s.eps, p.value / p.eps));
        slices.push(s);
        forms.push(p);
    }
    let spread = |v: Vec<f64>| v.iter().cloned().fold(f64::MIN, f64::max) / v.iter().cloned().fold(f64::MAX, f64::min) - 1.0;
    let area_spread = spread(linear.iter().map(|x| x.0).collect());
    let form_spread = spread(linear.iter().map(|x| x.1).collect());
    checks.push(Check { name: "area_linearity".into(), pass: area_spread < 0.05, detail: format!("spread {area_spread:.3e}") });
    checks.push(Check { name: "form_linearity".into(), pass: form_spread < 0.10, detail: format!("spread {form_spread:.3e}") });
    let worst = slices.iter().map(|s| s.slack).fold(f64::INFINITY, f64::min);
    checks.push(Check { name: "area_bound".into(), pass: worst >= 0.0, detail: format!("min slack {worst:.4}") });

    let mut csv = String::from("step,lambda,eps,area,form_value,bound,slack,slope\n");
    let nsweep = DOS_POINTS;
    for (i, s) in slices.iter().enumerate() {
        let form = if i >= nsweep { format!("{:.12e}", forms[i - nsweep].value) } else { String::new() };
        let _ = writeln!(csv, "{},{:.12e},{:.6e},{:.12e},{},{:.12e},{:.6e},{:.6}", s.step, s.lambda, s.eps, s.area, form, s.bound, s.slack, slope);
    }
    w.csv("dos.csv", &csv)?;
    w.json(
        "dos.json",
        json!({ "slope": slope, "target_slope": target, "area_spread": area_spread, "form_spread": form_spread, "min_slack": worst, "operator_ratio": forms.iter().map(|p| p.operator_ratio).collect::<Vec<_>>() }),
    )?;
    w.svg("dos_scaling.svg", &scaling_svg(&scaling, target))?;
    Ok(json!({ "ring_areas": slices.len(), "projection_forms": forms.len() }))
}

/// Log-log plot of `area / eps` against `lambda` with the reference slope.
fn scaling_svg(points: &[(f64, f64)], slope: f64) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (x0, x1) = (xs.iter().cloned().fold(f64::MAX, f64::min), xs.iter().cloned().fold(f64::MIN, f64::max));
    let (y0, y1) = (ys.iter().cloned().fold(f64::MAX, f64::min), ys.iter().cloned().fold(f64::MIN, f64::max));
    let (dx, dy) = ((x1 - x0).max(1e-12), (y1 - y0).max(1e-12));
    let px = |x: f64| pad + (x - x0) / dx * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y0) / dy * (h - 2.0 * pad);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">");
    let _ = write!(s, "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"gray\" stroke-dasharray=\"4\"/>", px(x0), py(ys[0]), px(x1), py(ys[0] + slope * (x1 - x0)));
    for (x, y) in xs.iter().zip(&ys) {
        let _ = write!(s, "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"3\" fill=\"black\"/>", px(*x), py(*y));
    }
    s.push_str("</svg>\n");
    s
}
