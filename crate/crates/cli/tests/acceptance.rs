//! Acceptance suite: one PASS/FAIL line per criterion at its stated
//! tolerance. Criteria listed in `KNOWN_RED` are evaluated in full and
//! reported as FAIL; the run errors if any other criterion fails or a
//! known-red one starts passing.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};
use std::process::Command as Proc;
use std::time::Instant;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use limper::bloch_oracle::level_consistency;
use limper::isoenergetic::{brute_scan, build_isocurve, carve_chi1, circle_intersections, kappa_value, sample_angles, AngleSet, Chi2Method, Intersections};
use limper::lattice::{reduce_to_cell, Quasimomentum};
use limper::model::Model;
use limper::model_config::Config;
use limper::perturbation::{attach_oracle, contour_G, contour_g, eigenvalue_series, g2_closed_form, step1_contour, G1_closed_form, LocalProblem};
use limper::resonance::{count_zeros_disk, detA_free, free_zero_seeds, newton_zero, refined_shifts, rouche_experiment, DetContext, DetScope};
use limper::spectral_measure::{level_domain, log_log_slope, projection_form, ring_area, TestFunction, GL8_NODES};
use limper::wavefield::{assemble_wave, convergence_report};

/// Criterion 4 asks for `h_1 < 0` at every solved angle. The second-order
/// coefficient is positive in a band of directions nearly perpendicular to
/// each potential harmonic, so `h_1 > 0` there at every desk `k`.
const KNOWN_RED: &[u32] = &[4];

fn preset_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(format!("{name}.toml"))
}

fn preset(name: &str, k: f64) -> Model {
    let text = std::fs::read_to_string(preset_path(name)).unwrap();
    let cfg = Config::from_toml_with_overrides(&text, &[format!("k = {k}")]).unwrap();
    Model::new(cfg).unwrap()
}

fn free(k: f64) -> Model {
    let mut cfg = Config::new(6, k);
    cfg.s1 = 0.2;
    cfg.n_steps = 2;
    Model::new(cfg).unwrap()
}

fn on_circle(r: f64, phi: f64) -> [f64; 2] {
    [r * phi.cos(), r * phi.sin()]
}

/// `count` angles spread over `domain`, each inside an arc.
fn spread(domain: &AngleSet, count: usize) -> Vec<f64> {
    let all = sample_angles(domain, count);
    let stride = (all.len() / count).max(1);
    all.iter().step_by(stride).take(count).map(|a| a.0).collect()
}

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let mut worst = 0.0f64;
    let mut worst_rel = 0.0f64;
    let mut n = 0;
    for name in ["single_cosine", "two_level", "random_phases"] {
        let m = preset(name, 16.0);
        let lam = m.lambda();
        let theta = carve_chi1(&m).map_err(|e| e.to_string())?;
        for phi in spread(&theta, 64) {
            let mut s = eigenvalue_series(&m, 1.0, on_circle(16.0, phi), 1, 4, true).map_err(|e| e.to_string())?;
            attach_oracle(&m, &mut s).map_err(|e| e.to_string())?;
            let gap = s.oracle_gap.unwrap();
            let allowed = s.tail_bound + s.quadrature_error;
            worst = worst.max(gap / allowed.max(f64::MIN_POSITIVE));
            if name == "single_cosine" {
                worst_rel = worst_rel.max(gap / lam);
            }
            n += 1;
        }
    }
    check(n >= 150 && worst <= 1.0 && worst_rel <= 1e-6, format!("{n} points; max gap/(tail+quad) {worst:.3e}; single-cosine max gap/k^2l {worst_rel:.3e}"))
}

fn criterion_2() -> Outcome {
    let m = preset("single_cosine", 16.0);
    let lam = m.lambda();
    let c = step1_contour(&m);
    let (mut g2_err, mut g1_max, mut big_err) = (0.0f64, 0.0f64, 0.0f64);
    for phi in [0.3, 1.1, 2.0, 3.7, 5.2] {
        let x = on_circle(16.0, phi);
        let p = LocalProblem::new(&m, x, 1, 2).map_err(|e| e.to_string())?;
        let g1 = contour_g(1, &c, &p).map_err(|e| e.to_string())?;
        g1_max = g1_max.max(g1.value.norm() / lam);
        let g2 = contour_g(2, &c, &p).map_err(|e| e.to_string())?;
        let closed = g2_closed_form(&m, x).map_err(|e| e.to_string())?.direct;
        g2_err = g2_err.max((g2.value - C64::new(closed, 0.0)).norm() / closed.abs());
        let p1 = LocalProblem::new(&m, x, 1, 1).map_err(|e| e.to_string())?;
        let quad = contour_G(1, &c, &p1).map_err(|e| e.to_string())?;
        let exact = G1_closed_form(&m, &p1).map_err(|e| e.to_string())?;
        let scale = exact.iter().fold(0.0f64, |a, z| a.max(z.norm()));
        let e = exact.iter().zip(quad.matrix.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        big_err = big_err.max(e / scale);
    }
    check(g2_err <= 1e-8 && big_err <= 1e-8 && g1_max < 1e-10, format!("g2 rel {g2_err:.2e}; G1 entrywise {big_err:.2e}; |g1|/k^2l {g1_max:.2e}"))
}

fn criterion_3() -> Outcome {
    let frac = |k: f64| -> Result<f64, String> { Ok(1.0 - carve_chi1(&preset("single_cosine", k)).map_err(|e| e.to_string())?.measure() / TAU) };
    let (a, b) = (frac(8.0)?, frac(64.0)?);
    let slope = (b.ln() - a.ln()) / (64f64.ln() - 8f64.ln());
    let scan = brute_scan(&preset("single_cosine", 16.0), 100_000).map_err(|e| e.to_string())?;
    check(
        slope <= -0.01 / 4.0 && scan.far_mismatches == 0,
        format!("removed fraction {a:.4} -> {b:.4}, slope {slope:.4}; brute scan {} mismatches, {} beyond one grid step", scan.mismatches, scan.far_mismatches),
    )
}

fn criterion_4() -> Outcome {
    let mut positive = Vec::new();
    for name in ["single_cosine", "two_level", "random_phases"] {
        let m = preset(name, 16.0);
        let theta = carve_chi1(&m).map_err(|e| e.to_string())?;
        let curve = build_isocurve(&m, 1, &theta, 512, None, 4).map_err(|e| e.to_string())?;
        let bad = curve.samples.iter().filter(|s| s.h >= 0.0).count();
        positive.push(format!("{name} {bad}/{}", curve.samples.len()));
    }
    let mut pts = Vec::new();
    for k in [8.0, 16.0, 32.0] {
        let m = preset("single_cosine", k);
        let theta = carve_chi1(&m).map_err(|e| e.to_string())?;
        let curve = build_isocurve(&m, 1, &theta, 256, None, 4).map_err(|e| e.to_string())?;
        pts.push((k, curve.max_abs_h()));
    }
    let slope = log_log_slope(&pts);
    let all_negative = positive.iter().all(|s| s.split(' ').nth(1).unwrap().starts_with("0/"));
    check(all_negative && slope <= -1.0, format!("samples with h_1 >= 0: {}; max|h_1| slope {slope:.2}", positive.join(", ")))
}

fn criterion_5() -> Outcome {
    // Free zeros against the circle intersections.
    let m0 = free(16.0);
    let mut zero_err = 0.0f64;
    for b in [[2.5, 0.0], [2.5, 2.5], [-5.0, 2.5], [7.5, -10.0]] {
        let f = |z: C64| detA_free(&m0, z, b).map(|s| s.log_value);
        let Intersections::Two(a1, a2) = circle_intersections(b, 16.0) else { return Err(format!("no intersection for {b:?}")) };
        for a in [a1, a2] {
            let (z, _) = newton_zero(f, C64::new(a + 1e-7, 0.0), 1e-4).map_err(|e| e.to_string())?;
            zero_err = zero_err.max((z - C64::new(a, 0.0)).norm());
        }
    }
    // Winding numbers near integers and stable under node doubling.
    let m = preset("two_level", 8.0);
    let theta = carve_chi1(&m).map_err(|e| e.to_string())?;
    let curve = build_isocurve(&m, 1, &theta, 256, None, 4).map_err(|e| e.to_string())?;
    let ctx = DetContext::new(&m, 2, Some(&curve), DetScope::Local { hops: 2 }).map_err(|e| e.to_string())?;
    let shifts = refined_shifts(&m, 2).map_err(|e| e.to_string())?;
    let (mut windings, mut off, mut unstable) = (0, 0.0f64, 0);
    for seed in free_zero_seeds(&m, 2).map_err(|e| e.to_string())?.into_iter().filter(|s| theta.contains(s.3)).take(12) {
        let b = shifts.iter().find(|(p, _)| *p == seed.0).unwrap().1;
        let f = |z: C64| ctx.eval(z, b, 0.0).map(|s| s.log_value);
        let a = count_zeros_disk(f, C64::new(seed.3, 0.0), 1e-6, 32);
        let d = count_zeros_disk(f, C64::new(seed.3, 0.0), 1e-6, 64);
        if let (Ok(a), Ok(d)) = (a, d) {
            windings += 1;
            off = off.max((a.raw - a.count as f64).abs()).max((d.raw - d.count as f64).abs());
            if a.count != d.count {
                unstable += 1;
            }
        }
    }
    // Rouché ramp on the two refined presets.
    let mut ramps = Vec::new();
    for name in ["two_level", "random_phases"] {
        let m = preset(name, 8.0);
        let dom = carve_chi1(&m).map_err(|e| e.to_string())?;
        let curve = build_isocurve(&m, 1, &dom, 256, None, 2).map_err(|e| e.to_string())?;
        let seed = free_zero_seeds(&m, 2).map_err(|e| e.to_string())?.into_iter().find(|s| dom.contains(s.3)).ok_or("no seed in domain")?;
        let rep = rouche_experiment(&m, 2, Some(&curve), seed.0, seed.3, &[0.0, 0.25, 0.5, 1.0]).map_err(|e| e.to_string())?;
        ramps.push((name, rep.preserved));
    }
    check(
        zero_err <= 1e-8 && windings > 0 && off <= 0.1 && unstable == 0 && ramps.iter().all(|r| r.1),
        format!("zero error {zero_err:.2e}; {windings} windings, max distance to integer {off:.2e}, {unstable} unstable; Rouché preserved {ramps:?}"),
    )
}

fn criterion_6() -> Outcome {
    let m = preset("two_level", 16.0);
    let theta2 = level_domain(&m, 2, Chi2Method::GapTest).map_err(|e| e.to_string())?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    let angles = spread(&theta2, 96);
    for &phi in &angles {
        let h1 = kappa_value(&m, phi, 1, 4).map_err(|e| e.to_string())?;
        let h2 = kappa_value(&m, phi, 2, 4).map_err(|e| e.to_string())?;
        num = num.max((h2 - h1).abs());
        den = den.max(h1.abs());
    }
    let ratio = num / den;
    let eps1 = m.epsilon(1).map_err(|e| e.to_string())?;
    check(ratio < 1e-2 && eps1.value == 1e-2, format!("{} angles; max|k2-k1| / max|k1-k| = {ratio:.3e} with eps_1 = {:.0e}", angles.len(), eps1.value))
}

fn criterion_7() -> Outcome {
    let m = preset("two_level", 16.0);
    let lam = m.lambda();
    let theta2 = level_domain(&m, 2, Chi2Method::GapTest).map_err(|e| e.to_string())?;
    let phi = spread(&theta2, 8)[3];
    let h = kappa_value(&m, phi, 2, 4).map_err(|e| e.to_string())?;
    let x = on_circle(16.0 + h, phi);
    let rep = convergence_report(&m, x, 2).map_err(|e| e.to_string())?;
    let residual = rep.steps.iter().map(|s| s.residual / lam).fold(0.0, f64::max);
    let mut quasi = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut prev = None;
    for n in 1..=2 {
        let w = assemble_wave(&m, x, n, prev.as_ref()).map_err(|e| e.to_string())?;
        let per = w.cell.period();
        let (t, _) = reduce_to_cell(x, &w.cell);
        for _ in 0..100 {
            let y = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
            for d in [[per[0], 0.0], [0.0, per[1]]] {
                let lhs = w.evaluate([y[0] + d[0], y[1] + d[1]]);
                let rhs = C64::from_polar(1.0, t.t[0] * d[0] + t.t[1] * d[1]) * w.evaluate(y);
                quasi = quasi.max((lhs - rhs).norm());
            }
        }
        prev = Some(w);
    }
    // ||Psi_1 - Psi_0|| against 4 k^{-gamma_0} on a fixed direction.
    let mut gaps = Vec::new();
    let mut below = true;
    for k in [8.0, 16.0, 32.0] {
        let mk = preset("single_cosine", k);
        let theta = carve_chi1(&mk).map_err(|e| e.to_string())?;
        let phi = spread(&theta, 16)[5];
        let s = convergence_report(&mk, on_circle(k, phi), 1).map_err(|e| e.to_string())?.steps.remove(0);
        below &= s.l2_gap < s.l2_bound.unwrap();
        gaps.push(s.l2_gap);
    }
    let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
    check(
        residual < 1e-9 && quasi < 1e-10 && below && monotone,
        format!("residual/lambda {residual:.2e}; quasiperiodicity {quasi:.2e}; ||Psi_1 - Psi_0|| over k = 8, 16, 32: {gaps:?}"),
    )
}

fn criterion_8() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    // Free closed forms.
    let m0 = free(16.0);
    let lam = m0.lambda();
    let eps = 1e-2 * lam;
    let s = ring_area(&m0, 1, eps, &AngleSet::full(), 64).map_err(|e| e.to_string())?;
    let annulus = PI * ((lam + eps).powf(1.0 / 6.0) - lam.powf(1.0 / 6.0));
    let area_err = (s.area - annulus).abs() / annulus;
    let f = TestFunction::gaussian([0.3, -0.1], 0.25, 1.0).with_carrier([10.0, 8.0]);
    let p = projection_form(&m0, &f, 1, eps, &AngleSet::full(), 512).map_err(|e| e.to_string())?;
    let (r0, r1) = (lam.powf(1.0 / 12.0), (lam + eps).powf(1.0 / 12.0));
    let np = 4096;
    let mut oracle = 0.0;
    for i in 0..np {
        let phi = TAU * i as f64 / np as f64;
        for (t, w) in GL8_NODES {
            let r = 0.5 * (r0 + r1) + 0.5 * (r1 - r0) * t;
            oracle += w * 0.5 * (r1 - r0) * r * f.transform(on_circle(r, phi)).norm_sqr() * TAU / np as f64;
        }
    }
    oracle /= 4.0 * PI * PI;
    let form_err = (p.value - oracle).abs() / oracle;
    ok &= area_err <= 1e-6 && form_err <= 1e-6;
    notes.push(format!("free area {area_err:.1e}, form {form_err:.1e}"));

    // Bound and epsilon-linearity on every preset at step 1, and on the
    // widest arc of Theta_2 at step 2 for the refined presets.
    let mut min_slack = f64::INFINITY;
    let (mut worst_area, mut worst_form) = (0.0f64, 0.0f64);
    for name in ["single_cosine", "two_level", "random_phases"] {
        let m = preset(name, 16.0);
        let lam = m.lambda();
        let g = TestFunction::gaussian([0.0, 0.0], 0.3, 1.0).with_carrier(on_circle(16.0, 0.9));
        for step in 1..=m.cfg.n_steps {
            let mut dom = level_domain(&m, step, Chi2Method::GapTest).map_err(|e| e.to_string())?;
            let samples = if step == 1 { 256 } else { 16 };
            if step > 1 {
                let (a, b) = dom.arcs().iter().cloned().fold((0.0, 0.0), |w, r| if r.1 - r.0 > w.1 - w.0 { r } else { w });
                dom = dom.intersection(&AngleSet::from_arcs(&[(a, b)]));
            }
            let (mut areas, mut forms) = (Vec::new(), Vec::new());
            for e in [1e-4, 1e-3, 1e-2] {
                let s = ring_area(&m, step, e * lam, &dom, samples).map_err(|e| e.to_string())?;
                min_slack = min_slack.min(s.slack);
                areas.push(s.area / s.eps);
                if step == 1 {
                    let p = projection_form(&m, &g, step, e * lam, &dom, 64).map_err(|e| e.to_string())?;
                    forms.push(p.value / p.eps);
                }
            }
            let sp = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().cloned().fold(f64::MIN, f64::max) / v.iter().cloned().fold(f64::MAX, f64::min) - 1.0 };
            worst_area = worst_area.max(sp(&areas));
            worst_form = worst_form.max(sp(&forms));
        }
    }
    ok &= min_slack >= 0.0 && worst_area < 0.05 && worst_form < 0.10;
    notes.push(format!("min slack {min_slack:.3}; area/eps spread {worst_area:.1e}; form/eps spread {worst_form:.1e}"));

    // Dyadic lambda sweep.
    let m = preset("two_level", 16.0);
    let mut pts = Vec::new();
    for j in 0..4 {
        let lam = m.lambda() * 2f64.powf(j as f64 / 3.0);
        let mk = Model::with_potential(m.cfg.with_k(lam.powf(1.0 / 12.0)), m.exps.clone(), m.potential.clone()).map_err(|e| e.to_string())?;
        let theta = carve_chi1(&mk).map_err(|e| e.to_string())?;
        let s = ring_area(&mk, 1, 1e-3 * lam, &theta, 256).map_err(|e| e.to_string())?;
        min_slack = min_slack.min(s.slack);
        pts.push((lam, s.area / s.eps));
    }
    let slope = log_log_slope(&pts);
    ok &= (slope + 5.0 / 6.0).abs() <= 0.05 && min_slack >= 0.0;
    notes.push(format!("area/eps slope {slope:.4} vs {:.4}", -5.0 / 6.0));
    check(ok, notes.join("; "))
}

fn criterion_9() -> Outcome {
    let m = preset("two_level", 8.0);
    let lam = m.lambda();
    let coarse = m.cell(1).map_err(|e| e.to_string())?;
    let fine = m.cell(2).map_err(|e| e.to_string())?;
    let w = m.cumulative(1).map_err(|e| e.to_string())?;
    let e = fine.extent();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut dense, mut refined, mut count) = (0.0f64, 0.0f64, 0);
    for _ in 0..20 {
        let tau = Quasimomentum::new(rng.random_range(0.0..e[0]), rng.random_range(0.0..e[1]), fine.level);
        let rep = level_consistency(&tau, w, &coarse, &fine, &m.cfg, lam, 0.5 * lam).map_err(|e| e.to_string())?;
        dense = dense.max(rep.dense_mismatch);
        refined = refined.max(rep.refined_mismatch);
        count += rep.fine_values.len();
    }
    check(dense <= 1e-8 && refined <= 1e-8 && count > 0, format!("20 tau, {count} eigenvalues in window; dense mismatch {dense:.2e}, refined {refined:.2e}"))
}

fn criterion_10() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_limper");
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    for cmd in ["bands", "nonres", "curve", "cheese", "wave", "dos", "report"] {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let dir = root.path().join(format!("{cmd}{run}"));
            let status = Proc::new(bin)
                .args([cmd, "--config"])
                .arg(preset_path("two_level"))
                .arg("--out-dir")
                .arg(&dir)
                .args(["--override", "k=8.0", "--override", "phi_samples=64"])
                .output()
                .map_err(|e| e.to_string())?;
            let code = status.status.code();
            if !matches!(code, Some(0) | Some(4)) {
                return Err(format!("{cmd} exited with {code:?}: {}", String::from_utf8_lossy(&status.stderr)));
            }
            let mut files: Vec<_> = std::fs::read_dir(&dir).map_err(|e| e.to_string())?.map(|e| e.unwrap().path()).collect();
            files.sort();
            outputs.push(files.iter().map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(p).unwrap())).collect::<Vec<_>>());
        }
        if outputs[0] != outputs[1] {
            return Err(format!("{cmd}: artifacts differ between runs"));
        }
        compared += outputs[0].iter().filter(|(n, _)| {
            let n = n.to_string_lossy();
            n.ends_with(".csv") || n.ends_with(".json")
        }).count();
    }
    check(compared > 0, format!("{compared} CSV/JSON artifacts byte-identical across reruns of 7 commands"))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "series-oracle equivalence", criterion_1),
        (2, "coefficient cross-validation", criterion_2),
        (3, "non-resonance measure trend", criterion_3),
        (4, "distorted circle inside the free circle", criterion_4),
        (5, "determinant zeros", criterion_5),
        (6, "two-step contraction", criterion_6),
        (7, "eigenfunction quality", criterion_7),
        (8, "absolute-continuity surrogate", criterion_8),
        (9, "level consistency", criterion_9),
        (10, "determinism", criterion_10),
    ];
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let known = KNOWN_RED.contains(&id);
        match &outcome {
            Ok(d) => println!("PASS criterion {id:>2} ({name}): {d} [{secs:.1}s]"),
            Err(d) => println!("FAIL criterion {id:>2} ({name}): {d} [{secs:.1}s]{}", if known { " (known red)" } else { "" }),
        }
        if outcome.is_ok() == known {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
