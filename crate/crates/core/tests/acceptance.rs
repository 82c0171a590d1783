//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAIL` are strict expected failures: they still
//! print FAIL with the measured numbers, and the run errors if one of them
//! starts passing so the list never goes stale.

use std::process::ExitCode;
use std::time::Instant;

use capres::analysis::{
    boundary_gap_exact, density_checks, dyadic, loglog_fit, mazya_poborchi_range, phi_chain, scaling_sweep,
    cantor_energy_decay, wiener_diagnostic, Resolution, TrendTest, Verdict, WindowDomain,
};
use capres::capsolve::{minimize, oracle_concentric_balls, solve_capacity, SolverOptions, WindowConvention};
use capres::extension::{lambda_o, norm_ratios, radii_rk, CylinderSet, Extension, ExtensionParams, LipschitzFn, Region};
use capres::geometry::{svc_build, whitney_decompose, CantorCylinderSpec, Condenser, CuspFunction, HFunction};
use capres::grid::{tensor_energy, CellMask, Label, Lattice, TensorGrid};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KNOWN_FAIL: &[usize] = &[6, 9];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = fn() -> Result<Outcome, capres::Error>;

fn main() -> ExitCode {
    let filter: Option<usize> = std::env::var("CAPRES_ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let checks: [(usize, &str, Check); 11] = [
        (1, "oracle agreement", c1),
        (2, "cusp scaling, p > n-1", c2),
        (3, "cusp scaling, p < n-1", c3),
        (4, "cusp scaling, p = n-1", c4),
        (5, "capacity lower bound for q > n-1", c5),
        (6, "fat but not dense cusp", c6),
        (7, "construction integrity", c7),
        (8, "extension operator", c8),
        (9, "test-function energy decay", c9),
        (10, "capacity-density chain", c10),
        (11, "extension range boundary identity", c11),
    ];
    let mut bad = Vec::new();
    let mut passed = 0;
    for (id, name, f) in checks {
        if filter.is_some_and(|k| k != id) {
            continue;
        }
        let t = Instant::now();
        let o = f().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let known = KNOWN_FAIL.contains(&id);
        let tag = match (o.pass, known) {
            (true, false) => "PASS",
            (true, true) => "PASS (listed as known failure)",
            (false, false) => "FAIL",
            (false, true) => "FAIL (known)",
        };
        println!("C{id:<2} {tag:<6} {name}: {} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
        passed += o.pass as usize;
        if o.pass == known {
            bad.push(id);
        }
    }
    println!("acceptance: {passed} passed, known failures {KNOWN_FAIL:?}");
    if bad.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected outcome for {bad:?}");
        ExitCode::FAILURE
    }
}

fn c1() -> Result<Outcome, capres::Error> {
    let opts = SolverOptions::default();
    let mut worst = [0.0f64; 2];
    let mut parts = Vec::new();
    for p in [1.5, 2.0, 3.0, 4.0] {
        let exact = oracle_concentric_balls(3, p, 0.25, 0.5)?;
        let c = Condenser::concentric_balls(&[0.0; 3], 0.25, 0.5, p);
        for (k, n) in [96, 160].into_iter().enumerate() {
            let l = Lattice::covering(&c.ambient.bounding_box(), n)?;
            let est = solve_capacity(&c, &l, &opts)?.require_converged()?;
            let rel = (est.value / exact - 1.0).abs();
            worst[k] = worst[k].max(rel);
            parts.push(format!("p={p}@{n}:{:.1}%", 100.0 * rel));
        }
    }
    let dense = dense_gap()?;
    let pass = worst[0] <= 0.08 && worst[1] <= 0.04 && dense <= 1e-10;
    Ok(outcome(pass, format!("{}; dense 5^3 rel gap {dense:.1e}", parts.join(" "))))
}

/// Relative energy gap between the iterative solver and a dense direct
/// solve of the p = 2 grid problem (normal equations from polarization).
fn dense_gap() -> Result<f64, capres::Error> {
    use nalgebra::{DMatrix, DVector};
    let dims = [5usize, 5, 5];
    let grid: TensorGrid = Lattice::new(vec![0.0; 3], 0.25, dims.to_vec())?.to_tensor();
    let mut mask = CellMask::all_free(&dims);
    mask.labels[1 + 5 + 25] = Label::PlateE;
    mask.labels[3 + 15 + 75] = Label::PlateF;
    let free: Vec<usize> = (0..mask.labels.len()).filter(|&i| mask.labels[i] == Label::Free).collect();
    let u0: Vec<f64> = mask.labels.iter().map(|l| (*l == Label::PlateE) as u8 as f64).collect();
    let j = |u: &[f64]| tensor_energy(&grid, &mask, u, 2.0, 0.0);
    let shift = |a: &[(usize, f64)]| {
        let mut u = u0.clone();
        for &(i, v) in a {
            u[free[i]] += v;
        }
        j(&u)
    };
    let m = free.len();
    let j0 = j(&u0);
    let jp: Vec<f64> = (0..m).map(|i| shift(&[(i, 1.0)])).collect();
    let jm: Vec<f64> = (0..m).map(|i| shift(&[(i, -1.0)])).collect();
    let mut a = DMatrix::zeros(m, m);
    let b = DVector::from_fn(m, |i, _| 0.5 * (jp[i] - jm[i]));
    for i in 0..m {
        a[(i, i)] = 0.5 * (jp[i] + jm[i] - 2.0 * j0);
        for k in 0..i {
            let v = 0.5 * (shift(&[(i, 1.0), (k, 1.0)]) - jp[i] - jp[k] + j0);
            a[(i, k)] = v;
            a[(k, i)] = v;
        }
    }
    let x = a.lu().solve(&(-0.5 * b)).expect("nonsingular");
    let mut u = u0.clone();
    for (i, &f) in free.iter().enumerate() {
        u[f] += x[i];
    }
    let direct = j(&u);
    let sol = minimize(&grid, &mask, 2.0, &SolverOptions { tol: 1e-14, ..Default::default() })?;
    Ok((sol.energy - direct).abs() / direct)
}

fn quadratic_cusp() -> WindowDomain {
    WindowDomain::Cusp { w: CuspFunction::Quadratic, n: 3 }
}

struct Series {
    radii: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    slope_lower: f64,
    slope_upper: f64,
}

fn cusp_series(p: f64) -> Result<Series, capres::Error> {
    let radii = dyadic(3, 8);
    let s = scaling_sweep(&quadratic_cusp(), p, &radii, WindowConvention::Density, &Resolution::default(), &SolverOptions::default())?;
    let lower: Vec<f64> = s.rows.iter().map(|r| r.cap_lower.unwrap_or(f64::NAN)).collect();
    let upper: Vec<f64> = s.rows.iter().map(|r| r.cap_upper.unwrap_or(f64::NAN)).collect();
    if s.partial || lower.iter().chain(&upper).any(|v| !v.is_finite()) {
        return Err(capres::Error::InvalidInput("scaling sweep is partial".into()));
    }
    Ok(Series {
        slope_lower: loglog_fit(&radii, &lower)?.slope,
        slope_upper: loglog_fit(&radii, &upper)?.slope,
        radii,
        lower,
        upper,
    })
}

fn spread(v: &[f64]) -> f64 {
    v.iter().cloned().fold(0.0, f64::max) / v.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn c2() -> Result<Outcome, capres::Error> {
    let s = cusp_series(2.5)?;
    let pass = (s.slope_lower - 0.5).abs() <= 0.1 && (s.slope_upper - 0.5).abs() <= 0.05;
    Ok(outcome(pass, format!("slope solver {:.3}, upper {:.3}", s.slope_lower, s.slope_upper)))
}

fn c3() -> Result<Outcome, capres::Error> {
    let s = cusp_series(1.5)?;
    // r * w(r)^{n-1-p} with w = t^2, n = 3, p = 1.5
    let norm: Vec<f64> = s.radii.iter().zip(&s.upper).map(|(r, u)| u / (r * (r * r).powf(0.5))).collect();
    let pass = (s.slope_lower - 2.0).abs() <= 0.15 && (s.slope_upper - 2.0).abs() <= 0.15 && spread(&norm) <= 3.0;
    Ok(outcome(
        pass,
        format!("slope solver {:.3}, upper {:.3}; normalized upper spread {:.2}", s.slope_lower, s.slope_upper, spread(&norm)),
    ))
}

fn c4() -> Result<Outcome, capres::Error> {
    let s = cusp_series(2.0)?;
    let norm = |v: &[f64]| -> Vec<f64> { s.radii.iter().zip(v).map(|(r, c)| c * (r / (r * r)).ln() / r).collect() };
    let (lo, up) = (spread(&norm(&s.lower)), spread(&norm(&s.upper)));
    Ok(outcome(lo < 2.0 && up < 2.0, format!("spread of Cap log(r/w)/r: solver {lo:.2}, upper {up:.2}")))
}

fn c5() -> Result<Outcome, capres::Error> {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, wd) in [("ball", WindowDomain::Ball { n: 3, radius: 1.0 }), ("cusp", quadratic_cusp())] {
        let rows = density_checks(&wd, 4.0, 2.5, &dyadic(2, 7), &Resolution::default(), &SolverOptions::default())?;
        let v: Vec<f64> = rows.iter().filter_map(|r| r.cap_power_ratio).collect();
        let ok = v.len() == 6 && v.iter().all(|x| *x > 0.0) && 1.0 / spread(&v) >= 0.2;
        pass &= ok;
        parts.push(format!("{name} min/max {:.2}", 1.0 / spread(&v)));
    }
    Ok(outcome(pass, parts.join(", ")))
}

fn c6() -> Result<Outcome, capres::Error> {
    let wd = WindowDomain::Cusp { w: CuspFunction::LogLinear { beta: 1.0 }, n: 3 };
    let p = 1.5;
    let rep = wiener_diagnostic(&wd, p, &[3, 4, 5, 6, 7, 8], &Resolution::default(), &SolverOptions::default(), &TrendTest::default())?;
    let norm: Vec<f64> = rep
        .scales
        .iter()
        .zip(&rep.ratios)
        .map(|(t, r)| r * (std::f64::consts::E / t).ln().powf(p - 1.0))
        .collect();
    let d = &rep.density_ratios;
    let monotone = d.windows(2).all(|w| w[1] < w[0]);
    let drop = 1.0 - d[d.len() - 1] / d[0];
    let pass = spread(&norm) <= 2.0 && monotone && drop >= 0.5 && rep.verdict == Verdict::FatTrend;
    Ok(outcome(
        pass,
        format!(
            "normalized ratio spread {:.2}; density monotone {monotone}, decrease {:.0}% (need 50%); verdict {:?}",
            spread(&norm),
            100.0 * drop,
            rep.verdict
        ),
    ))
}

fn c7() -> Result<Outcome, capres::Error> {
    let mut pass = true;
    for level in 0..=20 {
        let exact = 1.0 - (1..=level).map(|j| 2f64.powi(j - 1) * 4f64.powi(-j)).sum::<f64>();
        pass &= svc_build(level as usize).measure() == exact;
    }
    let svc = svc_build(9);
    let cubes = whitney_decompose(Some(&svc), 2, 6, None)?;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for c in &cubes {
        let (dl, du) = c.dist_bounds(&svc);
        lo = lo.min(dl / c.diam());
        hi = hi.max(du / c.diam());
    }
    pass &= lo >= 1.0 && hi <= 4.0;
    let counts: Vec<usize> = (0..=6).map(|k| cubes.iter().filter(|c| c.generation == k).count()).collect();
    pass &= counts.iter().enumerate().all(|(k, &nk)| nk <= 1usize << (2 * (k + 1)));
    let mut rk_ok = true;
    for k in 0..=8usize {
        rk_ok &= radii_rk(3, 1.0, &HFunction::Identity, k)? == 2f64.powi(-6 * k as i32 - 2);
    }
    pass &= rk_ok;
    Ok(outcome(pass, format!("dist/diam in [{lo:.3}, {hi:.3}], N_k {counts:?}, r_k exact {rk_ok}")))
}

fn extension_spec(m: usize, lambda: f64) -> CantorCylinderSpec {
    CantorCylinderSpec { n: 3, q: 1.0, lambda, h: HFunction::Lambda { lambda }, m, svc_level: 10, radii_rule: Default::default() }
}

fn c8() -> Result<Outcome, capres::Error> {
    let lambda = 2.0 * lambda_o(3, 4.0, 1.0)?;
    let m_max = 5;
    let set = CylinderSet::windowed(&extension_spec(m_max, lambda), &[0.0, 0.0], &[1.0, 1.0], None)?;
    let ext = Extension::new(set.clone());
    let suite = LipschitzFn::suite();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut const_err, mut lin_err) = (0.0f64, 0.0f64);
    let mut in_cylinders = 0;
    for i in 0..20_000 {
        // odd draws land inside a cylinder (thin part or shell), where the cutoffs act
        let y = if i % 2 == 1 {
            let c = &set.cylinders[rng.gen_range(0..set.cylinders.len())];
            let (s, th) = (c.radius * rng.gen::<f64>().sqrt(), std::f64::consts::TAU * rng.gen::<f64>());
            [c.center[0] + s * th.cos(), c.center[1] + s * th.sin(), 1.0 + rng.gen::<f64>()]
        } else {
            [rng.gen::<f64>(), rng.gen::<f64>(), 2.0 * rng.gen::<f64>()]
        };
        in_cylinders += matches!(ext.region(&y)?, Region::Thin(_) | Region::Shell(_)) as usize;
        const_err = const_err.max((ext.eval(&LipschitzFn::Const { c: 1.0 }, &y)? - 1.0).abs());
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let (u, v) = (&suite[rng.gen_range(0..suite.len())].1, &suite[rng.gen_range(0..suite.len())].1);
        let sum = LipschitzFn::Sum { terms: vec![(a, u.clone()), (b, v.clone())] };
        let lhs = ext.eval(&sum, &y)?;
        let rhs = a * ext.eval(u, &y)? + b * ext.eval(v, &y)?;
        lin_err = lin_err.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
    }
    let params = ExtensionParams::new(3, 4.0, 1.0, lambda, m_max)?;
    let rows = norm_ratios(&extension_spec(m_max + 1, lambda), &params, &suite, m_max)?;
    let mut bounded = true;
    let mut cauchy_ok = true;
    let mut worst: f64 = 0.0;
    for (name, _) in &suite {
        let r: Vec<_> = rows.iter().filter(|r| &r.function == name).collect();
        let at2 = r.iter().find(|r| r.m == 2).map(|r| r.ratio).unwrap_or(f64::NAN);
        let max = r.iter().map(|r| r.ratio).fold(0.0, f64::max);
        worst = worst.max(max / at2);
        bounded &= max <= 1.5 * at2;
        // differences at roundoff level count as zero
        let c: Vec<f64> =
            r.iter().map(|r| if r.cauchy <= 1e-14 * r.extended_norm { 0.0 } else { r.cauchy }).collect();
        cauchy_ok &= c.windows(2).all(|w| w[1] <= w[0]);
    }
    let eps = 8.0 * f64::EPSILON;
    let pass = const_err <= eps && lin_err <= eps && bounded && cauchy_ok;
    Ok(outcome(
        pass,
        format!("|E1-1| {const_err:.1e}, linearity {lin_err:.1e} ({in_cylinders} points in cylinders), max ratio / ratio at m=2 {worst:.3}, Cauchy decreasing {cauchy_ok}"),
    ))
}

fn decay_spec() -> CantorCylinderSpec {
    CantorCylinderSpec { n: 3, q: 1.0, lambda: 3.0, h: HFunction::Lambda { lambda: 3.0 }, m: 20, svc_level: 12, radii_rule: Default::default() }
}

const X: [f64; 3] = [0.375, 0.375, 1.75];

fn c9() -> Result<Outcome, capres::Error> {
    let rep = cantor_energy_decay(&decay_spec(), &X, &dyadic(3, 9))?;
    let pass = rep.spread <= 4.0 && rep.decay <= 0.1;
    Ok(outcome(pass, format!("energy/(r h(r)) max/min {:.2e} (need <= 4), energy/h decay {:.2e}", rep.spread, rep.decay)))
}

fn c10() -> Result<Outcome, capres::Error> {
    let spec = decay_spec();
    let params = ExtensionParams::new(3, 4.0, 1.0, spec.lambda, spec.m)?;
    let res = Resolution { cells: 16, ..Default::default() };
    let rows = phi_chain(&spec, &params, &X, &dyadic(3, 9), 16, &res, &SolverOptions::default())?;
    let held = rows.iter().filter(|r| r.holds).count();
    let margin = rows.iter().map(|r| r.log_lhs - r.log_rhs).fold(f64::INFINITY, f64::min);
    Ok(outcome(held == rows.len(), format!("{held}/{} radii hold, min log margin {margin:.2}", rows.len())))
}

fn c11() -> Result<Outcome, capres::Error> {
    let mut pass = true;
    let mut worst: f64 = 0.0;
    for n in 2..=4i64 {
        for s in [Ratio::new(3, 2), Ratio::from_integer(2), Ratio::from_integer(3)] {
            pass &= boundary_gap_exact(n, s) == Ratio::from_integer(0);
            let sf = *s.numer() as f64 / *s.denom() as f64;
            worst = worst.max(mazya_poborchi_range(n as usize, sf, None)?.boundary_gap().abs());
        }
    }
    pass &= worst <= 1e-12;
    Ok(outcome(pass, format!("exact gap zero {pass}, float gap {worst:.1e}")))
}
