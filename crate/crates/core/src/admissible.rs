//! Explicit test functions and cut-offs with pointwise evaluation and energies.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::extension::{in_cylinder, in_cylinder_local, Ball3, CylinderQuadrature, CylinderSet, LipschitzFn, Local, Parts, P3};
use crate::geometry::{svc_build, CantorCylinderSpec, Condenser, Cylinder, CuspFunction, Domain};
use crate::grid::unit_sphere_area;
use crate::quad::{simpson_pieces, Gauss};

/// Relative tolerance of the adaptive energy quadratures.
pub const ENERGY_RTOL: f64 = 1e-8;

/// A member of one of the explicit test-function families.
#[derive(Clone, Debug)]
pub enum TestFunction {
    BumpU { x: Vec<f64>, r: f64 },
    RadialV { n: usize, r: f64 },
    CuspV1 { r: f64, w: CuspFunction, n: usize },
    CuspLogcutV2 { r: f64, w: CuspFunction, n: usize },
    CantorVf(Arc<CantorVf>),
}

/// `1` inside `r/4`, ramp `2 - 4 rho / r`, `0` beyond `r/2`.
#[inline]
fn ramp(rho: f64, r: f64) -> f64 {
    if rho < 0.25 * r {
        1.0
    } else if rho <= 0.5 * r {
        2.0 - 4.0 * rho / r
    } else {
        0.0
    }
}

#[inline]
fn ramp_d(rho: f64, r: f64) -> f64 {
    if rho >= 0.25 * r && rho <= 0.5 * r {
        -4.0 / r
    } else {
        0.0
    }
}

pub fn bump_u(x: &[f64], r: f64) -> Result<TestFunction> {
    if !(r > 0.0) {
        return invalid(format!("bump radius must be positive, got {r}"));
    }
    Ok(TestFunction::BumpU { x: x.to_vec(), r })
}

pub fn radial_v(n: usize, r: f64) -> Result<TestFunction> {
    if !(r > 0.0) || n < 2 {
        return invalid("radial_v needs r > 0 and n >= 2");
    }
    Ok(TestFunction::RadialV { n, r })
}

fn check_cusp_args(r: f64, w: &CuspFunction, n: usize) -> Result<()> {
    if !(r > 0.0 && r < 1.0) {
        return invalid(format!("cusp test functions need 0 < r < 1, got {r}"));
    }
    if n < 2 {
        return invalid("cusp test functions need n >= 2");
    }
    w.validate()
}

pub fn cusp_v1(r: f64, w: CuspFunction, n: usize) -> Result<TestFunction> {
    check_cusp_args(r, &w, n)?;
    if !(w.eval(0.5 * r) > w.eval(0.25 * r)) {
        return invalid("cusp_v1 needs w(r/2) > w(r/4)");
    }
    Ok(TestFunction::CuspV1 { r, w, n })
}

pub fn cusp_logcut_v2(r: f64, w: CuspFunction, n: usize) -> Result<TestFunction> {
    check_cusp_args(r, &w, n)?;
    if w.eval(0.25 * r) >= 0.25 * r {
        return invalid(format!("log cut degenerates: w(r/4) = {} >= r/4", w.eval(0.25 * r)));
    }
    Ok(TestFunction::CuspLogcutV2 { r, w, n })
}

/// `F_h` times the extension of the cylinder-part indicator, on the slab
/// `S_o x (1, 2)` around a point of `E^{n-1} x (3/2, 2)`.
#[derive(Clone, Debug)]
pub struct CantorVf {
    pub x: P3,
    pub r: f64,
    pub spec: CantorCylinderSpec,
    pub set: CylinderSet,
}

pub fn cantor_vf(x: &[f64], r: f64, spec: &CantorCylinderSpec, max_generation: Option<usize>) -> Result<TestFunction> {
    spec.validate()?;
    if x.len() != 3 {
        return invalid("cantor_vF is implemented for n = 3");
    }
    if !(r > 0.0 && r < 0.25) {
        return invalid(format!("cantor_vF needs 0 < r < 1/4, got {r}"));
    }
    let svc = svc_build(spec.svc_level);
    if !(x[2] > 1.5 && x[2] < 2.0) || !svc.contains(x[0]) || !svc.contains(x[1]) {
        return Err(Error::InvalidInput(format!("point {x:?} is not on E^2 x (3/2, 2)")));
    }
    let h = 0.5 * r;
    let set = CylinderSet::windowed(spec, &[x[0] - h, x[1] - h], &[x[0] + h, x[1] + h], max_generation)?;
    Ok(TestFunction::CantorVf(Arc::new(CantorVf { x: [x[0], x[1], x[2]], r, spec: spec.clone(), set })))
}

impl CantorVf {
    fn f_h(&self, y: &P3) -> (f64, P3) {
        let d = [y[0] - self.x[0], y[1] - self.x[1], y[2] - self.x[2]];
        let rho = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let dv = ramp_d(rho, self.r);
        let g = if rho > 0.0 { [dv * d[0] / rho, dv * d[1] / rho, dv * d[2] / rho] } else { [0.0; 3] };
        (ramp(rho, self.r), g)
    }

    fn eval_grad(&self, y: &P3) -> (f64, P3) {
        let (f, gf) = self.f_h(y);
        if f == 0.0 && gf == [0.0; 3] {
            return (0.0, [0.0; 3]);
        }
        let (e, ge) = match self.set.locate(&y[..2]) {
            Some(i) if y[2] >= 1.0 && y[2] < 2.0 => {
                let c = &self.set.cylinders[i];
                let s = ((y[0] - c.center[0]).powi(2) + (y[1] - c.center[1]).powi(2)).sqrt();
                if s <= c.radius {
                    in_cylinder(&LipschitzFn::UpperIndicator, c, y)
                } else {
                    (0.0, [0.0; 3])
                }
            }
            _ => (0.0, [0.0; 3]),
        };
        (f * e, [e * gf[0] + f * ge[0], e * gf[1] + f * ge[1], e * gf[2] + f * ge[2]])
    }

    /// [`Self::eval_grad`] at a point already known to lie in cylinder `c`.
    fn eval_grad_in(&self, c: &Cylinder, p: &Local) -> (f64, P3) {
        let (f, gf) = self.f_h(&p.y);
        if (f == 0.0 && gf == [0.0; 3]) || p.y[2] < 1.0 || p.y[2] >= 2.0 || p.s > c.radius {
            return (0.0, [0.0; 3]);
        }
        let (e, ge) = in_cylinder_local(&LipschitzFn::UpperIndicator, c, p);
        (f * e, [e * gf[0] + f * ge[0], e * gf[1] + f * ge[1], e * gf[2] + f * ge[2]])
    }

    /// `int |grad v|^q` by per-cylinder quadrature over `B(x, r/2)`.
    pub fn energy(&self, q: f64) -> f64 {
        use rayon::prelude::*;
        let fine = CylinderQuadrature::default();
        let coarse = CylinderQuadrature::coarse();
        let clip = Ball3 { center: self.x, radius: 0.5 * self.r };
        let kinks = [Ball3 { center: self.x, radius: 0.25 * self.r }];
        let parts: Vec<f64> = self
            .set
            .cylinders
            .par_iter()
            .map(|c| {
                let rule = if c.radius < 1e-4 * self.r { &coarse } else { &fine };
                rule.integrate_local(c, Parts::ALL, Some(&clip), &kinks, &mut |p| {
                    let g = self.eval_grad_in(c, p).1;
                    (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().powf(q)
                })
            })
            .collect();
        parts.iter().sum()
    }

    /// Checks the plate values on thin-cylinder samples: 1 inside `B(x, r/4)`,
    /// 0 in `A(x; r/2, 3r/4)`.
    pub fn check_plates(&self, per_cylinder: usize) -> Result<()> {
        for c in &self.set.cylinders {
            for k in 0..per_cylinder {
                let a = (k as f64 + 0.5) / per_cylinder as f64;
                let y = [c.center[0] + 0.25 * c.radius, c.center[1], 1.0 + a];
                let d = ((y[0] - self.x[0]).powi(2) + (y[1] - self.x[1]).powi(2) + (y[2] - self.x[2]).powi(2)).sqrt();
                let v = self.eval_grad(&y).0;
                if d < 0.25 * self.r && v != 1.0 {
                    return Err(Error::NotAdmissible(format!("value {v} at {y:?} inside B(x, r/4)")));
                }
                if d >= 0.5 * self.r && d < 0.75 * self.r && v != 0.0 {
                    return Err(Error::NotAdmissible(format!("value {v} at {y:?} in A(x; r/2, 3r/4)")));
                }
            }
        }
        Ok(())
    }
}

/// `(value, d/dt, d/drho)` of a function of the meridian coordinates.
type Meridian = (f64, f64, f64);

impl TestFunction {
    pub fn family(&self) -> &'static str {
        match self {
            TestFunction::BumpU { .. } => "bump_u",
            TestFunction::RadialV { .. } => "radial_v",
            TestFunction::CuspV1 { .. } => "cusp_v1",
            TestFunction::CuspLogcutV2 { .. } => "cusp_logcut_v2",
            TestFunction::CantorVf(_) => "cantor_vf",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TestFunction::BumpU { x, .. } => x.len(),
            TestFunction::RadialV { n, .. } | TestFunction::CuspV1 { n, .. } | TestFunction::CuspLogcutV2 { n, .. } => *n,
            TestFunction::CantorVf(_) => 3,
        }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            TestFunction::BumpU { x, r } => ramp(dist(z, x), *r),
            TestFunction::RadialV { r, .. } => ramp(norm(z), *r),
            TestFunction::CuspV1 { .. } | TestFunction::CuspLogcutV2 { .. } => {
                let t = z[0];
                let rho = norm(&z[1..]);
                self.meridian(t, rho).0
            }
            TestFunction::CantorVf(v) => v.eval_grad(&[z[0], z[1], z[2]]).0,
        }
    }

    /// Value and partial derivatives in `(t, rho)` for the axisymmetric families.
    fn meridian(&self, t: f64, rho: f64) -> Meridian {
        let zeta = (t * t + rho * rho).sqrt();
        match self {
            TestFunction::CuspV1 { r, w, .. } => {
                let (a, b) = (w.eval(0.25 * r), w.eval(0.5 * r));
                let (f, df) = if rho < a {
                    (1.0, 0.0)
                } else if rho <= b {
                    ((b - rho) / (b - a), -1.0 / (b - a))
                } else {
                    (0.0, 0.0)
                };
                let (v, dv) = (ramp(zeta, *r), ramp_d(zeta, *r));
                let (ct, cr) = if zeta > 0.0 { (t / zeta, rho / zeta) } else { (0.0, 0.0) };
                (v * f, dv * ct * f, dv * cr * f + v * df)
            }
            TestFunction::CuspLogcutV2 { r, w, .. } => {
                let a = w.eval(0.25 * r);
                let den = (4.0 * a / r).ln();
                let (f, df) = if rho < a {
                    (1.0, 0.0)
                } else if rho <= 0.25 * r {
                    ((4.0 * rho / r).ln() / den, 1.0 / (rho * den))
                } else {
                    (0.0, 0.0)
                };
                let half = 0.5f64.ln();
                let (g, dg) = if zeta < 0.25 * r {
                    (1.0, 0.0)
                } else if zeta <= 0.5 * r {
                    ((2.0 * zeta / r).ln() / half, 1.0 / (zeta * half))
                } else {
                    (0.0, 0.0)
                };
                let (ct, cr) = if zeta > 0.0 { (t / zeta, rho / zeta) } else { (0.0, 0.0) };
                (f * g, f * dg * ct, f * dg * cr + df * g)
            }
            _ => unreachable!("meridian form only for the cusp families"),
        }
    }

    /// `int_{R^n} |grad u|^p`.
    pub fn energy(&self, p: f64) -> Result<f64> {
        if !(p >= 1.0) {
            return invalid(format!("energy exponent must be >= 1, got {p}"));
        }
        match self {
            TestFunction::BumpU { x, r } => Ok(radial_energy(x.len(), *r, p)),
            TestFunction::RadialV { n, r } => Ok(radial_energy(*n, *r, p)),
            TestFunction::CuspV1 { r, w, n } => {
                let mut br = vec![0.0, w.eval(0.25 * r), w.eval(0.5 * r)];
                if 0.25 * r < br[2] {
                    br.push(0.25 * r);
                }
                let top = br[2].min(0.5 * r);
                br.retain(|b| *b <= top);
                Ok(self.meridian_energy(*n, *r, p, &br))
            }
            TestFunction::CuspLogcutV2 { r, w, n } => {
                let br = vec![0.0, w.eval(0.25 * r), 0.25 * r];
                Ok(self.meridian_energy(*n, *r, p, &br))
            }
            TestFunction::CantorVf(v) => Ok(v.energy(p)),
        }
    }

    /// Energy of an axisymmetric family: `2 |S^{n-2}| int_rho int_{t>0}`, with
    /// kinks of the integrand used as breakpoints in both variables.
    fn meridian_energy(&self, n: usize, r: f64, p: f64, rho_breaks: &[f64]) -> f64 {
        let c = 2.0 * unit_sphere_area(n - 2);
        let inner = |rho: f64, tol: f64| -> f64 {
            let t2 = (0.25 * r * r - rho * rho).max(0.0).sqrt();
            let mut br = vec![0.0, t2];
            if rho < 0.25 * r {
                br.push((0.0625 * r * r - rho * rho).sqrt());
            }
            simpson_pieces(&br, tol, &mut |t| {
                let (_, gt, gr) = self.meridian(t, rho);
                (gt * gt + gr * gr).sqrt().powf(p)
            })
        };
        // rough Gauss pass fixes the absolute tolerance
        let g = Gauss::new(12);
        let mut sorted = rho_breaks.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rough: f64 = sorted
            .windows(2)
            .map(|w| g.integrate(w[0], w[1], |rho| rho.powi(n as i32 - 2) * inner(rho, 1e-6 * r.powf(1.0 - p))))
            .sum();
        let tol = ENERGY_RTOL * rough.abs().max(f64::MIN_POSITIVE);
        let span = sorted.last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
        c * simpson_pieces(&sorted, tol, &mut |rho| {
            let wgt = rho.powi(n as i32 - 2);
            wgt * inner(rho, tol / (span * wgt.max(1e-300)))
        })
    }

    /// Explicit Lipschitz constant for the families with a stated gradient bound.
    pub fn lipschitz_bound(&self) -> Option<f64> {
        match self {
            TestFunction::BumpU { r, .. } | TestFunction::RadialV { r, .. } => Some(4.0 / r),
            TestFunction::CuspV1 { r, w, .. } => Some(4.0 / r + 1.0 / (w.eval(0.5 * r) - w.eval(0.25 * r))),
            _ => None,
        }
    }

    /// The condenser the function is built for (`None` for `cantor_vF`, whose
    /// plates are checked by [`CantorVf::check_plates`]).
    pub fn designated_condenser(&self, p: f64) -> Option<Condenser> {
        match self {
            TestFunction::BumpU { x, r } => {
                Some(Condenser::density_window(&Domain::Whole { n: x.len() }, x, *r, p, false))
            }
            TestFunction::RadialV { n, r } => {
                Some(Condenser::density_window(&Domain::Whole { n: *n }, &vec![0.0; *n], *r, p, false))
            }
            TestFunction::CuspV1 { r, w, n } | TestFunction::CuspLogcutV2 { r, w, n } => {
                Some(Condenser::density_window(&Domain::cusp(w.clone(), *n), &vec![0.0; *n], *r, p, false))
            }
            TestFunction::CantorVf(_) => None,
        }
    }
}

/// `(4/r)^p |B(r/2) \ B(r/4)|`.
fn radial_energy(n: usize, r: f64, p: f64) -> f64 {
    let vol = unit_sphere_area(n - 1) / n as f64 * ((0.5 * r).powi(n as i32) - (0.25 * r).powi(n as i32));
    (4.0 / r).powf(p) * vol
}

fn norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsolve::check_admissible;
    use std::f64::consts::PI;

    #[test]
    fn bump_values() {
        let u = bump_u(&[0.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(u.eval(&[0.25, 0.0, 0.0]), 1.0);
        assert!((u.eval(&[0.375, 0.0, 0.0]) - 0.5).abs() < 1e-15);
        assert_eq!(u.eval(&[0.6, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn radial_energy_matches_radial_quadrature() {
        // 1D radial integral of |v'|^2 4 pi rho^2 by Gauss on the ramp shell
        let r = 0.8;
        let g = Gauss::new(10);
        let oracle = g.integrate(0.25 * r, 0.5 * r, |rho| (4.0 / r).powi(2) * 4.0 * PI * rho * rho);
        let v = radial_v(3, r).unwrap().energy(2.0).unwrap();
        assert!((v - oracle).abs() < 1e-12 * oracle);
        let e2 = radial_v(3, 2.0 * r).unwrap().energy(2.0).unwrap();
        assert!((e2 / v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cusp_v1_plate_values() {
        let w = CuspFunction::parse("t^2").unwrap();
        let v = cusp_v1(0.5, w.clone(), 3).unwrap();
        assert_eq!(v.eval(&[0.1, 0.001, 0.0]), 1.0);
        assert_eq!(v.eval(&[0.1, w.eval(0.25) * 1.01, 0.0]), 0.0);
        let c = v.designated_condenser(1.5).unwrap();
        check_admissible(&c, &v, 2000, 3).unwrap();
    }

    #[test]
    fn cusp_v1_energy_against_product_grid() {
        // independent check: midpoint rule on a fine (t, rho) grid
        let w = CuspFunction::parse("t^2").unwrap();
        let (r, p) = (0.5, 1.5);
        let v = cusp_v1(r, w.clone(), 3).unwrap();
        let e = v.energy(p).unwrap();
        let (nt, nr) = (4000, 400);
        let rmax = w.eval(0.5 * r);
        let (ht, hr) = (r / nt as f64, rmax / nr as f64);
        let mut acc = 0.0;
        for i in 0..nt {
            let t = -0.5 * r + (i as f64 + 0.5) * ht;
            for j in 0..nr {
                let rho = (j as f64 + 0.5) * hr;
                let d = 1e-7;
                let fx = |tt: f64, rr: f64| v.eval(&[tt, rr, 0.0]);
                let gt = (fx(t + d, rho) - fx(t - d, rho)) / (2.0 * d);
                let gr = (fx(t, rho + d) - fx(t, rho - d)) / (2.0 * d);
                acc += (gt * gt + gr * gr).sqrt().powf(p) * 2.0 * PI * rho * ht * hr;
            }
        }
        assert!((acc / e - 1.0).abs() < 2e-2, "{acc} vs {e}");
    }

    #[test]
    fn logcut_values_and_error() {
        let w = CuspFunction::parse("t^2").unwrap();
        let v = cusp_logcut_v2(0.5, w.clone(), 3).unwrap();
        assert_eq!(v.eval(&[0.05, 0.001, 0.0]), 1.0);
        assert!(v.eval(&[0.05, 0.125, 0.0]).abs() < 1e-15);
        let c = v.designated_condenser(2.0).unwrap();
        check_admissible(&c, &v, 2000, 4).unwrap();
        // w(t) = t makes w(r/4) = r/4
        let lin = CuspFunction::Tabulated { t: vec![0.0, 1.0], w: vec![0.0, 1.0] };
        lin.validate().unwrap();
        let msg = cusp_logcut_v2(0.5, lin, 3).unwrap_err().to_string();
        assert!(msg.contains("w(r/4)"), "{msg}");
    }

    #[test]
    fn constant_one_not_admissible() {
        let c = Condenser::concentric_balls(&[0.0; 3], 0.25, 0.5, 2.0);
        let one = bump_u(&[0.0; 3], 100.0).unwrap();
        assert!(matches!(check_admissible(&c, &one, 500, 1), Err(Error::NotAdmissible(_))));
    }

    #[test]
    fn cantor_vf_is_cut_extension_of_indicator() {
        use crate::extension::Extension;
        use crate::geometry::HFunction;
        let spec = CantorCylinderSpec { n: 3, q: 1.0, lambda: 3.0, h: HFunction::Identity, m: 4, svc_level: 8, radii_rule: Default::default() };
        let x = [0.375, 0.375, 1.75];
        let r = 0.125;
        let v = cantor_vf(&x, r, &spec, None).unwrap();
        let TestFunction::CantorVf(inner) = &v else { unreachable!() };
        inner.check_plates(4).unwrap();
        let ext = Extension::new(inner.set.clone());
        let bump = bump_u(&x, r).unwrap();
        for c in &inner.set.cylinders {
            for &(s, a) in &[(0.3, 0.6), (0.6, 0.7), (0.8, 0.02), (0.99, 0.9)] {
                let y = [c.center[0] + s * c.radius, c.center[1], 1.0 + a];
                let expect = bump.eval(&y) * ext.eval(&LipschitzFn::UpperIndicator, &y).unwrap();
                assert!((v.eval(&y) - expect).abs() < 1e-12, "{y:?}");
            }
        }
        assert!(v.energy(1.0).unwrap() > 0.0);
    }
}
