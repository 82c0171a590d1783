//! Parameter formulas, cut-offs, reflections and the truncated extension
//! operator on the Cantor-cylinder domain.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{svc_build, whitney_decompose, CantorCylinderSpec, CantorDomain, Cylinder, HFunction};
use crate::quad::Gauss;

/// `max{(n-1-p)/(n-1)^2, (p-q)/((n-1)(p-q) - pq)}`.
pub fn lambda_o(n: usize, p: f64, q: f64) -> Result<f64> {
    let nm1 = n as f64 - 1.0;
    if n < 3 || !(q >= 1.0 && q < nm1) {
        return invalid(format!("lambda_o needs n >= 3 and 1 <= q < n-1 (n = {n}, q = {q})"));
    }
    let p_min = nm1 * q / (nm1 - q);
    let denom = nm1 * (p - q) - p * q;
    if !(p > p_min) || denom <= 0.0 {
        return invalid(format!("lambda_o needs p > (n-1)q/(n-1-q) = {p_min}, got p = {p}"));
    }
    Ok(((nm1 - p) / (nm1 * nm1)).max((p - q) / denom))
}

fn h_exponent(k: f64, n: usize, q: f64, lambda: f64) -> f64 {
    let nm1 = n as f64 - 1.0;
    ((1.0 - lambda * (nm1 - q)) * nm1 * (k + 1.0) + k) / (3.0 * k)
}

/// `(1/t)^{((1 - lambda(n-1-q))(n-1)(k+1) + k) / 3k}`, evaluated at `t = 8^-k`.
pub fn h_lambda(t: f64, k: usize, n: usize, q: f64, lambda: f64) -> Result<f64> {
    if k == 0 {
        return invalid("h_lambda is undefined for k = 0");
    }
    if !(t > 0.0) {
        return invalid(format!("h_lambda needs t > 0, got {t}"));
    }
    Ok((1.0 / t).powf(h_exponent(k as f64, n, q, lambda)))
}

/// `h_lambda` at arbitrary `t` in `(0, 1)`, binding the index through `t = 8^-k`.
pub fn h_lambda_continuous(t: f64, n: usize, q: f64, lambda: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return invalid(format!("h_lambda needs 0 < t < 1, got {t}"));
    }
    let k = (1.0 / t).ln() / 8f64.ln();
    Ok((1.0 / t).powf(h_exponent(k, n, q, lambda)))
}

/// `r_k = (2^{-(n-1)(k+1)-k} h(8^{-k}))^{1/(n-1-q)}`.
pub fn radii_rk(n: usize, q: f64, h: &HFunction, k: usize) -> Result<f64> {
    let nm1 = n as f64 - 1.0;
    if !(q < nm1) {
        return invalid(format!("r_k needs q < n-1, got q = {q}, n = {n}"));
    }
    let e = -((n as i32 - 1) * (k as i32 + 1) + k as i32);
    let base = 2f64.powi(e) * h.eval_at_generation(k, n, q)?;
    Ok(base.powf(1.0 / (nm1 - q)))
}

/// Exponents of a `(p, q)` extension experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionParams {
    pub p: f64,
    pub q: f64,
    pub lambda: f64,
    pub lambda_o: f64,
    pub m: usize,
    /// `1/kappa = 1/q - 1/p`
    pub kappa: f64,
}

impl ExtensionParams {
    pub fn new(n: usize, p: f64, q: f64, lambda: f64, m: usize) -> Result<Self> {
        if !(q < p) {
            return invalid(format!("need q < p, got q = {q}, p = {p}"));
        }
        let lambda_o = lambda_o(n, p, q)?;
        if !(lambda > lambda_o) {
            return invalid(format!("need lambda > lambda_o = {lambda_o}, got {lambda}"));
        }
        Ok(ExtensionParams { p, q, lambda, lambda_o, m, kappa: p * q / (p - q) })
    }
}

pub type P3 = [f64; 3];

#[inline]
fn sub(a: &P3, b: &P3) -> P3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn norm(a: &P3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Lipschitz functions used as inputs to the extension operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LipschitzFn {
    Const { c: f64 },
    Coord { axis: usize },
    /// 1 on `B(x, r/4)`, radial ramp `2 - 4|y-x|/r`, 0 outside `B(x, r/2)`.
    Bump { x: P3, r: f64 },
    Product { a: Box<LipschitzFn>, b: Box<LipschitzFn> },
    /// `sum_i c_i u_i`
    Sum { terms: Vec<(f64, LipschitzFn)> },
    /// 1 for `y_n >= 1`, else 0. On the thin-cylinder domain this is the
    /// indicator of the cylinder part.
    UpperIndicator,
}

impl LipschitzFn {
    /// Default five-function suite: `1, x_1, x_3`, a bump and `x_1 * bump`.
    pub fn suite() -> Vec<(String, LipschitzFn)> {
        let bump = LipschitzFn::Bump { x: [0.5, 0.5, 0.9], r: 0.5 };
        vec![
            ("one".into(), LipschitzFn::Const { c: 1.0 }),
            ("x1".into(), LipschitzFn::Coord { axis: 0 }),
            ("x3".into(), LipschitzFn::Coord { axis: 2 }),
            ("bump".into(), bump.clone()),
            (
                "x1_bump".into(),
                LipschitzFn::Product { a: Box::new(LipschitzFn::Coord { axis: 0 }), b: Box::new(bump) },
            ),
        ]
    }

    pub fn eval(&self, y: &P3) -> f64 {
        self.eval_grad(y).0
    }

    pub fn eval_grad(&self, y: &P3) -> (f64, P3) {
        match self {
            LipschitzFn::Const { c } => (*c, [0.0; 3]),
            LipschitzFn::Coord { axis } => {
                let mut g = [0.0; 3];
                g[*axis] = 1.0;
                (y[*axis], g)
            }
            LipschitzFn::Bump { x, r } => {
                let d = sub(y, x);
                let rho = norm(&d);
                if rho < 0.25 * r {
                    (1.0, [0.0; 3])
                } else if rho < 0.5 * r {
                    let s = -4.0 / (r * rho);
                    (2.0 - 4.0 * rho / r, [s * d[0], s * d[1], s * d[2]])
                } else {
                    (0.0, [0.0; 3])
                }
            }
            LipschitzFn::Product { a, b } => {
                let (va, ga) = a.eval_grad(y);
                let (vb, gb) = b.eval_grad(y);
                (va * vb, [va * gb[0] + vb * ga[0], va * gb[1] + vb * ga[1], va * gb[2] + vb * ga[2]])
            }
            LipschitzFn::Sum { terms } => {
                let mut v = 0.0;
                let mut g = [0.0; 3];
                for (c, u) in terms {
                    let (vu, gu) = u.eval_grad(y);
                    v += c * vu;
                    for d in 0..3 {
                        g[d] += c * gu[d];
                    }
                }
                (v, g)
            }
            LipschitzFn::UpperIndicator => (if y[2] >= 1.0 { 1.0 } else { 0.0 }, [0.0; 3]),
        }
    }

    /// Spheres across which the gradient jumps.
    pub fn kinks(&self) -> Vec<Ball3> {
        match self {
            LipschitzFn::Bump { x, r } => {
                vec![Ball3 { center: *x, radius: 0.25 * r }, Ball3 { center: *x, radius: 0.5 * r }]
            }
            LipschitzFn::Product { a, b } => {
                let mut k = a.kinks();
                k.extend(b.kinks());
                k
            }
            LipschitzFn::Sum { terms } => terms.iter().flat_map(|(_, u)| u.kinks()).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball3 {
    pub center: P3,
    pub radius: f64,
}

impl Ball3 {
    pub fn contains(&self, y: &P3) -> bool {
        norm(&sub(y, &self.center)) < self.radius
    }
}

/// `L^i, L^o` on the annular shell `A` of one cylinder, in local coordinates
/// `s = |y' - center|`, `a = y_n - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffPair {
    pub center: [f64; 2],
    pub r: f64,
}

impl CutoffPair {
    pub fn of(c: &Cylinder) -> Self {
        CutoffPair { center: [c.center[0], c.center[1]], r: c.radius }
    }

    pub fn local(&self, y: &P3) -> (f64, f64) {
        let dx = y[0] - self.center[0];
        let dy = y[1] - self.center[1];
        ((dx * dx + dy * dy).sqrt(), y[2] - 1.0)
    }

    /// Membership in the corner region `D` (closure).
    pub fn in_corner(&self, s: f64, a: f64) -> bool {
        a <= 0.5 * self.r && s >= 0.5 * self.r && s <= self.r - a
    }

    /// `(L^i, L^o)` without domain checks. The singular circle returns `(0, 1)`.
    pub fn eval_local(&self, s: f64, a: f64) -> (f64, f64) {
        let sigma = s - 0.5 * self.r;
        if sigma == 0.0 && a == 0.0 {
            return (0.0, 1.0);
        }
        if self.in_corner(s, a) {
            (a / (a + sigma), sigma / (a + sigma))
        } else {
            (-2.0 / self.r * s + 2.0, 2.0 / self.r * s - 1.0)
        }
    }

    pub fn eval(&self, y: &P3) -> Result<(f64, f64)> {
        let (s, a) = self.local(y);
        let tol = 1e-12 * self.r;
        if s < 0.5 * self.r - tol || s > self.r + tol || a < -tol || a > 1.0 + tol {
            return invalid(format!("point {y:?} is outside the shell of radius {}", self.r));
        }
        Ok(self.eval_local(s, a))
    }

    /// Cartesian gradients `(grad L^i, grad L^o)`.
    pub fn grad(&self, y: &P3) -> (P3, P3) {
        let (s, a) = self.local(y);
        let es = if s > 0.0 {
            [(y[0] - self.center[0]) / s, (y[1] - self.center[1]) / s]
        } else {
            [0.0, 0.0]
        };
        let sigma = s - 0.5 * self.r;
        let (ds, da) = if self.in_corner(s, a) && (sigma > 0.0 || a > 0.0) {
            let d2 = (a + sigma) * (a + sigma);
            (-a / d2, sigma / d2)
        } else {
            (-2.0 / self.r, 0.0)
        };
        let gi = [ds * es[0], ds * es[1], da];
        (gi, [-gi[0], -gi[1], -gi[2]])
    }

    /// Gradient bound inside `D`: `1 / sqrt((s - r/2)^2 + a^2)`.
    pub fn corner_bound(&self, s: f64, a: f64) -> f64 {
        let sigma = s - 0.5 * self.r;
        1.0 / (sigma * sigma + a * a).sqrt()
    }
}

/// `(y_1, .., y_{n-1}, 2 - y_n)`.
pub fn reflect_r1(y: &P3) -> P3 {
    [y[0], y[1], 2.0 - y[2]]
}

/// Radial reflection of the shell onto the thin cylinder: `s -> 3r/4 - s/2`.
pub fn reflect_r2(c: &CutoffPair, y: &P3) -> P3 {
    let (s, _) = c.local(y);
    if s == 0.0 {
        return *y;
    }
    let f = (0.75 * c.r - 0.5 * s) / s;
    [c.center[0] + f * (y[0] - c.center[0]), c.center[1] + f * (y[1] - c.center[1]), y[2]]
}

/// Jacobian determinant of `R_2` in the cylindrical coordinates `(s, theta, y_n)`
/// and in Cartesian coordinates.
pub fn jacobian_r2(c: &CutoffPair, y: &P3) -> (f64, f64) {
    let (s, _) = c.local(y);
    let s2 = 0.75 * c.r - 0.5 * s;
    (0.5, 0.5 * s2 / s)
}

/// Cylinders of a truncated construction with a lookup by Whitney cube.
#[derive(Clone, Debug)]
pub struct CylinderSet {
    pub cylinders: Vec<Cylinder>,
    generations: Vec<usize>,
    lookup: HashMap<(usize, [i64; 2]), usize>,
}

impl CylinderSet {
    pub fn new(cylinders: Vec<Cylinder>) -> Self {
        let mut generations: Vec<usize> = cylinders.iter().map(|c| c.generation).collect();
        generations.sort_unstable();
        generations.dedup();
        let lookup = cylinders
            .iter()
            .enumerate()
            .map(|(i, c)| ((c.generation, cube_key(&c.center, c.cube_edge)), i))
            .collect();
        CylinderSet { cylinders, generations, lookup }
    }

    pub fn from_domain(d: &CantorDomain) -> Self {
        Self::new(d.cylinders().to_vec())
    }

    /// Cylinders of the first `spec.m` nonempty generations (capped at
    /// `max_generation`) whose cubes meet the window `[lo, hi]`.
    pub fn windowed(spec: &CantorCylinderSpec, lo: &[f64], hi: &[f64], max_generation: Option<usize>) -> Result<Self> {
        spec.validate()?;
        let svc = svc_build(spec.svc_level);
        let first = first_generation(spec)?;
        let mut last = first + spec.m - 1;
        if let Some(g) = max_generation {
            last = last.min(g);
        }
        let cubes = whitney_decompose(Some(&svc), spec.n - 1, last, Some((lo, hi)))?;
        let mut radii: HashMap<usize, f64> = HashMap::new();
        let mut cyl = Vec::with_capacity(cubes.len());
        for c in cubes {
            let r = match radii.get(&c.generation) {
                Some(r) => *r,
                None => {
                    let r = spec.radius(c.generation)?;
                    radii.insert(c.generation, r);
                    r
                }
            };
            if !(r < 0.5 * c.edge) {
                return invalid(format!("r_{} = {r:.3e} does not fit its cube", c.generation));
            }
            cyl.push(Cylinder { center: c.center, generation: c.generation, radius: r, cube_edge: c.edge });
        }
        Ok(Self::new(cyl))
    }

    pub fn generations(&self) -> &[usize] {
        &self.generations
    }

    /// Keeps the first `count` generations present.
    pub fn truncate(&self, count: usize) -> Self {
        let keep: Vec<usize> = self.generations.iter().copied().take(count).collect();
        Self::new(self.cylinders.iter().filter(|c| keep.contains(&c.generation)).cloned().collect())
    }

    /// Cylinders of one generation.
    pub fn generation(&self, g: usize) -> Self {
        Self::new(self.cylinders.iter().filter(|c| c.generation == g).cloned().collect())
    }

    pub fn locate(&self, yp: &[f64]) -> Option<usize> {
        for &g in &self.generations {
            let edge = 2f64.powi(-(g as i32) - 1);
            if let Some(&i) = self.lookup.get(&(g, cube_key(yp, edge))) {
                return Some(i);
            }
        }
        None
    }
}

fn cube_key(p: &[f64], edge: f64) -> [i64; 2] {
    [(p[0] / edge).floor() as i64, (p[1] / edge).floor() as i64]
}

/// First nonempty Whitney generation of `(0,1)^{n-1} \ E^{n-1}`.
pub fn first_generation(spec: &CantorCylinderSpec) -> Result<usize> {
    let svc = svc_build(spec.svc_level);
    for g in 0..=spec.svc_level + 3 {
        if !whitney_decompose(Some(&svc), spec.n - 1, g, None)?.is_empty() {
            return Ok(g);
        }
    }
    invalid("no Whitney cubes at this SVC level")
}

/// Where a point of `C_o` sits relative to the construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Cube,
    Thin(usize),
    Shell(usize),
    Outer,
}

/// Truncated extension operator `E^m` for a fixed set of cylinders.
#[derive(Clone, Debug)]
pub struct Extension {
    pub set: CylinderSet,
}

impl Extension {
    pub fn new(set: CylinderSet) -> Self {
        Extension { set }
    }

    pub fn region(&self, y: &P3) -> Result<Region> {
        let inside = (0..2).all(|d| y[d] >= 0.0 && y[d] <= 1.0) && y[2] >= 0.0 && y[2] <= 2.0;
        if !inside {
            return invalid(format!("point {y:?} is outside C_o"));
        }
        if y[2] < 1.0 {
            return Ok(Region::Cube);
        }
        Ok(match self.set.locate(&y[..2]) {
            Some(i) => {
                let c = &self.set.cylinders[i];
                let (s, _) = CutoffPair::of(c).local(y);
                if s < 0.5 * c.radius {
                    Region::Thin(i)
                } else if s <= c.radius {
                    Region::Shell(i)
                } else {
                    Region::Outer
                }
            }
            None => Region::Outer,
        })
    }

    pub fn eval(&self, u: &LipschitzFn, y: &P3) -> Result<f64> {
        Ok(self.eval_grad(u, y)?.0)
    }

    pub fn eval_grad(&self, u: &LipschitzFn, y: &P3) -> Result<(f64, P3)> {
        Ok(match self.region(y)? {
            Region::Cube => u.eval_grad(y),
            Region::Thin(i) | Region::Shell(i) => in_cylinder(u, &self.set.cylinders[i], y),
            Region::Outer => reflected_r1(u, y),
        })
    }
}

fn reflected_r1(u: &LipschitzFn, y: &P3) -> (f64, P3) {
    let (v, g) = u.eval_grad(&reflect_r1(y));
    (v, [g[0], g[1], -g[2]])
}

/// `E(u)` at a point of a cylinder (thin part or shell).
pub fn in_cylinder(u: &LipschitzFn, c: &Cylinder, y: &P3) -> (f64, P3) {
    let cp = CutoffPair::of(c);
    let (s, a) = cp.local(y);
    let es = if s > 0.0 { [(y[0] - cp.center[0]) / s, (y[1] - cp.center[1]) / s] } else { [0.0, 0.0] };
    in_cylinder_local(u, c, &Local { y: *y, s, es, a })
}

/// A cylinder point with its local coordinates carried exactly. Cylinders far
/// down the construction are thinner than the float spacing of their centre, so
/// `s` and `es` cannot be recovered from `y`.
#[derive(Clone, Copy, Debug)]
pub struct Local {
    pub y: P3,
    pub s: f64,
    pub es: [f64; 2],
    pub a: f64,
}

/// [`in_cylinder`] from exact local coordinates.
pub fn in_cylinder_local(u: &LipschitzFn, c: &Cylinder, p: &Local) -> (f64, P3) {
    let cp = CutoffPair::of(c);
    let (y, s, a, es) = (&p.y, p.s, p.a, p.es);
    if s < 0.5 * cp.r {
        return u.eval_grad(y);
    }
    let (li, lo) = cp.eval_local(s, a);
    let sigma = s - 0.5 * cp.r;
    let (ds, da) = if cp.in_corner(s, a) && (sigma > 0.0 || a > 0.0) {
        let d2 = (a + sigma) * (a + sigma);
        (-a / d2, sigma / d2)
    } else {
        (-2.0 / cp.r, 0.0)
    };
    let gli = [ds * es[0], ds * es[1], da];
    let glo = [-gli[0], -gli[1], -gli[2]];
    let (u1, g1) = reflected_r1(u, y);
    let s2 = 0.75 * cp.r - 0.5 * s;
    let y2 = [cp.center[0] + s2 * es[0], cp.center[1] + s2 * es[1], y[2]];
    let (u2, g) = u.eval_grad(&y2);
    // chain rule through R_2: radial factor -1/2, tangential factor s'/s
    let gs = g[0] * es[0] + g[1] * es[1];
    let gt = [g[0] - gs * es[0], g[1] - gs * es[1]];
    let ratio = s2 / s;
    let g2 = [-0.5 * gs * es[0] + ratio * gt[0], -0.5 * gs * es[1] + ratio * gt[1], g[2]];
    let v = li * u2 + lo * u1;
    let mut grad = [0.0; 3];
    for d in 0..3 {
        grad[d] = gli[d] * u2 + li * g2[d] + glo[d] * u1 + lo * g1[d];
    }
    (v, grad)
}

/// Which parts of a cylinder to integrate over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Parts {
    pub thin: bool,
    pub shell: bool,
}

impl Parts {
    pub const ALL: Parts = Parts { thin: true, shell: true };
    pub const THIN: Parts = Parts { thin: true, shell: false };
}

/// Tensor quadrature on a cylinder in local coordinates `(s, theta, a)`,
/// with the corner region in polar coordinates about the singular circle.
#[derive(Clone, Debug)]
pub struct CylinderQuadrature {
    gs: Gauss,
    ga: Gauss,
    gc: Gauss,
    pub n_theta: usize,
    pub a_panels: usize,
}

impl Default for CylinderQuadrature {
    fn default() -> Self {
        Self::new(8, 8, 16, 4)
    }
}

impl CylinderQuadrature {
    pub fn new(radial: usize, axial: usize, n_theta: usize, a_panels: usize) -> Self {
        CylinderQuadrature { gs: Gauss::new(radial), ga: Gauss::new(axial), gc: Gauss::new(radial), n_theta, a_panels }
    }

    /// Cheaper rule for cylinders much thinner than the variation scale.
    pub fn coarse() -> Self {
        Self::new(5, 6, 6, 2)
    }

    /// `int f dV` over the chosen parts of `cyl`, intersected with `clip`.
    pub fn integrate(
        &self,
        cyl: &Cylinder,
        parts: Parts,
        clip: Option<&Ball3>,
        kinks: &[Ball3],
        f: &mut dyn FnMut(&P3) -> f64,
    ) -> f64 {
        self.integrate_local(cyl, parts, clip, kinks, &mut |p| f(&p.y))
    }

    /// [`integrate`](Self::integrate) handing the integrand exact local coordinates.
    pub fn integrate_local(
        &self,
        cyl: &Cylinder,
        parts: Parts,
        clip: Option<&Ball3>,
        kinks: &[Ball3],
        f: &mut dyn FnMut(&Local) -> f64,
    ) -> f64 {
        let r = cyl.radius;
        let c = [cyl.center[0], cyl.center[1]];
        if let Some(b) = clip {
            let dx = ((c[0] - b.center[0]).powi(2) + (c[1] - b.center[1]).powi(2)).sqrt();
            if dx > b.radius + r || b.center[2] + b.radius < 1.0 || b.center[2] - b.radius > 2.0 {
                return 0.0;
            }
        }
        let wt = 2.0 * PI / self.n_theta as f64;
        let mut total = 0.0;
        let mut brk: Vec<f64> = Vec::new();
        for j in 0..self.n_theta {
            let th = (j as f64 + 0.5) * wt;
            let (ct, st) = (th.cos(), th.sin());
            let es = [ct, st];
            let mut line = |s: f64, a_lo: f64, a_hi: f64, f: &mut dyn FnMut(&Local) -> f64| -> f64 {
                let yp = [c[0] + s * ct, c[1] + s * st];
                let (mut lo, mut hi) = (a_lo, a_hi);
                if let Some(b) = clip {
                    let d2 = (yp[0] - b.center[0]).powi(2) + (yp[1] - b.center[1]).powi(2);
                    if d2 >= b.radius * b.radius {
                        return 0.0;
                    }
                    let h = (b.radius * b.radius - d2).sqrt();
                    lo = lo.max(b.center[2] - h - 1.0);
                    hi = hi.min(b.center[2] + h - 1.0);
                }
                if hi <= lo {
                    return 0.0;
                }
                brk.clear();
                brk.push(lo);
                for i in 1..self.a_panels {
                    brk.push(a_lo + (a_hi - a_lo) * i as f64 / self.a_panels as f64);
                }
                for k in kinks {
                    let d2 = (yp[0] - k.center[0]).powi(2) + (yp[1] - k.center[1]).powi(2);
                    if d2 < k.radius * k.radius {
                        let h = (k.radius * k.radius - d2).sqrt();
                        brk.push(k.center[2] - h - 1.0);
                        brk.push(k.center[2] + h - 1.0);
                    }
                }
                brk.push(hi);
                brk.retain(|v| *v >= lo && *v <= hi);
                brk.sort_by(|x, y| x.partial_cmp(y).unwrap());
                let mut acc = 0.0;
                for w in brk.windows(2) {
                    for (a, wa) in self.ga.on(w[0], w[1]) {
                        acc += wa * f(&Local { y: [yp[0], yp[1], 1.0 + a], s, es, a });
                    }
                }
                acc
            };
            if parts.thin {
                for (s, ws) in self.gs.on(0.0, 0.5 * r) {
                    total += wt * ws * s * line(s, 0.0, 1.0, f);
                }
            }
            if parts.shell {
                for (s, ws) in self.gs.on(0.5 * r, r) {
                    total += wt * ws * s * line(s, r - s, 1.0, f);
                }
                // corner region: sigma = rho cos(phi), a = rho sin(phi)
                for (phi, wp) in self.gc.on(0.0, 0.5 * PI) {
                    let (cp, sp) = (phi.cos(), phi.sin());
                    let rmax = 0.5 * r / (cp + sp);
                    for (rho, wr) in self.gc.on(0.0, rmax) {
                        let s = 0.5 * r + rho * cp;
                        let y = [c[0] + s * ct, c[1] + s * st, 1.0 + rho * sp];
                        if clip.map_or(true, |b| b.contains(&y)) {
                            total += wt * wp * wr * rho * s * f(&Local { y, s, es, a: rho * sp });
                        }
                    }
                }
            }
        }
        total
    }
}

/// `int |f|^q` and `int |grad f|^q`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormParts {
    pub lp: f64,
    pub grad: f64,
}

impl NormParts {
    /// `||f||_q + ||grad f||_q`.
    pub fn norm(&self, q: f64) -> f64 {
        self.lp.max(0.0).powf(1.0 / q) + self.grad.max(0.0).powf(1.0 / q)
    }

    fn add(self, o: NormParts) -> NormParts {
        NormParts { lp: self.lp + o.lp, grad: self.grad + o.grad }
    }
}

fn powq(v: f64, g: &P3, q: f64) -> (f64, f64) {
    (v.abs().powf(q), norm(g).powf(q))
}

/// `int_{Q_o} (|u|^q, |grad u|^q)` by composite tensor Gauss rules.
pub fn cube_integral(u: &LipschitzFn, q: f64, panels: usize, points: usize) -> NormParts {
    let g = Gauss::new(points);
    let h = 1.0 / panels as f64;
    let nodes: Vec<(f64, f64)> =
        (0..panels).flat_map(|i| g.on(i as f64 * h, (i + 1) as f64 * h).collect::<Vec<_>>()).collect();
    let parts: Vec<NormParts> = nodes
        .par_iter()
        .map(|&(x, wx)| {
            let mut acc = NormParts::default();
            for &(y, wy) in &nodes {
                for &(z, wz) in &nodes {
                    let (v, gr) = u.eval_grad(&[x, y, z]);
                    let (a, b) = powq(v, &gr, q);
                    let w = wx * wy * wz;
                    acc.lp += w * a;
                    acc.grad += w * b;
                }
            }
            acc
        })
        .collect();
    parts.into_iter().fold(NormParts::default(), NormParts::add)
}

fn pick_rule<'a>(fine: &'a CylinderQuadrature, coarse: &'a CylinderQuadrature, c: &Cylinder) -> &'a CylinderQuadrature {
    if c.radius < 1e-4 {
        coarse
    } else {
        fine
    }
}

impl Extension {
    /// Per-cylinder sums of `(|E u|^q, |grad E u|^q) - (|u o R_1|^q, ..)`,
    /// the correction of the reflected slab integral due to the cylinders.
    pub fn cylinder_correction(&self, u: &LipschitzFn, q: f64, clip: Option<&Ball3>) -> NormParts {
        let fine = CylinderQuadrature::default();
        let coarse = CylinderQuadrature::coarse();
        let kinks = u.kinks();
        let parts: Vec<NormParts> = self
            .set
            .cylinders
            .par_iter()
            .map(|c| {
                let rule = pick_rule(&fine, &coarse, c);
                let mut out = NormParts::default();
                out.lp = rule.integrate_local(c, Parts::ALL, clip, &kinks, &mut |p| {
                    let (v, _) = in_cylinder_local(u, c, p);
                    let (w, _) = reflected_r1(u, &p.y);
                    v.abs().powf(q) - w.abs().powf(q)
                });
                out.grad = rule.integrate_local(c, Parts::ALL, clip, &kinks, &mut |p| {
                    let (_, g) = in_cylinder_local(u, c, p);
                    let (_, h) = reflected_r1(u, &p.y);
                    norm(&g).powf(q) - norm(&h).powf(q)
                });
                out
            })
            .collect();
        parts.into_iter().fold(NormParts::default(), NormParts::add)
    }

    /// `int_{C_o} (|E^m u|^q, |grad E^m u|^q)`.
    pub fn integrals_on_co(&self, u: &LipschitzFn, q: f64, cube: &NormParts) -> NormParts {
        // the reflected slab carries the same integrals as the cube
        let slab = *cube;
        cube.add(slab).add(self.cylinder_correction(u, q, None))
    }

    /// `int (|A - B|^q, |grad (A - B)|^q)` where `A = E u` on the cylinders
    /// of `self` and `B = u o R_1` (the previous truncation there).
    pub fn increment(&self, u: &LipschitzFn, q: f64) -> NormParts {
        let fine = CylinderQuadrature::default();
        let coarse = CylinderQuadrature::coarse();
        let kinks = u.kinks();
        let parts: Vec<NormParts> = self
            .set
            .cylinders
            .par_iter()
            .map(|c| {
                let rule = pick_rule(&fine, &coarse, c);
                let mut out = NormParts::default();
                out.lp = rule.integrate_local(c, Parts::ALL, None, &kinks, &mut |p| {
                    (in_cylinder_local(u, c, p).0 - reflected_r1(u, &p.y).0).abs().powf(q)
                });
                out.grad = rule.integrate_local(c, Parts::ALL, None, &kinks, &mut |p| {
                    let g = in_cylinder_local(u, c, p).1;
                    let h = reflected_r1(u, &p.y).1;
                    norm(&sub(&g, &h)).powf(q)
                });
                out
            })
            .collect();
        parts.into_iter().fold(NormParts::default(), NormParts::add)
    }
}

/// `int_{thin cylinders} (|u|^p, |grad u|^p)`, optionally clipped to a ball.
pub fn thin_integrals(set: &CylinderSet, u: &LipschitzFn, p: f64, clip: Option<&Ball3>) -> NormParts {
    let fine = CylinderQuadrature::default();
    let coarse = CylinderQuadrature::coarse();
    let kinks = u.kinks();
    let parts: Vec<NormParts> = set
        .cylinders
        .par_iter()
        .map(|c| {
            let rule = pick_rule(&fine, &coarse, c);
            let mut out = NormParts::default();
            out.lp = rule.integrate(c, Parts::THIN, clip, &kinks, &mut |y| u.eval(y).abs().powf(p));
            out.grad = rule.integrate(c, Parts::THIN, clip, &kinks, &mut |y| norm(&u.eval_grad(y).1).powf(p));
            out
        })
        .collect();
    parts.into_iter().fold(NormParts::default(), NormParts::add)
}

/// Norm-ratio experiment for one function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRatioRow {
    pub function: String,
    /// Truncation level (count of nonempty generations).
    pub m: usize,
    pub extended_norm: f64,
    pub source_norm: f64,
    pub ratio: f64,
    /// `||E^m u_m - E^{m+1} u_{m+1}||_{W^{1,q}(C_o)}`
    pub cauchy: f64,
}

/// Ratios `||E^m u_m||_{W^{1,q}(C_o)} / ||u||_{W^{1,p}}` for `m = 1..=m_max`
/// and the Cauchy differences between consecutive truncations.
///
/// The source norm is taken over the thin domain truncated at `m_max + 1`
/// generations (later generations change it below double precision).
pub fn norm_ratios(
    spec: &CantorCylinderSpec,
    params: &ExtensionParams,
    suite: &[(String, LipschitzFn)],
    m_max: usize,
) -> Result<Vec<NormRatioRow>> {
    let mut s = spec.clone();
    s.m = m_max + 1;
    let full = CylinderSet::windowed(&s, &[0.0, 0.0], &[1.0, 1.0], None)?;
    if full.generations().len() < m_max + 1 {
        return Err(Error::InvalidInput(format!(
            "only {} generations available for m_max = {m_max}",
            full.generations().len()
        )));
    }
    let (p, q) = (params.p, params.q);
    let mut rows = Vec::new();
    for (name, u) in suite {
        let cube_q = cube_integral(u, q, 8, 8);
        let cube_p = cube_integral(u, p, 8, 8);
        let source = cube_p.add(thin_integrals(&full, u, p, None)).norm(p);
        let mut prev: Option<NormParts> = None;
        for m in 1..=m_max {
            let ext = Extension::new(full.truncate(m));
            let on_co = match prev {
                None => ext.integrals_on_co(u, q, &cube_q),
                Some(pr) => {
                    let g = full.generations()[m - 1];
                    let step = Extension::new(full.generation(g)).cylinder_correction(u, q, None);
                    pr.add(step)
                }
            };
            prev = Some(on_co);
            let g_next = full.generations()[m];
            let cauchy = Extension::new(full.generation(g_next)).increment(u, q).norm(q);
            let extended = on_co.norm(q);
            rows.push(NormRatioRow {
                function: name.clone(),
                m,
                extended_norm: extended,
                source_norm: source,
                ratio: extended / source,
                cauchy,
            });
        }
    }
    Ok(rows)
}

/// Certified lower bound for the set function on a ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiBound {
    pub value: f64,
    /// Best family member index.
    pub best: usize,
    /// `||grad E u||_{L^q(U)}` of the best member.
    pub ext_grad_norm: f64,
    /// `||u||_{W^{1,p}(U cap Omega)}` of the best member.
    pub source_norm: f64,
}

/// `max_u (||grad E u||_{L^q(U)} / ||u||_{W^{1,p}(U cap Omega)})^kappa` over a
/// family of functions vanishing on `Omega \ U`. `U` must lie in the slab
/// `S_o x (1, 2)` so that `U cap Omega` is a union of thin cylinder pieces.
pub fn phi_lower_bound(
    spec: &CantorCylinderSpec,
    params: &ExtensionParams,
    ball: &Ball3,
    family: &[LipschitzFn],
    max_generation: Option<usize>,
    seed: u64,
) -> Result<PhiBound> {
    use rand::{Rng, SeedableRng};
    if family.is_empty() {
        return invalid("phi_lower_bound needs a nonempty family");
    }
    let (c, r) = (ball.center, ball.radius);
    if !(c[0] - r > 0.0 && c[0] + r < 1.0 && c[1] - r > 0.0 && c[1] + r < 1.0 && c[2] - r > 1.0 && c[2] + r < 2.0) {
        return invalid("the ball must lie inside S_o x (1, 2)");
    }
    // support check on samples of the cube part and of far slab points
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for (i, u) in family.iter().enumerate() {
        for _ in 0..4000 {
            let y = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            if u.eval(&y) != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "family member {i} does not vanish outside the ball (value {} at {y:?})",
                    u.eval(&y)
                )));
            }
        }
    }
    let lo = [c[0] - r, c[1] - r];
    let hi = [c[0] + r, c[1] + r];
    let set = CylinderSet::windowed(spec, &lo, &hi, max_generation)?;
    let ext = Extension::new(set.clone());
    let (p, q) = (params.p, params.q);
    let mut best = (f64::NEG_INFINITY, 0, 0.0, 0.0);
    for (i, u) in family.iter().enumerate() {
        // E u vanishes on U minus the cylinders when u o R_1 vanishes there,
        // which holds because R_1(U) lies below y_n = 1 and u is supported in U.
        let num = ext.cylinder_correction(u, q, Some(ball)).grad.max(0.0).powf(1.0 / q);
        let den = thin_integrals(&set, u, p, Some(ball)).norm(p);
        if !(den > 0.0) {
            continue;
        }
        let v = (num / den).powf(params.kappa);
        if v > best.0 {
            best = (v, i, num, den);
        }
    }
    if !best.0.is_finite() {
        return invalid("no family member has positive norm on the ball");
    }
    Ok(PhiBound { value: best.0, best: best.1, ext_grad_norm: best.2, source_norm: best.3 })
}

/// `|U cap Omega|` for a ball inside the slab: volume of the thin cylinder pieces.
pub fn thin_volume_in_ball(set: &CylinderSet, ball: &Ball3) -> f64 {
    thin_integrals(set, &LipschitzFn::Const { c: 1.0 }, 1.0, Some(ball)).lp
}
