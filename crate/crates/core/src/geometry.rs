//! Implicit domains, cusp profiles, the fat Cantor set, Whitney cubes and the
//! Cantor-cylinder construction.

use std::collections::HashMap;
use std::f64::consts::{E, SQRT_2};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::extension;

/// Cusp profile `w` on `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CuspFunction {
    /// `t^s log^alpha(e/t)`
    Power { s: f64, alpha: f64 },
    /// `t / log^beta(e/t)`
    LogLinear { beta: f64 },
    /// `t^2`
    Quadratic,
    /// Monotone piecewise linear through `(t[i], w[i])`.
    Tabulated { t: Vec<f64>, w: Vec<f64> },
}

impl CuspFunction {
    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        match self {
            CuspFunction::Power { s, alpha } => {
                let base = t.powf(*s);
                if *alpha == 0.0 {
                    base
                } else {
                    base * (E / t).ln().powf(*alpha)
                }
            }
            CuspFunction::LogLinear { beta } => t / (E / t).ln().powf(*beta),
            CuspFunction::Quadratic => t * t,
            CuspFunction::Tabulated { t: ts, w } => {
                let i = ts.partition_point(|&x| x <= t);
                if i == 0 {
                    // below first knot: interpolate towards (0, 0)
                    return if ts[0] > 0.0 { w[0] * t / ts[0] } else { w[0] };
                }
                if i >= ts.len() {
                    return *w.last().unwrap();
                }
                let (t0, t1) = (ts[i - 1], ts[i]);
                let (w0, w1) = (w[i - 1], w[i]);
                w0 + (w1 - w0) * (t - t0) / (t1 - t0)
            }
        }
    }

    /// Checks w(0)=0, strict monotonicity and `w(t) <= t` on a sample of `(0, 1]`.
    pub fn validate(&self) -> Result<()> {
        match self {
            CuspFunction::Power { s, .. } if *s <= 1.0 => {
                return invalid(format!("power cusp needs s > 1, got {s}"))
            }
            CuspFunction::LogLinear { beta } if *beta < 0.0 => {
                return invalid(format!("log-linear cusp needs beta >= 0, got {beta}"))
            }
            CuspFunction::Tabulated { t, w } => {
                if t.len() != w.len() || t.len() < 2 {
                    return invalid("tabulated cusp needs matching t/w arrays of length >= 2");
                }
                if t.windows(2).any(|p| p[1] <= p[0]) || w.windows(2).any(|p| p[1] <= p[0]) {
                    return invalid("tabulated cusp knots must be strictly increasing");
                }
                if t[0] < 0.0 || w[0] < 0.0 || *t.last().unwrap() < 1.0 {
                    return invalid("tabulated cusp must cover [0, 1] with nonnegative values");
                }
                if t[0] == 0.0 && w[0] != 0.0 {
                    return invalid("tabulated cusp must satisfy w(0) = 0");
                }
            }
            _ => {}
        }
        let mut prev = 0.0;
        for i in 1..=2000 {
            let t = (i as f64 / 2000.0).powi(3);
            let v = self.eval(t);
            if !(v > prev) {
                return invalid(format!("cusp function not strictly increasing near t = {t:.3e}"));
            }
            if v > t * (1.0 + 1e-12) {
                return invalid(format!("cusp function exceeds t at t = {t:.3e}"));
            }
            prev = v;
        }
        Ok(())
    }

    /// Sampled doubling constant `sup w(2t)/w(t)` over `t` in `(0, 1/2]`.
    pub fn doubling_constant(&self) -> f64 {
        (0..400)
            .map(|i| 0.5 * 2f64.powf(-(i as f64) * 0.05))
            .map(|t| self.eval(2.0 * t) / self.eval(t))
            .fold(0.0, f64::max)
    }

    /// Parses `t^2`, `t^1.5`, `t^1.5*log^0.5`, `t/log^1`, `t/log`.
    pub fn parse(src: &str) -> Result<Self> {
        let s: String = src.chars().filter(|c| !c.is_whitespace()).collect();
        let num = |x: &str| -> Result<f64> {
            x.parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad number '{x}' in cusp '{src}'")))
        };
        if s == "t^2" {
            return Ok(CuspFunction::Quadratic);
        }
        if let Some(rest) = s.strip_prefix("t/log") {
            let beta = match rest.strip_prefix('^') {
                Some(b) => num(b)?,
                None if rest.is_empty() => 1.0,
                None => return invalid(format!("cannot parse cusp '{src}'")),
            };
            return Ok(CuspFunction::LogLinear { beta });
        }
        if let Some(rest) = s.strip_prefix("t^") {
            let (sp, alpha) = match rest.split_once("*log^") {
                Some((a, b)) => (num(a)?, num(b)?),
                None => (num(rest)?, 0.0),
            };
            return Ok(CuspFunction::Power { s: sp, alpha });
        }
        invalid(format!("cannot parse cusp '{src}'"))
    }
}

/// Axis-aligned box, possibly unbounded.
#[derive(Clone, Debug, PartialEq)]
pub struct BBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BBox {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.iter().chain(&self.hi).all(|v| v.is_finite())
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a).max(0.0)).product()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    fn intersect(&self, o: &BBox) -> BBox {
        BBox {
            lo: self.lo.iter().zip(&o.lo).map(|(a, b)| a.max(*b)).collect(),
            hi: self.hi.iter().zip(&o.hi).map(|(a, b)| a.min(*b)).collect(),
        }
    }

    fn union(&self, o: &BBox) -> BBox {
        BBox {
            lo: self.lo.iter().zip(&o.lo).map(|(a, b)| a.min(*b)).collect(),
            hi: self.hi.iter().zip(&o.hi).map(|(a, b)| a.max(*b)).collect(),
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Implicit domain: a deterministic membership predicate with a bounding box.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    /// Outward cusp `{0 < t <= 1, |x| < w(t)}` joined with `B((2,0,..,0), sqrt 2)`.
    Cusp { w: CuspFunction, n: usize },
    /// Open ball.
    Ball { center: Vec<f64>, radius: f64 },
    /// `A(x; s, t) = B(x, t) \ B(x, s)`.
    Annulus { center: Vec<f64>, inner: f64, outer: f64 },
    /// Round cylinder around the line through `center` along coordinate `axis`,
    /// cut to `lo < z[axis] < hi`.
    Cylinder { center: Vec<f64>, axis: usize, radius: f64, lo: f64, hi: f64 },
    /// Open box.
    Cuboid { lo: Vec<f64>, hi: Vec<f64> },
    /// `{z : normal . z > offset}`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
    /// All of `R^n`.
    Whole { n: usize },
    Union { parts: Vec<Domain> },
    Intersection { parts: Vec<Domain> },
    Difference { base: Box<Domain>, minus: Box<Domain> },
    Cantor(CantorDomain),
}

impl Domain {
    pub fn ball(center: &[f64], radius: f64) -> Self {
        Domain::Ball { center: center.to_vec(), radius }
    }

    pub fn annulus(center: &[f64], inner: f64, outer: f64) -> Self {
        Domain::Annulus { center: center.to_vec(), inner, outer }
    }

    pub fn cusp(w: CuspFunction, n: usize) -> Self {
        Domain::Cusp { w, n }
    }

    pub fn intersect(self, other: Domain) -> Self {
        Domain::Intersection { parts: vec![self, other] }
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Cusp { n, .. } | Domain::Whole { n } => *n,
            Domain::Ball { center, .. } | Domain::Annulus { center, .. } | Domain::Cylinder { center, .. } => {
                center.len()
            }
            Domain::Cuboid { lo, .. } => lo.len(),
            Domain::HalfSpace { normal, .. } => normal.len(),
            Domain::Union { parts } | Domain::Intersection { parts } => {
                parts.first().map_or(0, |p| p.dim())
            }
            Domain::Difference { base, .. } => base.dim(),
            Domain::Cantor(c) => c.spec().n,
        }
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        match self {
            Domain::Cusp { w, .. } => cusp_membership(w, z),
            Domain::Ball { center, radius } => dist(z, center) < *radius,
            Domain::Annulus { center, inner, outer } => {
                let d = dist(z, center);
                d >= *inner && d < *outer
            }
            Domain::Cylinder { center, axis, radius, lo, hi } => {
                let s2: f64 = (0..z.len()).filter(|d| d != axis).map(|d| (z[d] - center[d]).powi(2)).sum();
                z[*axis] > *lo && z[*axis] < *hi && s2 < radius * radius
            }
            Domain::Cuboid { lo, hi } => {
                z.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *v > *a && *v < *b)
            }
            Domain::HalfSpace { normal, offset } => {
                normal.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() > *offset
            }
            Domain::Whole { .. } => true,
            Domain::Union { parts } => parts.iter().any(|p| p.contains(z)),
            Domain::Intersection { parts } => parts.iter().all(|p| p.contains(z)),
            Domain::Difference { base, minus } => base.contains(z) && !minus.contains(z),
            Domain::Cantor(c) => c.contains(z),
        }
    }

    pub fn bounding_box(&self) -> BBox {
        let n = self.dim();
        let unbounded = || BBox { lo: vec![f64::NEG_INFINITY; n], hi: vec![f64::INFINITY; n] };
        match self {
            Domain::Cusp { n, .. } => {
                let mut lo = vec![-SQRT_2; *n];
                let mut hi = vec![SQRT_2; *n];
                lo[0] = 0.0;
                hi[0] = 2.0 + SQRT_2;
                BBox { lo, hi }
            }
            Domain::Ball { center, radius } | Domain::Annulus { center, outer: radius, .. } => BBox {
                lo: center.iter().map(|c| c - radius).collect(),
                hi: center.iter().map(|c| c + radius).collect(),
            },
            Domain::Cylinder { center, axis, radius, lo, hi } => {
                let mut a: Vec<f64> = center.iter().map(|c| c - radius).collect();
                let mut b: Vec<f64> = center.iter().map(|c| c + radius).collect();
                a[*axis] = *lo;
                b[*axis] = *hi;
                BBox { lo: a, hi: b }
            }
            Domain::Cuboid { lo, hi } => BBox { lo: lo.clone(), hi: hi.clone() },
            Domain::HalfSpace { .. } | Domain::Whole { .. } => unbounded(),
            Domain::Union { parts } => parts
                .iter()
                .map(|p| p.bounding_box())
                .reduce(|a, b| a.union(&b))
                .unwrap_or_else(unbounded),
            Domain::Intersection { parts } => parts
                .iter()
                .map(|p| p.bounding_box())
                .reduce(|a, b| a.intersect(&b))
                .unwrap_or_else(unbounded),
            Domain::Difference { base, .. } => base.bounding_box(),
            Domain::Cantor(c) => {
                let n = c.spec().n;
                let mut hi = vec![1.0; n];
                hi[n - 1] = 2.0;
                BBox { lo: vec![0.0; n], hi }
            }
        }
    }
}

/// Membership in the outward cusp domain with profile `w`.
pub fn cusp_membership(w: &CuspFunction, z: &[f64]) -> bool {
    let t = z[0];
    let rho = z[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
    if t > 0.0 && t <= 1.0 && rho < w.eval(t) {
        return true;
    }
    (t - 2.0) * (t - 2.0) + rho * rho < 2.0
}

/// Plates `E`, `F` inside an ambient open set, with the exponent `p`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Condenser {
    pub plate_e: Domain,
    pub plate_f: Domain,
    pub ambient: Domain,
    pub p: f64,
}

impl Condenser {
    /// `(B(x, r), A(x; R, 2R); B(x, 2R))`.
    pub fn concentric_balls(x: &[f64], r: f64, big_r: f64, p: f64) -> Self {
        Condenser {
            plate_e: Domain::ball(x, r),
            plate_f: Domain::annulus(x, big_r, 2.0 * big_r),
            ambient: Domain::ball(x, 2.0 * big_r),
            p,
        }
    }

    /// `(B(x, r/4), A(x; r/2, 3r/4); B(x, r))` with `E` cut by `omega`.
    pub fn density_window(omega: &Domain, x: &[f64], r: f64, p: f64, cut_f: bool) -> Self {
        Self::window(omega, x, 0.25 * r, 0.5 * r, 0.75 * r, r, p, cut_f)
    }

    /// `(B(x, t), A(x; 2t, 3t); B(x, 4t))` with `E` cut by `omega`.
    pub fn wiener_window(omega: &Domain, x: &[f64], t: f64, p: f64, cut_f: bool) -> Self {
        Self::window(omega, x, t, 2.0 * t, 3.0 * t, 4.0 * t, p, cut_f)
    }

    #[allow(clippy::too_many_arguments)]
    fn window(omega: &Domain, x: &[f64], a: f64, b: f64, c: f64, d: f64, p: f64, cut_f: bool) -> Self {
        let plate_f = Domain::annulus(x, b, c);
        Condenser {
            plate_e: omega.clone().intersect(Domain::ball(x, a)),
            plate_f: if cut_f { omega.clone().intersect(plate_f) } else { plate_f },
            ambient: Domain::ball(x, d),
            p,
        }
    }
}

/// Level-k approximation of the Smith-Volterra-Cantor set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvcSet {
    pub level: usize,
    pub intervals: Vec<(f64, f64)>,
}

pub fn svc_build(level: usize) -> SvcSet {
    let mut intervals = vec![(0.0, 1.0)];
    for j in 1..=level {
        let gap = 4f64.powi(-(j as i32));
        intervals = intervals
            .iter()
            .flat_map(|&(a, b)| {
                let mid = 0.5 * (a + b);
                [(a, mid - 0.5 * gap), (mid + 0.5 * gap, b)]
            })
            .collect();
    }
    SvcSet { level, intervals }
}

impl SvcSet {
    pub fn measure(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    /// Longest kept interval.
    pub fn max_len(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).fold(0.0, f64::max)
    }

    pub fn contains(&self, x: f64) -> bool {
        let i = self.intervals.partition_point(|iv| iv.1 < x);
        i < self.intervals.len() && self.intervals[i].0 <= x
    }

    /// Distance from `[a, b]` to the kept intervals (a lower bound for the
    /// distance to the limit set) and to the nearest interval endpoint (an
    /// upper bound, since endpoints are never removed).
    fn interval_dist_bounds(&self, a: f64, b: f64) -> (f64, f64) {
        let ivs = &self.intervals;
        let i = ivs.partition_point(|iv| iv.1 < a);
        let mut lo = f64::INFINITY;
        let mut hi = f64::INFINITY;
        let gap = |x: f64| {
            if x < a {
                a - x
            } else if x > b {
                x - b
            } else {
                0.0
            }
        };
        for k in [i.wrapping_sub(1), i, i + 1] {
            if let Some(&(c, d)) = ivs.get(k) {
                let l = if d < a {
                    a - d
                } else if c > b {
                    c - b
                } else {
                    0.0
                };
                lo = lo.min(l);
                hi = hi.min(gap(c)).min(gap(d));
            }
        }
        (lo, hi)
    }
}

/// Dyadic cube of the Whitney decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhitneyCube {
    pub center: Vec<f64>,
    pub edge: f64,
    pub generation: usize,
}

impl WhitneyCube {
    pub fn diam(&self) -> f64 {
        self.edge * (self.center.len() as f64).sqrt()
    }

    /// Lower and upper bounds on the distance to `E^d` for the given SVC level.
    pub fn dist_bounds(&self, svc: &SvcSet) -> (f64, f64) {
        let h = 0.5 * self.edge;
        let (mut lo, mut hi) = (0.0, 0.0);
        for c in &self.center {
            let (l, u) = svc.interval_dist_bounds(c - h, c + h);
            lo += l * l;
            hi += u * u;
        }
        (lo.sqrt(), hi.sqrt())
    }
}

/// Whitney cubes of `(0,1)^dim \ E^dim` up to `max_generation`.
///
/// With `window = Some((lo, hi))` only cubes meeting the window are returned.
/// Cubes are sorted by generation, then lexicographically by center.
pub fn whitney_decompose(
    svc: Option<&SvcSet>,
    dim: usize,
    max_generation: usize,
    window: Option<(&[f64], &[f64])>,
) -> Result<Vec<WhitneyCube>> {
    if dim == 0 {
        return invalid("whitney_decompose needs dim >= 1");
    }
    if let Some(s) = svc {
        if max_generation > s.level + 3 {
            return Err(Error::ResolutionMismatch(format!(
                "SVC level {} cannot resolve generation {max_generation} (need level >= {})",
                s.level,
                max_generation - 3
            )));
        }
    }
    let mut out = Vec::new();
    // (integer corner, side exponent j): cube = 2^-j * [idx, idx+1]
    let mut stack: Vec<(Vec<u64>, usize)> = vec![(vec![0; dim], 0)];
    while let Some((idx, j)) = stack.pop() {
        let edge = 2f64.powi(-(j as i32));
        let lo: Vec<f64> = idx.iter().map(|&i| i as f64 * edge).collect();
        if let Some((wlo, whi)) = window {
            let outside = lo.iter().enumerate().any(|(d, &a)| a > whi[d] || a + edge < wlo[d]);
            if outside {
                continue;
            }
        }
        let cube = WhitneyCube {
            center: lo.iter().map(|a| a + 0.5 * edge).collect(),
            edge,
            generation: j.saturating_sub(1),
        };
        let diam = cube.diam();
        let (dlo, dhi) = match svc {
            Some(s) => cube.dist_bounds(s),
            None => (f64::INFINITY, f64::INFINITY),
        };
        if j >= 1 && diam <= dlo {
            if svc.is_some() && dhi > 4.0 * diam {
                return Err(Error::ResolutionMismatch(format!(
                    "distance bounds [{dlo:.3e}, {dhi:.3e}] too loose for cube of diameter {diam:.3e}"
                )));
            }
            out.push(cube);
            continue;
        }
        if j > max_generation {
            continue;
        }
        for corner in 0..(1u64 << dim) {
            let child: Vec<u64> = (0..dim).map(|d| 2 * idx[d] + ((corner >> d) & 1)).collect();
            stack.push((child, j + 1));
        }
    }
    out.sort_by(|a, b| {
        a.generation.cmp(&b.generation).then_with(|| {
            a.center.partial_cmp(&b.center).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    Ok(out)
}

/// Profile `h` entering the cylinder radii.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HFunction {
    Identity,
    /// `coef * t^exponent`
    Power { coef: f64, exponent: f64 },
    /// `h_lambda` bound to `t = 8^-k` with real `k = log_8(1/t)`.
    Lambda { lambda: f64 },
}

impl HFunction {
    pub fn eval(&self, t: f64, n: usize, q: f64) -> Result<f64> {
        match self {
            HFunction::Identity => Ok(t),
            HFunction::Power { coef, exponent } => Ok(coef * t.powf(*exponent)),
            HFunction::Lambda { lambda } => extension::h_lambda_continuous(t, n, q, *lambda),
        }
    }

    /// Value at `t = 8^-k` using the integer-indexed formula when available.
    pub fn eval_at_generation(&self, k: usize, n: usize, q: f64) -> Result<f64> {
        let t = 8f64.powi(-(k as i32));
        match self {
            HFunction::Lambda { lambda } => extension::h_lambda(t, k, n, q, *lambda),
            _ => self.eval(t, n, q),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiiRule {
    #[default]
    Standard,
    /// `r_k = 2^{-k-2} exp(-exp(2^k))`
    WellSeparated,
}

/// Parameters of the Cantor-cylinder construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CantorCylinderSpec {
    pub n: usize,
    pub q: f64,
    pub lambda: f64,
    pub h: HFunction,
    /// Number of nonempty Whitney generations kept.
    pub m: usize,
    pub svc_level: usize,
    #[serde(default)]
    pub radii_rule: RadiiRule,
}

impl CantorCylinderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n != 3 {
            return invalid(format!("cylinder construction implemented for n = 3, got {}", self.n));
        }
        if !(self.q >= 1.0 && self.q < (self.n - 1) as f64) {
            return invalid(format!("need 1 <= q < n-1, got q = {}", self.q));
        }
        if self.m == 0 {
            return invalid("truncation m must be >= 1");
        }
        Ok(())
    }

    pub fn radius(&self, k: usize) -> Result<f64> {
        match self.radii_rule {
            RadiiRule::Standard => extension::radii_rk(self.n, self.q, &self.h, k),
            RadiiRule::WellSeparated => {
                Ok(2f64.powi(-(k as i32) - 2) * (-(2f64.powi(k as i32)).exp()).exp())
            }
        }
    }
}

/// Vertical cylinder `B^{n-1}(center, radius) x [1, 2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub center: Vec<f64>,
    pub generation: usize,
    /// `r_k`; the thin cylinder uses `r_k / 2`.
    pub radius: f64,
    pub cube_edge: f64,
}

#[derive(Debug)]
struct CantorInner {
    spec: CantorCylinderSpec,
    tilde: bool,
    cylinders: Vec<Cylinder>,
    generations: Vec<usize>,
    lookup: HashMap<(usize, Vec<i64>), usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CantorDoc {
    spec: CantorCylinderSpec,
    tilde: bool,
}

/// `Q_o` joined with the cylinders of the first `m` nonempty generations.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "CantorDoc", into = "CantorDoc")]
pub struct CantorDomain(Arc<CantorInner>);

impl TryFrom<CantorDoc> for CantorDomain {
    type Error = Error;
    fn try_from(d: CantorDoc) -> Result<Self> {
        build_cantor_domain(&d.spec, d.tilde)
    }
}

impl From<CantorDomain> for CantorDoc {
    fn from(c: CantorDomain) -> Self {
        CantorDoc { spec: c.0.spec.clone(), tilde: c.0.tilde }
    }
}

impl CantorDomain {
    pub fn spec(&self) -> &CantorCylinderSpec {
        &self.0.spec
    }

    pub fn is_tilde(&self) -> bool {
        self.0.tilde
    }

    pub fn cylinders(&self) -> &[Cylinder] {
        &self.0.cylinders
    }

    /// Generations present, ascending.
    pub fn generations(&self) -> &[usize] {
        &self.0.generations
    }

    /// Radius of the cylinder as used by this domain (`r_k/2` for the thin variant).
    pub fn effective_radius(&self, c: &Cylinder) -> f64 {
        if self.0.tilde {
            0.5 * c.radius
        } else {
            c.radius
        }
    }

    /// Index of the cylinder whose Whitney cube contains `x'`, if any.
    pub fn cylinder_at(&self, xp: &[f64]) -> Option<usize> {
        for &k in &self.0.generations {
            let edge = 2f64.powi(-(k as i32) - 1);
            let key: Vec<i64> = xp.iter().map(|v| (v / edge).floor() as i64).collect();
            if let Some(&i) = self.0.lookup.get(&(k, key)) {
                return Some(i);
            }
        }
        None
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        let n = z.len();
        let xp = &z[..n - 1];
        let xn = z[n - 1];
        if xp.iter().all(|v| *v > 0.0 && *v < 1.0) && xn > 0.0 && xn < 1.0 {
            return true;
        }
        if !(1.0..2.0).contains(&xn) {
            return false;
        }
        match self.cylinder_at(xp) {
            Some(i) => {
                let c = &self.0.cylinders[i];
                dist(xp, &c.center) < self.effective_radius(c)
            }
            None => false,
        }
    }
}

/// Builds `Q_o` plus thin (`tilde = true`) or full cylinders over the Whitney
/// cubes of the first `spec.m` nonempty generations.
pub fn build_cantor_domain(spec: &CantorCylinderSpec, tilde: bool) -> Result<CantorDomain> {
    spec.validate()?;
    let svc = svc_build(spec.svc_level);
    let mut cubes = Vec::new();
    let mut generations: Vec<usize> = Vec::new();
    for max_gen in 0..=spec.svc_level + 3 {
        cubes = whitney_decompose(Some(&svc), spec.n - 1, max_gen, None)?;
        generations = cubes.iter().map(|c| c.generation).collect();
        generations.dedup();
        if generations.len() >= spec.m {
            break;
        }
    }
    if generations.len() < spec.m {
        return Err(Error::InvalidInput(format!(
            "truncation m = {} exceeds the {} generations available at SVC level {}",
            spec.m,
            generations.len(),
            spec.svc_level
        )));
    }
    generations.truncate(spec.m);
    let last = *generations.last().unwrap();
    let mut cylinders = Vec::new();
    let mut lookup = HashMap::new();
    let mut radii = HashMap::new();
    for c in cubes.into_iter().filter(|c| c.generation <= last) {
        let r = match radii.get(&c.generation) {
            Some(r) => *r,
            None => {
                let r = spec.radius(c.generation)?;
                radii.insert(c.generation, r);
                r
            }
        };
        if !(r < 0.5 * c.edge) {
            return invalid(format!(
                "r_{} = {r:.3e} does not fit inside its cube of edge {:.3e}",
                c.generation, c.edge
            ));
        }
        let key: Vec<i64> = c.center.iter().map(|v| (v / c.edge).floor() as i64).collect();
        lookup.insert((c.generation, key), cylinders.len());
        cylinders.push(Cylinder {
            center: c.center,
            generation: c.generation,
            radius: r,
            cube_edge: c.edge,
        });
    }
    Ok(CantorDomain(Arc::new(CantorInner {
        spec: spec.clone(),
        tilde,
        cylinders,
        generations,
        lookup,
    })))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum VolumeMethod {
    /// Midpoint counting on a uniform grid over the window's bounding box.
    Grid { per_axis: usize },
    MonteCarlo { samples: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub volume: f64,
    pub stderr: f64,
}

fn grid_count(domain: &Domain, window: &Domain, bb: &BBox, per_axis: usize) -> f64 {
    let n = bb.dim();
    let total = per_axis.pow(n as u32);
    let mut z = vec![0.0; n];
    let mut hits = 0usize;
    for lin in 0..total {
        let mut rem = lin;
        for d in 0..n {
            let i = rem % per_axis;
            rem /= per_axis;
            z[d] = bb.lo[d] + (i as f64 + 0.5) * (bb.hi[d] - bb.lo[d]) / per_axis as f64;
        }
        if window.contains(&z) && domain.contains(&z) {
            hits += 1;
        }
    }
    bb.volume() * hits as f64 / total as f64
}

/// Estimates `|domain ∩ window|`.
pub fn volume_estimate(
    domain: &Domain,
    window: &Domain,
    method: &VolumeMethod,
    seed: u64,
) -> Result<VolumeEstimate> {
    let bb = window.bounding_box();
    if !bb.is_bounded() || bb.volume() <= 0.0 {
        return invalid("volume window must be bounded with positive volume");
    }
    match method {
        VolumeMethod::Grid { per_axis } => {
            if *per_axis < 2 {
                return invalid("grid volume needs per_axis >= 2");
            }
            let v = grid_count(domain, window, &bb, *per_axis);
            let coarse = grid_count(domain, window, &bb, per_axis / 2);
            if grid_count(window, window, &bb, *per_axis) == 0.0 {
                return invalid("window has zero volume at this resolution");
            }
            Ok(VolumeEstimate { volume: v, stderr: (v - coarse).abs() })
        }
        VolumeMethod::MonteCarlo { samples } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = bb.dim();
            let mut z = vec![0.0; n];
            let (mut in_window, mut hits) = (0usize, 0usize);
            for _ in 0..*samples {
                for d in 0..n {
                    z[d] = rng.gen_range(bb.lo[d]..bb.hi[d]);
                }
                if window.contains(&z) {
                    in_window += 1;
                    if domain.contains(&z) {
                        hits += 1;
                    }
                }
            }
            if in_window == 0 {
                return invalid("window has zero volume (no samples landed in it)");
            }
            let p = hits as f64 / *samples as f64;
            let vol = bb.volume();
            Ok(VolumeEstimate {
                volume: vol * p,
                stderr: vol * (p * (1.0 - p) / *samples as f64).sqrt(),
            })
        }
    }
}

/// Checks rotational symmetry of `domain` about the line through `axis_point`
/// along the first coordinate axis on `samples` random points.
pub fn is_axisymmetric(domain: &Domain, axis_point: &[f64], scale: f64, samples: usize, seed: u64) -> bool {
    let n = domain.dim();
    if n < 2 {
        return false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; n];
    let mut y = vec![0.0; n];
    for _ in 0..samples {
        let t = rng.gen_range(-scale..scale);
        let rho = rng.gen_range(0.0..scale);
        z.copy_from_slice(axis_point);
        z[0] += t;
        z[1] += rho;
        // random direction orthogonal to the axis
        let mut norm: f64 = 0.0;
        for d in 1..n {
            y[d] = rng.gen_range(-1.0..1.0);
            norm += y[d] * y[d];
        }
        let norm = norm.sqrt().max(1e-12);
        y[0] = axis_point[0] + t;
        for d in 1..n {
            y[d] = axis_point[d] + rho * y[d] / norm;
        }
        if domain.contains(&z) != domain.contains(&y) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cylinder_membership() {
        let c = Domain::Cylinder { center: vec![0.0, 1.0, 1.0], axis: 0, radius: 0.5, lo: -1.0, hi: 2.0 };
        assert!(c.contains(&[1.5, 1.2, 0.7]));
        assert!(!c.contains(&[2.5, 1.0, 1.0]));
        assert!(!c.contains(&[0.0, 1.4, 1.4]));
        assert!(is_axisymmetric(&c, &[0.0, 1.0, 1.0], 3.0, 2000, 1));
        assert_eq!(c.bounding_box().lo, vec![-1.0, 0.5, 0.5]);
    }

    #[test]
    fn cusp_membership_examples() {
        let w = CuspFunction::Quadratic;
        assert!(cusp_membership(&w, &[0.5, 0.2, 0.0]));
        assert!(!cusp_membership(&w, &[0.0, 0.0, 0.0]));
        assert!(cusp_membership(&w, &[2.0, 0.0, 0.0]));
        assert!(!cusp_membership(&w, &[0.5, 0.3, 0.0]));
    }

    #[test]
    fn cusp_functions_validate() {
        for w in [
            CuspFunction::Quadratic,
            CuspFunction::Power { s: 1.5, alpha: 0.3 },
            CuspFunction::LogLinear { beta: 1.0 },
            CuspFunction::Tabulated { t: vec![0.0, 0.5, 1.0], w: vec![0.0, 0.1, 0.9] },
        ] {
            w.validate().unwrap();
            assert_eq!(w.eval(0.0), 0.0);
            let c = w.doubling_constant();
            assert!(c.is_finite() && c >= 1.0, "{w:?}: {c}");
        }
        assert!(CuspFunction::Power { s: 1.1, alpha: 2.0 }.validate().is_err());
    }

    #[test]
    fn cusp_parse() {
        assert_eq!(CuspFunction::parse("t^2").unwrap(), CuspFunction::Quadratic);
        assert_eq!(
            CuspFunction::parse("t^1.5*log^0.5").unwrap(),
            CuspFunction::Power { s: 1.5, alpha: 0.5 }
        );
        assert_eq!(CuspFunction::parse("t/log").unwrap(), CuspFunction::LogLinear { beta: 1.0 });
        assert!(CuspFunction::parse("sin(t)").is_err());
    }

    #[test]
    fn tabulated_is_piecewise_linear() {
        let w = CuspFunction::Tabulated { t: vec![0.0, 0.5, 1.0], w: vec![0.0, 0.1, 0.9] };
        assert!((w.eval(0.25) - 0.05).abs() < 1e-15);
        assert!((w.eval(0.75) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn svc_levels() {
        assert_eq!(svc_build(0).intervals, vec![(0.0, 1.0)]);
        assert_eq!(svc_build(1).intervals, vec![(0.0, 0.375), (0.625, 1.0)]);
        let s = svc_build(3);
        assert!(s.contains(0.375) && !s.contains(0.5) && s.contains(1.0));
    }

    #[test]
    fn whitney_empty_obstacle_accepts_immediately() {
        let cubes = whitney_decompose(None, 2, 4, None).unwrap();
        assert_eq!(cubes.len(), 4);
        assert!(cubes.iter().all(|c| c.edge == 0.5 && c.generation == 0));
    }

    #[test]
    fn whitney_level_too_coarse() {
        let s = svc_build(2);
        assert!(matches!(
            whitney_decompose(Some(&s), 2, 6, None),
            Err(Error::ResolutionMismatch(_))
        ));
    }

    #[test]
    fn whitney_window_is_subset() {
        let s = svc_build(6);
        let all = whitney_decompose(Some(&s), 2, 8, None).unwrap();
        let lo = [0.3, 0.3];
        let hi = [0.45, 0.45];
        let part = whitney_decompose(Some(&s), 2, 8, Some((&lo, &hi))).unwrap();
        assert!(!part.is_empty());
        assert!(part.iter().all(|c| all.contains(c)));
    }

    fn spec() -> CantorCylinderSpec {
        CantorCylinderSpec {
            n: 3,
            q: 1.0,
            lambda: 3.0,
            h: HFunction::Identity,
            m: 2,
            svc_level: 5,
            radii_rule: RadiiRule::Standard,
        }
    }

    #[test]
    fn cantor_domain_membership() {
        let d = build_cantor_domain(&spec(), true).unwrap();
        assert!(d.contains(&[0.5, 0.5, 0.5]));
        let c = &d.cylinders()[0];
        let r = c.radius;
        let inside = [c.center[0] + r / 4.0, c.center[1], 1.5];
        let outside = [c.center[0] + 0.6 * r, c.center[1], 1.5];
        assert!(d.contains(&inside));
        assert!(!d.contains(&outside));
        let full = build_cantor_domain(&spec(), false).unwrap();
        assert!(full.contains(&outside));
    }

    #[test]
    fn cantor_domain_json_roundtrip() {
        let d = Domain::Cantor(build_cantor_domain(&spec(), true).unwrap());
        let s = serde_json::to_string(&d).unwrap();
        let back: Domain = serde_json::from_str(&s).unwrap();
        let Domain::Cantor(c) = back else { panic!() };
        assert_eq!(c.cylinders().len(),
            match &d { Domain::Cantor(c0) => c0.cylinders().len(), _ => 0 });
    }

    #[test]
    fn cantor_rejects_q_at_n_minus_1() {
        let mut s = spec();
        s.q = 2.0;
        assert!(build_cantor_domain(&s, true).is_err());
        let mut s = spec();
        s.m = 40;
        assert!(build_cantor_domain(&s, true).is_err());
    }

    #[test]
    fn unit_cube_grid_volume_exact() {
        let cube = Domain::Cuboid { lo: vec![0.0; 3], hi: vec![1.0; 3] };
        let v = volume_estimate(&cube, &cube, &VolumeMethod::Grid { per_axis: 20 }, 0).unwrap();
        assert_eq!(v.volume, 1.0);
    }

    #[test]
    fn half_ball_monte_carlo() {
        let ball = Domain::ball(&[0.0, 0.0, 0.0], 0.5);
        let half = Domain::HalfSpace { normal: vec![1.0, 0.0, 0.0], offset: 0.0 };
        let m = VolumeMethod::MonteCarlo { samples: 200_000 };
        let v = volume_estimate(&half, &ball, &m, 7).unwrap();
        let b = volume_estimate(&Domain::Whole { n: 3 }, &ball, &m, 7).unwrap();
        let ratio = v.volume / b.volume;
        assert!((ratio - 0.5).abs() < 3.0 * 2.0 * v.stderr / b.volume, "{ratio}");
    }

    #[test]
    fn zero_volume_window_rejected() {
        let w = Domain::Cuboid { lo: vec![0.0, 0.0], hi: vec![0.0, 1.0] };
        assert!(volume_estimate(&w, &w, &VolumeMethod::Grid { per_axis: 8 }, 0).is_err());
    }

    #[test]
    fn cusp_is_axisymmetric() {
        let d = Domain::cusp(CuspFunction::Quadratic, 3);
        assert!(is_axisymmetric(&d, &[0.0, 0.0, 0.0], 1.0, 2000, 1));
        let off = Domain::ball(&[0.0, 0.3, 0.0], 0.5);
        assert!(!is_axisymmetric(&off, &[0.0, 0.0, 0.0], 1.0, 2000, 1));
    }
}
