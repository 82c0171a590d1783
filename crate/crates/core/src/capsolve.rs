//! Variational p-capacity: closed forms, discrete energy minimization and
//! upper bounds from explicit admissible functions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::admissible::TestFunction;
use crate::error::{invalid, Error, Result};
use crate::geometry::{is_axisymmetric, Condenser};
use crate::grid::{self, classify, rasterize, unit_sphere_area, CellMask, Label, Lattice, Radial, TensorGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateKind {
    ClosedForm,
    Solver,
    TestFunctionUpperBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityEstimate {
    pub value: f64,
    pub kind: EstimateKind,
    pub iterations: usize,
    pub residual: f64,
    pub resolution: String,
    /// Exponent actually used (differs from the requested one for `p = 1`).
    pub p_used: f64,
    pub approximate: bool,
    pub converged: bool,
}

impl CapacityEstimate {
    /// Turns a non-converged estimate into an error.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence { value: self.value, iterations: self.iterations, residual: self.residual })
        }
    }
}

/// Window placement for density-type condensers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowConvention {
    /// `(B(x,r/4), A(x;r/2,3r/4); B(x,r))`
    #[default]
    Density,
    /// `(B(x,t), A(x;2t,3t); B(x,4t))`
    Wiener,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Relative residual for the linear solves.
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Multipliers of the final regularization, applied in order.
    pub epsilon_schedule: Vec<f64>,
    /// Final regularization; `None` picks `1e-6 / h`.
    pub epsilon: Option<f64>,
    /// Outer stop: relative energy decrease.
    pub energy_tol: f64,
    /// `p = 1` is solved at `1 + p1_delta`.
    pub p1_delta: f64,
    pub convention: WindowConvention,
    /// Shorten differences on edges cut by a plate boundary.
    pub cut_cells: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_outer: 400,
            max_inner: 20_000,
            epsilon_schedule: vec![1e4, 1e2, 1.0],
            epsilon: None,
            energy_tol: 1e-8,
            p1_delta: 0.01,
            convention: WindowConvention::Density,
            cut_cells: true,
        }
    }
}

/// `Cap_p(B(x,r), A(x;R,2R); B(x,2R))` in `R^n`.
pub fn oracle_concentric_balls(n: usize, p: f64, r: f64, big_r: f64) -> Result<f64> {
    if n < 2 {
        return invalid("dimension must be >= 2");
    }
    if !(r > 0.0 && r < big_r) {
        return invalid(format!("need 0 < r < R, got r = {r}, R = {big_r}"));
    }
    if !(p > 1.0) {
        return invalid(format!("closed form needs p > 1, got {p}"));
    }
    let omega = unit_sphere_area(n - 1);
    let nf = n as f64;
    if p == nf {
        return Ok(omega * (big_r / r).ln().powf(1.0 - nf));
    }
    let e = (p - nf) / (p - 1.0);
    let c = ((nf - p).abs() / (p - 1.0)).powf(p - 1.0);
    Ok(omega * c * (big_r.powf(e) - r.powf(e)).abs().powf(1.0 - p))
}

const FIX0: u32 = u32::MAX - 1;
const FIX1: u32 = u32::MAX;

#[inline]
fn val(x: &[f64], r: u32) -> f64 {
    match r {
        FIX0 => 0.0,
        FIX1 => 1.0,
        i => x[i as usize],
    }
}

/// Compact discrete problem over free nodes and the cells that touch them.
struct Assembly {
    nd: usize,
    k: usize,
    n_free: usize,
    node_of_free: Vec<usize>,
    corner: Vec<u32>,
    weight: Vec<f64>,
    dx: Vec<f64>,
    edge_of: Vec<u32>,
    edges: Vec<(u32, u32)>,
    /// Difference scale per edge: `1/theta` on edges cut by a plate boundary.
    scale: Vec<f64>,
}

/// Fraction `theta` of a free-to-plate edge lying outside the plate,
/// given `(free node, plate node)`.
type CutFn<'a> = &'a (dyn Fn(usize, usize) -> f64 + Sync);

/// Smallest cut fraction used; shorter cuts are clamped.
const THETA_MIN: f64 = 0.05;

impl Assembly {
    fn new(grid: &TensorGrid, mask: &CellMask, cut: Option<CutFn>) -> Result<Self> {
        let nd = grid.dim();
        let k = 1usize << nd;
        let strides = grid.strides();
        let mut free_of_node = vec![u32::MAX; mask.labels.len()];
        let mut node_of_free = Vec::new();
        for (i, l) in mask.labels.iter().enumerate() {
            if *l == Label::Free {
                free_of_node[i] = node_of_free.len() as u32;
                node_of_free.push(i);
            }
        }
        if node_of_free.len() >= FIX0 as usize {
            return invalid("too many free nodes");
        }
        let (mut corner, mut weight, mut dx, mut edge_of) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut edges = Vec::new();
        let mut scale = Vec::new();
        let mut edge_id: HashMap<usize, u32> = HashMap::new();
        let mut nodes = vec![0usize; k];
        for cell in 0..grid.cell_count() {
            let (base, ij) = grid.cell_base(cell);
            let mut any_free = false;
            let mut exterior = false;
            for c in 0..k {
                nodes[c] = base + (0..nd).filter(|d| c >> d & 1 == 1).map(|d| strides[d]).sum::<usize>();
                match mask.labels[nodes[c]] {
                    Label::Free => any_free = true,
                    Label::Exterior => exterior = true,
                    _ => {}
                }
            }
            if exterior || !any_free {
                continue;
            }
            for &nd_i in nodes.iter() {
                corner.push(match mask.labels[nd_i] {
                    Label::Free => free_of_node[nd_i],
                    Label::PlateE => FIX1,
                    _ => FIX0,
                });
            }
            weight.extend(grid.corner_weights(&ij));
            dx.extend((0..nd).map(|d| grid.axes[d][ij[d] + 1] - grid.axes[d][ij[d]]));
            for c in 0..k {
                for d in 0..nd {
                    let lo = nodes[c & !(1 << d)];
                    let hi = nodes[c | 1 << d];
                    let key = lo * nd + d;
                    let id = *edge_id.entry(key).or_insert_with(|| {
                        let r = |n: usize| match mask.labels[n] {
                            Label::Free => free_of_node[n],
                            Label::PlateE => FIX1,
                            _ => FIX0,
                        };
                        let (rl, rh) = (r(lo), r(hi));
                        let theta = match (cut, rl < FIX0, rh < FIX0) {
                            (Some(f), true, false) => f(lo, hi),
                            (Some(f), false, true) => f(hi, lo),
                            _ => 1.0,
                        };
                        edges.push((rl, rh));
                        scale.push(1.0 / theta.clamp(THETA_MIN, 1.0));
                        (edges.len() - 1) as u32
                    });
                    edge_of.push(id);
                }
            }
        }
        Ok(Assembly { nd, k, n_free: node_of_free.len(), node_of_free, corner, weight, dx, edge_of, edges, scale })
    }

    fn cells(&self) -> usize {
        self.weight.len() / self.k
    }

    /// Corner gradients `g[(cell*k + c)*nd + d]`.
    fn corner_grads(&self, x: &[f64], out: &mut Vec<f64>) {
        let (k, nd) = (self.k, self.nd);
        out.resize(self.weight.len() * nd, 0.0);
        for cell in 0..self.cells() {
            let cr = &self.corner[cell * k..(cell + 1) * k];
            let dx = &self.dx[cell * nd..(cell + 1) * nd];
            for c in 0..k {
                for d in 0..nd {
                    let sc = self.scale[self.edge_of[(cell * k + c) * nd + d] as usize];
                    out[(cell * k + c) * nd + d] = sc * (val(x, cr[c | 1 << d]) - val(x, cr[c & !(1 << d)])) / dx[d];
                }
            }
        }
    }

    fn energy(&self, x: &[f64], p: f64, eps: f64) -> f64 {
        let (k, nd) = (self.k, self.nd);
        let e2 = eps * eps;
        grid::chunked_sum(self.cells(), |cell| {
            let cr = &self.corner[cell * k..(cell + 1) * k];
            let dx = &self.dx[cell * nd..(cell + 1) * nd];
            let mut s = 0.0;
            for c in 0..k {
                let mut g2 = 0.0;
                for d in 0..nd {
                    let sc = self.scale[self.edge_of[(cell * k + c) * nd + d] as usize];
                    let g = sc * (val(x, cr[c | 1 << d]) - val(x, cr[c & !(1 << d)])) / dx[d];
                    g2 += g * g;
                }
                s += self.weight[cell * k + c] * phi(g2 + e2, p);
            }
            s
        })
    }

    /// Edge weights of the quadratic model `sum a_c |g_c|^2`.
    fn edge_weights(&self, a: &[f64]) -> Vec<f64> {
        let (k, nd) = (self.k, self.nd);
        let mut ew = vec![0.0; self.edges.len()];
        for cell in 0..self.cells() {
            let dx = &self.dx[cell * nd..(cell + 1) * nd];
            for c in 0..k {
                let ac = a[cell * k + c];
                for d in 0..nd {
                    let e = self.edge_of[(cell * k + c) * nd + d] as usize;
                    ew[e] += ac * self.scale[e] * self.scale[e] / (dx[d] * dx[d]);
                }
            }
        }
        ew
    }
}

#[inline]
fn phi(s: f64, p: f64) -> f64 {
    if p == 2.0 {
        s
    } else {
        s.powf(0.5 * p)
    }
}

/// Weighted graph Laplacian restricted to free nodes.
struct Laplacian {
    diag: Vec<f64>,
    off: Vec<(u32, u32, f64)>,
    rhs: Vec<f64>,
}

impl Laplacian {
    fn build(asm: &Assembly, ew: &[f64]) -> Self {
        let n = asm.n_free;
        let mut diag = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        let mut off = Vec::with_capacity(ew.len());
        for (&(i, j), &w) in asm.edges.iter().zip(ew) {
            if w == 0.0 {
                continue;
            }
            let fi = i < FIX0;
            let fj = j < FIX0;
            if fi {
                diag[i as usize] += w;
            }
            if fj {
                diag[j as usize] += w;
            }
            match (fi, fj) {
                (true, true) => off.push((i, j, w)),
                (true, false) => rhs[i as usize] += w * val(&[], j),
                (false, true) => rhs[j as usize] += w * val(&[], i),
                _ => {}
            }
        }
        Laplacian { diag, off, rhs }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, (yi, (d, xi))) in y.iter_mut().zip(self.diag.iter().zip(x)).enumerate() {
            let _ = i;
            *yi = if *d > 0.0 { d * xi } else { *xi };
        }
        for &(i, j, w) in &self.off {
            y[i as usize] -= w * x[j as usize];
            y[j as usize] -= w * x[i as usize];
        }
    }

    /// Jacobi-preconditioned conjugate gradients, warm-started from `x`.
    fn solve(&self, x: &mut [f64], tol: f64, max_iter: usize) -> (usize, f64) {
        let n = x.len();
        let rhs: Vec<f64> = self.rhs.iter().zip(self.diag.iter().zip(x.iter()))
            .map(|(b, (d, xi))| if *d > 0.0 { *b } else { *xi })
            .collect();
        let bnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let mut ax = vec![0.0; n];
        self.apply(x, &mut ax);
        let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let minv: Vec<f64> = self.diag.iter().map(|d| if *d > 0.0 { 1.0 / d } else { 1.0 }).collect();
        let mut z: Vec<f64> = r.iter().zip(&minv).map(|(a, b)| a * b).collect();
        let mut pdir = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut ap = vec![0.0; n];
        let mut rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
        let mut it = 0;
        while rel > tol && it < max_iter {
            self.apply(&pdir, &mut ap);
            let pap: f64 = pdir.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if !(pap > 0.0) {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * pdir[i];
                r[i] -= alpha * ap[i];
            }
            for i in 0..n {
                z[i] = r[i] * minv[i];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                pdir[i] = z[i] + beta * pdir[i];
            }
            rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
            it += 1;
        }
        (it, rel)
    }
}

/// Result of a grid minimization.
#[derive(Clone, Debug)]
pub struct GridSolution {
    /// Values on every grid node (plates pinned, exterior zero).
    pub values: Vec<f64>,
    pub energy: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

fn default_eps(grid: &TensorGrid) -> f64 {
    let h = grid
        .axes
        .iter()
        .map(|a| {
            let mut d: Vec<f64> = a.windows(2).map(|w| w[1] - w[0]).collect();
            d.sort_by(|x, y| x.partial_cmp(y).unwrap());
            d[d.len() / 2]
        })
        .fold(f64::INFINITY, f64::min);
    1e-6 / h
}

/// Minimizes the discrete p-energy with plate nodes pinned (1 on `E`, 0 on `F`).
pub fn minimize(grid: &TensorGrid, mask: &CellMask, p: f64, opts: &SolverOptions) -> Result<GridSolution> {
    minimize_cut(grid, mask, p, opts, None)
}

fn minimize_cut(grid: &TensorGrid, mask: &CellMask, p: f64, opts: &SolverOptions, cut: Option<CutFn>) -> Result<GridSolution> {
    if !(p > 1.0) {
        return invalid(format!("grid minimization needs p > 1, got {p}"));
    }
    let asm = Assembly::new(grid, mask, cut)?;
    let mut x = vec![0.0; asm.n_free];
    let (mut iterations, mut residual, mut converged) = (0, 0.0f64, true);

    // harmonic solve, also the warm start for p != 2
    let ones = asm.weight.clone();
    let lap = Laplacian::build(&asm, &asm.edge_weights(&ones));
    let (it, rel) = lap.solve(&mut x, opts.tol, opts.max_inner);
    iterations += it;
    residual = residual.max(rel);
    if rel > opts.tol.max(1e-8) {
        converged = false;
    }

    if p != 2.0 {
        let (it, res, ok) = irls(&asm, &mut x, p, grid, opts);
        iterations += it;
        residual = res;
        converged &= ok;
    }

    let energy = asm.energy(&x, p, 0.0);
    let mut values = vec![0.0; mask.labels.len()];
    for (i, l) in mask.labels.iter().enumerate() {
        if *l == Label::PlateE {
            values[i] = 1.0;
        }
    }
    for (f, &node) in asm.node_of_free.iter().enumerate() {
        values[node] = x[f];
    }
    Ok(GridSolution { values, energy, iterations, residual, converged })
}

/// Reweighted quadratic iterations from `x`; returns (inner iterations, last
/// relative energy change, converged).
fn irls(asm: &Assembly, x: &mut [f64], p: f64, grid: &TensorGrid, opts: &SolverOptions) -> (usize, f64, bool) {
    let (mut iterations, mut residual, mut converged) = (0, 0.0, true);
    let eps_final = opts.epsilon.unwrap_or_else(|| default_eps(grid));
    let mut g = Vec::new();
    let mut gd = Vec::new();
    let mut a = vec![0.0; asm.weight.len()];
    for &mult in &opts.epsilon_schedule {
        let eps = eps_final * mult;
        let e2 = eps * eps;
        let mut j_old = asm.energy(x, p, eps);
        let mut stage_ok = false;
        for _ in 0..opts.max_outer {
            asm.corner_grads(x, &mut g);
            for (i, ai) in a.iter_mut().enumerate() {
                let s: f64 = g[i * asm.nd..(i + 1) * asm.nd].iter().map(|v| v * v).sum();
                *ai = asm.weight[i] * 0.5 * p * (s + e2).powf(0.5 * p - 1.0);
            }
            let lap = Laplacian::build(asm, &asm.edge_weights(&a));
            let mut y = x.to_vec();
            let inner_tol = (opts.tol * 1e2).max(1e-10);
            let (it, _) = lap.solve(&mut y, inner_tol, opts.max_inner);
            iterations += it;
            let dir: Vec<f64> = y.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
            asm.corner_grads_dir(&dir, &mut gd);
            let t = line_search(asm, &g, &gd, p, e2, p.max(2.0) * 2.0);
            for (xi, di) in x.iter_mut().zip(&dir) {
                *xi += t * di;
            }
            let j_new = asm.energy(x, p, eps);
            let dec = (j_old - j_new) / j_new.abs().max(1e-300);
            residual = dec.abs();
            j_old = j_new;
            if dec.abs() < opts.energy_tol {
                stage_ok = true;
                break;
            }
        }
        if !stage_ok {
            converged = false;
        }
    }
    (iterations, residual, converged)
}

impl Assembly {
    /// Corner gradients of a direction (plates held fixed, so fixed refs contribute 0).
    fn corner_grads_dir(&self, d: &[f64], out: &mut Vec<f64>) {
        let (k, nd) = (self.k, self.nd);
        out.resize(self.weight.len() * nd, 0.0);
        let v = |r: u32| if r < FIX0 { d[r as usize] } else { 0.0 };
        for cell in 0..self.cells() {
            let cr = &self.corner[cell * k..(cell + 1) * k];
            let dx = &self.dx[cell * nd..(cell + 1) * nd];
            for c in 0..k {
                for dd in 0..nd {
                    let sc = self.scale[self.edge_of[(cell * k + c) * nd + dd] as usize];
                    out[(cell * k + c) * nd + dd] = sc * (v(cr[c | 1 << dd]) - v(cr[c & !(1 << dd)])) / dx[dd];
                }
            }
        }
    }
}

/// Minimizes `t -> J(x + t d)` on `[0, t_max]` (convex), using the cached
/// corner gradients of `x` and `d`.
fn line_search(asm: &Assembly, g: &[f64], gd: &[f64], p: f64, e2: f64, t_max: f64) -> f64 {
    let nd = asm.nd;
    let m = asm.weight.len();
    let mut abc = Vec::with_capacity(m);
    for i in 0..m {
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for d in 0..nd {
            let gi = g[i * nd + d];
            let di = gd[i * nd + d];
            a += gi * gi;
            b += 2.0 * gi * di;
            c += di * di;
        }
        abc.push((a + e2, b, c));
    }
    let deriv = |t: f64| -> f64 {
        grid::chunked_sum(m, |i| {
            let (a, b, c) = abc[i];
            let s = a + t * (b + t * c);
            asm.weight[i] * 0.5 * p * s.powf(0.5 * p - 1.0) * (b + 2.0 * c * t)
        })
    };
    // bracket the root of the derivative, then bisect/secant
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut dhi = deriv(hi);
    if dhi < 0.0 {
        while dhi < 0.0 && hi < t_max {
            lo = hi;
            hi = (hi * 2.0).min(t_max);
            dhi = deriv(hi);
        }
        if dhi < 0.0 {
            return hi;
        }
    }
    let mut dlo = deriv(lo);
    if dlo >= 0.0 {
        return 0.0;
    }
    for _ in 0..40 {
        let t = {
            let s = lo - dlo * (hi - lo) / (dhi - dlo);
            if s > lo && s < hi && (hi - lo) > 1e-3 {
                0.5 * (s + 0.5 * (lo + hi))
            } else {
                0.5 * (lo + hi)
            }
        };
        let dt = deriv(t);
        if dt < 0.0 {
            lo = t;
            dlo = dt;
        } else {
            hi = t;
            dhi = dt;
        }
        if hi - lo < 1e-6 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn solve_with_continuation(
    grid: &TensorGrid,
    mask: &CellMask,
    p: f64,
    opts: &SolverOptions,
    cut: Option<CutFn>,
) -> Result<(GridSolution, f64, bool)> {
    if p < 1.0 {
        return invalid(format!("p must be >= 1, got {p}"));
    }
    if p == 1.0 {
        let pe = 1.0 + opts.p1_delta;
        let sol = minimize_cut(grid, mask, pe, opts, cut)?;
        return Ok((sol, pe, true));
    }
    Ok((minimize_cut(grid, mask, p, opts, cut)?, p, false))
}

/// Locates the plate boundary on the edge from a free node to a plate node by
/// bisection on plate membership; returns the free fraction of the edge.
fn plate_cut<'a>(c: &'a Condenser, grid: &'a TensorGrid, mask: &'a CellMask, anchor: &'a [f64]) -> impl Fn(usize, usize) -> f64 + Sync + 'a {
    let n = c.ambient.dim();
    move |free: usize, fixed: usize| {
        let plate = if mask.labels[fixed] == Label::PlateE { &c.plate_e } else { &c.plate_f };
        let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
        grid.embed(free, anchor, &mut a);
        grid.embed(fixed, anchor, &mut b);
        let mut z = vec![0.0; n];
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..30 {
            let t = 0.5 * (lo + hi);
            for d in 0..n {
                z[d] = a[d] + t * (b[d] - a[d]);
            }
            if plate.contains(&z) {
                hi = t;
            } else {
                lo = t;
            }
        }
        hi
    }
}

/// Solver capacity on a uniform lattice.
pub fn solve_capacity(c: &Condenser, lattice: &Lattice, opts: &SolverOptions) -> Result<CapacityEstimate> {
    let mask = rasterize(c, lattice)?;
    let grid = lattice.to_tensor();
    let zero = vec![0.0; grid.dim()];
    let cut = plate_cut(c, &grid, &mask, &zero);
    let (sol, p_used, approximate) =
        solve_with_continuation(&grid, &mask, c.p, opts, opts.cut_cells.then_some(&cut as CutFn))?;
    Ok(CapacityEstimate {
        value: sol.energy,
        kind: EstimateKind::Solver,
        iterations: sol.iterations,
        residual: sol.residual,
        resolution: format!("lattice {:?} h={:.6e}", lattice.dims, lattice.spacing),
        p_used,
        approximate,
        converged: sol.converged,
    })
}

/// Graded node coordinates on `[lo, hi]`: spacing `h_min` at the foci,
/// growing geometrically by `growth` up to `h_max`. Foci are grid nodes.
pub fn graded_axis(lo: f64, hi: f64, foci: &[f64], h_min: f64, h_max: f64, growth: f64) -> Vec<f64> {
    let spacing = |x: f64| {
        let d = foci.iter().map(|f| (x - f).abs()).fold(f64::INFINITY, f64::min);
        let d = if d.is_finite() { d } else { f64::INFINITY };
        (h_min + (growth - 1.0) * d).min(h_max)
    };
    let mut pts = vec![lo];
    let mut x = lo;
    while x < hi {
        let s = spacing(x).min(spacing(x + spacing(x)));
        x += s;
        pts.push(x.min(hi));
    }
    for &f in foci {
        if f > lo && f < hi {
            pts.push(f);
        }
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<f64> = Vec::with_capacity(pts.len());
    for v in pts {
        if let Some(&last) = out.last() {
            if v - last < 0.3 * spacing(v) {
                // keep foci and endpoints, drop the marching node next to them
                let keep_new = foci.contains(&v) || v == hi;
                if keep_new && last != lo && !foci.contains(&last) {
                    out.pop();
                } else {
                    continue;
                }
            }
        }
        out.push(v);
    }
    out
}

/// Meridian grid for an axisymmetric condenser around `axis_point`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeridianSpec {
    /// Half-extent of the grid (usually the ambient radius).
    pub extent: f64,
    /// Axial spacing away from the foci.
    pub h_axial: f64,
    /// Finest axial spacing near `axial_foci`.
    pub h_axial_min: f64,
    pub axial_foci: Vec<f64>,
    /// Finest radial spacing at the axis.
    pub h_radial_min: f64,
    pub h_radial_max: f64,
    pub growth: f64,
}

impl MeridianSpec {
    pub fn grid(&self, n: usize) -> TensorGrid {
        let t = graded_axis(-self.extent, self.extent, &self.axial_foci, self.h_axial_min, self.h_axial, self.growth);
        let rho = graded_axis(0.0, self.extent, &[0.0], self.h_radial_min, self.h_radial_max, self.growth);
        TensorGrid { axes: vec![t, rho], radial: Some(Radial { n }) }
    }
}

/// Solver capacity of a condenser that is rotationally symmetric about the
/// line through `axis_point` parallel to the first axis, computed on a graded
/// meridian grid.
pub fn solve_capacity_axisym(
    c: &Condenser,
    axis_point: &[f64],
    spec: &MeridianSpec,
    opts: &SolverOptions,
) -> Result<CapacityEstimate> {
    let n = c.ambient.dim();
    if n < 2 || axis_point.len() != n {
        return invalid("axis point dimension does not match the condenser");
    }
    for (name, d) in [("E", &c.plate_e), ("F", &c.plate_f), ("ambient", &c.ambient)] {
        if !is_axisymmetric(d, axis_point, spec.extent, 4000, 11) {
            return invalid(format!("{name} is not rotationally symmetric about the axis"));
        }
    }
    solve_capacity_on_grid(c, &spec.grid(n), axis_point, opts)
}

/// Solver capacity on an arbitrary tensor grid; a meridian grid (with
/// `radial`) is placed through `anchor` along the first axis. Symmetry of the
/// condenser is the caller's responsibility.
pub fn solve_capacity_on_grid(
    c: &Condenser,
    grid: &TensorGrid,
    anchor: &[f64],
    opts: &SolverOptions,
) -> Result<CapacityEstimate> {
    let mask = classify(c, grid, anchor)?;
    let cut = plate_cut(c, grid, &mask, anchor);
    let (sol, p_used, approximate) =
        solve_with_continuation(grid, &mask, c.p, opts, opts.cut_cells.then_some(&cut as CutFn))?;
    let resolution = match grid.radial {
        Some(_) => format!("meridian {}x{}", grid.axes[0].len(), grid.axes[1].len()),
        None => format!("tensor {:?}", grid.dims()),
    };
    Ok(CapacityEstimate {
        value: sol.energy,
        kind: EstimateKind::Solver,
        iterations: sol.iterations,
        residual: sol.residual,
        resolution,
        p_used,
        approximate,
        converged: sol.converged,
    })
}

/// How an admissible function's energy is obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum UpperBoundMethod {
    /// Closed form or low-dimensional quadrature supplied by the family.
    Exact,
    /// Corner quadrature of the cell energy on a lattice.
    Lattice(Lattice),
}

/// Energy of an explicit admissible function: an upper bound for the capacity.
pub fn upper_bound_from_admissible(
    c: &Condenser,
    u: &TestFunction,
    method: &UpperBoundMethod,
) -> Result<CapacityEstimate> {
    check_admissible(c, u, 4000, 5)?;
    let (value, resolution) = match method {
        UpperBoundMethod::Exact => (u.energy(c.p)?, "quadrature".to_string()),
        UpperBoundMethod::Lattice(l) => {
            let gf = grid::GridFunction::from_fn(l, |z| u.eval(z));
            let mut mask = grid::voxelize(&c.ambient, l);
            // integrate over the ambient set only
            for lab in mask.labels.iter_mut() {
                if *lab != Label::Exterior {
                    *lab = Label::Free;
                }
            }
            (grid::p_energy(&gf, &mask, c.p, 0.0), format!("lattice {:?}", l.dims))
        }
    };
    Ok(CapacityEstimate {
        value,
        kind: EstimateKind::TestFunctionUpperBound,
        iterations: 0,
        residual: 0.0,
        resolution,
        p_used: c.p,
        approximate: false,
        converged: true,
    })
}

/// Samples plate points and checks `u >= 1` on `E`, `u <= 0` on `F`.
pub fn check_admissible(c: &Condenser, u: &TestFunction, samples: usize, seed: u64) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for (plate, want_one) in [(&c.plate_e, true), (&c.plate_f, false)] {
        let bb = plate.bounding_box().clone();
        let bb = if bb.is_bounded() { bb } else { c.ambient.bounding_box() };
        let n = bb.dim();
        let mut z = vec![0.0; n];
        let mut hits = 0;
        for _ in 0..samples * 20 {
            if hits >= samples {
                break;
            }
            for d in 0..n {
                z[d] = rng.gen_range(bb.lo[d]..=bb.hi[d]);
            }
            if !plate.contains(&z) {
                continue;
            }
            hits += 1;
            let v = u.eval(&z);
            let ok = if want_one { v >= 1.0 } else { v <= 0.0 };
            if !ok {
                return Err(Error::NotAdmissible(format!(
                    "value {v} at {z:?} violates the {} plate condition",
                    if want_one { "E" } else { "F" }
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Domain;
    use std::f64::consts::PI;

    #[test]
    fn oracle_examples() {
        assert!((oracle_concentric_balls(3, 2.0, 0.25, 0.5).unwrap() - 2.0 * PI).abs() < 1e-12);
        let v = oracle_concentric_balls(3, 3.0, 0.25, 0.5).unwrap();
        assert!((v - 4.0 * PI / 2f64.ln().powi(2)).abs() < 1e-12);
        assert!(oracle_concentric_balls(3, 1.0, 0.25, 0.5).is_err());
        assert!(oracle_concentric_balls(3, 2.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn graded_axis_hits_foci() {
        let a = graded_axis(-1.0, 1.0, &[0.0, 0.25], 1e-3, 0.05, 1.2);
        assert!(a.contains(&0.0) && a.contains(&0.25));
        assert_eq!(a[0], -1.0);
        assert_eq!(*a.last().unwrap(), 1.0);
        assert!(a.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn empty_plate_rejected() {
        let c = Condenser {
            plate_e: Domain::ball(&[0.0; 3], 1e-3),
            plate_f: Domain::annulus(&[0.0; 3], 0.5, 1.0),
            ambient: Domain::ball(&[0.0; 3], 1.0),
            p: 2.0,
        };
        let l = Lattice::covering(&c.ambient.bounding_box(), 10).unwrap();
        assert!(matches!(solve_capacity(&c, &l, &SolverOptions::default()), Err(Error::UnderResolved(_))));
    }

    #[test]
    fn p2_small_concentric() {
        let c = Condenser::concentric_balls(&[0.0; 3], 0.25, 0.5, 2.0);
        let l = Lattice::covering(&c.ambient.bounding_box(), 33).unwrap();
        let est = solve_capacity(&c, &l, &SolverOptions::default()).unwrap();
        let exact = oracle_concentric_balls(3, 2.0, 0.25, 0.5).unwrap();
        assert!((est.value / exact - 1.0).abs() < 0.3, "{} vs {exact}", est.value);
    }

    /// Dense oracle: assemble the quadratic form of the grid energy by
    /// polarization and solve the normal equations directly.
    fn dense_oracle(grid: &TensorGrid, mask: &CellMask) -> (Vec<f64>, f64) {
        use nalgebra::{DMatrix, DVector};
        let free: Vec<usize> = (0..mask.labels.len()).filter(|&i| mask.labels[i] == Label::Free).collect();
        let mut u0 = vec![0.0; mask.labels.len()];
        for (i, l) in mask.labels.iter().enumerate() {
            if *l == Label::PlateE {
                u0[i] = 1.0;
            }
        }
        let j = |u: &[f64]| grid::tensor_energy(grid, mask, u, 2.0, 0.0);
        let j0 = j(&u0);
        let m = free.len();
        let shift = |a: &[(usize, f64)]| {
            let mut u = u0.clone();
            for &(i, v) in a {
                u[free[i]] += v;
            }
            j(&u)
        };
        let jp: Vec<f64> = (0..m).map(|i| shift(&[(i, 1.0)])).collect();
        let jm: Vec<f64> = (0..m).map(|i| shift(&[(i, -1.0)])).collect();
        let mut a = DMatrix::zeros(m, m);
        let mut b = DVector::zeros(m);
        for i in 0..m {
            a[(i, i)] = 0.5 * (jp[i] + jm[i] - 2.0 * j0);
            b[i] = 0.5 * (jp[i] - jm[i]);
            for k in 0..i {
                let v = 0.5 * (shift(&[(i, 1.0), (k, 1.0)]) - jp[i] - jp[k] + j0);
                a[(i, k)] = v;
                a[(k, i)] = v;
            }
        }
        let x = a.lu().solve(&(-0.5 * b)).unwrap();
        let mut u = u0.clone();
        for (i, &f) in free.iter().enumerate() {
            u[f] += x[i];
        }
        let e = j(&u);
        (u, e)
    }

    fn small_mask(dims: &[usize], e: &[usize], f: &[usize]) -> (TensorGrid, CellMask) {
        let l = Lattice::new(vec![0.0; dims.len()], 0.25, dims.to_vec()).unwrap();
        let mut mask = CellMask::all_free(dims);
        let strides: Vec<usize> = (0..dims.len()).map(|d| dims[..d].iter().product()).collect();
        let idx = |c: &[usize]| c.iter().zip(&strides).map(|(a, b)| a * b).sum::<usize>();
        mask.labels[idx(e)] = Label::PlateE;
        mask.labels[idx(f)] = Label::PlateF;
        (l.to_tensor(), mask)
    }

    #[test]
    fn p2_matches_dense_solve_2d_and_3d() {
        for (dims, e, f) in [
            (vec![5, 5], vec![1, 1], vec![3, 3]),
            (vec![5, 5, 5], vec![1, 1, 1], vec![3, 3, 3]),
        ] {
            let (grid, mask) = small_mask(&dims, &e, &f);
            let opts = SolverOptions { tol: 1e-14, ..Default::default() };
            let sol = minimize(&grid, &mask, 2.0, &opts).unwrap();
            let (u, energy) = dense_oracle(&grid, &mask);
            assert!((sol.energy - energy).abs() <= 1e-10 * energy, "{} vs {energy}", sol.energy);
            for (a, b) in sol.values.iter().zip(&u) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reweighted_path_agrees_at_p2() {
        let c = Condenser::concentric_balls(&[0.0; 3], 0.25, 0.5, 2.0);
        let l = Lattice::covering(&c.ambient.bounding_box(), 21).unwrap();
        let mask = rasterize(&c, &l).unwrap();
        let grid = l.to_tensor();
        let opts = SolverOptions { energy_tol: 1e-12, ..Default::default() };
        let direct = minimize(&grid, &mask, 2.0, &opts).unwrap();
        let asm = Assembly::new(&grid, &mask, None).unwrap();
        let mut x = vec![0.0; asm.n_free];
        let (_, _, ok) = irls(&asm, &mut x, 2.0, &grid, &opts);
        assert!(ok);
        let e = asm.energy(&x, 2.0, 0.0);
        assert!((e / direct.energy - 1.0).abs() < 1e-6, "{e} vs {}", direct.energy);
    }

    #[test]
    fn enlarging_e_increases_capacity() {
        let l = Lattice::covering(&Domain::ball(&[0.0; 3], 1.0).bounding_box(), 25).unwrap();
        let opts = SolverOptions::default();
        for p in [1.5, 3.0] {
            let small = solve_capacity(&Condenser::concentric_balls(&[0.0; 3], 0.2, 0.5, p), &l, &opts).unwrap();
            let big = solve_capacity(&Condenser::concentric_balls(&[0.0; 3], 0.3, 0.5, p), &l, &opts).unwrap();
            assert!(big.value >= small.value, "p={p}: {} < {}", big.value, small.value);
        }
    }

    #[test]
    fn scaling_law() {
        let opts = SolverOptions::default();
        for p in [1.5, 2.0, 4.0] {
            let mut v = Vec::new();
            for lam in [1.0, 2.0] {
                let c = Condenser::concentric_balls(&[0.0; 3], 0.25 * lam, 0.5 * lam, p);
                let l = Lattice::covering(&c.ambient.bounding_box(), 29).unwrap();
                v.push(solve_capacity(&c, &l, &opts).unwrap().value);
            }
            let want = 2f64.powf(3.0 - p);
            assert!((v[1] / v[0] / want - 1.0).abs() < 0.02, "p={p}: {}", v[1] / v[0]);
        }
    }

    #[test]
    fn restricting_f_to_omega_decreases_capacity() {
        let omega = Domain::HalfSpace { normal: vec![0.0, 0.0, 1.0], offset: 0.0 };
        let x = [0.0; 3];
        let l = Lattice::covering(&Domain::ball(&x, 1.0).bounding_box(), 33).unwrap();
        let opts = SolverOptions::default();
        let full = solve_capacity(&Condenser::density_window(&omega, &x, 1.0, 2.0, false), &l, &opts).unwrap();
        let cut = solve_capacity(&Condenser::density_window(&omega, &x, 1.0, 2.0, true), &l, &opts).unwrap();
        assert!(cut.value <= full.value);
    }

    #[test]
    fn radial_test_function_is_an_upper_bound() {
        let v = crate::admissible::radial_v(3, 1.0).unwrap();
        let c = v.designated_condenser(2.0).unwrap();
        let ub = upper_bound_from_admissible(&c, &v, &UpperBoundMethod::Exact).unwrap();
        let l = Lattice::covering(&c.ambient.bounding_box(), 41).unwrap();
        let est = solve_capacity(&c, &l, &SolverOptions::default()).unwrap();
        assert!(est.value <= ub.value * 1.1);
        assert!(ub.value >= oracle_concentric_balls(3, 2.0, 0.25, 0.5).unwrap());
    }
}
