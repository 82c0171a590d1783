//! Lattices, node classification and discrete calculus on cells.
//!
//! Every cell carries `2^n` corner-based forward-difference gradients, one per
//! corner, each weighted by the measure of the sub-cell at that corner. The
//! lower-corner gradient is the one reported by [`discrete_gradient`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{BBox, Condenser, Domain};

/// Default cap on lattice node counts.
pub const DEFAULT_NODE_CAP: usize = 64_000_000;

/// Fixed chunk length for reductions, independent of the thread count.
pub const REDUCE_CHUNK: usize = 4096;

/// Area of the unit sphere `S^k` in `R^{k+1}`.
pub fn unit_sphere_area(k: usize) -> f64 {
    use std::f64::consts::PI;
    match k {
        0 => 2.0,
        1 => 2.0 * PI,
        _ => 2.0 * PI / (k as f64 - 1.0) * unit_sphere_area(k - 2),
    }
}

/// Sums `f(i)` for `i < len` in fixed chunks, combining partials in order.
pub fn chunked_sum<F>(len: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..len.div_ceil(REDUCE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(len);
            (lo..hi).map(&f).sum::<f64>()
        })
        .collect();
    partials.iter().sum()
}

/// Uniform lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub origin: Vec<f64>,
    pub spacing: f64,
    pub dims: Vec<usize>,
}

impl Lattice {
    pub fn new(origin: Vec<f64>, spacing: f64, dims: Vec<usize>) -> Result<Self> {
        Self::with_cap(origin, spacing, dims, DEFAULT_NODE_CAP)
    }

    pub fn with_cap(origin: Vec<f64>, spacing: f64, dims: Vec<usize>, cap: usize) -> Result<Self> {
        if !(spacing > 0.0) {
            return invalid(format!("lattice spacing must be positive, got {spacing}"));
        }
        if origin.len() != dims.len() || dims.iter().any(|&d| d < 2) {
            return invalid("lattice needs matching origin/dims with at least 2 nodes per axis");
        }
        let total = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        match total {
            Some(t) if t <= cap => Ok(Lattice { origin, spacing, dims }),
            _ => invalid(format!("lattice {dims:?} exceeds node cap {cap}")),
        }
    }

    /// `per_axis` nodes along the longest side of `bbox`, same spacing elsewhere.
    pub fn covering(bbox: &BBox, per_axis: usize) -> Result<Self> {
        if !bbox.is_bounded() || per_axis < 2 {
            return invalid("covering lattice needs a bounded box and per_axis >= 2");
        }
        let ext: Vec<f64> = bbox.lo.iter().zip(&bbox.hi).map(|(a, b)| b - a).collect();
        let longest = ext.iter().cloned().fold(0.0, f64::max);
        let h = longest / (per_axis - 1) as f64;
        let dims = ext.iter().map(|e| ((e / h - 1e-9).ceil() as usize + 1).max(2)).collect();
        Lattice::new(bbox.lo.clone(), h, dims)
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn node_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn coord(&self, idx: usize, out: &mut [f64]) {
        let mut rem = idx;
        for d in 0..self.dims.len() {
            out[d] = self.origin[d] + (rem % self.dims[d]) as f64 * self.spacing;
            rem /= self.dims[d];
        }
    }

    pub fn to_tensor(&self) -> TensorGrid {
        TensorGrid {
            axes: (0..self.dim())
                .map(|d| (0..self.dims[d]).map(|i| self.origin[d] + i as f64 * self.spacing).collect())
                .collect(),
            radial: None,
        }
    }
}

/// Rotational weighting for meridian grids: axis 1 carries `rho^{n-2}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Radial {
    pub n: usize,
}

/// Tensor-product grid with per-axis node coordinates.
///
/// With `radial = Some(..)` the grid is a meridian half-plane `(t, rho)` of an
/// axisymmetric problem in `R^n` and cell measures include `|S^{n-2}| rho^{n-2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorGrid {
    pub axes: Vec<Vec<f64>>,
    pub radial: Option<Radial>,
}

impl TensorGrid {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.len()).collect()
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn cell_count(&self) -> usize {
        self.axes.iter().map(|a| a.len() - 1).product()
    }

    pub fn node_coord(&self, idx: usize, out: &mut [f64]) {
        let mut rem = idx;
        for (d, a) in self.axes.iter().enumerate() {
            out[d] = a[rem % a.len()];
            rem /= a.len();
        }
    }

    /// Point of `R^n` represented by a node (meridian grids embed `(t, rho)`
    /// relative to `anchor`).
    pub fn embed(&self, idx: usize, anchor: &[f64], out: &mut [f64]) {
        match self.radial {
            None => self.node_coord(idx, out),
            Some(_) => {
                let mut tr = [0.0; 2];
                self.node_coord(idx, &mut tr);
                out.copy_from_slice(anchor);
                out[0] += tr[0];
                out[1] += tr[1];
            }
        }
    }

    /// Node strides per axis.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.dim());
        let mut acc = 1;
        for a in &self.axes {
            s.push(acc);
            acc *= a.len();
        }
        s
    }

    /// Lower-corner node of each cell, in cell order.
    pub fn cell_base(&self, cell: usize) -> (usize, Vec<usize>) {
        let strides = self.strides();
        let mut rem = cell;
        let mut node = 0;
        let mut ij = Vec::with_capacity(self.dim());
        for (d, a) in self.axes.iter().enumerate() {
            let i = rem % (a.len() - 1);
            rem /= a.len() - 1;
            node += i * strides[d];
            ij.push(i);
        }
        (node, ij)
    }

    /// Sub-cell measures `(lower half, upper half)` along axis `d` for cell index `i`.
    pub fn half_measures(&self, d: usize, i: usize) -> (f64, f64) {
        let a = &self.axes[d];
        let (x0, x1) = (a[i], a[i + 1]);
        let mid = 0.5 * (x0 + x1);
        match self.radial {
            Some(Radial { n }) if d == 1 => {
                let k = (n - 1) as i32;
                let prim = |x: f64| x.powi(k) / k as f64;
                let c = unit_sphere_area(n - 2);
                (c * (prim(mid) - prim(x0)), c * (prim(x1) - prim(mid)))
            }
            _ => (mid - x0, x1 - mid),
        }
    }

    /// Corner weights of a cell (product of half measures), indexed by corner bits.
    pub fn corner_weights(&self, ij: &[usize]) -> Vec<f64> {
        let nd = self.dim();
        let halves: Vec<(f64, f64)> = (0..nd).map(|d| self.half_measures(d, ij[d])).collect();
        (0..1usize << nd)
            .map(|c| (0..nd).map(|d| if c >> d & 1 == 1 { halves[d].1 } else { halves[d].0 }).product())
            .collect()
    }
}

/// Node labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Exterior = 0,
    Free = 1,
    PlateE = 2,
    PlateF = 3,
}

impl Label {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Label::Exterior,
            1 => Label::Free,
            2 => Label::PlateE,
            3 => Label::PlateF,
            _ => return invalid(format!("bad label byte {v}")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellMask {
    pub dims: Vec<usize>,
    pub labels: Vec<Label>,
}

impl CellMask {
    pub fn count(&self, l: Label) -> usize {
        self.labels.iter().filter(|&&x| x == l).count()
    }

    /// Labels of the same shape with every node marked free.
    pub fn all_free(dims: &[usize]) -> Self {
        CellMask { dims: dims.to_vec(), labels: vec![Label::Free; dims.iter().product()] }
    }

    /// Run-length encoding `[(label, count), ...]`.
    pub fn rle(&self) -> Vec<(u8, usize)> {
        let mut out: Vec<(u8, usize)> = Vec::new();
        for &l in &self.labels {
            match out.last_mut() {
                Some((v, c)) if *v == l as u8 => *c += 1,
                _ => out.push((l as u8, 1)),
            }
        }
        out
    }

    pub fn from_rle(dims: &[usize], rle: &[(u8, usize)]) -> Result<Self> {
        let mut labels = Vec::with_capacity(dims.iter().product());
        for &(v, c) in rle {
            let l = Label::from_u8(v)?;
            labels.extend(std::iter::repeat(l).take(c));
        }
        if labels.len() != dims.iter().product::<usize>() {
            return invalid("mask run-length encoding does not match dims");
        }
        Ok(CellMask { dims: dims.to_vec(), labels })
    }
}

/// Node values on a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub lattice: Lattice,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn from_fn(lattice: &Lattice, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut z = vec![0.0; lattice.dim()];
        let values = (0..lattice.node_count())
            .map(|i| {
                lattice.coord(i, &mut z);
                f(&z)
            })
            .collect();
        GridFunction { lattice: lattice.clone(), values }
    }

    /// Pins plate nodes to 1 on `E` and 0 on `F`.
    pub fn project(&mut self, mask: &CellMask) {
        for (v, l) in self.values.iter_mut().zip(&mask.labels) {
            match l {
                Label::PlateE => *v = 1.0,
                Label::PlateF => *v = 0.0,
                _ => {}
            }
        }
    }
}

/// Labels every node of a tensor grid. Meridian grids evaluate membership at
/// `anchor + (t, rho, 0, ..)`.
pub fn classify(c: &Condenser, grid: &TensorGrid, anchor: &[f64]) -> Result<CellMask> {
    let n = c.ambient.dim();
    if grid.radial.is_none() && grid.dim() != n {
        return invalid(format!("grid dimension {} does not match condenser dimension {n}", grid.dim()));
    }
    let labels: Vec<Label> = (0..grid.node_count())
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |z, i| {
                grid.embed(i, anchor, z);
                if c.plate_e.contains(z) {
                    Label::PlateE
                } else if c.plate_f.contains(z) {
                    Label::PlateF
                } else if c.ambient.contains(z) {
                    Label::Free
                } else {
                    Label::Exterior
                }
            },
        )
        .collect();
    let mask = CellMask { dims: grid.dims(), labels };
    check_plates(&mask, grid)?;
    Ok(mask)
}

fn check_plates(mask: &CellMask, grid: &TensorGrid) -> Result<()> {
    if mask.count(Label::PlateE) == 0 {
        return Err(Error::UnderResolved("plate E has no grid nodes".into()));
    }
    if mask.count(Label::PlateF) == 0 {
        return Err(Error::UnderResolved("plate F has no grid nodes".into()));
    }
    // plates may not share a cell: at least two cells of free band between them
    let nd = grid.dim();
    let touching = (0..grid.cell_count()).into_par_iter().any(|cell| {
        let (base, _) = grid.cell_base(cell);
        let strides = grid.strides();
        let (mut e, mut f) = (false, false);
        for c in 0..1usize << nd {
            let node = base + (0..nd).filter(|d| c >> d & 1 == 1).map(|d| strides[d]).sum::<usize>();
            match mask.labels[node] {
                Label::PlateE => e = true,
                Label::PlateF => f = true,
                _ => {}
            }
        }
        e && f
    });
    if touching {
        return Err(Error::UnderResolved(
            "plates E and F share a grid cell; refine the lattice".into(),
        ));
    }
    Ok(())
}

/// Labels the nodes of a uniform lattice for a condenser.
pub fn rasterize(c: &Condenser, lattice: &Lattice) -> Result<CellMask> {
    let bb = c.ambient.bounding_box();
    let hi: Vec<f64> =
        (0..lattice.dim()).map(|d| lattice.origin[d] + (lattice.dims[d] - 1) as f64 * lattice.spacing).collect();
    let tol = 1e-9 * lattice.spacing;
    let covers = (0..lattice.dim()).all(|d| lattice.origin[d] <= bb.lo[d] + tol && hi[d] >= bb.hi[d] - tol);
    if !covers {
        return invalid("lattice does not contain the ambient set");
    }
    classify(c, &lattice.to_tensor(), &[])
}

/// Labels from plain domain membership (inside = free, outside = exterior).
pub fn voxelize(domain: &Domain, lattice: &Lattice) -> CellMask {
    let mut z = vec![0.0; lattice.dim()];
    let labels = (0..lattice.node_count())
        .map(|i| {
            lattice.coord(i, &mut z);
            if domain.contains(&z) {
                Label::Free
            } else {
                Label::Exterior
            }
        })
        .collect();
    CellMask { dims: lattice.dims.clone(), labels }
}

/// Iterates cells whose corners are all non-exterior, yielding
/// `(corner node indices, corner weights, per-axis spacings)`.
pub(crate) fn for_each_interior_cell<F>(grid: &TensorGrid, mask: &CellMask, f: F) -> f64
where
    F: Fn(&[usize], &[f64], &[f64]) -> f64 + Sync,
{
    let nd = grid.dim();
    let strides = grid.strides();
    chunked_sum(grid.cell_count(), |cell| {
        let (base, ij) = grid.cell_base(cell);
        let corners: Vec<usize> = (0..1usize << nd)
            .map(|c| base + (0..nd).filter(|d| c >> d & 1 == 1).map(|d| strides[d]).sum::<usize>())
            .collect();
        if corners.iter().any(|&i| mask.labels[i] == Label::Exterior) {
            return 0.0;
        }
        let w = grid.corner_weights(&ij);
        let dx: Vec<f64> = (0..nd).map(|d| grid.axes[d][ij[d] + 1] - grid.axes[d][ij[d]]).collect();
        f(&corners, &w, &dx)
    })
}

/// Squared norm of the forward-difference gradient at corner `c`.
#[inline]
pub(crate) fn corner_grad_sq(u: impl Fn(usize) -> f64, corners: &[usize], dx: &[f64], c: usize) -> f64 {
    let mut s = 0.0;
    for (d, h) in dx.iter().enumerate() {
        let hi = corners[c | 1 << d];
        let lo = corners[c & !(1 << d)];
        let g = (u(hi) - u(lo)) / h;
        s += g * g;
    }
    s
}

/// `sum_cells sum_corners w_c (|g_c|^2 + eps^2)^{p/2}` over interior cells of any tensor grid.
pub fn tensor_energy(grid: &TensorGrid, mask: &CellMask, values: &[f64], p: f64, eps: f64) -> f64 {
    let e2 = eps * eps;
    for_each_interior_cell(grid, mask, |corners, w, dx| {
        (0..corners.len())
            .map(|c| w[c] * (corner_grad_sq(|i| values[i], corners, dx, c) + e2).powf(0.5 * p))
            .sum()
    })
}

/// Lower-corner forward-difference gradient per cell (`n` components each,
/// zero on cells touching the exterior).
pub fn discrete_gradient(u: &GridFunction, mask: &CellMask) -> Vec<Vec<f64>> {
    let grid = u.lattice.to_tensor();
    let nd = grid.dim();
    let strides = grid.strides();
    let h = u.lattice.spacing;
    (0..grid.cell_count())
        .map(|cell| {
            let (base, _) = grid.cell_base(cell);
            let corners: Vec<usize> = (0..1usize << nd)
                .map(|c| base + (0..nd).filter(|d| c >> d & 1 == 1).map(|d| strides[d]).sum::<usize>())
                .collect();
            if corners.iter().any(|&i| mask.labels[i] == Label::Exterior) {
                return vec![0.0; nd];
            }
            (0..nd).map(|d| (u.values[base + strides[d]] - u.values[base]) / h).collect()
        })
        .collect()
}

/// Discrete `int (|grad u|^2 + eps^2)^{p/2}` over the non-exterior cells.
pub fn p_energy(u: &GridFunction, mask: &CellMask, p: f64, eps: f64) -> f64 {
    tensor_energy(&u.lattice.to_tensor(), mask, &u.values, p, eps)
}

/// `||u||_{L^p} + ||grad u||_{L^p}` over interior cells (corner quadrature).
pub fn sobolev_norm(u: &GridFunction, mask: &CellMask, p: f64) -> f64 {
    let grid = u.lattice.to_tensor();
    let v = &u.values;
    let lp = for_each_interior_cell(&grid, mask, |corners, w, _| {
        corners.iter().zip(w).map(|(&i, wc)| wc * v[i].abs().powf(p)).sum()
    });
    lp.powf(1.0 / p) + tensor_energy(&grid, mask, v, p, 0.0).powf(1.0 / p)
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    dims: Vec<usize>,
    spacing: f64,
    origin: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_rle: Option<Vec<(u8, usize)>>,
}

fn side_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    (prefix.with_extension("bin"), prefix.with_extension("json"))
}

/// Writes `<prefix>.bin` (little-endian f64) and `<prefix>.json`.
pub fn write_grid_function(prefix: &Path, u: &GridFunction, mask: Option<&CellMask>) -> Result<()> {
    let (bin, json) = side_paths(prefix);
    let mut w = BufWriter::new(File::create(bin)?);
    for v in &u.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let header = GridHeader {
        dims: u.lattice.dims.clone(),
        spacing: u.lattice.spacing,
        origin: u.lattice.origin.clone(),
        mask_rle: mask.map(|m| m.rle()),
    };
    serde_json::to_writer_pretty(File::create(json)?, &header)?;
    Ok(())
}

pub fn read_grid_function(prefix: &Path) -> Result<(GridFunction, Option<CellMask>)> {
    let (bin, json) = side_paths(prefix);
    let header: GridHeader = serde_json::from_reader(BufReader::new(File::open(json)?))?;
    let lattice = Lattice::new(header.origin, header.spacing, header.dims)?;
    let mut bytes = Vec::new();
    BufReader::new(File::open(bin)?).read_to_end(&mut bytes)?;
    if bytes.len() != 8 * lattice.node_count() {
        return invalid("grid function payload size does not match header dims");
    }
    let values = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    let mask = header.mask_rle.map(|r| CellMask::from_rle(&lattice.dims, &r)).transpose()?;
    Ok((GridFunction { lattice, values }, mask))
}

/// Writes `<prefix>.bin` (one label byte per node) and `<prefix>.json`.
pub fn write_voxel_mask(prefix: &Path, lattice: &Lattice, mask: &CellMask) -> Result<()> {
    let (bin, json) = side_paths(prefix);
    let bytes: Vec<u8> = mask.labels.iter().map(|&l| l as u8).collect();
    std::fs::write(bin, bytes)?;
    let header = GridHeader {
        dims: lattice.dims.clone(),
        spacing: lattice.spacing,
        origin: lattice.origin.clone(),
        mask_rle: None,
    };
    serde_json::to_writer_pretty(File::create(json)?, &header)?;
    Ok(())
}
