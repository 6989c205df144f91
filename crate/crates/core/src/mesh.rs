//! Uniform space-time grids, grid functions, the discrete wave operator,
//! boundary traces and the weighted norms used by the estimates.
//!
//! Spatial nodes are numbered `k = j * npts_x + i` (with `j = 0` on an
//! interval) and space-time nodes `n * n_space + k` for time level `n`.

use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::geometry::{Domain, Face, GeometryConfig};
use crate::solvers::pcg;

/// A node of the lateral boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryNode {
    /// Spatial node id.
    pub node: usize,
    pub point: [f64; 2],
    /// `None` at rectangle corners, which carry no normal.
    pub face: Option<Face>,
    /// First and second nodes inward along the normal.
    pub adj: Option<usize>,
    pub adj2: Option<usize>,
    /// Spacing along the normal.
    pub h_normal: f64,
    /// Surface quadrature weight (1 at an interval endpoint, the tangential spacing on a face).
    pub weight: f64,
}

#[derive(Debug)]
pub struct SpaceTimeGrid {
    domain: Domain,
    t_final: f64,
    npts: [usize; 2],
    h: [f64; 2],
    dt: f64,
    nt: usize,
    interior: Vec<usize>,
    interior_pos: Vec<usize>,
    boundary: Vec<BoundaryNode>,
    boundary_pos: Vec<usize>,
    space_weight: Vec<f64>,
    spectrum: OnceLock<DirichletSpectrum>,
}

const NONE: usize = usize::MAX;

impl SpaceTimeGrid {
    /// `nx` holds the interior node count per axis.
    pub fn new(cfg: &GeometryConfig, nx: &[usize], nt: usize) -> Result<Self> {
        Self::on_domain(cfg.domain, cfg.t_final, nx, nt)
    }

    pub fn on_domain(domain: Domain, t_final: f64, nx: &[usize], nt: usize) -> Result<Self> {
        domain.check()?;
        let dim = domain.dim();
        if nx.len() != dim {
            return Err(Error::GridTooCoarse(format!(
                "expected {dim} interior counts, got {}",
                nx.len()
            )));
        }
        if nx.iter().any(|&n| n < 3) || nt < 4 {
            return Err(Error::GridTooCoarse(format!(
                "need at least 3 interior nodes per axis and 4 time steps, got nx={nx:?}, nt={nt}"
            )));
        }
        if !(t_final > 0.0) {
            return Err(Error::GridTooCoarse(format!("T = {t_final} must be positive")));
        }
        let len = domain.lengths();
        let npts = if dim == 1 {
            [nx[0] + 2, 1]
        } else {
            [nx[0] + 2, nx[1] + 2]
        };
        let h = if dim == 1 {
            [len[0] / (nx[0] + 1) as f64, 1.0]
        } else {
            [len[0] / (nx[0] + 1) as f64, len[1] / (nx[1] + 1) as f64]
        };
        let nsp = npts[0] * npts[1];
        let lo = domain.lower();
        let mut interior = Vec::new();
        let mut interior_pos = vec![NONE; nsp];
        let mut boundary = Vec::new();
        let mut boundary_pos = vec![NONE; nsp];
        let mut space_weight = vec![0.0; nsp];
        let axis_w = |i: usize, n: usize, h: f64| if i == 0 || i + 1 == n { 0.5 * h } else { h };
        for k in 0..nsp {
            let (i, j) = (k % npts[0], k / npts[0]);
            let point = [lo[0] + i as f64 * h[0], lo[1] + j as f64 * h[1]];
            let on_x = i == 0 || i + 1 == npts[0];
            let on_y = dim == 2 && (j == 0 || j + 1 == npts[1]);
            space_weight[k] = if dim == 1 {
                axis_w(i, npts[0], h[0])
            } else {
                axis_w(i, npts[0], h[0]) * axis_w(j, npts[1], h[1])
            };
            if !on_x && !on_y {
                interior_pos[k] = interior.len();
                interior.push(k);
                continue;
            }
            let (face, adj, adj2, h_normal, weight) = if on_x && on_y {
                (None, None, None, 0.0, 0.0)
            } else if on_x {
                let (face, step): (Face, isize) = if i == 0 { (Face::Left, 1) } else { (Face::Right, -1) };
                let a = (k as isize + step) as usize;
                let a2 = (k as isize + 2 * step) as usize;
                (Some(face), Some(a), Some(a2), h[0], if dim == 1 { 1.0 } else { h[1] })
            } else {
                let w = npts[0] as isize;
                let (face, step) = if j == 0 { (Face::Bottom, w) } else { (Face::Top, -w) };
                let a = (k as isize + step) as usize;
                let a2 = (k as isize + 2 * step) as usize;
                (Some(face), Some(a), Some(a2), h[1], h[0])
            };
            boundary_pos[k] = boundary.len();
            boundary.push(BoundaryNode {
                node: k,
                point,
                face,
                adj,
                adj2,
                h_normal,
                weight,
            });
        }
        Ok(SpaceTimeGrid {
            domain,
            t_final,
            npts,
            h,
            dt: t_final / nt as f64,
            nt,
            interior,
            interior_pos,
            boundary,
            boundary_pos,
            space_weight,
            spectrum: OnceLock::new(),
        })
    }

    /// Chooses `nt` so that `dt * sqrt(d) / h_min` is at most `cfl`.
    pub fn with_cfl(cfg: &GeometryConfig, nx: &[usize], cfl: f64) -> Result<Self> {
        let len = cfg.domain.lengths();
        let hmin = nx
            .iter()
            .enumerate()
            .map(|(k, &n)| len[k] / (n + 1) as f64)
            .fold(f64::INFINITY, f64::min);
        let d = cfg.domain.dim() as f64;
        let nt = (cfg.t_final * d.sqrt() / (cfl * hmin)).ceil() as usize;
        Self::new(cfg, nx, nt.max(4))
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }
    pub fn t_final(&self) -> f64 {
        self.t_final
    }
    pub fn nt(&self) -> usize {
        self.nt
    }
    pub fn n_levels(&self) -> usize {
        self.nt + 1
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn h(&self) -> [f64; 2] {
        self.h
    }
    pub fn h_max(&self) -> f64 {
        if self.dim() == 1 {
            self.h[0]
        } else {
            self.h[0].max(self.h[1])
        }
    }
    pub fn h_min(&self) -> f64 {
        if self.dim() == 1 {
            self.h[0]
        } else {
            self.h[0].min(self.h[1])
        }
    }
    /// Nodes per axis including the boundary (second entry 1 on an interval).
    pub fn npts(&self) -> [usize; 2] {
        self.npts
    }
    pub fn n_space(&self) -> usize {
        self.npts[0] * self.npts[1]
    }
    pub fn node_count(&self) -> usize {
        self.n_space() * self.n_levels()
    }
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }
    pub fn interior_pos(&self, k: usize) -> Option<usize> {
        match self.interior_pos[k] {
            NONE => None,
            p => Some(p),
        }
    }
    pub fn boundary(&self) -> &[BoundaryNode] {
        &self.boundary
    }
    pub fn boundary_pos(&self, k: usize) -> Option<usize> {
        match self.boundary_pos[k] {
            NONE => None,
            p => Some(p),
        }
    }
    /// Trapezoidal weight of a spatial node.
    pub fn space_weight(&self, k: usize) -> f64 {
        self.space_weight[k]
    }
    /// Weight of an interior spatial node (`h` or `h1 h2`).
    pub fn cell_volume(&self) -> f64 {
        if self.dim() == 1 {
            self.h[0]
        } else {
            self.h[0] * self.h[1]
        }
    }
    /// Trapezoidal weight of a time level.
    pub fn time_weight(&self, n: usize) -> f64 {
        if n == 0 || n == self.nt {
            0.5 * self.dt
        } else {
            self.dt
        }
    }
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }
    pub fn point(&self, k: usize) -> [f64; 2] {
        let lo = self.domain.lower();
        let (i, j) = (k % self.npts[0], k / self.npts[0]);
        [lo[0] + i as f64 * self.h[0], lo[1] + j as f64 * self.h[1]]
    }
    pub fn index(&self, n: usize, k: usize) -> usize {
        n * self.n_space() + k
    }
    pub fn coords(&self, node: usize) -> ([f64; 2], f64) {
        let nsp = self.n_space();
        (self.point(node % nsp), self.time(node / nsp))
    }
    /// `dt * sqrt(d) / h_min`.
    pub fn cfl(&self) -> f64 {
        self.dt * (self.dim() as f64).sqrt() / self.h_min()
    }

    /// Spatial neighbours of an interior node with their `1/h^2` coupling.
    pub(crate) fn neighbours(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let w = self.npts[0];
        let ix2 = 1.0 / (self.h[0] * self.h[0]);
        let iy2 = 1.0 / (self.h[1] * self.h[1]);
        let two_d = self.dim() == 2;
        [
            Some((k - 1, ix2)),
            Some((k + 1, ix2)),
            two_d.then(|| (k - w, iy2)),
            two_d.then(|| (k + w, iy2)),
        ]
        .into_iter()
        .flatten()
    }

    /// Diagonal coefficient of `-Lap_h` at an interior node.
    pub(crate) fn lap_diag(&self) -> f64 {
        let mut d = 2.0 / (self.h[0] * self.h[0]);
        if self.dim() == 2 {
            d += 2.0 / (self.h[1] * self.h[1]);
        }
        d
    }

    pub fn spectrum(&self) -> &DirichletSpectrum {
        self.spectrum.get_or_init(|| DirichletSpectrum::new(self))
    }
}

/// A grid function on all space-time nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    n_space: usize,
    n_levels: usize,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        ScalarField {
            n_space: grid.n_space(),
            n_levels: grid.n_levels(),
            values: vec![0.0; grid.node_count()],
        }
    }

    pub fn from_values(grid: &SpaceTimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::SliceMismatch {
                expected: grid.node_count(),
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(ScalarField {
            n_space: grid.n_space(),
            n_levels: grid.n_levels(),
            values,
        })
    }

    pub fn from_fn(grid: &SpaceTimeGrid, f: impl Fn([f64; 2], f64) -> f64) -> Self {
        let values = (0..grid.node_count())
            .map(|node| {
                let (x, t) = grid.coords(node);
                f(x, t)
            })
            .collect();
        ScalarField {
            n_space: grid.n_space(),
            n_levels: grid.n_levels(),
            values,
        }
    }

    pub fn check_grid(&self, grid: &SpaceTimeGrid) -> Result<()> {
        if self.values.len() != grid.node_count() {
            return Err(Error::SliceMismatch {
                expected: grid.node_count(),
                found: self.values.len(),
            });
        }
        Ok(())
    }

    pub fn n_space(&self) -> usize {
        self.n_space
    }
    pub fn n_levels(&self) -> usize {
        self.n_levels
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    #[inline]
    pub fn at(&self, n: usize, k: usize) -> f64 {
        self.values[n * self.n_space + k]
    }
    #[inline]
    pub fn set(&mut self, n: usize, k: usize, v: f64) {
        self.values[n * self.n_space + k] = v;
    }
    pub fn slice(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_space..(n + 1) * self.n_space]
    }
    pub fn slice_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.values[n * self.n_space..(n + 1) * self.n_space]
    }
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
    /// Pointwise product with a nodal weight.
    pub fn weighted(&self, weight: &[f64]) -> ScalarField {
        ScalarField {
            n_space: self.n_space,
            n_levels: self.n_levels,
            values: self.values.iter().zip(weight).map(|(a, b)| a * b).collect(),
        }
    }
    pub fn sub(&self, other: &ScalarField) -> ScalarField {
        ScalarField {
            n_space: self.n_space,
            n_levels: self.n_levels,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        }
    }
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            n_space: self.n_space,
            n_levels: self.n_levels,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// A grid function on the lateral boundary nodes at every time level.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryField {
    n_boundary: usize,
    n_levels: usize,
    values: Vec<f64>,
}

impl BoundaryField {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        BoundaryField {
            n_boundary: grid.boundary().len(),
            n_levels: grid.n_levels(),
            values: vec![0.0; grid.boundary().len() * grid.n_levels()],
        }
    }
    pub fn from_fn(grid: &SpaceTimeGrid, f: impl Fn(&BoundaryNode, f64) -> f64) -> Self {
        let mut out = Self::zeros(grid);
        for n in 0..grid.n_levels() {
            for (b, node) in grid.boundary().iter().enumerate() {
                out.set(n, b, f(node, grid.time(n)));
            }
        }
        out
    }
    pub fn n_boundary(&self) -> usize {
        self.n_boundary
    }
    pub fn n_levels(&self) -> usize {
        self.n_levels
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    #[inline]
    pub fn at(&self, n: usize, b: usize) -> f64 {
        self.values[n * self.n_boundary + b]
    }
    #[inline]
    pub fn set(&mut self, n: usize, b: usize, v: f64) {
        self.values[n * self.n_boundary + b] = v;
    }
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `Lap_h u` at interior nodes (boundary values of `u` are used); zero on the boundary.
pub fn laplacian(grid: &SpaceTimeGrid, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grid.n_space()];
    let d = grid.lap_diag();
    for &k in grid.interior() {
        let mut acc = -d * u[k];
        for (m, c) in grid.neighbours(k) {
            acc += c * u[m];
        }
        out[k] = acc;
    }
    out
}

/// `(L_h w)(x, t) = D_tt w - Lap_h w` at interior nodes of levels `1..nt-1`;
/// all other entries are zero.
pub fn apply_wave_operator(w: &ScalarField, grid: &SpaceTimeGrid) -> ScalarField {
    let mut out = ScalarField::zeros(grid);
    let idt2 = 1.0 / (grid.dt() * grid.dt());
    for n in 1..grid.nt() {
        let lap = laplacian(grid, w.slice(n));
        for &k in grid.interior() {
            let dtt = (w.at(n + 1, k) - 2.0 * w.at(n, k) + w.at(n - 1, k)) * idt2;
            out.set(n, k, dtt - lap[k]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceKind {
    /// `(3 w_b - 4 w_1 + w_2) / (2 h)`, second order.
    SecondOrder,
    /// `(w_b - w_1) / h`, the exact adjoint of injecting Dirichlet data into the leapfrog scheme.
    Adjoint,
}

/// Outward normal derivative on every boundary node and time level (0 at corners).
pub fn normal_trace(w: &ScalarField, grid: &SpaceTimeGrid, kind: TraceKind) -> BoundaryField {
    let mut out = BoundaryField::zeros(grid);
    for n in 0..grid.n_levels() {
        for (b, node) in grid.boundary().iter().enumerate() {
            let (Some(a1), Some(a2)) = (node.adj, node.adj2) else {
                continue;
            };
            let wb = w.at(n, node.node);
            let v = match kind {
                TraceKind::SecondOrder => (3.0 * wb - 4.0 * w.at(n, a1) + w.at(n, a2)) / (2.0 * node.h_normal),
                TraceKind::Adjoint => (wb - w.at(n, a1)) / node.h_normal,
            };
            out.set(n, b, v);
        }
    }
    out
}

/// Time derivative by centered differences, second-order one-sided at both ends.
pub fn time_derivative(f: &ScalarField, grid: &SpaceTimeGrid) -> ScalarField {
    let nt = grid.nt();
    let dt = grid.dt();
    let mut out = ScalarField::zeros(grid);
    for k in 0..grid.n_space() {
        out.set(0, k, (-3.0 * f.at(0, k) + 4.0 * f.at(1, k) - f.at(2, k)) / (2.0 * dt));
        for n in 1..nt {
            out.set(n, k, (f.at(n + 1, k) - f.at(n - 1, k)) / (2.0 * dt));
        }
        out.set(
            nt,
            k,
            (3.0 * f.at(nt, k) - 4.0 * f.at(nt - 1, k) + f.at(nt - 2, k)) / (2.0 * dt),
        );
    }
    out
}

/// Eigenpairs of the discrete Dirichlet Laplacian `-Lap_h`, per axis.
#[derive(Clone, Debug)]
pub struct DirichletSpectrum {
    /// Per axis: eigenvalues and the orthonormal (in plain l2) sine eigenvectors, row-major `[mode][node]`.
    axes: Vec<(Vec<f64>, Vec<f64>)>,
    n: [usize; 2],
}

impl DirichletSpectrum {
    fn new(grid: &SpaceTimeGrid) -> Self {
        let dim = grid.dim();
        let mut axes = Vec::with_capacity(dim);
        let mut n = [1, 1];
        for (a, na) in n.iter_mut().enumerate().take(dim) {
            let m = grid.npts()[a] - 2;
            *na = m;
            let h = grid.h()[a];
            let mp1 = (m + 1) as f64;
            let scale = (2.0 / mp1).sqrt();
            let mut eig = Vec::with_capacity(m);
            let mut vecs = Vec::with_capacity(m * m);
            for k in 1..=m {
                let th = k as f64 * std::f64::consts::PI / mp1;
                eig.push(4.0 / (h * h) * (0.5 * th).sin().powi(2));
                vecs.extend((1..=m).map(|i| scale * (th * i as f64).sin()));
            }
            axes.push((eig, vecs));
        }
        DirichletSpectrum { axes, n }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.axes.iter().map(|(e, _)| e[0]).sum()
    }

    /// Eigenvalues in the order used by [`Self::coefficients`].
    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.axes.len() == 1 {
            self.axes[0].0.clone()
        } else {
            let (ex, ey) = (&self.axes[0].0, &self.axes[1].0);
            ey.iter().flat_map(|ly| ex.iter().map(move |lx| lx + ly)).collect()
        }
    }

    /// Coefficients of the interior values `u` (ordered as `grid.interior()`) in the eigenbasis.
    pub fn coefficients(&self, u: &[f64]) -> Vec<f64> {
        let (mx, my) = (self.n[0], self.n[1]);
        let (_, vx) = &self.axes[0];
        // along x for each row
        let mut tmp = vec![0.0; mx * my];
        for j in 0..my {
            let row = &u[j * mx..(j + 1) * mx];
            for k in 0..mx {
                tmp[j * mx + k] = vx[k * mx..(k + 1) * mx].iter().zip(row).map(|(a, b)| a * b).sum();
            }
        }
        if self.axes.len() == 1 {
            return tmp;
        }
        let (_, vy) = &self.axes[1];
        let mut out = vec![0.0; mx * my];
        for l in 0..my {
            let e = &vy[l * my..(l + 1) * my];
            for k in 0..mx {
                out[l * mx + k] = (0..my).map(|j| e[j] * tmp[j * mx + k]).sum();
            }
        }
        out
    }
}

fn interior_values(grid: &SpaceTimeGrid, u: &[f64]) -> Vec<f64> {
    grid.interior().iter().map(|&k| u[k]).collect()
}

fn check_slice(grid: &SpaceTimeGrid, u: &[f64]) -> Result<()> {
    if u.len() != grid.n_space() {
        return Err(Error::SliceMismatch {
            expected: grid.n_space(),
            found: u.len(),
        });
    }
    Ok(())
}

/// Trapezoidal L2 norm of a spatial slice.
pub fn slice_l2(grid: &SpaceTimeGrid, u: &[f64]) -> f64 {
    (0..grid.n_space())
        .map(|k| grid.space_weight(k) * u[k] * u[k])
        .sum::<f64>()
        .sqrt()
}

/// Discrete H1 norm of a slice: `sqrt(|u|_L2^2 + |grad u|^2)` with edge differences.
pub fn slice_h1(grid: &SpaceTimeGrid, u: &[f64]) -> f64 {
    (slice_l2(grid, u).powi(2) + slice_grad2(grid, u)).sqrt()
}

/// `int |grad u|^2` with forward differences on every grid edge.
pub fn slice_grad2(grid: &SpaceTimeGrid, u: &[f64]) -> f64 {
    slice_grad2_weighted(grid, u, None)
}

/// `int a |grad u|^2` where the nodal weight `a` is averaged over each edge.
pub fn slice_grad2_weighted(grid: &SpaceTimeGrid, u: &[f64], weight: Option<&[f64]>) -> f64 {
    let [nxp, nyp] = grid.npts();
    let [hx, hy] = grid.h();
    let wy = |j: usize| {
        if grid.dim() == 1 {
            1.0
        } else if j == 0 || j + 1 == nyp {
            0.5 * hy
        } else {
            hy
        }
    };
    let wx = |i: usize| if i == 0 || i + 1 == nxp { 0.5 * hx } else { hx };
    let edge = |a: usize, b: usize| weight.map_or(1.0, |w| 0.5 * (w[a] + w[b]));
    let mut acc = 0.0;
    for j in 0..nyp {
        for i in 0..nxp - 1 {
            let k = j * nxp + i;
            let d = (u[k + 1] - u[k]) / hx;
            acc += hx * wy(j) * edge(k, k + 1) * d * d;
        }
    }
    if grid.dim() == 2 {
        for j in 0..nyp - 1 {
            for i in 0..nxp {
                let k = j * nxp + i;
                let d = (u[k + nxp] - u[k]) / hy;
                acc += hy * wx(i) * edge(k, k + nxp) * d * d;
            }
        }
    }
    acc
}

/// `|u|_{H^-1}` from the discrete Dirichlet problem `-Lap_h z = u`, value `sqrt(<u, z>_h)`.
/// Only interior values of `u` enter.
pub fn slice_hminus1(grid: &SpaceTimeGrid, u: &[f64]) -> f64 {
    let f = interior_values(grid, u);
    let z = solve_dirichlet(grid, &f);
    let vol = grid.cell_volume();
    (vol * f.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>())
        .max(0.0)
        .sqrt()
}

/// Solves `-Lap_h z = f` on interior nodes with homogeneous Dirichlet data.
pub fn solve_dirichlet(grid: &SpaceTimeGrid, f: &[f64]) -> Vec<f64> {
    let m = f.len();
    if grid.dim() == 1 {
        // Thomas algorithm for tridiag(-1, 2, -1) / h^2
        let h2 = grid.h()[0].powi(2);
        let mut c = vec![0.0; m];
        let mut d = vec![0.0; m];
        let mut denom = 2.0;
        c[0] = -1.0 / denom;
        d[0] = f[0] * h2 / denom;
        for i in 1..m {
            denom = 2.0 + c[i - 1];
            c[i] = -1.0 / denom;
            d[i] = (f[i] * h2 + d[i - 1]) / denom;
        }
        let mut z = vec![0.0; m];
        z[m - 1] = d[m - 1];
        for i in (0..m - 1).rev() {
            z[i] = d[i] - c[i] * z[i + 1];
        }
        z
    } else {
        let diag = vec![grid.lap_diag(); m];
        let apply = |x: &[f64], y: &mut [f64]| {
            let mut full = vec![0.0; grid.n_space()];
            for (p, &k) in grid.interior().iter().enumerate() {
                full[k] = x[p];
            }
            let lap = laplacian(grid, &full);
            for (p, &k) in grid.interior().iter().enumerate() {
                y[p] = -lap[k];
            }
        };
        let cap = 50 * (m as f64).sqrt() as usize + 200;
        match pcg(apply, &diag, f, 1e-13, cap) {
            Ok((z, _)) => z,
            Err(_) => {
                // fall back on the spectral solve
                let sp = grid.spectrum();
                let c = sp.coefficients(f);
                let lam = sp.eigenvalues();
                let cz: Vec<f64> = c.iter().zip(&lam).map(|(a, l)| a / l).collect();
                sp.synthesize(&cz)
            }
        }
    }
}

impl DirichletSpectrum {
    /// Inverse of [`Self::coefficients`].
    pub fn synthesize(&self, c: &[f64]) -> Vec<f64> {
        let (mx, my) = (self.n[0], self.n[1]);
        let (_, vx) = &self.axes[0];
        let mut tmp = c.to_vec();
        if self.axes.len() == 2 {
            let (_, vy) = &self.axes[1];
            for k in 0..mx {
                for j in 0..my {
                    tmp[j * mx + k] = (0..my).map(|l| vy[l * my + j] * c[l * mx + k]).sum();
                }
            }
        }
        let mut out = vec![0.0; mx * my];
        for j in 0..my {
            for i in 0..mx {
                out[j * mx + i] = (0..mx).map(|k| vx[k * mx + i] * tmp[j * mx + k]).sum();
            }
        }
        out
    }
}

/// Spectral `|u|_{H^-r}` with exponents `lambda_k^-r` (interior values only).
pub fn slice_hminus_r(grid: &SpaceTimeGrid, u: &[f64], r: f64) -> f64 {
    let sp = grid.spectrum();
    let c = sp.coefficients(&interior_values(grid, u));
    let lam = sp.eigenvalues();
    (grid.cell_volume() * c.iter().zip(&lam).map(|(a, l)| a * a * l.powf(-r)).sum::<f64>()).sqrt()
}

/// Space-time and slice norms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormKind {
    /// `L2(Q)`.
    L2Q,
    /// `L^inf(0,T; L2)`.
    LinfL2,
    /// `L2(Sigma)`.
    L2Sigma,
    /// `H^-1` of a slice.
    Hminus1Slice,
    /// `L2(0,T; H^-r)`.
    L2HminusR(f64),
    /// `H1` of a slice.
    H1Slice,
    /// `L^inf(0,T; H^-1)`.
    LinfHminus1,
}

impl FromStr for NormKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Ok(match t {
            "L2Q" => NormKind::L2Q,
            "LinfL2" => NormKind::LinfL2,
            "L2Sigma" => NormKind::L2Sigma,
            "Hminus1slice" => NormKind::Hminus1Slice,
            "H1slice" => NormKind::H1Slice,
            "LinfHminus1" => NormKind::LinfHminus1,
            _ => {
                let r = t
                    .strip_prefix("L2HminusR(")
                    .and_then(|x| x.strip_suffix(')'))
                    .and_then(|x| x.parse::<f64>().ok())
                    .filter(|r| r.is_finite() && *r >= 0.0)
                    .ok_or_else(|| Error::UnknownNorm(t.to_string()))?;
                NormKind::L2HminusR(r)
            }
        })
    }
}

/// The argument of [`weighted_norm`].
#[derive(Clone, Copy, Debug)]
pub enum FieldRef<'a> {
    SpaceTime(&'a ScalarField),
    Slice(&'a [f64]),
    Boundary(&'a BoundaryField),
}

/// Norm of `weight * field` (pointwise) of the requested kind.
pub fn weighted_norm(grid: &SpaceTimeGrid, field: FieldRef<'_>, weight: Option<&[f64]>, kind: NormKind) -> Result<f64> {
    let scaled = |v: &[f64]| -> Vec<f64> {
        match weight {
            Some(w) => v.iter().zip(w).map(|(a, b)| a * b).collect(),
            None => v.to_vec(),
        }
    };
    if let Some(w) = weight {
        let expected = match field {
            FieldRef::SpaceTime(_) => grid.node_count(),
            FieldRef::Slice(_) => grid.n_space(),
            FieldRef::Boundary(_) => grid.boundary().len() * grid.n_levels(),
        };
        if w.len() != expected {
            return Err(Error::SliceMismatch {
                expected,
                found: w.len(),
            });
        }
    }
    match (field, kind) {
        (FieldRef::SpaceTime(f), NormKind::L2Q | NormKind::LinfL2 | NormKind::LinfHminus1 | NormKind::L2HminusR(_)) => {
            f.check_grid(grid)?;
            let g = ScalarField::from_values(grid, scaled(f.values()))?;
            Ok(match kind {
                NormKind::L2Q => l2q(grid, &g),
                NormKind::LinfL2 => linf_l2(grid, &g),
                NormKind::LinfHminus1 => linf_hminus1(grid, &g),
                NormKind::L2HminusR(r) => l2_hminus_r(grid, &g, r),
                _ => unreachable!(),
            })
        }
        (FieldRef::Slice(u), NormKind::Hminus1Slice | NormKind::H1Slice | NormKind::L2HminusR(_) | NormKind::L2Q) => {
            check_slice(grid, u)?;
            let v = scaled(u);
            Ok(match kind {
                NormKind::Hminus1Slice => slice_hminus1(grid, &v),
                NormKind::H1Slice => slice_h1(grid, &v),
                NormKind::L2HminusR(r) => slice_hminus_r(grid, &v, r),
                _ => slice_l2(grid, &v),
            })
        }
        (FieldRef::Boundary(b), NormKind::L2Sigma) => {
            if b.values().len() != grid.boundary().len() * grid.n_levels() {
                return Err(Error::SliceMismatch {
                    expected: grid.boundary().len() * grid.n_levels(),
                    found: b.values().len(),
                });
            }
            let mut g = b.clone();
            g.values_mut().copy_from_slice(&scaled(b.values()));
            Ok(l2_sigma(grid, &g))
        }
        (_, k) => Err(Error::UnknownNorm(format!("{k:?} is not defined for this field"))),
    }
}

pub fn l2q(grid: &SpaceTimeGrid, f: &ScalarField) -> f64 {
    (0..grid.n_levels())
        .map(|n| grid.time_weight(n) * slice_l2(grid, f.slice(n)).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn linf_l2(grid: &SpaceTimeGrid, f: &ScalarField) -> f64 {
    (0..grid.n_levels())
        .map(|n| slice_l2(grid, f.slice(n)))
        .fold(0.0, f64::max)
}

pub fn linf_hminus1(grid: &SpaceTimeGrid, f: &ScalarField) -> f64 {
    (0..grid.n_levels())
        .map(|n| slice_hminus1(grid, f.slice(n)))
        .fold(0.0, f64::max)
}

pub fn l2_hminus_r(grid: &SpaceTimeGrid, f: &ScalarField, r: f64) -> f64 {
    (0..grid.n_levels())
        .map(|n| grid.time_weight(n) * slice_hminus_r(grid, f.slice(n), r).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `|grad f|_{L2(Q)}`.
pub fn grad_l2q(grid: &SpaceTimeGrid, f: &ScalarField) -> f64 {
    (0..grid.n_levels())
        .map(|n| grid.time_weight(n) * slice_grad2(grid, f.slice(n)))
        .sum::<f64>()
        .sqrt()
}

pub fn l2_sigma(grid: &SpaceTimeGrid, b: &BoundaryField) -> f64 {
    let mut acc = 0.0;
    for n in 0..grid.n_levels() {
        let tw = grid.time_weight(n);
        for (i, node) in grid.boundary().iter().enumerate() {
            acc += tw * node.weight * b.at(n, i).powi(2);
        }
    }
    acc.sqrt()
}

fn csv_header(grid: &SpaceTimeGrid) -> String {
    let [a, b] = grid.npts();
    format!(
        "x_index,t_index,value # space_nodes={a}x{b} time_levels={}",
        grid.n_levels()
    )
}

fn parse_header(line: &str) -> Result<([usize; 2], usize)> {
    let bad = || Error::Csv(format!("bad header '{line}'"));
    let (cols, meta) = line.split_once(" # ").ok_or_else(bad)?;
    if cols.trim() != "x_index,t_index,value" {
        return Err(bad());
    }
    let mut space = None;
    let mut levels = None;
    for tok in meta.split_whitespace() {
        if let Some(v) = tok.strip_prefix("space_nodes=") {
            let (a, b) = v.split_once('x').ok_or_else(bad)?;
            space = Some([a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?]);
        } else if let Some(v) = tok.strip_prefix("time_levels=") {
            levels = Some(v.parse().map_err(|_| bad())?);
        }
    }
    Ok((space.ok_or_else(bad)?, levels.ok_or_else(bad)?))
}

fn write_rows<W: Write>(out: &mut W, rows: impl Iterator<Item = (usize, usize, f64)>) -> std::io::Result<()> {
    for (k, n, v) in rows {
        writeln!(out, "{k},{n},{v:.16e}")?;
    }
    Ok(())
}

/// Writes a space-time field as `x_index,t_index,value` rows with 17 significant digits.
pub fn write_field_csv<W: Write>(grid: &SpaceTimeGrid, f: &ScalarField, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{}", csv_header(grid))?;
    let nsp = grid.n_space();
    write_rows(
        out,
        (0..grid.n_levels()).flat_map(|n| (0..nsp).map(move |k| (k, n, f.at(n, k)))),
    )
}

/// Writes a boundary field; `x_index` is the spatial node id of the boundary node.
pub fn write_boundary_csv<W: Write>(grid: &SpaceTimeGrid, f: &BoundaryField, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{}", csv_header(grid))?;
    let nodes = grid.boundary();
    write_rows(
        out,
        (0..grid.n_levels()).flat_map(|n| nodes.iter().enumerate().map(move |(b, bn)| (bn.node, n, f.at(n, b)))),
    )
}

fn read_rows<R: BufRead>(grid: &SpaceTimeGrid, input: R) -> Result<Vec<(usize, usize, f64)>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Csv("empty file".into()))?
        .map_err(|e| Error::Csv(e.to_string()))?;
    let (space, levels) = parse_header(&header)?;
    if space != grid.npts() {
        return Err(Error::Csv(format!(
            "grid mismatch: file has {space:?} spatial nodes, grid has {:?}",
            grid.npts()
        )));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::Csv(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Csv(format!("line {}: cannot parse '{line}'", lineno + 2));
        let mut it = line.split(',');
        let k: usize = it.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        let n: usize = it.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        let v: f64 = it.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        if k >= grid.n_space() || n >= levels.max(1) || !v.is_finite() {
            return Err(bad());
        }
        rows.push((k, n, v));
    }
    Ok(rows)
}

pub fn read_field_csv<R: BufRead>(grid: &SpaceTimeGrid, input: R) -> Result<ScalarField> {
    let rows = read_rows(grid, input)?;
    if rows.len() != grid.node_count() {
        return Err(Error::SliceMismatch {
            expected: grid.node_count(),
            found: rows.len(),
        });
    }
    let mut f = ScalarField::zeros(grid);
    for (k, n, v) in rows {
        if n >= grid.n_levels() {
            return Err(Error::Csv(format!("time index {n} out of range")));
        }
        f.set(n, k, v);
    }
    Ok(f)
}

pub fn read_boundary_csv<R: BufRead>(grid: &SpaceTimeGrid, input: R) -> Result<BoundaryField> {
    let mut f = BoundaryField::zeros(grid);
    for (k, n, v) in read_rows(grid, input)? {
        let b = grid
            .boundary_pos(k)
            .ok_or_else(|| Error::Csv(format!("node {k} is not a boundary node")))?;
        if n >= grid.n_levels() {
            return Err(Error::Csv(format!("time index {n} out of range")));
        }
        f.set(n, b, v);
    }
    Ok(f)
}

/// Reads a spatial slice (rows with `t_index = 0`); missing nodes are zero.
pub fn read_slice_csv<R: BufRead>(grid: &SpaceTimeGrid, input: R) -> Result<Vec<f64>> {
    let mut u = vec![0.0; grid.n_space()];
    for (k, n, v) in read_rows(grid, input)? {
        if n == 0 {
            u[k] = v;
        }
    }
    Ok(u)
}

pub fn write_slice_csv<W: Write>(grid: &SpaceTimeGrid, u: &[f64], out: &mut W) -> std::io::Result<()> {
    let [a, b] = grid.npts();
    writeln!(out, "x_index,t_index,value # space_nodes={a}x{b} time_levels=1")?;
    write_rows(out, u.iter().enumerate().map(|(k, &v)| (k, 0, v)))
}
