//! Weighted variational construction of boundary controls for the linear
//! wave equation `y_tt - Lap y = B`.
//!
//! The dual unknown `w` lives on interior nodes at every time level, is zero
//! on the lateral boundary and is ordered time-major (`n * n_interior + p`).
//! The discrete form
//!
//! ```text
//! a(w, z) = sum q rho^-2 L_h w L_h z + s sum q_b eta^2 Psi rho^-2 d_nu w d_nu z + eps sum rho^-2 w z
//! ```
//!
//! is built so that `y = rho^-2 L_h w`, `v = s eta^2 Psi rho^-2 d_nu w` solves the
//! leapfrog scheme of [`crate::forward`] with Dirichlet data `v` exactly when
//! `eps = 0`. The normal derivative here is the one-sided trace
//! `(w_b - w_adj) / h`, the transpose of Dirichlet injection.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};

use crate::error::{Error, Result};
use crate::geometry::{eval_weights, CutoffProfile, Normalization, WeightParams};
use crate::mesh::{
    l2q, laplacian, linf_hminus1, linf_l2, slice_grad2_weighted, slice_hminus1, slice_hminus_r, slice_l2,
    time_derivative, BoundaryField, ScalarField, SpaceTimeGrid,
};
use crate::solvers::{pcg, refined_band_solve, BandCholesky, SolveStats, SymBand};

/// Largest admissible `rho^-2` before assembly refuses to run.
pub const MAX_RHO_INV2: f64 = 1e300;

/// Unknown count below which the dense factorization is available.
pub const DENSE_LIMIT: usize = 5000;

/// Size limit of the dense KKT oracle.
pub const KKT_LIMIT: usize = 4000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    /// Banded Cholesky with iterative refinement.
    Banded,
    /// Jacobi-preconditioned conjugate gradients, capped at `50 sqrt(N)` iterations.
    Pcg,
    /// Dense Cholesky, limited to [`DENSE_LIMIT`] unknowns.
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemOptions {
    /// Regularization weight; `None` selects `h * dt`.
    pub eps: Option<f64>,
    /// Constant factor applied to the weight `rho`.
    pub weight_scale: f64,
    pub normalization: Normalization,
    pub solver: SolverKind,
    /// Relative residual required from the linear solve.
    pub tol: f64,
}

impl Default for SystemOptions {
    fn default() -> Self {
        SystemOptions {
            eps: None,
            weight_scale: 1.0,
            normalization: Normalization::Normalized,
            solver: SolverKind::Banded,
            tol: 1e-10,
        }
    }
}

/// Initial data, source and final target of a control problem.
/// Slices have one value per spatial node; boundary entries are forced to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlData {
    pub u0: Vec<f64>,
    pub u1: Vec<f64>,
    pub source: ScalarField,
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
}

impl ControlData {
    pub fn new(grid: &SpaceTimeGrid, u0: Vec<f64>, u1: Vec<f64>) -> Result<Self> {
        let zero = vec![0.0; grid.n_space()];
        Self::with_all(grid, u0, u1, ScalarField::zeros(grid), zero.clone(), zero)
    }

    pub fn zero(grid: &SpaceTimeGrid) -> Self {
        let zero = vec![0.0; grid.n_space()];
        ControlData {
            u0: zero.clone(),
            u1: zero.clone(),
            source: ScalarField::zeros(grid),
            z0: zero.clone(),
            z1: zero,
        }
    }

    pub fn with_all(
        grid: &SpaceTimeGrid,
        u0: Vec<f64>,
        u1: Vec<f64>,
        source: ScalarField,
        z0: Vec<f64>,
        z1: Vec<f64>,
    ) -> Result<Self> {
        source.check_grid(grid)?;
        let mut slices = [u0, u1, z0, z1];
        for u in slices.iter_mut() {
            if u.len() != grid.n_space() {
                return Err(Error::SliceMismatch {
                    expected: grid.n_space(),
                    found: u.len(),
                });
            }
            if let Some(i) = u.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
            for b in grid.boundary() {
                u[b.node] = 0.0;
            }
        }
        let [u0, u1, z0, z1] = slices;
        Ok(ControlData { u0, u1, source, z0, z1 })
    }

    pub fn with_source(mut self, source: ScalarField) -> Self {
        self.source = source;
        self
    }

    /// `|u0|_L2 + |u1|_H^-1`.
    pub fn energy_norm(&self, grid: &SpaceTimeGrid) -> f64 {
        slice_l2(grid, &self.u0) + slice_hminus1(grid, &self.u1)
    }
}

/// Boundary node carrying an observation: index into `grid.boundary()`,
/// interior position of its inward neighbour, normal spacing and surface weight.
#[derive(Clone, Copy, Debug)]
struct Observed {
    b: usize,
    node: usize,
    adj: usize,
    h: f64,
    weight: f64,
}

enum Factor {
    Band(BandCholesky),
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    None,
}

/// The assembled weighted form together with its factorization.
pub struct WeightedSystem<'g> {
    grid: &'g SpaceTimeGrid,
    params: WeightParams,
    profile: CutoffProfile,
    options: SystemOptions,
    eps: f64,
    rho: Vec<f64>,
    rho_inv2: Vec<f64>,
    /// `eta^2 Psi` per level and boundary node.
    cut: Vec<f64>,
    nbrs: Vec<Vec<(usize, f64)>>,
    observed: Vec<Observed>,
    matrix: SymBand,
    factor: Factor,
}

/// The three contributions to `a(w, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FormParts {
    pub interior: f64,
    pub boundary: f64,
    pub regularization: f64,
}

impl FormParts {
    pub fn total(&self) -> f64 {
        self.interior + self.boundary + self.regularization
    }
}

#[derive(Clone, Debug)]
pub struct DualSolution {
    pub w: ScalarField,
    pub stats: SolveStats,
}

/// Controlled trajectory, boundary control and dual state.
#[derive(Clone, Debug)]
pub struct StateControlPair {
    pub y: ScalarField,
    pub v: BoundaryField,
    pub w: ScalarField,
    /// Discrete `y_t(T)`.
    pub final_velocity: Vec<f64>,
    /// `|y(T) - z0|_L2 + |y_t(T) - z1|_H^-1`.
    pub final_residual: f64,
    pub stats: SolveStats,
}

impl<'g> WeightedSystem<'g> {
    pub fn assemble(
        grid: &'g SpaceTimeGrid,
        params: &WeightParams,
        profile: &CutoffProfile,
        options: SystemOptions,
    ) -> Result<Self> {
        let weights = eval_weights(grid, params, options.normalization)?;
        let rho = weights.rho.iter().map(|r| r * options.weight_scale).collect();
        Self::from_parts(grid, params.clone(), profile.clone(), rho, options)
    }

    /// Builds the system from an explicit nodal weight `rho`; `params.s`
    /// multiplies the observation term.
    pub fn from_parts(
        grid: &'g SpaceTimeGrid,
        params: WeightParams,
        profile: CutoffProfile,
        rho: Vec<f64>,
        options: SystemOptions,
    ) -> Result<Self> {
        if rho.len() != grid.node_count() {
            return Err(Error::SliceMismatch {
                expected: grid.node_count(),
                found: rho.len(),
            });
        }
        let rho_inv2: Vec<f64> = rho.iter().map(|r| 1.0 / (r * r)).collect();
        let worst = rho_inv2
            .iter()
            .fold(0.0_f64, |m, &v| if v.is_finite() { m.max(v) } else { f64::INFINITY });
        if !(worst <= MAX_RHO_INV2) || rho.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::OverflowRisk(worst));
        }
        let eps = options.eps.unwrap_or_else(|| grid.h_max() * grid.dt());
        let mut cut = vec![0.0; grid.boundary().len() * grid.n_levels()];
        let nb = grid.boundary().len();
        for n in 0..grid.n_levels() {
            let eta = profile.eta(grid.time(n));
            for (b, node) in grid.boundary().iter().enumerate() {
                if let Some(face) = node.face {
                    cut[n * nb + b] = eta * eta * profile.psi_cut(node.point, face);
                }
            }
        }
        let nbrs = grid
            .interior()
            .iter()
            .map(|&k| {
                grid.neighbours(k)
                    .filter_map(|(m, c)| grid.interior_pos(m).map(|q| (q, c)))
                    .collect()
            })
            .collect();
        let observed = grid
            .boundary()
            .iter()
            .enumerate()
            .filter_map(|(b, node)| {
                let adj = grid.interior_pos(node.adj?)?;
                Some(Observed {
                    b,
                    node: node.node,
                    adj,
                    h: node.h_normal,
                    weight: node.weight,
                })
            })
            .collect();
        let ni = grid.interior().len();
        let mut sys = WeightedSystem {
            grid,
            params,
            profile,
            options,
            eps,
            rho,
            rho_inv2,
            cut,
            nbrs,
            observed,
            matrix: SymBand::zeros(ni * grid.n_levels(), 2 * ni),
            factor: Factor::None,
        };
        sys.assemble_band();
        sys.factor = match sys.options.solver {
            SolverKind::Banded => Factor::Band(sys.matrix.clone().cholesky()?),
            SolverKind::Dense => {
                let n = sys.n_dofs();
                if n > DENSE_LIMIT {
                    return Err(Error::TooLarge(n));
                }
                let dense = sys.dense_matrix();
                Factor::Dense(dense.cholesky().ok_or(Error::NotPositiveDefinite {
                    pivot: 0,
                    value: f64::NAN,
                })?)
            }
            SolverKind::Pcg => Factor::None,
        };
        Ok(sys)
    }

    pub fn grid(&self) -> &'g SpaceTimeGrid {
        self.grid
    }
    pub fn params(&self) -> &WeightParams {
        &self.params
    }
    pub fn profile(&self) -> &CutoffProfile {
        &self.profile
    }
    pub fn options(&self) -> &SystemOptions {
        &self.options
    }
    pub fn s(&self) -> f64 {
        self.params.s
    }
    pub fn eps(&self) -> f64 {
        self.eps
    }
    /// The weight used by the solve (possibly normalized and rescaled).
    pub fn rho(&self) -> &[f64] {
        &self.rho
    }
    pub fn rho_inv2(&self) -> &[f64] {
        &self.rho_inv2
    }
    /// `eta^2 Psi` at level `n` and boundary index `b`.
    pub fn cutoff(&self, n: usize, b: usize) -> f64 {
        self.cut[n * self.grid.boundary().len() + b]
    }
    pub fn n_dofs(&self) -> usize {
        self.grid.interior().len() * self.grid.n_levels()
    }
    pub fn matrix(&self) -> &SymBand {
        &self.matrix
    }

    /// `exp(-s phi)` without normalization or rescaling.
    pub fn raw_rho(&self) -> Vec<f64> {
        (0..self.grid.node_count())
            .map(|node| {
                let (x, t) = self.grid.coords(node);
                self.params.rho_raw(x, t)
            })
            .collect()
    }

    fn ni(&self) -> usize {
        self.grid.interior().len()
    }

    /// Entries of the row of `L_h` at level `n` and interior position `p`.
    fn l_row(&self, n: usize, p: usize, row: &mut Vec<(usize, f64)>) {
        let ni = self.ni();
        let idt2 = 1.0 / (self.grid.dt() * self.grid.dt());
        row.clear();
        row.push(((n - 1) * ni + p, idt2));
        row.push((n * ni + p, -2.0 * idt2 + self.grid.lap_diag()));
        row.push(((n + 1) * ni + p, idt2));
        for &(q, c) in &self.nbrs[p] {
            row.push((n * ni + q, -c));
        }
    }

    fn interior_weight(&self, n: usize, p: usize) -> f64 {
        let k = self.grid.interior()[p];
        self.grid.space_weight(k) * self.grid.dt() * self.rho_inv2[self.grid.index(n, k)]
    }

    fn observation_weight(&self, n: usize, o: &Observed) -> f64 {
        o.weight * self.grid.dt() * self.params.s * self.cutoff(n, o.b) * self.rho_inv2[self.grid.index(n, o.node)]
    }

    fn regularization_weight(&self, n: usize, p: usize) -> f64 {
        let k = self.grid.interior()[p];
        self.eps * self.grid.space_weight(k) * self.grid.time_weight(n) * self.rho_inv2[self.grid.index(n, k)]
    }

    fn assemble_band(&mut self) {
        let ni = self.ni();
        let nt = self.grid.nt();
        let mut row = Vec::with_capacity(8);
        let mut matrix = std::mem::replace(&mut self.matrix, SymBand::zeros(0, 0));
        for n in 1..nt {
            for p in 0..ni {
                self.l_row(n, p, &mut row);
                let wgt = self.interior_weight(n, p);
                for &(i, ci) in &row {
                    for &(j, cj) in &row {
                        if j <= i {
                            matrix.add(i, j, wgt * ci * cj);
                        }
                    }
                }
            }
            for o in &self.observed {
                let wgt = self.observation_weight(n, o);
                if wgt != 0.0 {
                    let i = n * ni + o.adj;
                    matrix.add(i, i, wgt / (o.h * o.h));
                }
            }
        }
        for n in 0..=nt {
            for p in 0..ni {
                let i = n * ni + p;
                matrix.add(i, i, self.regularization_weight(n, p));
            }
        }
        self.matrix = matrix;
    }

    fn dense_matrix(&self) -> DMatrix<f64> {
        let n = self.n_dofs();
        let bw = self.matrix.bandwidth();
        DMatrix::from_fn(n, n, |i, j| {
            if i.abs_diff(j) <= bw {
                self.matrix.get(i, j)
            } else {
                0.0
            }
        })
    }

    /// `L_h w` on levels `1..nt-1` in dof layout (levels 0 and `nt` left zero).
    fn apply_l(&self, w: &[f64], out: &mut [f64]) {
        let ni = self.ni();
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut row = Vec::with_capacity(8);
        for n in 1..self.grid.nt() {
            for p in 0..ni {
                self.l_row(n, p, &mut row);
                out[n * ni + p] = row.iter().map(|&(j, c)| c * w[j]).sum();
            }
        }
    }

    fn apply_lt(&self, y: &[f64], out: &mut [f64]) {
        let ni = self.ni();
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut row = Vec::with_capacity(8);
        for n in 1..self.grid.nt() {
            for p in 0..ni {
                self.l_row(n, p, &mut row);
                let yi = y[n * ni + p];
                for &(j, c) in &row {
                    out[j] += c * yi;
                }
            }
        }
    }

    /// Matrix-free application of the form.
    pub fn apply(&self, w: &[f64], out: &mut [f64]) {
        let ni = self.ni();
        let mut lw = vec![0.0; w.len()];
        self.apply_l(w, &mut lw);
        for n in 1..self.grid.nt() {
            for p in 0..ni {
                lw[n * ni + p] *= self.interior_weight(n, p);
            }
        }
        self.apply_lt(&lw, out);
        for n in 1..self.grid.nt() {
            for o in &self.observed {
                let i = n * ni + o.adj;
                out[i] += self.observation_weight(n, o) * w[i] / (o.h * o.h);
            }
        }
        for n in 0..self.grid.n_levels() {
            for p in 0..ni {
                let i = n * ni + p;
                out[i] += self.regularization_weight(n, p) * w[i];
            }
        }
    }

    /// Interior values of a space-time field in dof layout.
    pub fn to_dofs(&self, f: &ScalarField) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_dofs());
        for n in 0..self.grid.n_levels() {
            out.extend(self.grid.interior().iter().map(|&k| f.at(n, k)));
        }
        out
    }

    pub fn from_dofs(&self, w: &[f64]) -> ScalarField {
        let ni = self.ni();
        let mut f = ScalarField::zeros(self.grid);
        for n in 0..self.grid.n_levels() {
            for (p, &k) in self.grid.interior().iter().enumerate() {
                f.set(n, k, w[n * ni + p]);
            }
        }
        f
    }

    /// The separate terms of `a(w, z)`; boundary values of `w`, `z` are ignored.
    pub fn form_parts(&self, w: &ScalarField, z: &ScalarField) -> FormParts {
        let (wd, zd) = (self.to_dofs(w), self.to_dofs(z));
        let ni = self.ni();
        let mut lw = vec![0.0; wd.len()];
        let mut lz = vec![0.0; wd.len()];
        self.apply_l(&wd, &mut lw);
        self.apply_l(&zd, &mut lz);
        let mut parts = FormParts {
            interior: 0.0,
            boundary: 0.0,
            regularization: 0.0,
        };
        for n in 1..self.grid.nt() {
            for p in 0..ni {
                let i = n * ni + p;
                parts.interior += self.interior_weight(n, p) * lw[i] * lz[i];
            }
            for o in &self.observed {
                let i = n * ni + o.adj;
                parts.boundary += self.observation_weight(n, o) * wd[i] * zd[i] / (o.h * o.h);
            }
        }
        for n in 0..self.grid.n_levels() {
            for p in 0..ni {
                let i = n * ni + p;
                parts.regularization += self.regularization_weight(n, p) * wd[i] * zd[i];
            }
        }
        parts
    }

    /// The linear form of the data, one entry per dual unknown.
    pub fn rhs(&self, data: &ControlData) -> Vec<f64> {
        let g = self.grid;
        let (ni, nt, dt) = (self.ni(), g.nt(), g.dt());
        let b = &data.source;
        let lap_u0 = laplacian(g, &data.u0);
        let lap_z0 = laplacian(g, &data.z0);
        let mut out = vec![0.0; self.n_dofs()];
        for (p, &k) in g.interior().iter().enumerate() {
            let om = g.space_weight(k);
            out[p] = om * (data.u1[k] + data.u0[k] / dt + 0.5 * dt * (lap_u0[k] + b.at(0, k)));
            out[ni + p] = om * (-data.u0[k] / dt + dt * b.at(1, k));
            for n in 2..nt - 1 {
                out[n * ni + p] = om * dt * b.at(n, k);
            }
            out[(nt - 1) * ni + p] += om * (dt * b.at(nt - 1, k) - data.z0[k] / dt);
            out[nt * ni + p] = om * (0.5 * dt * (b.at(nt, k) + lap_z0[k]) + data.z0[k] / dt - data.z1[k]);
        }
        out
    }

    pub fn solve_dual(&self, data: &ControlData) -> Result<DualSolution> {
        let rhs = self.rhs(data);
        let tol = self.options.tol;
        let (x, stats) = match &self.factor {
            Factor::Band(f) => refined_band_solve(&self.matrix, f, &rhs, 0.1 * tol, 4),
            Factor::Dense(c) => {
                let x = c.solve(&DVector::from_column_slice(&rhs));
                let x: Vec<f64> = x.iter().copied().collect();
                let rel = self.relative_residual(&x, &rhs);
                (
                    x,
                    SolveStats {
                        iterations: 0,
                        relative_residual: rel,
                    },
                )
            }
            Factor::None => {
                let cap = 50 * (self.n_dofs() as f64).sqrt().ceil() as usize;
                pcg(|p, q| self.apply(p, q), &self.matrix.diagonal(), &rhs, tol, cap)?
            }
        };
        if !(stats.relative_residual <= tol) {
            return Err(Error::SolverStagnation {
                iterations: stats.iterations,
                residual: stats.relative_residual,
            });
        }
        Ok(DualSolution {
            w: self.from_dofs(&x),
            stats,
        })
    }

    fn relative_residual(&self, x: &[f64], rhs: &[f64]) -> f64 {
        let bn = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if bn == 0.0 {
            return 0.0;
        }
        let mut r = vec![0.0; x.len()];
        self.matrix.matvec(x, &mut r);
        r.iter().zip(rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / bn
    }

    /// `v = s eta^2 Psi rho^-2 d_nu w` on every boundary node (zero at levels 0, `nt` and corners).
    pub fn control_from_dual(&self, w: &ScalarField) -> BoundaryField {
        let mut v = BoundaryField::zeros(self.grid);
        for n in 1..self.grid.nt() {
            for o in &self.observed {
                let c = self.cutoff(n, o.b);
                if c == 0.0 {
                    continue;
                }
                let dnu = -w.at(n, self.grid.interior()[o.adj]) / o.h;
                let val = self.params.s * c * self.rho_inv2[self.grid.index(n, o.node)] * dnu;
                v.set(n, o.b, val);
            }
        }
        v
    }

    pub fn extract_pair(&self, dual: &DualSolution, data: &ControlData) -> StateControlPair {
        let g = self.grid;
        let (nt, dt) = (g.nt(), g.dt());
        let w = &dual.w;
        let wd = self.to_dofs(w);
        let mut lw = vec![0.0; wd.len()];
        self.apply_l(&wd, &mut lw);
        let v = self.control_from_dual(w);
        let mut y = ScalarField::zeros(g);
        y.slice_mut(0).copy_from_slice(&data.u0);
        let ni = self.ni();
        for n in 1..nt {
            for (p, &k) in g.interior().iter().enumerate() {
                y.set(n, k, self.rho_inv2[g.index(n, k)] * lw[n * ni + p]);
            }
            for (b, node) in g.boundary().iter().enumerate() {
                y.set(n, node.node, v.at(n, b));
            }
        }
        // one more leapfrog step gives y(T)
        let lap = laplacian(g, y.slice(nt - 1));
        for &k in g.interior() {
            let next = 2.0 * y.at(nt - 1, k) - y.at(nt - 2, k) + dt * dt * (lap[k] + data.source.at(nt - 1, k));
            y.set(nt, k, next);
        }
        let final_velocity = terminal_velocity(g, &y, &data.source);
        let final_residual = final_mismatch(g, y.slice(nt), &final_velocity, data);
        StateControlPair {
            y,
            v,
            w: w.clone(),
            final_velocity,
            final_residual,
            stats: dual.stats.clone(),
        }
    }

    /// `solve_dual` followed by `extract_pair`.
    pub fn solve(&self, data: &ControlData) -> Result<StateControlPair> {
        let dual = self.solve_dual(data)?;
        Ok(self.extract_pair(&dual, data))
    }
}

/// Second-order `y_t(T)` of a leapfrog trajectory, interior nodes only.
pub fn terminal_velocity(grid: &SpaceTimeGrid, y: &ScalarField, source: &ScalarField) -> Vec<f64> {
    let (nt, dt) = (grid.nt(), grid.dt());
    let lap = laplacian(grid, y.slice(nt));
    let mut out = vec![0.0; grid.n_space()];
    for &k in grid.interior() {
        out[k] = (y.at(nt, k) - y.at(nt - 1, k)) / dt + 0.5 * dt * (lap[k] + source.at(nt, k));
    }
    out
}

/// `|y(T) - z0|_L2 + |y_t(T) - z1|_H^-1`.
pub fn final_mismatch(grid: &SpaceTimeGrid, y_final: &[f64], yt_final: &[f64], data: &ControlData) -> f64 {
    let d0: Vec<f64> = y_final.iter().zip(&data.z0).map(|(a, b)| a - b).collect();
    let d1: Vec<f64> = yt_final.iter().zip(&data.z1).map(|(a, b)| a - b).collect();
    slice_l2(grid, &d0) + slice_hminus1(grid, &d1)
}

/// Outcome of the dense KKT comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalityReport {
    /// Relative L2 distance between the variational pair and the KKT minimizer.
    pub discrepancy: f64,
    /// Same comparison against the unregularized KKT system, when it is nonsingular.
    pub unregularized: std::result::Result<f64, Error>,
    pub kkt_size: usize,
}

struct KktLayout {
    /// (level, interior position) of each state unknown.
    y: Vec<(usize, usize)>,
    /// (level, observed index) of each control unknown with `eta^2 Psi > 0`.
    v: Vec<(usize, usize)>,
}

impl WeightedSystem<'_> {
    fn kkt_layout(&self) -> KktLayout {
        let nt = self.grid.nt();
        let mut y = Vec::new();
        let mut v = Vec::new();
        for n in 1..nt {
            for p in 0..self.ni() {
                y.push((n, p));
            }
            for (j, o) in self.observed.iter().enumerate() {
                if self.cutoff(n, o.b) > 0.0 {
                    v.push((n, j));
                }
            }
        }
        KktLayout { y, v }
    }

    /// Solves `min 1/2 x^T M x` subject to the discrete dynamics `K x = l`
    /// (relaxed by `eps D` when `regularized`) by dense LU.
    fn kkt_solve(&self, data: &ControlData, regularized: bool) -> Result<(KktLayout, Vec<f64>, usize)> {
        let lay = self.kkt_layout();
        let (nyd, nvd, nw) = (lay.y.len(), lay.v.len(), self.n_dofs());
        let nx = nyd + nvd;
        let size = nx + nw;
        if size > KKT_LIMIT {
            return Err(Error::TooLarge(size));
        }
        let g = self.grid;
        let ni = self.ni();
        let rho2 = |n: usize, k: usize| 1.0 / self.rho_inv2[g.index(n, k)];
        let mut kkt = DMatrix::<f64>::zeros(size, size);
        let mut row = Vec::with_capacity(8);
        for (i, &(n, p)) in lay.y.iter().enumerate() {
            let k = g.interior()[p];
            let q = g.space_weight(k) * g.dt();
            kkt[(i, i)] = q * rho2(n, k);
            self.l_row(n, p, &mut row);
            for &(j, c) in &row {
                kkt[(nx + j, i)] += q * c;
                kkt[(i, nx + j)] += q * c;
            }
        }
        for (i, &(n, jo)) in lay.v.iter().enumerate() {
            let o = &self.observed[jo];
            let qb = o.weight * g.dt();
            let c = self.cutoff(n, o.b);
            let ii = nyd + i;
            kkt[(ii, ii)] = qb * rho2(n, o.node) / (self.params.s * c);
            let j = n * ni + o.adj;
            kkt[(nx + j, ii)] = -qb / o.h;
            kkt[(ii, nx + j)] = -qb / o.h;
        }
        if regularized {
            for n in 0..g.n_levels() {
                for p in 0..ni {
                    let j = nx + n * ni + p;
                    kkt[(j, j)] = -self.regularization_weight(n, p);
                }
            }
        }
        let mut rhs = DVector::<f64>::zeros(size);
        for (j, v) in self.rhs(data).into_iter().enumerate() {
            rhs[nx + j] = v;
        }
        let lu = kkt.lu();
        let u = lu.u();
        let diag: Vec<f64> = (0..size).map(|i| u[(i, i)].abs()).collect();
        let dmax = diag.iter().copied().fold(0.0, f64::max);
        let dmin = diag.iter().copied().fold(f64::INFINITY, f64::min);
        if !(dmin > 1e-13 * dmax) {
            return Err(Error::SingularKkt);
        }
        let sol = lu.solve(&rhs).ok_or(Error::SingularKkt)?;
        Ok((lay, sol.as_slice()[..nx].to_vec(), size))
    }

    fn pair_discrepancy(&self, lay: &KktLayout, x: &[f64], pair: &StateControlPair) -> f64 {
        let g = self.grid;
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (i, &(n, p)) in lay.y.iter().enumerate() {
            let k = g.interior()[p];
            let q = g.space_weight(k) * g.dt();
            diff += q * (pair.y.at(n, k) - x[i]).powi(2);
            norm += q * x[i] * x[i];
        }
        for (i, &(n, jo)) in lay.v.iter().enumerate() {
            let o = &self.observed[jo];
            let q = o.weight * g.dt();
            let xv = x[lay.y.len() + i];
            diff += q * (pair.v.at(n, o.b) - xv).powi(2);
            norm += q * xv * xv;
        }
        if norm == 0.0 {
            diff.sqrt()
        } else {
            (diff / norm).sqrt()
        }
    }

    /// Compares `pair` with the minimizer of the discrete weighted cost over
    /// trajectories of the leapfrog scheme.
    pub fn optimality_check(&self, pair: &StateControlPair, data: &ControlData) -> Result<OptimalityReport> {
        let (lay, x, size) = self.kkt_solve(data, true)?;
        let discrepancy = self.pair_discrepancy(&lay, &x, pair);
        let unregularized = self
            .kkt_solve(data, false)
            .map(|(lay, x, _)| self.pair_discrepancy(&lay, &x, pair));
        Ok(OptimalityReport {
            discrepancy,
            unregularized,
            kkt_size: size,
        })
    }

    /// Penalized cost `1/2 |x|_M^2 + 1/(2 eps) |K x - l|^2_{D^-1}` minimized by the pair.
    /// `y` enters on interior nodes of levels `1..nt-1`, `v` on observed nodes.
    /// Infinite when `v` is nonzero where `eta^2 Psi` vanishes.
    pub fn penalized_objective(&self, y: &ScalarField, v: &BoundaryField, data: &ControlData) -> f64 {
        let g = self.grid;
        let ni = self.ni();
        let mut cost = 0.0;
        let mut qy = vec![0.0; self.n_dofs()];
        for n in 1..g.nt() {
            for (p, &k) in g.interior().iter().enumerate() {
                let q = g.space_weight(k) * g.dt();
                let val = y.at(n, k);
                cost += 0.5 * q * val * val / self.rho_inv2[g.index(n, k)];
                qy[n * ni + p] = q * val;
            }
        }
        let mut kx = vec![0.0; self.n_dofs()];
        self.apply_lt(&qy, &mut kx);
        for n in 1..g.nt() {
            for o in &self.observed {
                let val = v.at(n, o.b);
                if val == 0.0 {
                    continue;
                }
                let c = self.cutoff(n, o.b);
                if c == 0.0 {
                    return f64::INFINITY;
                }
                let qb = o.weight * g.dt();
                cost += 0.5 * qb * val * val / (self.rho_inv2[g.index(n, o.node)] * self.params.s * c);
                kx[n * ni + o.adj] -= qb * val / o.h;
            }
        }
        let rhs = self.rhs(data);
        for n in 0..g.n_levels() {
            for p in 0..ni {
                let i = n * ni + p;
                let r = kx[i] - rhs[i];
                cost += 0.5 * r * r / self.regularization_weight(n, p);
            }
        }
        cost
    }
}

/// Both sides of the weighted observability inequality for one dual field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CarlemanTerms {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

impl WeightedSystem<'_> {
    /// `lhs / rhs` where `lhs` collects the weighted energy of `w` over `Q` and
    /// at `t = 0` and `rhs` is the form without regularization. Only interior
    /// values of `w` are used; `w = 0` gives ratio 0.
    pub fn carleman_ratio(&self, w: &ScalarField) -> Result<CarlemanTerms> {
        let g = self.grid;
        let s = self.params.s;
        let mut wf = ScalarField::zeros(g);
        for n in 0..g.n_levels() {
            for &k in g.interior() {
                wf.set(n, k, w.at(n, k));
            }
        }
        if wf.max_abs() == 0.0 {
            return Ok(CarlemanTerms {
                lhs: 0.0,
                rhs: 0.0,
                ratio: 0.0,
            });
        }
        let wt = time_derivative(&wf, g);
        let nsp = g.n_space();
        let slice_terms = |n: usize| {
            let r2 = &self.rho_inv2[n * nsp..(n + 1) * nsp];
            let mut kin = 0.0;
            let mut mass = 0.0;
            for (k, &r) in r2.iter().enumerate() {
                kin += g.space_weight(k) * r * wt.at(n, k).powi(2);
                mass += g.space_weight(k) * r * wf.at(n, k).powi(2);
            }
            let grad = slice_grad2_weighted(g, wf.slice(n), Some(r2));
            (kin + grad, mass)
        };
        let mut lhs = 0.0;
        for n in 0..g.n_levels() {
            let (energy, mass) = slice_terms(n);
            lhs += g.time_weight(n) * (s * energy + s.powi(3) * mass);
        }
        let (e0, m0) = slice_terms(0);
        lhs += s * e0 + s.powi(3) * m0;
        let parts = self.form_parts(&wf, &wf);
        let rhs = parts.interior + parts.boundary;
        if rhs == 0.0 {
            return Err(Error::DivisionByZero);
        }
        Ok(CarlemanTerms {
            lhs,
            rhs,
            ratio: lhs / rhs,
        })
    }
}

/// Centre, spatial widths, time centre, time width and amplitude.
type Bump = ([f64; 2], [f64; 2], f64, f64, f64);

/// A smooth random field vanishing on the lateral boundary: one to three
/// Gaussian space-time bumps (widths between 5% and 15% of the domain size
/// and of `T`) times a bubble function in space.
pub fn random_dual_sample<R: Rng + ?Sized>(grid: &SpaceTimeGrid, rng: &mut R) -> ScalarField {
    let dim = grid.dim();
    let lo = grid.domain().lower();
    let len = grid.domain().lengths();
    let t_final = grid.t_final();
    let count = rng.random_range(1..=3usize);
    let bumps: Vec<Bump> = (0..count)
        .map(|_| {
            let mut c = [0.0; 2];
            let mut sig = [1.0; 2];
            for a in 0..dim {
                c[a] = lo[a] + len[a] * rng.random_range(0.0..1.0);
                sig[a] = len[a] * rng.random_range(0.05..0.15);
            }
            let tc = t_final * rng.random_range(0.0..1.0);
            let st = t_final * rng.random_range(0.05..0.15);
            let amp = rng.random_range(-1.0..1.0);
            (c, sig, tc, st, amp)
        })
        .collect();
    let mut f = ScalarField::from_fn(grid, |x, t| {
        let mut env = 1.0;
        for a in 0..dim {
            let u = (x[a] - lo[a]) / len[a];
            env *= 4.0 * u * (1.0 - u);
        }
        let mut val = 0.0;
        for (c, sig, tc, st, amp) in &bumps {
            let mut e = ((t - tc) / st).powi(2);
            for a in 0..dim {
                e += ((x[a] - c[a]) / sig[a]).powi(2);
            }
            val += amp * (-0.5 * e).exp();
        }
        env * val
    });
    for n in 0..grid.n_levels() {
        for b in grid.boundary() {
            f.set(n, b.node, 0.0);
        }
    }
    f
}

/// One row of the estimate table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub s: f64,
    pub r: f64,
}

fn ratio_or_zero(lhs: f64, rhs: f64) -> f64 {
    if rhs == 0.0 {
        0.0
    } else {
        lhs / rhs
    }
}

impl WeightedSystem<'_> {
    /// `H^1/2` norm of a boundary slice: the endpoint values on an interval,
    /// `L2` plus the Gagliardo double sum on a rectangle.
    fn boundary_half_norm(&self, vals: &[f64]) -> f64 {
        let g = self.grid;
        let nodes = g.boundary();
        if g.dim() == 1 {
            return vals.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let weight = |i: usize| {
            let n = &nodes[i];
            if n.face.is_some() {
                n.weight
            } else {
                0.5 * (g.h()[0] + g.h()[1]) * 0.5
            }
        };
        let mut l2 = 0.0;
        let mut semi = 0.0;
        for i in 0..nodes.len() {
            l2 += weight(i) * vals[i] * vals[i];
            for j in 0..nodes.len() {
                if i == j {
                    continue;
                }
                let d2 =
                    (nodes[i].point[0] - nodes[j].point[0]).powi(2) + (nodes[i].point[1] - nodes[j].point[1]).powi(2);
                semi += weight(i) * weight(j) * (vals[i] - vals[j]).powi(2) / d2;
            }
        }
        (l2 + semi).sqrt()
    }

    /// Left and right sides of the weighted a priori estimates satisfied by the
    /// pair, for source regularity index `p` (the source is measured in
    /// `H^{-r}`, `r = 3/2 - p` clipped to `[0, 1]`). The first row of each
    /// group is the full inequality, the following rows its left-hand terms.
    pub fn estimate_report(&self, pair: &StateControlPair, data: &ControlData, p: f64) -> Vec<ReportRow> {
        let g = self.grid;
        let s = self.params.s;
        let r = (1.5 - p).clamp(0.0, 1.0);
        let nsp = g.n_space();
        let nb = g.boundary().len();
        let rho0 = &self.rho[..nsp];
        let ry = pair.y.weighted(&self.rho);
        let ryt = time_derivative(&ry, g);
        let weighted_slice = |u: &[f64]| -> Vec<f64> { u.iter().zip(rho0).map(|(a, b)| a * b).collect() };

        let rb = data.source.weighted(&self.rho);
        let rb_neg = (0..g.n_levels())
            .map(|n| g.time_weight(n) * slice_hminus_r(g, rb.slice(n), r).powi(2))
            .sum::<f64>()
            .sqrt();
        let ru0 = weighted_slice(&data.u0);
        let ru1 = weighted_slice(&data.u1);
        let rz0 = weighted_slice(&data.z0);
        let rz1 = weighted_slice(&data.z1);

        // rho v and rho v / (eta Psi^1/2) on the boundary
        let mut rv = BoundaryField::zeros(g);
        let mut rv_cut = BoundaryField::zeros(g);
        for n in 0..g.n_levels() {
            for (b, node) in g.boundary().iter().enumerate() {
                let val = self.rho[g.index(n, node.node)] * pair.v.at(n, b);
                rv.set(n, b, val);
                let c = self.cutoff(n, b);
                if c > 0.0 {
                    rv_cut.set(n, b, val / c.sqrt());
                }
            }
        }
        let sigma_l2 = |f: &BoundaryField| crate::mesh::l2_sigma(g, f);

        let frac_terms = [
            ("control.rho_y_L2Q", l2q(g, &ry)),
            ("control.rho_v_L2Sigma", s.powf(-0.5) * sigma_l2(&rv_cut)),
            ("control.rho_y_LinfL2", s.powi(-2) * linf_l2(g, &ry)),
            ("control.rho_y_t_LinfHminus1", s.powi(-2) * linf_hminus1(g, &ryt)),
        ];
        let frac_rhs = s.powf(r - 1.5) * rb_neg
            + s.powf(-0.5) * (slice_l2(g, &ru0) + slice_hminus1(g, &ru1) + slice_l2(g, &rz0) + slice_hminus1(g, &rz1));

        // time derivative of rho v divided by eta Psi^1/2
        let mut rvt_cut = BoundaryField::zeros(g);
        let (nt, dt) = (g.nt(), g.dt());
        for n in 0..=nt {
            for b in 0..nb {
                let c = self.cutoff(n, b);
                if c == 0.0 {
                    continue;
                }
                let d = if n == 0 {
                    (rv.at(1, b) - rv.at(0, b)) / dt
                } else if n == nt {
                    (rv.at(nt, b) - rv.at(nt - 1, b)) / dt
                } else {
                    (rv.at(n + 1, b) - rv.at(n - 1, b)) / (2.0 * dt)
                };
                rvt_cut.set(n, b, d / c.sqrt());
            }
        }
        let half = (0..g.n_levels())
            .map(|n| self.boundary_half_norm(&rv.values()[n * nb..(n + 1) * nb]))
            .fold(0.0, f64::max);
        let c0_h1 = (0..g.n_levels())
            .map(|n| crate::mesh::slice_h1(g, ry.slice(n)))
            .fold(0.0, f64::max);
        let regular_terms = [
            ("regular.rho_y_t_L2Q", l2q(g, &ryt)),
            ("regular.rho_v_t_L2Sigma", s.powf(-0.5) * sigma_l2(&rvt_cut)),
            ("regular.grad_rho_y_L2Q", s.powi(-1) * crate::mesh::grad_l2q(g, &ry)),
            ("regular.rho_v_LinfH12", s.powf(-1.5) * half),
            (
                "regular.rho_y_C0H1_plus_t_C0L2",
                s.powi(-2) * (c0_h1 + linf_l2(g, &ryt)),
            ),
        ];
        let grad_u0 = slice_grad2_weighted(g, &data.u0, Some(&rho0.iter().map(|r| r * r).collect::<Vec<_>>())).sqrt();
        let regular_rhs = s.powf(-0.5) * (l2q(g, &rb) + slice_l2(g, &ru1) + s * slice_l2(g, &ru0) + grad_u0);

        let mut rows = Vec::new();
        let mut push_group = |name: &str, terms: &[(&str, f64)], rhs: f64, r: f64| {
            let lhs: f64 = terms.iter().map(|t| t.1).sum();
            rows.push(ReportRow {
                name: name.to_string(),
                lhs,
                rhs,
                ratio: ratio_or_zero(lhs, rhs),
                s,
                r,
            });
            for &(n, v) in terms {
                rows.push(ReportRow {
                    name: n.to_string(),
                    lhs: v,
                    rhs,
                    ratio: ratio_or_zero(v, rhs),
                    s,
                    r,
                });
            }
        };
        push_group("control_estimate", &frac_terms, frac_rhs, r);
        push_group("regular_estimate", &regular_terms, regular_rhs, 0.0);
        rows
    }
}
