//! Explicit leapfrog solver for `y_tt - Lap y + f(y) = B` with Dirichlet data.

use crate::error::{Error, Result};
use crate::linear::{ControlData, StateControlPair};
use crate::mesh::{l2q, laplacian, slice_hminus1, slice_l2, BoundaryField, ScalarField, SpaceTimeGrid};

/// Largest CFL number accepted by [`solve_forward`].
pub const MAX_CFL: f64 = 0.95;

/// Node magnitude treated as blow-up.
pub const BLOWUP: f64 = 1e12;

pub type Nonlin<'a> = &'a (dyn Fn(f64) -> f64 + Sync);

#[derive(Clone, Copy)]
pub struct ForwardProblem<'a> {
    pub grid: &'a SpaceTimeGrid,
    pub u0: &'a [f64],
    pub u1: &'a [f64],
    pub source: Option<&'a ScalarField>,
    /// Dirichlet values; zero when absent.
    pub control: Option<&'a BoundaryField>,
    pub nonlinearity: Option<Nonlin<'a>>,
}

impl<'a> ForwardProblem<'a> {
    pub fn free(grid: &'a SpaceTimeGrid, u0: &'a [f64], u1: &'a [f64]) -> Self {
        ForwardProblem {
            grid,
            u0,
            u1,
            source: None,
            control: None,
            nonlinearity: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardSolution {
    pub y: ScalarField,
    pub final_velocity: Vec<f64>,
}

impl ForwardSolution {
    pub fn final_position(&self) -> &[f64] {
        self.y.slice(self.y.n_levels() - 1)
    }
}

pub fn solve_forward(problem: &ForwardProblem) -> Result<ForwardSolution> {
    let g = problem.grid;
    let cfl = g.cfl();
    if cfl > MAX_CFL {
        return Err(Error::CflViolation { cfl });
    }
    for u in [problem.u0, problem.u1] {
        if u.len() != g.n_space() {
            return Err(Error::SliceMismatch {
                expected: g.n_space(),
                found: u.len(),
            });
        }
    }
    if let Some(b) = problem.source {
        b.check_grid(g)?;
    }
    let (nt, dt) = (g.nt(), g.dt());
    let dt2 = dt * dt;
    let f = |r: f64| problem.nonlinearity.map_or(0.0, |f| f(r));
    let src = |n: usize, k: usize| problem.source.map_or(0.0, |b| b.at(n, k));
    let bc = |n: usize, b: usize| problem.control.map_or(0.0, |v| v.at(n, b));
    // right-hand side of y_tt = Lap y - f(y) + B at level n
    let accel = |y: &ScalarField, n: usize| -> Vec<f64> {
        let mut a = laplacian(g, y.slice(n));
        for &k in g.interior() {
            a[k] += src(n, k) - f(y.at(n, k));
        }
        a
    };

    let mut y = ScalarField::zeros(g);
    for &k in g.interior() {
        y.set(0, k, problem.u0[k]);
    }
    for (b, node) in g.boundary().iter().enumerate() {
        y.set(0, node.node, bc(0, b));
        y.set(1, node.node, bc(1, b));
    }
    let a0 = accel(&y, 0);
    for &k in g.interior() {
        y.set(1, k, problem.u0[k] + dt * problem.u1[k] + 0.5 * dt2 * a0[k]);
    }
    check_level(&y, 1)?;
    for n in 1..nt {
        let a = accel(&y, n);
        for &k in g.interior() {
            let next = 2.0 * y.at(n, k) - y.at(n - 1, k) + dt2 * a[k];
            y.set(n + 1, k, next);
        }
        for (b, node) in g.boundary().iter().enumerate() {
            y.set(n + 1, node.node, bc(n + 1, b));
        }
        check_level(&y, n + 1)?;
    }
    let a = accel(&y, nt);
    let mut final_velocity = vec![0.0; g.n_space()];
    for &k in g.interior() {
        final_velocity[k] = (y.at(nt, k) - y.at(nt - 1, k)) / dt + 0.5 * dt * a[k];
    }
    Ok(ForwardSolution { y, final_velocity })
}

fn check_level(y: &ScalarField, n: usize) -> Result<()> {
    if y.slice(n).iter().any(|v| !(v.abs() <= BLOWUP)) {
        return Err(Error::NonFiniteState { level: n });
    }
    Ok(())
}

/// Conserved energy of the homogeneous scheme between levels `n` and `n+1`:
/// `1/2 |(y^{n+1} - y^n)/dt|^2 + 1/2 <-Lap_h y^{n+1}, y^n>`.
pub fn leapfrog_energy(grid: &SpaceTimeGrid, y: &ScalarField) -> Vec<f64> {
    let dt = grid.dt();
    (0..grid.nt())
        .map(|n| {
            let lap = laplacian(grid, y.slice(n + 1));
            grid.interior()
                .iter()
                .map(|&k| {
                    let v = (y.at(n + 1, k) - y.at(n, k)) / dt;
                    grid.space_weight(k) * 0.5 * (v * v - lap[k] * y.at(n, k))
                })
                .sum()
        })
        .collect()
}

/// Runs the homogeneous scheme backwards from the last two levels of `y`.
pub fn run_backward(grid: &SpaceTimeGrid, y: &ScalarField) -> ScalarField {
    let (nt, dt2) = (grid.nt(), grid.dt() * grid.dt());
    let mut back = ScalarField::zeros(grid);
    back.slice_mut(nt).copy_from_slice(y.slice(nt));
    back.slice_mut(nt - 1).copy_from_slice(y.slice(nt - 1));
    for n in (1..nt).rev() {
        let lap = laplacian(grid, back.slice(n));
        for &k in grid.interior() {
            let prev = 2.0 * back.at(n, k) - back.at(n + 1, k) + dt2 * lap[k];
            back.set(n - 1, k, prev);
        }
    }
    back
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlResidual {
    /// `|y(T) - z0|_L2 + |y_t(T) - z1|_H^-1` of the forward trajectory.
    pub absolute: f64,
    /// `absolute / (|u0|_L2 + |u1|_H^-1)`, or `absolute` for zero data.
    pub relative: f64,
    /// Relative `L2(Q)` distance between the pair's trajectory and the forward one.
    pub trajectory_error: f64,
}

/// Drives the forward scheme with the pair's control, the data source and
/// the optional nonlinearity, and measures how well the target is reached.
pub fn verify_control(
    grid: &SpaceTimeGrid,
    pair: &StateControlPair,
    data: &ControlData,
    f: Option<Nonlin>,
) -> Result<ControlResidual> {
    let sol = solve_forward(&ForwardProblem {
        grid,
        u0: &data.u0,
        u1: &data.u1,
        source: Some(&data.source),
        control: Some(&pair.v),
        nonlinearity: f,
    })?;
    let d0: Vec<f64> = sol.final_position().iter().zip(&data.z0).map(|(a, b)| a - b).collect();
    let d1: Vec<f64> = sol.final_velocity.iter().zip(&data.z1).map(|(a, b)| a - b).collect();
    let absolute = slice_l2(grid, &d0) + slice_hminus1(grid, &d1);
    let scale = data.energy_norm(grid);
    let relative = if scale > 0.0 { absolute / scale } else { absolute };
    let ynorm = l2q(grid, &sol.y);
    let diff = l2q(grid, &sol.y.sub(&pair.y));
    let trajectory_error = if ynorm > 0.0 { diff / ynorm } else { diff };
    Ok(ControlResidual {
        absolute,
        relative,
        trajectory_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Domain, GeometryConfig};
    use crate::mesh::slice_hminus1;
    use std::f64::consts::PI;

    fn grid1(nx: usize, nt: usize, t_final: f64) -> SpaceTimeGrid {
        SpaceTimeGrid::on_domain(Domain::unit_interval(), t_final, &[nx], nt).unwrap()
    }

    fn sine(grid: &SpaceTimeGrid) -> Vec<f64> {
        (0..grid.n_space()).map(|k| (PI * grid.point(k)[0]).sin()).collect()
    }

    fn standing_wave_error(nx: usize) -> f64 {
        let g = grid1(nx, 2 * (nx + 1), 1.0);
        let u0 = sine(&g);
        let u1 = vec![0.0; g.n_space()];
        let sol = solve_forward(&ForwardProblem::free(&g, &u0, &u1)).unwrap();
        let exact = ScalarField::from_fn(&g, |x, t| (PI * x[0]).sin() * (PI * t).cos());
        l2q(&g, &sol.y.sub(&exact))
    }

    #[test]
    fn standing_wave_second_order() {
        let (e1, e2) = (standing_wave_error(15), standing_wave_error(31));
        let order = (e1 / e2).log2();
        assert!((order - 2.0).abs() <= 0.3, "order {order}");
    }

    #[test]
    fn manufactured_with_source_and_boundary_data() {
        // y = cos(t) (1 + x^2): y_tt - y_xx = -cos(t) (3 + x^2)
        let err = |nx: usize| {
            let g = grid1(nx, 2 * (nx + 1), 1.5);
            let exact = ScalarField::from_fn(&g, |x, t| t.cos() * (1.0 + x[0] * x[0]));
            let b = ScalarField::from_fn(&g, |x, t| -t.cos() * (3.0 + x[0] * x[0]));
            let v = BoundaryField::from_fn(&g, |node, t| t.cos() * (1.0 + node.point[0].powi(2)));
            let u0: Vec<f64> = exact.slice(0).to_vec();
            let u1 = vec![0.0; g.n_space()];
            let sol = solve_forward(&ForwardProblem {
                source: Some(&b),
                control: Some(&v),
                ..ForwardProblem::free(&g, &u0, &u1)
            })
            .unwrap();
            l2q(&g, &sol.y.sub(&exact))
        };
        let (e1, e2) = (err(15), err(31));
        assert!(e2 < 1e-4, "{e2}");
        assert!((e1 / e2).log2() > 1.7);
    }

    #[test]
    fn zero_data_zero_trajectory() {
        let g = grid1(10, 30, 1.0);
        let z = vec![0.0; g.n_space()];
        let sol = solve_forward(&ForwardProblem::free(&g, &z, &z)).unwrap();
        assert_eq!(sol.y.max_abs(), 0.0);
        assert!(sol.final_velocity.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn energy_conserved_at_half_cfl() {
        let g = grid1(39, 160, 2.0);
        assert!((g.cfl() - 0.5).abs() < 1e-12);
        let u0: Vec<f64> = (0..g.n_space())
            .map(|k| {
                let x = g.point(k)[0];
                (-((x - 0.4) / 0.1).powi(2)).exp() * x * (1.0 - x)
            })
            .collect();
        let u1 = sine(&g);
        let sol = solve_forward(&ForwardProblem::free(&g, &u0, &u1)).unwrap();
        let e = leapfrog_energy(&g, &sol.y);
        let drift = e.iter().map(|v| (v - e[0]).abs()).fold(0.0, f64::max) / e[0];
        assert!(drift <= 1e-6, "{drift}");
    }

    #[test]
    fn reversible_to_roundoff() {
        let cfg = GeometryConfig::rectangle([0.0, 1.0], [0.0, 1.0], [-0.3, -0.3], 5.0, 0.1);
        let g = SpaceTimeGrid::with_cfl(&cfg, &[11, 9], 0.8).unwrap();
        let u0: Vec<f64> = (0..g.n_space())
            .map(|k| {
                let p = g.point(k);
                (PI * p[0]).sin() * (2.0 * PI * p[1]).sin()
            })
            .collect();
        let u1 = vec![0.0; g.n_space()];
        let sol = solve_forward(&ForwardProblem::free(&g, &u0, &u1)).unwrap();
        let back = run_backward(&g, &sol.y);
        let err = back
            .slice(0)
            .iter()
            .zip(&u0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn cfl_and_blowup_are_reported() {
        let g = grid1(20, 10, 1.0);
        let z = vec![0.0; g.n_space()];
        assert!(matches!(
            solve_forward(&ForwardProblem::free(&g, &z, &z)),
            Err(Error::CflViolation { .. })
        ));
        let g = grid1(10, 200, 4.0);
        let u0: Vec<f64> = sine(&g).iter().map(|v| 10.0 * v).collect();
        let cube = |r: f64| -r * r * r;
        let err = solve_forward(&ForwardProblem {
            nonlinearity: Some(&cube),
            ..ForwardProblem::free(&g, &u0, &u0)
        })
        .map(|_| ())
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { level } if level > 1));
    }

    #[test]
    fn terminal_velocity_is_second_order() {
        let err = |nx: usize| {
            let g = grid1(nx, 2 * (nx + 1), 0.7);
            let u0 = sine(&g);
            let sol = solve_forward(&ForwardProblem::free(&g, &u0, &vec![0.0; g.n_space()])).unwrap();
            let exact: Vec<f64> = (0..g.n_space())
                .map(|k| -PI * (PI * g.point(k)[0]).sin() * (PI * 0.7).sin())
                .collect();
            let d: Vec<f64> = sol.final_velocity.iter().zip(&exact).map(|(a, b)| a - b).collect();
            slice_l2(&g, &d) + slice_hminus1(&g, &d)
        };
        let order = (err(15) / err(31)).log2();
        assert!(order > 1.7, "{order}");
    }
}
