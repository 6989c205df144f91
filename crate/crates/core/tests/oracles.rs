//! Independent dense oracles for the discrete operators, norms and the
//! optimal control pair.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavecontrol::geometry::{validate_geometry, CutoffProfile, Domain, GeometryConfig, WeightParams};
use wavecontrol::linear::{ControlData, SolverKind, SystemOptions, WeightedSystem};
use wavecontrol::mesh::{apply_wave_operator, slice_hminus1, slice_hminus_r, ScalarField, SpaceTimeGrid};

fn rect_grid(mx: usize, my: usize, nt: usize) -> SpaceTimeGrid {
    let domain = Domain::Rectangle {
        x: [0.0, 1.2],
        y: [-0.5, 0.5],
    };
    SpaceTimeGrid::on_domain(domain, 1.0, &[mx, my], nt).unwrap()
}

/// `-Lap_h` on interior nodes, ordered row by row.
fn dense_neg_laplacian(mx: usize, my: usize, hx: f64, hy: f64) -> DMatrix<f64> {
    let n = mx * my;
    let mut a = DMatrix::zeros(n, n);
    for j in 0..my {
        for i in 0..mx {
            let p = j * mx + i;
            a[(p, p)] = 2.0 / (hx * hx) + 2.0 / (hy * hy);
            if i > 0 {
                a[(p, p - 1)] = -1.0 / (hx * hx);
            }
            if i + 1 < mx {
                a[(p, p + 1)] = -1.0 / (hx * hx);
            }
            if j > 0 {
                a[(p, p - mx)] = -1.0 / (hy * hy);
            }
            if j + 1 < my {
                a[(p, p + mx)] = -1.0 / (hy * hy);
            }
        }
    }
    a
}

#[test]
fn wave_operator_matches_dense_stencil() {
    let (mx, my, nt) = (6, 5, 9);
    let g = rect_grid(mx, my, nt);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vals: Vec<f64> = (0..g.node_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = ScalarField::from_values(&g, vals).unwrap();
    let lw = apply_wave_operator(&w, &g);
    let (hx, hy, dt) = (1.2 / 7.0, 1.0 / 6.0, 1.0 / 9.0);
    let nxp = mx + 2;
    let at = |n: usize, i: usize, j: usize| w.at(n, j * nxp + i);
    for n in 1..nt {
        for j in 1..=my {
            for i in 1..=mx {
                let expect = (at(n + 1, i, j) - 2.0 * at(n, i, j) + at(n - 1, i, j)) / (dt * dt)
                    - (at(n, i + 1, j) - 2.0 * at(n, i, j) + at(n, i - 1, j)) / (hx * hx)
                    - (at(n, i, j + 1) - 2.0 * at(n, i, j) + at(n, i, j - 1)) / (hy * hy);
                let got = lw.at(n, j * nxp + i);
                assert!((got - expect).abs() <= 1e-10 * (1.0 + expect.abs()), "{got} {expect}");
            }
        }
    }
}

#[test]
fn negative_norms_match_dense_eigendecomposition() {
    let (mx, my) = (7, 6);
    let g = rect_grid(mx, my, 8);
    let (hx, hy) = (1.2 / 8.0, 1.0 / 7.0);
    let eig = SymmetricEigen::new(dense_neg_laplacian(mx, my, hx, hy));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u: Vec<f64> = (0..g.n_space()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let interior = DVector::from_iterator(mx * my, g.interior().iter().map(|&k| u[k]));
    let coeffs = eig.eigenvectors.transpose() * &interior;
    let oracle = |r: f64| {
        let sum: f64 = coeffs
            .iter()
            .zip(eig.eigenvalues.iter())
            .map(|(c, l)| c * c * l.powf(-r))
            .sum();
        (hx * hy * sum).sqrt()
    };
    for r in [0.25, 0.5, 1.0] {
        let got = slice_hminus_r(&g, &u, r);
        assert!((got - oracle(r)).abs() <= 1e-10 * oracle(r), "r = {r}");
    }
    let h1 = slice_hminus1(&g, &u);
    assert!((h1 - oracle(1.0)).abs() <= 1e-8 * oracle(1.0));
}

/// Test-local leapfrog for `y_tt = y_xx` on (0, 1) with Dirichlet data `v` at x = 1
/// (rows: boundary levels 1..nt-1); returns every level including the boundary.
fn leapfrog_1d(nx: usize, nt: usize, t_final: f64, u0: &[f64], vr: &[f64]) -> Vec<Vec<f64>> {
    let h = 1.0 / (nx + 1) as f64;
    let dt = t_final / nt as f64;
    let c = (dt / h).powi(2);
    let lap = |y: &[f64], i: usize| y[i - 1] - 2.0 * y[i] + y[i + 1];
    let mut levels = vec![u0.to_vec()];
    let mut y1 = u0.to_vec();
    for i in 1..=nx {
        y1[i] = u0[i] + 0.5 * c * lap(u0, i);
    }
    y1[nx + 1] = vr[0];
    levels.push(y1);
    for n in 1..nt {
        let (prev, cur) = (&levels[n - 1], &levels[n]);
        let mut next = vec![0.0; nx + 2];
        for i in 1..=nx {
            next[i] = 2.0 * cur[i] - prev[i] + c * lap(cur, i);
        }
        next[nx + 1] = if n + 1 < nt { vr[n] } else { 0.0 };
        levels.push(next);
    }
    levels
}

#[test]
fn pair_approaches_constrained_minimizer_as_eps_vanishes() {
    // minimize sum q rho^2 y^2 + sum q_b rho^2 v^2 / (s eta^2) over controls at x = 1,
    // subject to y(T) = 0 and the final leapfrog velocity = 0
    let (nx, nt, t_final, s) = (10, 36, 2.6, 3.0);
    let cfg = GeometryConfig::interval(0.0, 1.0, -0.2, t_final, 0.08);
    let prof = CutoffProfile::new(&cfg, validate_geometry(&cfg).unwrap());
    let grid = SpaceTimeGrid::new(&cfg, &[nx], nt).unwrap();
    let params = WeightParams::new(&cfg, s);
    let h = 1.0 / (nx + 1) as f64;
    let dt = t_final / nt as f64;
    let u0: Vec<f64> = (0..nx + 2).map(|i| (PI * i as f64 * h).sin()).collect();
    let mut u0c = u0.clone();
    u0c[0] = 0.0;
    u0c[nx + 1] = 0.0;

    // active controls: interior levels with eta > 0
    let active: Vec<usize> = (1..nt).filter(|&n| prof.eta(n as f64 * dt) > 0.0).collect();
    let nv = active.len();
    let pr = &params;
    let rho_min_phi = (0..=nt)
        .flat_map(|n| (0..nx + 2).map(move |i| pr.phi([i as f64 * h, 0.0], n as f64 * dt)))
        .fold(f64::INFINITY, f64::min);
    let rho2 = |i: usize, n: usize| {
        let phi = params.phi([i as f64 * h, 0.0], n as f64 * dt);
        (-2.0 * s * (phi - rho_min_phi)).exp()
    };

    // affine map v -> (interior trajectory at levels 1..nt-1, final position, final velocity)
    let run = |v: &[f64], u: &[f64]| {
        let mut vr = vec![0.0; nt];
        for (a, &n) in active.iter().enumerate() {
            vr[n - 1] = v[a];
        }
        let lv = leapfrog_1d(nx, nt, t_final, u, &vr);
        let mut state = Vec::new();
        for level in lv.iter().take(nt).skip(1) {
            state.extend_from_slice(&level[1..=nx]);
        }
        let last = &lv[nt];
        let before = &lv[nt - 1];
        let mut fin: Vec<f64> = last[1..=nx].to_vec();
        for i in 1..=nx {
            let lap = (last[i - 1] - 2.0 * last[i] + last[i + 1]) / (h * h);
            fin.push((last[i] - before[i]) / dt + 0.5 * dt * lap);
        }
        (state, fin)
    };
    let zero_v = vec![0.0; nv];
    let (s0, f0) = run(&zero_v, &u0c);
    let zero_u = vec![0.0; nx + 2];
    let ny = s0.len();
    let mut smat = DMatrix::zeros(ny, nv);
    let mut cmat = DMatrix::zeros(2 * nx, nv);
    for a in 0..nv {
        let mut e = vec![0.0; nv];
        e[a] = 1.0;
        let (sa, fa) = run(&e, &zero_u);
        smat.set_column(a, &DVector::from_vec(sa));
        cmat.set_column(a, &DVector::from_vec(fa));
    }
    let mut qy = DVector::zeros(ny);
    for n in 1..nt {
        for i in 1..=nx {
            qy[(n - 1) * nx + i - 1] = h * dt * rho2(i, n);
        }
    }
    let mut qv = DVector::zeros(nv);
    for (a, &n) in active.iter().enumerate() {
        let eta = prof.eta(n as f64 * dt);
        qv[a] = dt * rho2(nx + 1, n) / (s * eta * eta);
    }
    // normal equations of the constrained least squares problem
    let hess = smat.transpose() * DMatrix::from_diagonal(&qy) * &smat + DMatrix::from_diagonal(&qv);
    let grad = smat.transpose() * DMatrix::from_diagonal(&qy) * DVector::from_vec(s0.clone());
    let mut kkt = DMatrix::zeros(nv + 2 * nx, nv + 2 * nx);
    kkt.view_mut((0, 0), (nv, nv)).copy_from(&hess);
    kkt.view_mut((nv, 0), (2 * nx, nv)).copy_from(&cmat);
    kkt.view_mut((0, nv), (nv, 2 * nx)).copy_from(&cmat.transpose());
    let mut rhs = DVector::zeros(nv + 2 * nx);
    rhs.rows_mut(0, nv).copy_from(&(-grad));
    rhs.rows_mut(nv, 2 * nx).copy_from(&(-DVector::from_vec(f0)));
    let sol = kkt.lu().solve(&rhs).unwrap();
    let v_opt = sol.rows(0, nv).into_owned();

    let data = ControlData::new(&grid, u0.clone(), vec![0.0; nx + 2]).unwrap();
    let mut errs = Vec::new();
    for eps_factor in [1.0, 1e-2, 1e-4] {
        let opts = SystemOptions {
            eps: Some(eps_factor * h * dt),
            solver: SolverKind::Dense,
            tol: 1e-8,
            ..SystemOptions::default()
        };
        let sys = WeightedSystem::assemble(&grid, &params, &prof, opts).unwrap();
        let pair = sys.solve(&data).unwrap();
        let right = grid.boundary().iter().position(|b| b.point[0] == 1.0).unwrap();
        let diff: f64 = active
            .iter()
            .enumerate()
            .map(|(a, &n)| (pair.v.at(n, right) - v_opt[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        errs.push(diff / v_opt.norm());
    }
    assert!(errs[2] < 1e-3, "{errs:?}");
    assert!(errs[2] < errs[0], "{errs:?}");
}
