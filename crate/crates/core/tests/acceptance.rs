//! Acceptance criteria. Runs every criterion, prints one line each and
//! exits non-zero when any of them fails.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavecontrol::fixed_point::{
    contraction_report, lambda_s, loglog_slope, run_fixed_point, source_bound_check, ClassSpec, FixedPointOptions,
    FixedPointRun, Nonlinearity,
};
use wavecontrol::forward::{leapfrog_energy, solve_forward, verify_control, ForwardProblem};
use wavecontrol::geometry::{validate_geometry, CutoffProfile, Domain, GeometryConfig, WeightParams};
use wavecontrol::linear::{random_dual_sample, ControlData, StateControlPair, SystemOptions, WeightedSystem};
use wavecontrol::mesh::{l2_sigma, l2q, BoundaryField, ScalarField, SpaceTimeGrid};

struct Setup {
    cfg: GeometryConfig,
    prof: CutoffProfile,
}

fn default_setup() -> Setup {
    let cfg = GeometryConfig::interval(0.0, 1.0, -0.2, 2.6, 0.08);
    let prof = CutoffProfile::new(&cfg, validate_geometry(&cfg).unwrap());
    Setup { cfg, prof }
}

/// Interior resolution `nx` with the time step at CFL 0.9.
fn grid(setup: &Setup, nx: usize) -> SpaceTimeGrid {
    SpaceTimeGrid::with_cfl(&setup.cfg, &[nx], 0.9).unwrap()
}

fn profile_slice(grid: &SpaceTimeGrid, f: impl Fn(f64) -> f64) -> Vec<f64> {
    (0..grid.n_space()).map(|k| f(grid.point(k)[0])).collect()
}

fn sine_data(grid: &SpaceTimeGrid) -> ControlData {
    ControlData::new(grid, profile_slice(grid, |x| (PI * x).sin()), vec![0.0; grid.n_space()]).unwrap()
}

fn system<'g>(setup: &Setup, grid: &'g SpaceTimeGrid, s: f64, opts: SystemOptions) -> WeightedSystem<'g> {
    WeightedSystem::assemble(grid, &WeightParams::new(&setup.cfg, s), &setup.prof, opts).unwrap()
}

fn linear_residual(setup: &Setup, nx: usize) -> f64 {
    let g = grid(setup, nx);
    let data = sine_data(&g);
    let sys = system(setup, &g, 4.0, SystemOptions::default());
    let pair = sys.solve(&data).unwrap();
    verify_control(&g, &pair, &data, None).unwrap().relative
}

type Outcome = (bool, String);

fn criterion_1(setup: &Setup) -> Outcome {
    let r64 = linear_residual(setup, 64);
    let r128 = linear_residual(setup, 128);
    let pass = r64 <= 5e-2 && r128 <= 0.75 * r64;
    (
        pass,
        format!(
            "residual nx=64 {r64:.3e} (<= 5e-2), nx=128 {r128:.3e} (<= 0.75x: {:.3})",
            r128 / r64
        ),
    )
}

fn criterion_2(setup: &Setup) -> Outcome {
    let cfg = &setup.cfg;
    let g = SpaceTimeGrid::new(cfg, &[12], 12).unwrap();
    let data = sine_data(&g);
    let sys = system(setup, &g, 4.0, SystemOptions::default());
    let pair = sys.solve(&data).unwrap();
    match sys.optimality_check(&pair, &data) {
        Ok(rep) => (
            rep.discrepancy <= 1e-6,
            format!(
                "KKT discrepancy {:.3e} (<= 1e-6), KKT size {}",
                rep.discrepancy, rep.kkt_size
            ),
        ),
        Err(e) => (false, format!("KKT oracle failed: {e}")),
    }
}

fn rel_l2q(g: &SpaceTimeGrid, a: &ScalarField, b: &ScalarField) -> f64 {
    l2q(g, &a.sub(b)) / l2q(g, b)
}

fn rel_sigma(g: &SpaceTimeGrid, a: &BoundaryField, b: &BoundaryField) -> f64 {
    let mut d = a.clone();
    for (x, y) in d.values_mut().iter_mut().zip(b.values()) {
        *x -= y;
    }
    l2_sigma(g, &d) / l2_sigma(g, b)
}

fn scaling_change(setup: &Setup, g: &SpaceTimeGrid) -> f64 {
    let data = sine_data(g);
    let base = system(setup, g, 4.0, SystemOptions::default()).solve(&data).unwrap();
    let mut worst: f64 = 0.0;
    for kappa in [1e-3, 1e3] {
        let opts = SystemOptions {
            weight_scale: kappa,
            ..SystemOptions::default()
        };
        let pair = system(setup, g, 4.0, opts).solve(&data).unwrap();
        worst = worst
            .max(rel_l2q(g, &pair.y, &base.y))
            .max(rel_sigma(g, &pair.v, &base.v));
    }
    worst
}

fn criterion_3(setup: &Setup) -> Outcome {
    let worst = scaling_change(setup, &grid(setup, 64));
    let small = scaling_change(setup, &grid(setup, 12));
    (
        worst <= 1e-10,
        format!("max relative change of (y, v) at nx=64 {worst:.3e} (<= 1e-10); at nx=12 {small:.3e}"),
    )
}

fn criterion_4(setup: &Setup) -> Outcome {
    let g = grid(setup, 64);
    let mut maxima = Vec::new();
    let mut finite = true;
    for s in [2.0, 4.0, 8.0] {
        let sys = system(setup, &g, s, SystemOptions::default());
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut max: f64 = 0.0;
        for _ in 0..100 {
            let w = random_dual_sample(&g, &mut rng);
            match sys.carleman_ratio(&w) {
                Ok(c) if c.ratio.is_finite() => max = max.max(c.ratio),
                _ => finite = false,
            }
        }
        maxima.push(max);
    }
    let spread = maxima.iter().copied().fold(0.0, f64::max) / maxima.iter().copied().fold(f64::INFINITY, f64::min);
    (
        finite && spread < 10.0,
        format!(
            "max ratio s=2,4,8: {:.3e} {:.3e} {:.3e}, spread {spread:.2} (< 10), all finite {finite}",
            maxima[0], maxima[1], maxima[2]
        ),
    )
}

fn semilinear_run(setup: &Setup, g: &SpaceTimeGrid, data: &ControlData, f: &Nonlinearity, s: f64) -> FixedPointRun {
    let sys = system(setup, g, s, SystemOptions::default());
    let spec = ClassSpec::for_exponent(f.p(), s);
    run_fixed_point(&sys, data, f, spec, &FixedPointOptions::default()).unwrap()
}

fn criterion_5(run: &FixedPointRun, linear: f64) -> Outcome {
    let ratios = run.ratios();
    let max = ratios.iter().copied().fold(0.0, f64::max);
    let converged = run.outcome == wavecontrol::fixed_point::Outcome::Converged && run.trace.len() <= 25;
    let semi = run.verification.relative;
    (
        converged && max <= 0.9 && semi <= 2.0 * linear,
        format!(
            "{:?} after {} iterations, max ratio {max:.3e} (<= 0.9), semilinear residual {semi:.3e} (<= 2 x {linear:.3e})",
            run.outcome,
            run.trace.len()
        ),
    )
}

fn criterion_6(setup: &Setup) -> Outcome {
    let g = grid(setup, 64);
    let data = sine_data(&g);
    let f = Nonlinearity::builtin("superlinear", 0.05, 1.0).unwrap();
    let mut points = Vec::new();
    for s in [2.0, 4.0, 8.0] {
        let run = semilinear_run(setup, &g, &data, &f, s);
        let rep = contraction_report(&run.ratios(), &f, s, 1.0);
        points.push((s, rep.mean_ratio));
    }
    let slope = loglog_slope(&points);
    let pass = points[2].1 < points[0].1 && (-1.5..=-0.5).contains(&slope);
    (
        pass,
        format!(
            "mean ratio s=2,4,8: {:.3e} {:.3e} {:.3e}, fitted exponent {slope:.3} (in [-1.5, -0.5])",
            points[0].1, points[1].1, points[2].1
        ),
    )
}

fn all_margins_positive(run: &FixedPointRun) -> (bool, f64) {
    let min = run
        .trace
        .iter()
        .flat_map(|r| r.class.margins.iter().map(|m| m.margin))
        .fold(f64::INFINITY, f64::min);
    (run.trace.iter().all(|r| r.class.member), min)
}

fn criterion_7(setup: &Setup, run: &FixedPointRun) -> Outcome {
    let (c_ok, c_min) = all_margins_positive(run);
    let g = grid(setup, 64);
    let data = ControlData::new(
        &g,
        profile_slice(&g, |x| (PI * x).sin()),
        profile_slice(&g, |x| x * (1.0 - x)),
    )
    .unwrap();
    let f = Nonlinearity::builtin("superlinear", 0.05, 1.5).unwrap();
    let tilde = semilinear_run(setup, &g, &data, &f, 4.0);
    let (t_ok, t_min) = all_margins_positive(&tilde);
    (
        c_ok && t_ok,
        format!("C(s) smallest margin {c_min:.3e}, C~(s) (p = 3/2) smallest margin {t_min:.3e}"),
    )
}

fn criterion_8() -> Outcome {
    let err = |nx: usize| {
        let g = SpaceTimeGrid::on_domain(Domain::unit_interval(), 1.0, &[nx], 2 * (nx + 1)).unwrap();
        let u0 = profile_slice(&g, |x| (PI * x).sin());
        let sol = solve_forward(&ForwardProblem::free(&g, &u0, &vec![0.0; g.n_space()])).unwrap();
        let exact = ScalarField::from_fn(&g, |x, t| (PI * x[0]).sin() * (PI * t).cos());
        l2q(&g, &sol.y.sub(&exact))
    };
    let errs = [err(15), err(31), err(63)];
    let orders = [(errs[0] / errs[1]).log2(), (errs[1] / errs[2]).log2()];
    let g = SpaceTimeGrid::on_domain(Domain::unit_interval(), 2.0, &[39], 160).unwrap();
    let u0 = profile_slice(&g, |x| (PI * x).sin() + 0.3 * (3.0 * PI * x).sin());
    let u1 = profile_slice(&g, |x| x * (1.0 - x));
    let sol = solve_forward(&ForwardProblem::free(&g, &u0, &u1)).unwrap();
    let e = leapfrog_energy(&g, &sol.y);
    let drift = e.iter().map(|v| (v - e[0]).abs()).fold(0.0, f64::max) / e[0];
    let pass = orders.iter().all(|o| (o - 2.0).abs() <= 0.3) && drift <= 1e-6 && (g.cfl() - 0.5).abs() < 1e-12;
    (
        pass,
        format!(
            "observed orders {:.3} {:.3} (2 +- 0.3), energy drift {drift:.3e} at CFL 0.5 (<= 1e-6)",
            orders[0], orders[1]
        ),
    )
}

fn criterion_9(setup: &Setup) -> Outcome {
    let g = grid(setup, 64);
    let data = sine_data(&g);
    let mut worst_spread: f64 = 0.0;
    let mut finite = true;
    let mut detail = Vec::new();
    for p in [0.5, 1.0, 1.5] {
        for name in ["superlinear", "superlinear_flipped"] {
            let f = Nonlinearity::builtin(name, 0.05, p).unwrap();
            let mut ratios = Vec::new();
            for s in [2.0, 4.0, 8.0] {
                let params = WeightParams::new(&setup.cfg, s);
                let sys = WeightedSystem::assemble(&g, &params, &setup.prof, SystemOptions::default()).unwrap();
                let first: StateControlPair = lambda_s(&sys, &ScalarField::zeros(&g), &data, &f).unwrap();
                let sb = source_bound_check(&g, &first.y, &f, &params).unwrap();
                finite &= sb.ratio.is_finite() && sb.ratio > 0.0;
                ratios.push(sb.ratio);
            }
            let spread =
                ratios.iter().copied().fold(0.0, f64::max) / ratios.iter().copied().fold(f64::INFINITY, f64::min);
            worst_spread = worst_spread.max(spread);
            if name == "superlinear" {
                detail.push(format!("p={p}: {:.2e} {:.2e} {:.2e}", ratios[0], ratios[1], ratios[2]));
            }
        }
    }
    (
        finite && worst_spread < 10.0,
        format!(
            "ratios s=2,4,8 [{}], worst spread {worst_spread:.3e} (< 10)",
            detail.join("; ")
        ),
    )
}

fn report(id: usize, budget_s: f64, start: Instant, (pass, detail): Outcome, failures: &mut Vec<usize>) {
    let secs = start.elapsed().as_secs_f64();
    let within = secs <= budget_s;
    let ok = pass && within;
    if !ok {
        failures.push(id);
    }
    println!(
        "criterion {id}: {} | {detail} | {secs:.1} s (budget {budget_s} s)",
        if ok { "PASS" } else { "FAIL" }
    );
}

fn main() -> ExitCode {
    let setup = default_setup();
    let mut failures = Vec::new();

    let t = Instant::now();
    report(1, 60.0, t, criterion_1(&setup), &mut failures);
    let t = Instant::now();
    report(2, 10.0, t, criterion_2(&setup), &mut failures);
    let t = Instant::now();
    report(3, 30.0, t, criterion_3(&setup), &mut failures);
    let t = Instant::now();
    report(4, 120.0, t, criterion_4(&setup), &mut failures);

    let t = Instant::now();
    let g = grid(&setup, 64);
    let data = sine_data(&g);
    let f = Nonlinearity::builtin("superlinear", 0.05, 1.0).unwrap();
    let run = semilinear_run(&setup, &g, &data, &f, 4.0);
    let linear = linear_residual(&setup, 64);
    report(5, 300.0, t, criterion_5(&run, linear), &mut failures);
    let t = Instant::now();
    report(6, 600.0, t, criterion_6(&setup), &mut failures);
    let t = Instant::now();
    report(7, 300.0, t, criterion_7(&setup, &run), &mut failures);
    let t = Instant::now();
    report(8, 60.0, t, criterion_8(), &mut failures);
    let t = Instant::now();
    report(9, 300.0, t, criterion_9(&setup), &mut failures);

    if failures.is_empty() {
        println!("acceptance: all 9 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failures:?}");
        ExitCode::FAILURE
    }
}
