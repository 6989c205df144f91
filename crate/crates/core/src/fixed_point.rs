//! Semilinear problems `y_tt - Lap y + f(y) = B`: the nonlinearity registry
//! with growth certificates, the weighted classes, the map `Lambda_s` and
//! the Picard iteration with its contraction diagnostics.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::forward::{verify_control, ControlResidual};
use crate::geometry::{eval_weights, Normalization, WeightParams};
use crate::linear::{ControlData, StateControlPair, WeightedSystem};
use crate::mesh::{
    grad_l2q, l2_hminus_r, l2_sigma, l2q, linf_l2, time_derivative, BoundaryField, ScalarField, SpaceTimeGrid,
};

/// `(max(ln|r|, 0))^p`, taken as 0 whenever `|r| <= 1` (including `r = 0`).
pub fn ln_plus_p(r: f64, p: f64) -> f64 {
    let a = r.abs();
    if a <= 1.0 {
        0.0
    } else {
        a.ln().powf(p)
    }
}

/// `|f(r)| <= alpha1 + |r| (alpha2 + beta ln_+^p r)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Growth {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub p: f64,
}

impl Growth {
    pub fn bound(&self, r: f64) -> f64 {
        self.alpha1 + r.abs() * (self.alpha2 + self.beta * ln_plus_p(r, self.p))
    }
}

/// `|f'(r)| <= alpha + beta ln_+^p r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivativeGrowth {
    pub alpha: f64,
    pub beta: f64,
    pub p: f64,
}

impl DerivativeGrowth {
    pub fn bound(&self, r: f64) -> f64 {
        self.alpha + self.beta * ln_plus_p(r, self.p)
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A scalar nonlinearity with declared growth parameters.
#[derive(Clone)]
pub struct Nonlinearity {
    pub name: String,
    f: ScalarFn,
    df: Option<ScalarFn>,
    pub growth: Growth,
    pub derivative_growth: Option<DerivativeGrowth>,
    pub superlinear: bool,
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("Nonlinearity")
            .field("name", &self.name)
            .field("growth", &self.growth)
            .field("derivative_growth", &self.derivative_growth)
            .finish()
    }
}

/// Names accepted by [`Nonlinearity::builtin`].
pub const BUILTIN_NAMES: [&str; 5] = ["zero", "linear", "sine", "superlinear", "superlinear_flipped"];

/// Weight given to the growth constant of a zero map.
const ZERO_BETA: f64 = 1e-12;

impl Nonlinearity {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: Option<ScalarFn>,
        growth: Growth,
        derivative_growth: Option<DerivativeGrowth>,
    ) -> Self {
        Nonlinearity {
            name: name.into(),
            f: Arc::new(f),
            df,
            growth,
            derivative_growth,
            superlinear: growth.beta > 0.0,
        }
    }

    /// Built-in maps with certified parameters. `a` is the amplitude
    /// (`a r`, `a sin r`, `+-a r ln^p(1 + |r|)`), `p` the growth exponent.
    pub fn builtin(name: &str, a: f64, p: f64) -> Result<Self> {
        if !(0.0..=1.5).contains(&p) {
            return Err(Error::UnknownNonlinearity(format!("{name}: p = {p} outside [0, 3/2]")));
        }
        let amp = a.abs();
        let nl = match name {
            "zero" => {
                let mut z = Self::new(
                    name,
                    |_| 0.0,
                    Some(Arc::new(|_| 0.0)),
                    Growth {
                        alpha1: 0.0,
                        alpha2: 0.0,
                        beta: ZERO_BETA,
                        p,
                    },
                    Some(DerivativeGrowth {
                        alpha: 0.0,
                        beta: ZERO_BETA,
                        p,
                    }),
                );
                z.superlinear = false;
                z
            }
            "linear" => Self::new(
                name,
                move |r| a * r,
                Some(Arc::new(move |_| a)),
                Growth {
                    alpha1: 0.0,
                    alpha2: amp,
                    beta: 0.0,
                    p,
                },
                Some(DerivativeGrowth {
                    alpha: amp,
                    beta: 0.0,
                    p,
                }),
            ),
            "sine" => Self::new(
                name,
                move |r: f64| a * r.sin(),
                Some(Arc::new(move |r: f64| a * r.cos())),
                Growth {
                    alpha1: amp,
                    alpha2: 0.0,
                    beta: 0.0,
                    p,
                },
                Some(DerivativeGrowth {
                    alpha: amp,
                    beta: 0.0,
                    p,
                }),
            ),
            "superlinear" | "superlinear_flipped" => {
                let sign = if name == "superlinear" { a } else { -a };
                let f = move |r: f64| sign * r * r.abs().ln_1p().powf(p);
                let df = move |r: f64| {
                    let l = r.abs().ln_1p();
                    let tail = if r == 0.0 {
                        0.0
                    } else {
                        p * r.abs() / (1.0 + r.abs()) * l.powf(p - 1.0)
                    };
                    sign * (l.powf(p) + tail)
                };
                // ln(1 + |r|) <= ln 2 + ln_+|r|, and (a + b)^p <= cp (a^p + b^p)
                let cp = 2f64.powf(p - 1.0).max(1.0);
                let l2p = std::f64::consts::LN_2.powf(p);
                // p |r| ln^{p-1}(1 + |r|) / (1 + |r|) is at most p for p < 1
                // and at most p (1 + ln^p(1 + |r|)) for p >= 1
                let (alpha, beta) = if p < 1.0 {
                    (amp * (cp * l2p + p), amp * cp)
                } else {
                    (amp * ((1.0 + p) * cp * l2p + p), amp * (1.0 + p) * cp)
                };
                Self::new(
                    name,
                    f,
                    Some(Arc::new(df)),
                    Growth {
                        alpha1: 0.0,
                        alpha2: amp * cp * l2p,
                        beta: amp * cp,
                        p,
                    },
                    Some(DerivativeGrowth { alpha, beta, p }),
                )
            }
            other => return Err(Error::UnknownNonlinearity(other.to_string())),
        };
        Ok(nl)
    }

    pub fn eval(&self, r: f64) -> f64 {
        (self.f)(r)
    }

    pub fn derivative(&self, r: f64) -> Option<f64> {
        self.df.as_ref().map(|d| d(r))
    }

    pub fn as_fn(&self) -> &(dyn Fn(f64) -> f64 + Sync) {
        &*self.f
    }

    pub fn p(&self) -> f64 {
        self.growth.p
    }

    pub fn is_zero(&self) -> bool {
        self.name == "zero"
    }
}

/// Result of sampling the declared growth bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowthCertificate {
    /// Smallest `bound - |f|` over the samples, and where it occurs.
    pub worst_slack: f64,
    pub worst_r: f64,
    /// Same for `f'`, when both the derivative and its bound are declared.
    pub derivative_worst_slack: Option<f64>,
    pub samples: usize,
}

pub const DEFAULT_GROWTH_RANGE: f64 = 1e8;

/// Samples `|f|` (and `|f'|`) against the declared bounds on `0` and
/// `+-r` for `samples` log-spaced magnitudes in `[1e-8, range]`.
pub fn verify_growth(f: &Nonlinearity, range: f64, samples: usize) -> Result<GrowthCertificate> {
    let samples = samples.max(2);
    let (lo, hi) = (1e-8_f64.ln(), range.max(1e-8).ln());
    let mut points = vec![0.0];
    for i in 0..samples {
        let m = (lo + (hi - lo) * i as f64 / (samples - 1) as f64).exp();
        points.push(m);
        points.push(-m);
    }
    let mut cert = GrowthCertificate {
        worst_slack: f64::INFINITY,
        worst_r: 0.0,
        derivative_worst_slack: None,
        samples: points.len(),
    };
    let exceeds = |value: f64, bound: f64| value > bound * (1.0 + 1e-12) + 1e-300;
    for &r in &points {
        let value = f.eval(r).abs();
        let bound = f.growth.bound(r);
        if !value.is_finite() || exceeds(value, bound) {
            return Err(Error::GrowthViolated {
                r,
                value,
                bound,
                which: "H_p",
            });
        }
        if bound - value < cert.worst_slack {
            cert.worst_slack = bound - value;
            cert.worst_r = r;
        }
        if let (Some(d), Some(g)) = (f.derivative(r), f.derivative_growth) {
            let (value, bound) = (d.abs(), g.bound(r));
            if !value.is_finite() || exceeds(value, bound) {
                return Err(Error::GrowthViolated {
                    r,
                    value,
                    bound,
                    which: "H'_p",
                });
            }
            let slack = cert.derivative_worst_slack.unwrap_or(f64::INFINITY);
            cert.derivative_worst_slack = Some(slack.min(bound - value));
        }
    }
    Ok(cert)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassKind {
    /// `|rho y|_L2Q <= s`, `|rho y|_LinfL2 <= s^3`.
    C,
    /// `|rho y|_L2Q <= s`, `|(rho y)_t|_L2Q <= s^2`, `|grad(rho y)|_L2Q <= s^3`.
    CTilde,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassSpec {
    pub kind: ClassKind,
    pub s: f64,
}

impl ClassSpec {
    /// The class suited to growth exponent `p`.
    pub fn for_exponent(p: f64, s: f64) -> Self {
        let kind = if p >= 1.5 { ClassKind::CTilde } else { ClassKind::C };
        ClassSpec { kind, s }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMargin {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassCheck {
    pub member: bool,
    pub margins: Vec<ClassMargin>,
}

/// Raw weight `exp(-s phi)` at every node.
pub fn raw_rho(grid: &SpaceTimeGrid, params: &WeightParams) -> Result<Vec<f64>> {
    Ok(eval_weights(grid, params, Normalization::Raw)?.rho)
}

/// Evaluates the class thresholds with the raw weight `rho_raw`.
pub fn check_class(grid: &SpaceTimeGrid, y: &ScalarField, spec: ClassSpec, rho_raw: &[f64]) -> ClassCheck {
    let ry = y.weighted(rho_raw);
    let s = spec.s;
    let mut margins = vec![("L2Q", l2q(grid, &ry), s)];
    match spec.kind {
        ClassKind::C => margins.push(("LinfL2", linf_l2(grid, &ry), s.powi(3))),
        ClassKind::CTilde => {
            margins.push(("t_L2Q", l2q(grid, &time_derivative(&ry, grid)), s * s));
            margins.push(("grad_L2Q", grad_l2q(grid, &ry), s.powi(3)));
        }
    }
    let margins: Vec<ClassMargin> = margins
        .into_iter()
        .map(|(name, value, threshold)| ClassMargin {
            name,
            value,
            threshold,
            margin: threshold - value,
        })
        .collect();
    ClassCheck {
        member: margins.iter().all(|m| m.margin > 0.0),
        margins,
    }
}

/// `base - f(y_hat)` at every node.
pub fn nonlinear_source(y_hat: &ScalarField, f: &Nonlinearity, base: &ScalarField) -> ScalarField {
    let mut b = base.clone();
    for (bi, &yi) in b.values_mut().iter_mut().zip(y_hat.values()) {
        *bi -= f.eval(yi);
    }
    b
}

/// `Lambda_s`: the controlled pair of the linear problem with source `B - f(y_hat)`.
pub fn lambda_s(
    system: &WeightedSystem,
    y_hat: &ScalarField,
    data: &ControlData,
    f: &Nonlinearity,
) -> Result<StateControlPair> {
    let linear = data.clone().with_source(nonlinear_source(y_hat, f, &data.source));
    system.solve(&linear)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// `|rho (y_k - y_{k-1})|_L2Q`.
    pub d: f64,
    /// `|rho (v_k - v_{k-1})|_L2Sigma`.
    pub d_boundary: f64,
    /// `d_k / d_{k-1}`; `None` for the first step or when `d_{k-1} = 0`.
    pub ratio: Option<f64>,
    pub class: ClassCheck,
    /// Semilinear forward residual of `v_k`, relative to the data.
    pub forward_residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Converged,
    Diverged,
    IterationCap,
}

#[derive(Clone, Debug)]
pub struct FixedPointRun {
    pub pair: StateControlPair,
    pub trace: Vec<IterationRecord>,
    pub outcome: Outcome,
    /// Iterations whose state left the class.
    pub class_escapes: Vec<usize>,
    pub verification: ControlResidual,
}

impl FixedPointRun {
    pub fn check(&self) -> Result<()> {
        match self.outcome {
            Outcome::Diverged => Err(Error::NoContraction {
                iterations: self.trace.len(),
            }),
            _ => Ok(()),
        }
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.trace.iter().filter_map(|r| r.ratio).collect()
    }
}

#[derive(Clone, Debug)]
pub struct FixedPointOptions {
    /// Stop once `d_k <= tol * |rho y_k|_L2Q`.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting state; `Lambda_s(0)` when absent.
    pub y0: Option<ScalarField>,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            tol: 1e-8,
            max_iter: 25,
            y0: None,
        }
    }
}

/// Picard iteration `y_{k+1} = Lambda_s(y_k)`. Distances and class checks
/// use the raw weight; stops on relative convergence, on three consecutive
/// increases of `d_k`, or at the iteration cap.
pub fn run_fixed_point(
    system: &WeightedSystem,
    data: &ControlData,
    f: &Nonlinearity,
    spec: ClassSpec,
    options: &FixedPointOptions,
) -> Result<FixedPointRun> {
    let grid = system.grid();
    let rho = raw_rho(grid, system.params())?;
    let rho_b = boundary_weight(grid, &rho);
    let mut prev = match &options.y0 {
        Some(y0) => {
            y0.check_grid(grid)?;
            let mut p = lambda_s(system, &ScalarField::zeros(grid), data, f)?;
            p.y = y0.clone();
            p
        }
        None => lambda_s(system, &ScalarField::zeros(grid), data, f)?,
    };
    let scale = data.energy_norm(grid);
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut class_escapes = Vec::new();
    let mut increases = 0;
    let mut outcome = Outcome::IterationCap;
    for k in 1..=options.max_iter {
        let next = lambda_s(system, &prev.y, data, f)?;
        let d = l2q(grid, &next.y.sub(&prev.y).weighted(&rho));
        let dv = boundary_diff(&next.v, &prev.v, &rho_b);
        let d_boundary = l2_sigma(grid, &dv);
        let ratio = trace.last().and_then(|r| (r.d > 0.0).then(|| d / r.d));
        let class = check_class(grid, &next.y, spec, &rho);
        if !class.member {
            class_escapes.push(k);
        }
        let forward_residual = match verify_control(grid, &next, data, Some(f.as_fn())) {
            Ok(res) => res.absolute / if scale > 0.0 { scale } else { 1.0 },
            Err(_) => f64::INFINITY,
        };
        if trace.last().is_some_and(|r| d > r.d) {
            increases += 1;
        } else {
            increases = 0;
        }
        let size = l2q(grid, &next.y.weighted(&rho));
        trace.push(IterationRecord {
            k,
            d,
            d_boundary,
            ratio,
            class,
            forward_residual,
        });
        prev = next;
        if d == 0.0 || d <= options.tol * size {
            outcome = Outcome::Converged;
            break;
        }
        if increases >= 3 {
            outcome = Outcome::Diverged;
            break;
        }
    }
    let verification = verify_control(grid, &prev, data, Some(f.as_fn()))?;
    Ok(FixedPointRun {
        pair: prev,
        trace,
        outcome,
        class_escapes,
        verification,
    })
}

fn boundary_weight(grid: &SpaceTimeGrid, rho: &[f64]) -> Vec<f64> {
    let nb = grid.boundary().len();
    let mut out = vec![0.0; nb * grid.n_levels()];
    for n in 0..grid.n_levels() {
        for (b, node) in grid.boundary().iter().enumerate() {
            out[n * nb + b] = rho[grid.index(n, node.node)];
        }
    }
    out
}

fn boundary_diff(a: &BoundaryField, b: &BoundaryField, w: &[f64]) -> BoundaryField {
    let mut out = a.clone();
    for ((o, bv), wv) in out.values_mut().iter_mut().zip(b.values()).zip(w) {
        *o = (*o - bv) * wv;
    }
    out
}

/// Observed contraction ratios set against `s^-p alpha + beta c^p`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractionReport {
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub mean_ratio: f64,
    pub predicted_shape: f64,
    /// `max_ratio / predicted_shape` (0 when the shape vanishes).
    pub c_emp: f64,
}

pub fn contraction_report(ratios: &[f64], f: &Nonlinearity, s: f64, c: f64) -> ContractionReport {
    let (alpha, beta, p) = match f.derivative_growth {
        Some(g) => (g.alpha, g.beta, g.p),
        None => (f.growth.alpha2, f.growth.beta, f.growth.p),
    };
    let predicted_shape = s.powf(-p) * alpha + beta * c.powf(p);
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let mean_ratio = if ratios.is_empty() {
        0.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    ContractionReport {
        ratios: ratios.to_vec(),
        max_ratio,
        mean_ratio,
        predicted_shape,
        c_emp: if predicted_shape > 0.0 {
            max_ratio / predicted_shape
        } else {
            0.0
        },
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceBound {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// `|rho f(y_hat)|` in `L2(H^{p-3/2})` (in `L2Q` for `p = 3/2`) against
/// `alpha1 e^-s sqrt(T |Omega|) + alpha2 s + beta c^p s^{1+p}` with the raw
/// weight and `c = max phi`; for `p = 3/2` the last term is `beta (c s)^{3/2} s`.
pub fn source_bound_check(
    grid: &SpaceTimeGrid,
    y_hat: &ScalarField,
    f: &Nonlinearity,
    params: &WeightParams,
) -> Result<SourceBound> {
    let w = eval_weights(grid, params, Normalization::Raw)?;
    let p = f.growth.p;
    let s = params.s;
    let fy = y_hat.map(|v| f.eval(v)).weighted(&w.rho);
    let lhs = if p >= 1.5 {
        l2q(grid, &fy)
    } else {
        l2_hminus_r(grid, &fy, 1.5 - p)
    };
    let g = f.growth;
    let tail = if p >= 1.5 {
        g.beta * (w.c * s).powf(1.5) * s
    } else {
        g.beta * w.c.powf(p) * s.powf(1.0 + p)
    };
    let rhs = g.alpha1 * (-s).exp() * (grid.t_final() * grid.domain().measure()).sqrt() + g.alpha2 * s + tail;
    Ok(SourceBound {
        lhs,
        rhs,
        ratio: if rhs > 0.0 { lhs / rhs } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{validate_geometry, CutoffProfile, GeometryConfig};
    use crate::linear::SystemOptions;
    use std::f64::consts::{E, PI};

    #[test]
    fn ln_plus_examples() {
        for p in [0.0, 0.5, 1.0, 1.5, 3.0] {
            assert_eq!(ln_plus_p(1.0, p), 0.0);
            assert_eq!(ln_plus_p(0.0, p), 0.0);
            assert_eq!(ln_plus_p(-0.7, p), 0.0);
        }
        assert!((ln_plus_p(E, 2.0) - 1.0).abs() < 1e-15);
        assert!((ln_plus_p(-E * E, 1.5) - 2f64.powf(1.5)).abs() < 1e-14);
    }

    #[test]
    fn builtins_pass_their_certificates() {
        for name in BUILTIN_NAMES {
            for p in [0.5, 1.0, 1.5] {
                let f = Nonlinearity::builtin(name, 0.05, p).unwrap();
                let cert = verify_growth(&f, DEFAULT_GROWTH_RANGE, 400).unwrap();
                assert!(cert.worst_slack >= 0.0, "{name} {p}");
                assert!(cert.derivative_worst_slack.unwrap() >= 0.0, "{name} {p}");
            }
        }
        assert!(matches!(
            Nonlinearity::builtin("cubic", 1.0, 1.0),
            Err(Error::UnknownNonlinearity(_))
        ));
    }

    #[test]
    fn quadratic_fails_growth_check() {
        let g = Growth {
            alpha1: 10.0,
            alpha2: 10.0,
            beta: 10.0,
            p: 1.5,
        };
        let f = Nonlinearity::new("square", |r| r * r, None, g, None);
        let err = verify_growth(&f, 1e8, 200).unwrap_err();
        assert!(matches!(err, Error::GrowthViolated { which: "H_p", r, .. } if r.abs() > 10.0));
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for name in ["superlinear", "superlinear_flipped", "sine", "linear"] {
            let f = Nonlinearity::builtin(name, 0.3, 1.5).unwrap();
            for r in [-7.0, -0.3, 0.2, 1.0, 40.0] {
                let h = 1e-6 * (1.0 + f64::abs(r));
                let fd = (f.eval(r + h) - f.eval(r - h)) / (2.0 * h);
                assert!((fd - f.derivative(r).unwrap()).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    fn setup(nx: usize, s: f64) -> (GeometryConfig, SpaceTimeGrid, CutoffProfile, WeightParams) {
        let cfg = GeometryConfig::interval(0.0, 1.0, -0.2, 2.6, 0.08);
        let part = validate_geometry(&cfg).unwrap();
        let grid = SpaceTimeGrid::with_cfl(&cfg, &[nx], 0.9).unwrap();
        let prof = CutoffProfile::new(&cfg, part);
        (cfg.clone(), grid, prof, WeightParams::new(&cfg, s))
    }

    fn sine_data(grid: &SpaceTimeGrid) -> ControlData {
        let u0 = (0..grid.n_space()).map(|k| (PI * grid.point(k)[0]).sin()).collect();
        ControlData::new(grid, u0, vec![0.0; grid.n_space()]).unwrap()
    }

    #[test]
    fn zero_map_converges_in_one_step() {
        let (_, grid, prof, params) = setup(16, 4.0);
        let sys = WeightedSystem::assemble(&grid, &params, &prof, SystemOptions::default()).unwrap();
        let data = sine_data(&grid);
        let f = Nonlinearity::builtin("zero", 0.0, 1.0).unwrap();
        let run = run_fixed_point(
            &sys,
            &data,
            &f,
            ClassSpec::for_exponent(1.0, 4.0),
            &FixedPointOptions::default(),
        )
        .unwrap();
        assert_eq!(run.outcome, Outcome::Converged);
        assert_eq!(run.trace.len(), 1);
        assert_eq!(run.trace[0].d, 0.0);
        let report = contraction_report(&run.ratios(), &f, 4.0, 1.0);
        assert_eq!(report.max_ratio, 0.0);
    }

    #[test]
    fn superlinear_run_contracts() {
        let (_, grid, prof, params) = setup(24, 4.0);
        let sys = WeightedSystem::assemble(&grid, &params, &prof, SystemOptions::default()).unwrap();
        let data = sine_data(&grid);
        let f = Nonlinearity::builtin("superlinear", 0.05, 1.0).unwrap();
        let run = run_fixed_point(
            &sys,
            &data,
            &f,
            ClassSpec::for_exponent(1.0, 4.0),
            &FixedPointOptions::default(),
        )
        .unwrap();
        assert_eq!(run.outcome, Outcome::Converged);
        assert!(run.ratios().iter().all(|&r| r < 0.9));
        assert!(run.class_escapes.is_empty());
        run.check().unwrap();
    }

    #[test]
    fn source_is_pointwise_minus_f() {
        let (_, grid, _, _) = setup(10, 4.0);
        let y = ScalarField::from_fn(&grid, |x, t| 3.0 * x[0] - t);
        let base = ScalarField::from_fn(&grid, |x, _| x[0]);
        let f = Nonlinearity::builtin("superlinear", 0.05, 1.0).unwrap();
        let b = nonlinear_source(&y, &f, &base);
        for i in 0..b.values().len() {
            assert_eq!(b.values()[i], base.values()[i] - f.eval(y.values()[i]));
        }
    }

    #[test]
    fn class_examples() {
        let (_, grid, _, params) = setup(10, 4.0);
        let rho = raw_rho(&grid, &params).unwrap();
        let zero = check_class(
            &grid,
            &ScalarField::zeros(&grid),
            ClassSpec::for_exponent(1.0, 4.0),
            &rho,
        );
        assert!(zero.member);
        assert_eq!(zero.margins[0].margin, 4.0);
        assert_eq!(zero.margins[1].margin, 64.0);
        // rho y constant with L2Q norm 2s
        let q = grid.t_final() * grid.domain().measure();
        let c = 8.0 / q.sqrt();
        let y = ScalarField::from_values(&grid, rho.iter().map(|r| c / r).collect()).unwrap();
        let check = check_class(&grid, &y, ClassSpec::for_exponent(1.0, 4.0), &rho);
        assert!(!check.member);
        assert!((check.margins[0].value - 8.0).abs() < 1e-9);
    }

    #[test]
    fn constant_source_bound() {
        let (_, grid, _, params) = setup(10, 3.0);
        let f = Nonlinearity::new(
            "const",
            |_| 0.5,
            None,
            Growth {
                alpha1: 0.5,
                alpha2: 0.0,
                beta: 0.0,
                p: 1.5,
            },
            None,
        );
        let sb = source_bound_check(&grid, &ScalarField::zeros(&grid), &f, &params).unwrap();
        let bound = 0.5 * (-3.0f64).exp() * (grid.t_final() * grid.domain().measure()).sqrt();
        assert!(sb.lhs > 0.0 && sb.lhs <= bound);
        let zero = Nonlinearity::builtin("zero", 0.0, 1.0).unwrap();
        assert_eq!(
            source_bound_check(&grid, &ScalarField::zeros(&grid), &zero, &params)
                .unwrap()
                .lhs,
            0.0
        );
    }

    #[test]
    fn loglog_slope_recovers_power() {
        let pts: Vec<(f64, f64)> = [2.0, 4.0, 8.0].iter().map(|&s: &f64| (s, 3.0 * s.powf(-1.2))).collect();
        assert!((loglog_slope(&pts) + 1.2).abs() < 1e-12);
    }
}
