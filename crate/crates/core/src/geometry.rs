//! Geometric control condition, Carleman weights and cut-off functions.
//!
//! The weight is `rho = exp(-s * phi)` with `phi = exp(lambda * psi)` and
//! `psi(x, t) = |x - x0|^2 - beta (t - T/2)^2 + M0`. The time cut-off `eta`
//! and the boundary cut-off `Psi` localize the observation to
//! `Gamma0 x (delta, T - delta)`.

use crate::error::{Error, Result};
use crate::mesh::SpaceTimeGrid;

/// Quintic smoothstep on [0, 1]; C2 at both ends.
pub fn smoothstep5(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (u * (6.0 * u - 15.0) + 10.0)
}

/// One face of an interval (two endpoints) or of an axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Face {
    Left,
    Right,
    Bottom,
    Top,
}

impl Face {
    pub fn normal(self) -> [f64; 2] {
        match self {
            Face::Left => [-1.0, 0.0],
            Face::Right => [1.0, 0.0],
            Face::Bottom => [0.0, -1.0],
            Face::Top => [0.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Face::Left => "left",
            Face::Right => "right",
            Face::Bottom => "bottom",
            Face::Top => "top",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Domain {
    Interval { a: f64, b: f64 },
    Rectangle { x: [f64; 2], y: [f64; 2] },
}

impl Domain {
    pub fn unit_interval() -> Self {
        Domain::Interval { a: 0.0, b: 1.0 }
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Interval { .. } => 1,
            Domain::Rectangle { .. } => 2,
        }
    }

    pub fn check(&self) -> Result<()> {
        let ok = match *self {
            Domain::Interval { a, b } => a.is_finite() && b.is_finite() && b > a,
            Domain::Rectangle { x, y } => x.iter().chain(y.iter()).all(|v| v.is_finite()) && x[1] > x[0] && y[1] > y[0],
        };
        if ok {
            Ok(())
        } else {
            Err(Error::BadDomain(format!("{self:?}")))
        }
    }

    /// Lower corner; the unused second coordinate of an interval is 0.
    pub fn lower(&self) -> [f64; 2] {
        match *self {
            Domain::Interval { a, .. } => [a, 0.0],
            Domain::Rectangle { x, y } => [x[0], y[0]],
        }
    }

    pub fn upper(&self) -> [f64; 2] {
        match *self {
            Domain::Interval { b, .. } => [b, 0.0],
            Domain::Rectangle { x, y } => [x[1], y[1]],
        }
    }

    /// Side lengths; the second entry is 1 for an interval.
    pub fn lengths(&self) -> [f64; 2] {
        match *self {
            Domain::Interval { a, b } => [b - a, 1.0],
            Domain::Rectangle { x, y } => [x[1] - x[0], y[1] - y[0]],
        }
    }

    pub fn measure(&self) -> f64 {
        let l = self.lengths();
        l[0] * l[1]
    }

    pub fn faces(&self) -> &'static [Face] {
        match self {
            Domain::Interval { .. } => &[Face::Left, Face::Right],
            Domain::Rectangle { .. } => &[Face::Left, Face::Right, Face::Bottom, Face::Top],
        }
    }

    pub fn contains_closure(&self, p: [f64; 2]) -> bool {
        let (lo, hi) = (self.lower(), self.upper());
        (0..self.dim()).all(|k| p[k] >= lo[k] && p[k] <= hi[k])
    }

    /// max over the closure of |x - p|.
    pub fn max_dist(&self, p: [f64; 2]) -> f64 {
        let (lo, hi) = (self.lower(), self.upper());
        (0..self.dim())
            .map(|k| {
                let d = (p[k] - lo[k]).abs().max((p[k] - hi[k]).abs());
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// min over the closure of |x - p|.
    pub fn min_dist(&self, p: [f64; 2]) -> f64 {
        let (lo, hi) = (self.lower(), self.upper());
        (0..self.dim())
            .map(|k| {
                let c = p[k].clamp(lo[k], hi[k]);
                (p[k] - c) * (p[k] - c)
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Corner shared by two faces, if they are adjacent.
    fn shared_corner(&self, f: Face, g: Face) -> Option<[f64; 2]> {
        let (lo, hi) = (self.lower(), self.upper());
        let xv = |face: Face| match face {
            Face::Left => Some(lo[0]),
            Face::Right => Some(hi[0]),
            _ => None,
        };
        let yv = |face: Face| match face {
            Face::Bottom => Some(lo[1]),
            Face::Top => Some(hi[1]),
            _ => None,
        };
        match (xv(f).or(xv(g)), yv(f).or(yv(g))) {
            (Some(x), Some(y)) if self.dim() == 2 => Some([x, y]),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryConfig {
    pub domain: Domain,
    pub x0: [f64; 2],
    pub t_final: f64,
    pub delta: f64,
    /// Width of the band of `Gamma0` around `Gamma1` on a rectangle.
    /// Defaults to a quarter of the shortest side.
    pub gamma0_margin: Option<f64>,
}

impl GeometryConfig {
    pub fn interval(a: f64, b: f64, x0: f64, t_final: f64, delta: f64) -> Self {
        GeometryConfig {
            domain: Domain::Interval { a, b },
            x0: [x0, 0.0],
            t_final,
            delta,
            gamma0_margin: None,
        }
    }

    pub fn rectangle(x: [f64; 2], y: [f64; 2], x0: [f64; 2], t_final: f64, delta: f64) -> Self {
        GeometryConfig {
            domain: Domain::Rectangle { x, y },
            x0,
            t_final,
            delta,
            gamma0_margin: None,
        }
    }
}

/// Observed part of the boundary together with the control support.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryPartition {
    pub domain: Domain,
    /// Faces where (x - x0) . nu > 0.
    pub gamma1: Vec<Face>,
    /// dist(Gamma1, boundary \ Gamma0).
    pub margin: f64,
    /// 2 max |x - x0| over the closure.
    pub t_min: f64,
}

impl BoundaryPartition {
    pub fn in_gamma1(&self, face: Face) -> bool {
        self.gamma1.contains(&face)
    }

    /// Boundary cut-off at a point `p` lying on `face`.
    pub fn psi_cut(&self, p: [f64; 2], face: Face) -> f64 {
        if self.in_gamma1(face) {
            return 1.0;
        }
        if self.domain.dim() == 1 {
            return 0.0;
        }
        let d = self
            .gamma1
            .iter()
            .filter_map(|&g| self.domain.shared_corner(face, g))
            .map(|c| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        if d < self.margin {
            1.0 - smoothstep5(d / self.margin)
        } else {
            0.0
        }
    }

    pub fn in_gamma0(&self, p: [f64; 2], face: Face) -> bool {
        self.in_gamma1(face) || self.psi_cut(p, face) > 0.0
    }
}

/// Checks the multiplier condition and the time condition and builds the
/// partition of the boundary.
pub fn validate_geometry(cfg: &GeometryConfig) -> Result<BoundaryPartition> {
    cfg.domain.check()?;
    if cfg.domain.contains_closure(cfg.x0) {
        return Err(Error::X0InsideDomain { x0: cfg.x0 });
    }
    if !(cfg.delta > 0.0) {
        return Err(Error::BadDelta(cfg.delta));
    }
    let t_min = 2.0 * cfg.domain.max_dist(cfg.x0);
    let available = cfg.t_final - 2.0 * cfg.delta;
    if !(available > t_min) {
        return Err(Error::TimeTooShort { available, t_min });
    }
    let (lo, hi) = (cfg.domain.lower(), cfg.domain.upper());
    let gamma1: Vec<Face> = cfg
        .domain
        .faces()
        .iter()
        .copied()
        .filter(|&f| {
            let n = f.normal();
            // (x - x0) . nu is constant along an axis-aligned face
            let on_face = match f {
                Face::Left => [lo[0], lo[1]],
                Face::Right => [hi[0], lo[1]],
                Face::Bottom => [lo[0], lo[1]],
                Face::Top => [lo[0], hi[1]],
            };
            (on_face[0] - cfg.x0[0]) * n[0] + (on_face[1] - cfg.x0[1]) * n[1] > 0.0
        })
        .collect();
    let margin = match cfg.domain {
        Domain::Interval { a, b } => b - a,
        Domain::Rectangle { .. } => {
            let l = cfg.domain.lengths();
            let shortest = l[0].min(l[1]);
            let m = cfg.gamma0_margin.unwrap_or(0.25 * shortest);
            if !(m > 0.0 && m < shortest) {
                return Err(Error::BadDomain(format!(
                    "gamma0 margin {m} must lie in (0, {shortest})"
                )));
            }
            m
        }
    };
    Ok(BoundaryPartition {
        domain: cfg.domain,
        gamma1,
        margin,
        t_min,
    })
}

/// Time cut-off `eta` and boundary cut-off `Psi` built from a validated geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct CutoffProfile {
    pub t_final: f64,
    pub delta: f64,
    /// Width of each quintic ramp; the plateau `eta = 1` is `[delta + ramp, T - delta - ramp]`.
    pub ramp: f64,
    pub partition: BoundaryPartition,
}

impl CutoffProfile {
    pub fn new(cfg: &GeometryConfig, partition: BoundaryPartition) -> Self {
        let ramp = cfg.delta.min(0.5 * (cfg.t_final - 2.0 * cfg.delta));
        CutoffProfile {
            t_final: cfg.t_final,
            delta: cfg.delta,
            ramp,
            partition,
        }
    }

    pub fn plateau(&self) -> (f64, f64) {
        (self.delta + self.ramp, self.t_final - self.delta - self.ramp)
    }

    pub fn eta(&self, t: f64) -> f64 {
        let (d, big_t, w) = (self.delta, self.t_final, self.ramp);
        if t <= d || t >= big_t - d {
            0.0
        } else if t < d + w {
            smoothstep5((t - d) / w)
        } else if t > big_t - d - w {
            smoothstep5((big_t - d - t) / w)
        } else {
            1.0
        }
    }

    pub fn psi_cut(&self, p: [f64; 2], face: Face) -> f64 {
        self.partition.psi_cut(p, face)
    }
}

/// Evaluates `(eta(t_k), Psi(p_j))` for lists of times and boundary points.
pub fn eval_cutoffs(times: &[f64], points: &[([f64; 2], Face)], profile: &CutoffProfile) -> (Vec<f64>, Vec<f64>) {
    (
        times.iter().map(|&t| profile.eta(t)).collect(),
        points.iter().map(|&(p, f)| profile.psi_cut(p, f)).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// `rho = exp(-s phi)`.
    Raw,
    /// `rho = exp(-s (phi - min phi))`, so that `max rho = 1`.
    Normalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightParams {
    pub x0: [f64; 2],
    pub t_final: f64,
    pub beta: f64,
    pub lambda: f64,
    pub m0: f64,
    pub s: f64,
    pub s0: f64,
}

pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// `M0 = max(0, beta (T/2)^2 - min |x - x0|^2) + 1`, which makes `psi >= 1`.
pub fn auto_m0(cfg: &GeometryConfig, beta: f64) -> f64 {
    let dmin = cfg.domain.min_dist(cfg.x0);
    (beta * (0.5 * cfg.t_final).powi(2) - dmin * dmin).max(0.0) + 1.0
}

/// `s = max(s0, 1 + ln(1 + |(u0, u1)|))`.
pub fn default_s(s0: f64, data_norm: f64) -> f64 {
    s0.max(1.0 + (1.0 + data_norm).ln())
}

impl WeightParams {
    pub fn new(cfg: &GeometryConfig, s: f64) -> Self {
        Self::with(cfg, DEFAULT_BETA, DEFAULT_LAMBDA, None, s)
    }

    pub fn with(cfg: &GeometryConfig, beta: f64, lambda: f64, m0: Option<f64>, s: f64) -> Self {
        WeightParams {
            x0: cfg.x0,
            t_final: cfg.t_final,
            beta,
            lambda,
            m0: m0.unwrap_or_else(|| auto_m0(cfg, beta)),
            s,
            s0: 1.0,
        }
    }

    pub fn with_s(&self, s: f64) -> Self {
        WeightParams { s, ..self.clone() }
    }

    pub fn psi(&self, x: [f64; 2], t: f64) -> f64 {
        let dx = [x[0] - self.x0[0], x[1] - self.x0[1]];
        let tc = t - 0.5 * self.t_final;
        dx[0] * dx[0] + dx[1] * dx[1] - self.beta * tc * tc + self.m0
    }

    pub fn phi(&self, x: [f64; 2], t: f64) -> f64 {
        (self.lambda * self.psi(x, t)).exp()
    }

    pub fn rho_raw(&self, x: [f64; 2], t: f64) -> f64 {
        (-self.s * self.phi(x, t)).exp()
    }

    /// Derivatives of `rho^-1 = exp(s phi)` divided by `rho^-1`:
    /// `(d_t, d_tt, grad, laplacian)`, exact by the chain rule.
    pub fn inv_rho_log_derivs(&self, x: [f64; 2], t: f64, dim: usize) -> InvRhoDerivs {
        let (s, lam) = (self.s, self.lambda);
        let phi = self.phi(x, t);
        let psi_t = -2.0 * self.beta * (t - 0.5 * self.t_final);
        let psi_tt = -2.0 * self.beta;
        let mut grad = [0.0; 2];
        let mut grad2 = 0.0;
        for k in 0..dim {
            let g = 2.0 * (x[k] - self.x0[k]);
            grad[k] = s * lam * phi * g;
            grad2 += g * g;
        }
        let lap_psi = 2.0 * dim as f64;
        let a = s * lam * phi;
        InvRhoDerivs {
            dt: a * psi_t,
            dtt: a * a * psi_t * psi_t + a * (lam * psi_t * psi_t + psi_tt),
            grad,
            lap: a * a * grad2 + a * (lam * grad2 + lap_psi),
        }
    }
}

/// Derivatives of `rho^-1`, each divided by `rho^-1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvRhoDerivs {
    pub dt: f64,
    pub dtt: f64,
    pub grad: [f64; 2],
    pub lap: f64,
}

/// Nodal weight fields on a space-time grid.
#[derive(Clone, Debug)]
pub struct WeightFields {
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
    pub rho: Vec<f64>,
    pub normalization: Normalization,
    pub s: f64,
    /// max phi over the grid.
    pub c: f64,
    pub phi_min: f64,
}

impl WeightFields {
    pub fn rho_inv2(&self, node: usize) -> f64 {
        let r = self.rho[node];
        1.0 / (r * r)
    }

    pub fn max_rho_inv2(&self) -> f64 {
        self.rho.iter().fold(0.0_f64, |m, &r| m.max(1.0 / (r * r)))
    }
}

pub fn eval_weights(grid: &SpaceTimeGrid, params: &WeightParams, normalization: Normalization) -> Result<WeightFields> {
    let n = grid.node_count();
    let mut psi = Vec::with_capacity(n);
    let mut phi = Vec::with_capacity(n);
    for node in 0..n {
        let (x, t) = grid.coords(node);
        let p = params.psi(x, t);
        if !(p > 0.0) {
            return Err(Error::PsiNonPositive { node, value: p });
        }
        psi.push(p);
        phi.push((params.lambda * p).exp());
    }
    let c = phi.iter().copied().fold(f64::MIN, f64::max);
    let phi_min = phi.iter().copied().fold(f64::MAX, f64::min);
    let shift = match normalization {
        Normalization::Raw => 0.0,
        Normalization::Normalized => phi_min,
    };
    let rho = phi.iter().map(|&f| (-params.s * (f - shift)).exp()).collect();
    Ok(WeightFields {
        psi,
        phi,
        rho,
        normalization,
        s: params.s,
        c,
        phi_min,
    })
}

/// Empirical constants `C` in `|d_t rho^-1| <= C s rho^-1`,
/// `|d_tt rho^-1| <= C s^2 rho^-1`, `|grad rho^-1| <= C s rho^-1` and
/// `|lap rho^-1| <= C s^2 rho^-1`, maximized over the grid nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivativeConstants {
    pub c_t: f64,
    pub c_tt: f64,
    pub c_grad: f64,
    pub c_lap: f64,
}

pub fn weight_derivative_report(params: &WeightParams, grid: &SpaceTimeGrid) -> DerivativeConstants {
    let s = params.s;
    let dim = grid.dim();
    let mut out = DerivativeConstants {
        c_t: 0.0,
        c_tt: 0.0,
        c_grad: 0.0,
        c_lap: 0.0,
    };
    for node in 0..grid.node_count() {
        let (x, t) = grid.coords(node);
        let d = params.inv_rho_log_derivs(x, t, dim);
        let g = (d.grad[0] * d.grad[0] + d.grad[1] * d.grad[1]).sqrt();
        out.c_t = out.c_t.max(d.dt.abs() / s);
        out.c_tt = out.c_tt.max(d.dtt.abs() / (s * s));
        out.c_grad = out.c_grad.max(g / s);
        out.c_lap = out.c_lap.max(d.lap.abs() / (s * s));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cfg() -> GeometryConfig {
        GeometryConfig::interval(0.0, 1.0, -0.2, 2.6, 0.08)
    }

    #[test]
    fn interval_partition() {
        let p = validate_geometry(&unit_cfg()).unwrap();
        assert_eq!(p.gamma1, vec![Face::Right]);
        assert!((p.t_min - 2.4).abs() < 1e-12);
        assert!(p.margin > 0.0);
        assert_eq!(p.psi_cut([1.0, 0.0], Face::Right), 1.0);
        assert_eq!(p.psi_cut([0.0, 0.0], Face::Left), 0.0);
    }

    #[test]
    fn x0_inside_is_rejected() {
        let cfg = GeometryConfig::interval(0.0, 1.0, 0.5, 2.6, 0.08);
        assert!(matches!(validate_geometry(&cfg), Err(Error::X0InsideDomain { .. })));
        // the closure counts as inside
        let cfg = GeometryConfig::interval(0.0, 1.0, 0.0, 2.6, 0.08);
        assert!(matches!(validate_geometry(&cfg), Err(Error::X0InsideDomain { .. })));
    }

    #[test]
    fn short_horizon_is_rejected() {
        let cfg = GeometryConfig::interval(0.0, 1.0, -0.2, 2.5, 0.1);
        match validate_geometry(&cfg) {
            Err(Error::TimeTooShort { available, t_min }) => {
                assert!((available - 2.3).abs() < 1e-12);
                assert!((t_min - 2.4).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_delta() {
        let cfg = GeometryConfig::interval(0.0, 1.0, -0.2, 2.6, 0.0);
        assert_eq!(validate_geometry(&cfg), Err(Error::BadDelta(0.0)));
    }

    #[test]
    fn validation_is_deterministic() {
        let cfg = GeometryConfig::rectangle([0.0, 1.0], [0.0, 0.5], [-0.3, 0.2], 4.0, 0.1);
        assert_eq!(validate_geometry(&cfg), validate_geometry(&cfg));
    }

    #[test]
    fn rectangle_gamma1_per_face() {
        // x0 to the left and between the horizontal faces: right, bottom and top see it
        let cfg = GeometryConfig::rectangle([0.0, 1.0], [0.0, 1.0], [-0.5, 0.5], 5.0, 0.1);
        let p = validate_geometry(&cfg).unwrap();
        assert_eq!(p.gamma1, vec![Face::Right, Face::Bottom, Face::Top]);
        // x0 below-left: only right and top
        let cfg = GeometryConfig::rectangle([0.0, 1.0], [0.0, 1.0], [-0.5, -0.5], 5.0, 0.1);
        let p = validate_geometry(&cfg).unwrap();
        assert_eq!(p.gamma1, vec![Face::Right, Face::Top]);
        // psi is 1 on gamma1, decays along the adjacent faces and is 0 far away
        assert_eq!(p.psi_cut([1.0, 0.3], Face::Right), 1.0);
        assert_eq!(p.psi_cut([0.0, 1.0], Face::Left), 1.0);
        let mid = p.psi_cut([0.0, 1.0 - 0.5 * p.margin], Face::Left);
        assert!((mid - 0.5).abs() < 1e-12);
        assert_eq!(p.psi_cut([0.0, 0.2], Face::Left), 0.0);
        assert_eq!(p.psi_cut([0.5, 0.0], Face::Bottom), 0.0);
        assert!(p.in_gamma0([1.0 - 0.1 * p.margin, 0.0], Face::Bottom));
    }

    #[test]
    fn eta_support_and_plateau() {
        let cfg = unit_cfg();
        let prof = CutoffProfile::new(&cfg, validate_geometry(&cfg).unwrap());
        assert_eq!(prof.eta(0.0), 0.0);
        assert_eq!(prof.eta(cfg.t_final), 0.0);
        assert_eq!(prof.eta(cfg.delta), 0.0);
        assert_eq!(prof.eta(cfg.t_final - cfg.delta), 0.0);
        assert_eq!(prof.eta(0.5 * cfg.t_final), 1.0);
        for k in 0..=1000 {
            let t = k as f64 * cfg.t_final / 1000.0;
            let e = prof.eta(t);
            assert!((0.0..=1.0).contains(&e));
        }
        // C1: one-sided difference quotients match at the ramp junctions
        let h = 1e-6;
        for t in [cfg.delta, cfg.delta + prof.ramp, cfg.t_final - cfg.delta - prof.ramp] {
            let left = (prof.eta(t) - prof.eta(t - h)) / h;
            let right = (prof.eta(t + h) - prof.eta(t)) / h;
            assert!((left - right).abs() < 1e-4, "kink at {t}: {left} vs {right}");
        }
    }

    #[test]
    fn m0_auto_makes_psi_at_least_one() {
        let cfg = unit_cfg();
        let p = WeightParams::new(&cfg, 4.0);
        for i in 0..=20 {
            for n in 0..=20 {
                let x = [i as f64 / 20.0, 0.0];
                let t = n as f64 * cfg.t_final / 20.0;
                assert!(p.psi(x, t) >= 1.0 - 1e-12);
            }
        }
        // t = T/2 drops the time term
        let x = [0.3, 0.0];
        assert!((p.psi(x, 1.3) - ((0.5f64).powi(2) + p.m0)).abs() < 1e-12);
    }

    #[test]
    fn default_s_grows_logarithmically() {
        assert_eq!(default_s(1.0, 0.0), 1.0);
        assert!((default_s(1.0, std::f64::consts::E - 1.0) - 2.0).abs() < 1e-12);
        assert_eq!(default_s(5.0, 1.0), 5.0);
    }

    #[test]
    fn first_order_constants_do_not_depend_on_s() {
        let cfg = unit_cfg();
        let p = WeightParams::new(&cfg, 2.0);
        let grid = SpaceTimeGrid::new(&cfg, &[16], 32).unwrap();
        let a = weight_derivative_report(&p, &grid);
        let b = weight_derivative_report(&p.with_s(8.0), &grid);
        assert!((a.c_t - b.c_t).abs() <= 0.1 * a.c_t);
        assert!((a.c_grad - b.c_grad).abs() <= 0.1 * a.c_grad);
        // d_t rho^-1 vanishes at T/2
        let d = p.inv_rho_log_derivs([0.4, 0.0], 1.3, 1);
        assert_eq!(d.dt, 0.0);
    }
}
