//! Turns a validated configuration into grid, weights, data and solver options.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufReader;

use wavecontrol::fixed_point::{FixedPointOptions, Nonlinearity};
use wavecontrol::geometry::{default_s, CutoffProfile, WeightParams};
use wavecontrol::linear::{ControlData, SystemOptions, WeightedSystem};
use wavecontrol::mesh::{read_slice_csv, SpaceTimeGrid};

use crate::config::{ConfigTable, Profile, RunConfig};
use crate::error::{CliError, ConfigError};

pub struct Problem {
    pub grid: SpaceTimeGrid,
    pub profile: CutoffProfile,
    pub params: WeightParams,
    pub data: ControlData,
    pub options: SystemOptions,
    pub nonlinearity: Nonlinearity,
    pub fixed_point: FixedPointOptions,
    /// The configuration with every `auto` replaced by the value used.
    pub resolved: ConfigTable,
}

fn slice(grid: &SpaceTimeGrid, profile: &Profile, key: &str) -> Result<Vec<f64>, CliError> {
    let lo = grid.domain().lower();
    let hi = grid.domain().upper();
    let dim = grid.dim();
    let eval = |f: &dyn Fn(f64, usize) -> f64| -> Vec<f64> {
        (0..grid.n_space())
            .map(|k| {
                let p = grid.point(k);
                (0..dim).map(|i| f(p[i], i)).product()
            })
            .collect()
    };
    Ok(match profile {
        Profile::Zero => vec![0.0; grid.n_space()],
        Profile::Sine(a) => eval(&|x, i| (PI * (x - lo[i]) / (hi[i] - lo[i])).sin())
            .into_iter()
            .map(|v| a * v)
            .collect(),
        Profile::Parabola(a) => eval(&|x, i| (x - lo[i]) * (hi[i] - x))
            .into_iter()
            .map(|v| a * v)
            .collect(),
        Profile::Csv(path) => {
            let invalid = |msg: String| {
                CliError::Config(ConfigError::InvalidValue {
                    section: "data".into(),
                    key: key.into(),
                    value: format!("csv:{}", path.display()),
                    constraint: msg,
                })
            };
            let file = File::open(path).map_err(|e| invalid(e.to_string()))?;
            read_slice_csv(grid, BufReader::new(file)).map_err(|e| invalid(e.to_string()))?
        }
    })
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

impl Problem {
    pub fn build(cfg: &RunConfig) -> Result<Self, CliError> {
        let grid = match cfg.grid.nt {
            Some(nt) => SpaceTimeGrid::new(&cfg.geometry, &cfg.grid.nx, nt),
            None => SpaceTimeGrid::with_cfl(&cfg.geometry, &cfg.grid.nx, cfg.grid.cfl),
        }
        .map_err(|e| ConfigError::InvalidValue {
            section: "grid".into(),
            key: "nx".into(),
            value: cfg.table.get("grid", "nx").into(),
            constraint: e.to_string(),
        })?;
        let d = &cfg.data;
        let data = ControlData::with_all(
            &grid,
            slice(&grid, &d.u0, "u0")?,
            slice(&grid, &d.u1, "u1")?,
            wavecontrol::mesh::ScalarField::zeros(&grid),
            slice(&grid, &d.z0, "z0")?,
            slice(&grid, &d.z1, "z1")?,
        )?;
        let w = &cfg.weights;
        let s = w.s.unwrap_or_else(|| default_s(w.s0, data.energy_norm(&grid)));
        let mut params = WeightParams::with(&cfg.geometry, w.beta, w.lambda, w.m0, s);
        params.s0 = w.s0;
        let options = SystemOptions {
            eps: cfg.solver.epsilon,
            normalization: w.normalization,
            solver: cfg.solver.kind,
            tol: cfg.solver.tol,
            ..SystemOptions::default()
        };
        let nl = &cfg.nonlinearity;
        let nonlinearity = Nonlinearity::builtin(&nl.name, nl.a, nl.p)?;

        let mut resolved = cfg.table.clone();
        let eps = options.eps.unwrap_or(grid.h_max() * grid.dt());
        // resolved.cfg lives elsewhere, so data files are referenced absolutely
        for (key, profile) in [("u0", &d.u0), ("u1", &d.u1), ("z0", &d.z0), ("z1", &d.z1)] {
            if let Profile::Csv(path) = profile {
                let abs = std::path::absolute(path).unwrap_or_else(|_| path.clone());
                resolved.set(&format!("data.{key}"), &format!("csv:{}", abs.display()))?;
            }
        }
        if grid.dim() == 2 {
            resolved.set("geometry.gamma0_margin", &fmt(cfg.partition.margin))?;
        }
        for (name, value) in [
            ("weights.s", fmt(s)),
            ("weights.M0", fmt(params.m0)),
            ("grid.nt", grid.nt().to_string()),
            ("solver.epsilon", fmt(eps)),
        ] {
            resolved.set(name, &value)?;
        }

        Ok(Problem {
            profile: CutoffProfile::new(&cfg.geometry, cfg.partition.clone()),
            grid,
            params,
            data,
            options: SystemOptions {
                eps: Some(eps),
                ..options
            },
            nonlinearity,
            fixed_point: FixedPointOptions {
                tol: cfg.solver.fp_tol,
                max_iter: cfg.solver.max_iter,
                y0: None,
            },
            resolved,
        })
    }

    pub fn system(&self) -> Result<WeightedSystem<'_>, CliError> {
        Ok(WeightedSystem::assemble(
            &self.grid,
            &self.params,
            &self.profile,
            self.options.clone(),
        )?)
    }
}
