//! The `wavectl` commands. Each writes its artifacts into one run directory
//! and returns the bounds it checked plus a key=value summary.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavecontrol::fixed_point::{
    contraction_report, raw_rho, run_fixed_point, verify_growth, ClassSpec, GrowthCertificate, Outcome,
};
use wavecontrol::forward::verify_control;
use wavecontrol::geometry::{eval_weights, Normalization};
use wavecontrol::linear::random_dual_sample;
use wavecontrol::mesh::l2q;
use wavecontrol::Error as CoreError;

use crate::config::{ConfigTable, RunConfig};
use crate::error::{CliError, ConfigError};
use crate::output::{num, Bound, RunDir};
use crate::problem::Problem;
use crate::{plots, EXIT_OK, EXIT_VIOLATION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    LinearSolve,
    SemilinearSolve,
    VerifyCarleman,
    VerifyOptimality,
    GrowthCheck,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::LinearSolve => "linear-solve",
            Command::SemilinearSolve => "semilinear-solve",
            Command::VerifyCarleman => "verify-carleman",
            Command::VerifyOptimality => "verify-optimality",
            Command::GrowthCheck => "growth-check",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Invocation {
    pub command: Command,
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub param: Option<String>,
    pub values: Vec<String>,
    /// Replaces `output.directory` when set (from `WAVECTL_OUT`).
    pub out_root: Option<PathBuf>,
}

/// What a finished command reports back.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub exit: u8,
    pub fields: Vec<(String, String)>,
}

impl RunSummary {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// `key=value` pairs on one line; values with spaces or quotes are quoted.
    pub fn line(&self) -> String {
        self.fields
            .iter()
            .map(|(k, v)| {
                if v.is_empty() || v.contains([' ', '"', '=']) {
                    format!("{k}={v:?}")
                } else {
                    format!("{k}={v}")
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

struct Finding {
    bounds: Vec<Bound>,
    /// Names of the bounds whose violation fails the command.
    violated: Vec<String>,
    fields: Vec<(String, String)>,
}

impl Finding {
    fn require(&mut self, bound: &Bound) {
        if !bound.holds() {
            self.violated.push(bound.name.clone());
        }
    }
}

fn field(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn out_root(inv: &Invocation, cfg: Option<&RunConfig>) -> PathBuf {
    match (&inv.out_root, cfg) {
        (Some(root), _) => root.clone(),
        (None, Some(cfg)) => cfg.output.directory.clone(),
        (None, None) => PathBuf::from("wavectl_out"),
    }
}

fn load(inv: &Invocation) -> Result<(RunConfig, Vec<RunConfig>), ConfigError> {
    let mut table = ConfigTable::load(&inv.config)?;
    if let Some(seed) = inv.seed {
        table.set("solver.seed", &seed.to_string())?;
    }
    let base = RunConfig::from_table(table.clone())?;
    let mut variants = Vec::new();
    if inv.command == Command::Sweep {
        let param = inv.param.as_deref().ok_or_else(|| ConfigError::InvalidValue {
            section: String::new(),
            key: "--param".into(),
            value: String::new(),
            constraint: "sweep needs --param and --values".into(),
        })?;
        if inv.values.is_empty() {
            return Err(ConfigError::InvalidValue {
                section: String::new(),
                key: "--values".into(),
                value: String::new(),
                constraint: "at least one value is required".into(),
            });
        }
        for value in &inv.values {
            let mut t = table.clone();
            t.set(param, value)?;
            variants.push(RunConfig::from_table(t)?);
        }
    }
    Ok((base, variants))
}

fn error_summary(command: Command, dir: &Path, err: &CliError) -> RunSummary {
    let exit = err.exit_code();
    let _ = std::fs::create_dir_all(dir);
    let _ = std::fs::write(dir.join("error.txt"), format!("{err}\n"));
    RunSummary {
        exit,
        fields: vec![
            field("command", command.name()),
            field("exit", exit),
            field("status", "error"),
            field("out", dir.display()),
            field("error", err),
        ],
    }
}

/// Runs one invocation end to end; never panics on bad input.
pub fn execute(inv: &Invocation) -> RunSummary {
    let (base, variants) = match load(inv) {
        Ok(v) => v,
        Err(e) => return error_summary(inv.command, &out_root(inv, None).join(inv.command.name()), &e.into()),
    };
    let dir = out_root(inv, Some(&base)).join(inv.command.name());
    let result = if inv.command == Command::Sweep {
        sweep(
            &base,
            &variants,
            inv.param.as_deref().unwrap_or_default(),
            &inv.values,
            &dir,
        )
    } else {
        run_single(inv.command, &base, &dir)
    };
    result.unwrap_or_else(|e| error_summary(inv.command, &dir, &e))
}

fn run_single(command: Command, cfg: &RunConfig, dir: &Path) -> Result<RunSummary, CliError> {
    let problem = Problem::build(cfg)?;
    let run = RunDir::create(dir.to_path_buf())?;
    run.write_text("resolved.cfg", &problem.resolved.to_ini())?;
    let finding = match command {
        Command::LinearSolve => linear_solve(&problem, cfg, &run)?,
        Command::SemilinearSolve => semilinear_solve(&problem, cfg, &run)?,
        Command::VerifyCarleman => verify_carleman(&problem, cfg, &run)?,
        Command::VerifyOptimality => verify_optimality(&problem, cfg, &run)?,
        Command::GrowthCheck => growth_check(&problem, cfg, &run)?,
        Command::Sweep => unreachable!("sweeps are dispatched separately"),
    };
    run.write_report(&finding.bounds)?;
    let exit = if finding.violated.is_empty() {
        EXIT_OK
    } else {
        let mut text = String::new();
        for b in finding.bounds.iter().filter(|b| finding.violated.contains(&b.name)) {
            text.push_str(&format!(
                "bound '{}' violated: lhs {} > rhs {}\n",
                b.name,
                num(b.lhs),
                num(b.rhs)
            ));
        }
        run.write_text("error.txt", &text)?;
        EXIT_VIOLATION
    };
    if cfg.output.plots {
        if matches!(
            command,
            Command::LinearSolve | Command::SemilinearSolve | Command::VerifyOptimality
        ) {
            run.write_text("plot_fields.py", plots::FIELDS)?;
        }
        if command == Command::SemilinearSolve {
            run.write_text("plot_trace.py", plots::TRACE)?;
        }
        if command == Command::VerifyCarleman {
            run.write_text("plot_carleman.py", plots::CARLEMAN)?;
        }
    }
    let mut fields = vec![
        field("command", command.name()),
        field("exit", exit),
        field("status", if exit == EXIT_OK { "ok" } else { "violated" }),
        field("config_hash", problem.resolved.hash()),
        field("out", dir.display()),
        field("s", num(problem.params.s)),
        field("nx", problem.grid.npts()[0] - 2),
        field("nt", problem.grid.nt()),
    ];
    fields.extend(finding.fields);
    Ok(RunSummary { exit, fields })
}

fn residual_row(run: &RunDir, problem: &Problem, relative: f64, absolute: f64, traj: f64) -> Result<(), CliError> {
    let g = &problem.grid;
    let nx: Vec<String> = g.npts()[..g.dim()].iter().map(|n| (n - 2).to_string()).collect();
    run.write_csv(
        "residual.csv",
        &[
            "config_hash",
            "residual",
            "absolute",
            "trajectory_error",
            "nx",
            "nt",
            "s",
        ],
        &[vec![
            problem.resolved.hash(),
            num(relative),
            num(absolute),
            num(traj),
            nx.join("x"),
            g.nt().to_string(),
            num(problem.params.s),
        ]],
    )
}

fn linear_solve(problem: &Problem, cfg: &RunConfig, run: &RunDir) -> Result<Finding, CliError> {
    let sys = problem.system()?;
    let pair = sys.solve(&problem.data)?;
    let res = verify_control(&problem.grid, &pair, &problem.data, None)?;
    run.write_pair(&problem.grid, &pair)?;
    residual_row(run, problem, res.relative, res.absolute, res.trajectory_error)?;
    let s = problem.params.s;
    let mut bounds: Vec<Bound> = sys
        .estimate_report(&pair, &problem.data, cfg.nonlinearity.p)
        .iter()
        .map(Bound::from)
        .collect();
    let residual = Bound::new("control_residual", res.relative, cfg.solver.residual_bound).at_s(s);
    let mut finding = Finding {
        bounds: Vec::new(),
        violated: Vec::new(),
        fields: vec![
            field("residual", num(res.relative)),
            field("trajectory_error", num(res.trajectory_error)),
            field("solver_iterations", pair.stats.iterations),
        ],
    };
    finding.require(&residual);
    bounds.push(residual);
    finding.bounds = bounds;
    Ok(finding)
}

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Converged => "converged",
        Outcome::Diverged => "diverged",
        Outcome::IterationCap => "iteration_cap",
    }
}

fn semilinear_solve(problem: &Problem, cfg: &RunConfig, run: &RunDir) -> Result<Finding, CliError> {
    let sys = problem.system()?;
    let f = &problem.nonlinearity;
    let s = problem.params.s;
    let spec = ClassSpec::for_exponent(f.p(), s);
    let fp = run_fixed_point(&sys, &problem.data, f, spec, &problem.fixed_point)?;
    run.write_pair(&problem.grid, &fp.pair)?;
    run.write_trace(&fp.trace)?;
    let v = &fp.verification;
    residual_row(run, problem, v.relative, v.absolute, v.trajectory_error)?;

    let rho = raw_rho(&problem.grid, &problem.params)?;
    let c = eval_weights(&problem.grid, &problem.params, Normalization::Raw)?.c;
    let rep = contraction_report(&fp.ratios(), f, s, c);
    let last_d = fp.trace.last().map_or(0.0, |r| r.d);
    let state = l2q(&problem.grid, &fp.pair.y.weighted(&rho));

    let mut finding = Finding {
        bounds: sys
            .estimate_report(&fp.pair, &problem.data, f.p())
            .iter()
            .map(Bound::from)
            .collect(),
        violated: Vec::new(),
        fields: vec![
            field("outcome", outcome_name(fp.outcome)),
            field("iterations", fp.trace.len()),
            field("mean_ratio", num(rep.mean_ratio)),
            field("max_ratio", num(rep.max_ratio)),
            field("c_emp", num(rep.c_emp)),
            field("class_escapes", fp.class_escapes.len()),
            field("residual", num(v.relative)),
        ],
    };
    let residual = Bound::new("control_residual", v.relative, cfg.solver.residual_bound).at_s(s);
    let convergence = Bound::new("fixed_point_increment", last_d, problem.fixed_point.tol * state).at_s(s);
    let contraction = Bound::new("contraction_ratio", rep.max_ratio, 1.0).at_s(s);
    finding.require(&residual);
    if fp.outcome != Outcome::Converged {
        finding.violated.push(convergence.name.clone());
        if fp.outcome == Outcome::Diverged {
            finding.violated.push(contraction.name.clone());
        }
    }
    finding.bounds.extend([
        residual,
        convergence,
        contraction,
        Bound::new("contraction_shape", rep.max_ratio, rep.predicted_shape).at_s(s),
    ]);
    Ok(finding)
}

fn verify_carleman(problem: &Problem, cfg: &RunConfig, run: &RunDir) -> Result<Finding, CliError> {
    let sys = problem.system()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.solver.seed);
    let mut rows = Vec::new();
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    let mut sum = 0.0;
    for i in 0..cfg.solver.samples {
        let w = random_dual_sample(&problem.grid, &mut rng);
        let t = sys.carleman_ratio(&w)?;
        rows.push(vec![i.to_string(), num(t.lhs), num(t.rhs), num(t.ratio)]);
        sum += t.ratio;
        // NaN ratios always become the reported maximum
        if worst.is_none_or(|(_, _, _, r)| !(t.ratio <= r)) {
            worst = Some((i, t.lhs, t.rhs, t.ratio));
        }
    }
    let (idx, lhs, rhs, max) = worst.expect("at least one sample");
    rows.push(vec!["max".into(), num(lhs), num(rhs), num(max)]);
    run.write_csv("carleman.csv", &["sample", "lhs", "rhs", "ratio"], &rows)?;
    let bound = Bound::new("carleman_max_ratio", lhs, rhs).at_s(problem.params.s);
    let mut finding = Finding {
        bounds: vec![],
        violated: vec![],
        fields: vec![
            field("samples", cfg.solver.samples),
            field("seed", cfg.solver.seed),
            field("max_ratio", num(max)),
            field("max_sample", idx),
            field("mean_ratio", num(sum / cfg.solver.samples as f64)),
        ],
    };
    if !max.is_finite() {
        finding.violated.push(bound.name.clone());
    }
    finding.bounds.push(bound);
    Ok(finding)
}

fn verify_optimality(problem: &Problem, cfg: &RunConfig, run: &RunDir) -> Result<Finding, CliError> {
    let sys = problem.system()?;
    let pair = sys.solve(&problem.data)?;
    let rep = sys.optimality_check(&pair, &problem.data)?;
    run.write_pair(&problem.grid, &pair)?;
    let s = problem.params.s;
    let bound = Bound::new("kkt_discrepancy", rep.discrepancy, cfg.solver.kkt_bound).at_s(s);
    let mut finding = Finding {
        bounds: Vec::new(),
        violated: Vec::new(),
        fields: vec![
            field("discrepancy", num(rep.discrepancy)),
            field("kkt_size", rep.kkt_size),
            field(
                "objective",
                num(sys.penalized_objective(&pair.y, &pair.v, &problem.data)),
            ),
        ],
    };
    finding.require(&bound);
    finding.bounds.push(bound);
    match rep.unregularized {
        Ok(d) => {
            finding.fields.push(field("unregularized_discrepancy", num(d)));
            finding
                .bounds
                .push(Bound::new("kkt_unregularized_discrepancy", d, f64::INFINITY).at_s(s));
        }
        Err(e) => finding.fields.push(field("unregularized_discrepancy", e)),
    }
    Ok(finding)
}

fn growth_check(problem: &Problem, cfg: &RunConfig, run: &RunDir) -> Result<Finding, CliError> {
    let f = &problem.nonlinearity;
    let nl = &cfg.nonlinearity;
    // the same log-spaced magnitudes the certificate samples
    let (lo, hi) = (1e-8_f64.ln(), nl.range.ln());
    let mut points = vec![0.0];
    for i in 0..nl.samples {
        let m = (lo + (hi - lo) * i as f64 / (nl.samples - 1) as f64).exp();
        points.extend([-m, m]);
    }
    points.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    let mut worst_d: Option<(f64, f64, f64)> = None;
    for &r in &points {
        let (value, bound) = (f.eval(r).abs(), f.growth.bound(r));
        let mut row = vec![num(r), num(value), num(bound), String::new(), String::new()];
        if let (Some(d), Some(g)) = (f.derivative(r), f.derivative_growth) {
            let (dv, db) = (d.abs(), g.bound(r));
            row[3] = num(dv);
            row[4] = num(db);
            if worst_d.is_none_or(|(_, v, b)| dv / db > v / b) {
                worst_d = Some((r, dv, db));
            }
        }
        rows.push(row);
    }
    run.write_csv("growth.csv", &["r", "abs_f", "bound_f", "abs_df", "bound_df"], &rows)?;

    let mut finding = Finding {
        bounds: Vec::new(),
        violated: Vec::new(),
        fields: vec![
            field("name", &f.name),
            field("p", num(f.growth.p)),
            field("alpha1", num(f.growth.alpha1)),
            field("alpha2", num(f.growth.alpha2)),
            field("beta", num(f.growth.beta)),
        ],
    };
    if let Some(g) = f.derivative_growth {
        finding.fields.push(field("derivative_alpha", num(g.alpha)));
        finding.fields.push(field("derivative_beta", num(g.beta)));
    }
    let with_r = |mut b: Bound, r: f64| {
        b.r = Some(r);
        b
    };
    match verify_growth(f, nl.range, nl.samples) {
        Ok(GrowthCertificate {
            worst_slack, worst_r, ..
        }) => {
            finding.fields.push(field("certified", true));
            finding.fields.push(field("worst_slack", num(worst_slack)));
            finding.bounds.push(with_r(
                Bound::new("H_p", f.eval(worst_r).abs(), f.growth.bound(worst_r)),
                worst_r,
            ));
            if let Some((r, v, b)) = worst_d {
                finding.bounds.push(with_r(Bound::new("H'_p", v, b), r));
            }
        }
        Err(CoreError::GrowthViolated { r, value, bound, which }) => {
            finding.fields.push(field("certified", false));
            finding.violated.push(which.to_string());
            finding.bounds.push(with_r(Bound::new(which, value, bound), r));
        }
        Err(e) => return Err(e.into()),
    }
    Ok(finding)
}

fn sanitize(value: &str) -> String {
    value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs `semilinear-solve` once per value on worker threads, each in its own
/// subdirectory, and merges the rows in value order.
fn sweep(
    base: &RunConfig,
    variants: &[RunConfig],
    param: &str,
    values: &[String],
    dir: &Path,
) -> Result<RunSummary, CliError> {
    let run = RunDir::create(dir.to_path_buf())?;
    run.write_text("resolved.cfg", &base.table.to_ini())?;
    let (section, key) = ConfigTable::qualify(param)?;
    let subdirs: Vec<PathBuf> = values
        .iter()
        .enumerate()
        .map(|(i, v)| dir.join(format!("{i:02}_{key}_{}", sanitize(v))))
        .collect();

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<RunSummary>>> = Mutex::new(vec![None; variants.len()]);
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(variants.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= variants.len() {
                    break;
                }
                let summary = run_single(Command::SemilinearSolve, &variants[i], &subdirs[i])
                    .unwrap_or_else(|e| error_summary(Command::SemilinearSolve, &subdirs[i], &e));
                results.lock().expect("sweep worker panicked")[i] = Some(summary);
            });
        }
    });
    let results: Vec<RunSummary> = results
        .into_inner()
        .expect("sweep worker panicked")
        .into_iter()
        .map(|r| r.expect("every sweep value is run"))
        .collect();

    let columns = [
        "exit",
        "outcome",
        "iterations",
        "mean_ratio",
        "max_ratio",
        "residual",
        "config_hash",
    ];
    let rows: Vec<Vec<String>> = values
        .iter()
        .zip(&results)
        .map(|(value, r)| {
            let mut row = vec![format!("{section}.{key}"), value.clone()];
            row.extend(columns.iter().map(|c| r.get(c).unwrap_or_default().to_string()));
            row
        })
        .collect();
    let mut header = vec!["param", "value"];
    header.extend(columns);
    run.write_csv("sweep.csv", &header, &rows)?;
    if base.output.plots {
        run.write_text("plot_sweep.py", plots::SWEEP)?;
    }

    let exit = results.iter().map(|r| r.exit).max().unwrap_or(EXIT_OK);
    Ok(RunSummary {
        exit,
        fields: vec![
            field("command", Command::Sweep.name()),
            field("exit", exit),
            field("status", if exit == EXIT_OK { "ok" } else { "failed_runs" }),
            field("out", dir.display()),
            field("param", format!("{section}.{key}")),
            field("runs", results.len()),
            field("failed", results.iter().filter(|r| r.exit != EXIT_OK).count()),
        ],
    })
}
