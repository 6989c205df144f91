//! INI run configuration: schema with defaults, parsing, validation and the
//! resolved echo written next to every run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ini::Ini;
use sha2::{Digest, Sha256};
use wavecontrol::fixed_point::BUILTIN_NAMES;
use wavecontrol::geometry::{validate_geometry, BoundaryPartition, Domain, GeometryConfig, Normalization};
use wavecontrol::linear::SolverKind;
use wavecontrol::Error as CoreError;

use crate::error::ConfigError;

type Section = (&'static str, &'static [(&'static str, &'static str)]);

/// Every accepted section and key with its default value, in output order.
pub const SCHEMA: &[Section] = &[
    (
        "geometry",
        &[
            ("domain", "interval"),
            ("x_min", "0"),
            ("x_max", "1"),
            ("y_min", "0"),
            ("y_max", "1"),
            ("x0", "-0.2"),
            ("T", "2.6"),
            ("delta", "0.08"),
            ("gamma0_margin", "auto"),
        ],
    ),
    (
        "weights",
        &[
            ("beta", "0.9"),
            ("lambda", "0.1"),
            ("s", "4"),
            ("s0", "1"),
            ("M0", "auto"),
            ("normalization", "normalized"),
        ],
    ),
    ("grid", &[("nx", "64"), ("nt", "auto"), ("cfl", "0.9")]),
    (
        "data",
        &[("u0", "sine"), ("u1", "zero"), ("z0", "zero"), ("z1", "zero")],
    ),
    (
        "nonlinearity",
        &[
            ("name", "superlinear"),
            ("a", "0.05"),
            ("p", "1"),
            ("range", "1e8"),
            ("samples", "400"),
        ],
    ),
    (
        "solver",
        &[
            ("kind", "banded"),
            ("epsilon", "auto"),
            ("tol", "1e-10"),
            ("fp_tol", "1e-8"),
            ("max_iter", "25"),
            ("residual_bound", "5e-2"),
            ("kkt_bound", "1e-6"),
            ("samples", "100"),
            ("seed", "42"),
        ],
    ),
    ("output", &[("directory", "wavectl_out"), ("plots", "true")]),
];

fn locate(section: &str, key: &str) -> Option<(usize, usize)> {
    let si = SCHEMA.iter().position(|(name, _)| *name == section)?;
    let ki = SCHEMA[si].1.iter().position(|(k, _)| *k == key)?;
    Some((si, ki))
}

/// String values for every schema key, defaults filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigTable {
    values: Vec<Vec<String>>,
    /// Directory against which relative CSV data paths are resolved.
    base_dir: PathBuf,
}

impl Default for ConfigTable {
    fn default() -> Self {
        ConfigTable {
            values: SCHEMA
                .iter()
                .map(|(_, keys)| keys.iter().map(|(_, v)| v.to_string()).collect())
                .collect(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl ConfigTable {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse_str(&text, &base)
    }

    pub fn parse_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line,
            col: e.col,
            msg: e.msg.to_string(),
        })?;
        let mut table = ConfigTable {
            base_dir: base_dir.to_path_buf(),
            ..Self::default()
        };
        for (section, props) in &ini {
            let Some(section) = section else {
                if let Some((key, _)) = props.iter().next() {
                    return Err(ConfigError::UnknownKey {
                        section: String::new(),
                        key: key.to_string(),
                    });
                }
                continue;
            };
            if !SCHEMA.iter().any(|(name, _)| *name == section) {
                return Err(ConfigError::UnknownSection(section.to_string()));
            }
            for (key, value) in props.iter() {
                table.set_in(section, key, value)?;
            }
        }
        Ok(table)
    }

    pub fn get(&self, section: &str, key: &str) -> &str {
        let (si, ki) = locate(section, key).unwrap_or_else(|| panic!("{section}.{key} is not in the schema"));
        &self.values[si][ki]
    }

    fn set_in(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let (si, ki) = locate(section, key).ok_or_else(|| ConfigError::UnknownKey {
            section: section.to_string(),
            key: key.to_string(),
        })?;
        self.values[si][ki] = value.trim().to_string();
        Ok(())
    }

    /// Resolves `section.key`, or a bare key that occurs in exactly one section.
    pub fn qualify(name: &str) -> Result<(&'static str, &'static str), ConfigError> {
        let unknown = || ConfigError::UnknownKey {
            section: String::new(),
            key: name.to_string(),
        };
        if let Some((section, key)) = name.split_once('.') {
            let (si, ki) = locate(section, key).ok_or_else(unknown)?;
            return Ok((SCHEMA[si].0, SCHEMA[si].1[ki].0));
        }
        let mut hits = SCHEMA
            .iter()
            .flat_map(|(s, keys)| keys.iter().map(move |(k, _)| (*s, *k)))
            .filter(|(_, k)| *k == name);
        match (hits.next(), hits.next()) {
            (Some(hit), None) => Ok(hit),
            _ => Err(unknown()),
        }
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<(), ConfigError> {
        let (section, key) = Self::qualify(name)?;
        self.set_in(section, key, value)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// INI text with every key, in schema order.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        for (si, (section, keys)) in SCHEMA.iter().enumerate() {
            if si > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{section}]");
            for (ki, (key, _)) in keys.iter().enumerate() {
                let _ = writeln!(out, "{key} = {}", self.values[si][ki]);
            }
        }
        out
    }

    /// SHA-256 of [`ConfigTable::to_ini`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_ini().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// An initial or target slice: a scaled analytic profile or a CSV file.
#[derive(Clone, Debug, PartialEq)]
pub enum Profile {
    Zero,
    /// `scale * prod sin(pi (x - lo) / len)`.
    Sine(f64),
    /// `scale * prod (x - lo) (hi - x)`.
    Parabola(f64),
    Csv(PathBuf),
}

impl Profile {
    fn parse(text: &str, base_dir: &Path) -> Option<Self> {
        if let Some(path) = text.strip_prefix("csv:") {
            let path = Path::new(path.trim());
            return Some(Profile::Csv(if path.is_absolute() {
                path.to_path_buf()
            } else {
                base_dir.join(path)
            }));
        }
        let (scale, name) = match text.split_once('*') {
            Some((a, b)) => (a.trim().parse::<f64>().ok().filter(|v| v.is_finite())?, b.trim()),
            None => (1.0, text),
        };
        match name {
            "zero" => Some(Profile::Zero),
            "sine" => Some(Profile::Sine(scale)),
            "parabola" => Some(Profile::Parabola(scale)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightsBlock {
    pub beta: f64,
    pub lambda: f64,
    /// `None` selects `max(s0, 1 + ln(1 + |(u0, u1)|))`.
    pub s: Option<f64>,
    pub s0: f64,
    pub m0: Option<f64>,
    pub normalization: Normalization,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridBlock {
    pub nx: Vec<usize>,
    /// `None` picks the smallest `nt` with CFL number at most `cfl`.
    pub nt: Option<usize>,
    pub cfl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataBlock {
    pub u0: Profile,
    pub u1: Profile,
    pub z0: Profile,
    pub z1: Profile,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NonlinearityBlock {
    pub name: String,
    pub a: f64,
    pub p: f64,
    pub range: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverBlock {
    pub kind: SolverKind,
    pub epsilon: Option<f64>,
    pub tol: f64,
    pub fp_tol: f64,
    pub max_iter: usize,
    pub residual_bound: f64,
    pub kkt_bound: f64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputBlock {
    pub directory: PathBuf,
    pub plots: bool,
}

/// A validated configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub partition: BoundaryPartition,
    pub weights: WeightsBlock,
    pub grid: GridBlock,
    pub data: DataBlock,
    pub nonlinearity: NonlinearityBlock,
    pub solver: SolverBlock,
    pub output: OutputBlock,
    pub table: ConfigTable,
}

struct Reader<'a> {
    table: &'a ConfigTable,
    section: &'static str,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.table.get(self.section, key)
    }

    fn invalid(&self, key: &str, constraint: impl Into<String>) -> ConfigError {
        ConfigError::InvalidValue {
            section: self.section.to_string(),
            key: key.to_string(),
            value: self.raw(key).to_string(),
            constraint: constraint.into(),
        }
    }

    fn float(&self, key: &str, ok: impl Fn(f64) -> bool, constraint: &str) -> Result<f64, ConfigError> {
        match self.raw(key).parse::<f64>() {
            Ok(v) if v.is_finite() && ok(v) => Ok(v),
            _ => Err(self.invalid(key, constraint)),
        }
    }

    fn positive(&self, key: &str) -> Result<f64, ConfigError> {
        self.float(key, |v| v > 0.0, "must be a positive number")
    }

    fn auto_or(&self, key: &str, ok: impl Fn(f64) -> bool, constraint: &str) -> Result<Option<f64>, ConfigError> {
        if self.raw(key) == "auto" {
            return Ok(None);
        }
        self.float(key, ok, constraint).map(Some)
    }

    fn count(&self, key: &str, min: usize) -> Result<usize, ConfigError> {
        match self.raw(key).parse::<usize>() {
            Ok(v) if v >= min => Ok(v),
            _ => Err(self.invalid(key, format!("must be an integer >= {min}"))),
        }
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.raw(key).split(',').map(|v| v.trim().to_string()).collect()
    }

    fn profile(&self, key: &str) -> Result<Profile, ConfigError> {
        Profile::parse(self.raw(key), self.table.base_dir()).ok_or_else(|| {
            self.invalid(
                key,
                "expected zero, sine, parabola (optionally 'scale*name') or csv:<path>",
            )
        })
    }
}

fn geometry_block(table: &ConfigTable) -> Result<(GeometryConfig, BoundaryPartition), ConfigError> {
    let r = Reader {
        table,
        section: "geometry",
    };
    let x = [
        r.float("x_min", |_| true, "must be a number")?,
        r.float("x_max", |_| true, "must be a number")?,
    ];
    let domain = match r.raw("domain") {
        "interval" => Domain::Interval { a: x[0], b: x[1] },
        "rectangle" => Domain::Rectangle {
            x,
            y: [
                r.float("y_min", |_| true, "must be a number")?,
                r.float("y_max", |_| true, "must be a number")?,
            ],
        },
        _ => return Err(r.invalid("domain", "expected interval or rectangle")),
    };
    domain.check().map_err(|e| r.invalid("x_max", e.to_string()))?;
    let comps: Vec<f64> = r
        .list("x0")
        .iter()
        .map(|v| v.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<_>>()
        .ok_or_else(|| r.invalid("x0", "expected comma-separated numbers"))?;
    if comps.len() != domain.dim() {
        return Err(r.invalid("x0", format!("expected {} component(s)", domain.dim())));
    }
    let x0 = [comps[0], comps.get(1).copied().unwrap_or(0.0)];
    let cfg = GeometryConfig {
        domain,
        x0,
        t_final: r.positive("T")?,
        delta: r.positive("delta")?,
        gamma0_margin: r.auto_or("gamma0_margin", |v| v > 0.0, "must be 'auto' or a positive number")?,
    };
    let part = validate_geometry(&cfg).map_err(|e| {
        let key = match e {
            CoreError::X0InsideDomain { .. } => "x0",
            CoreError::TimeTooShort { .. } => "T",
            CoreError::BadDelta(_) => "delta",
            _ => "domain",
        };
        r.invalid(key, e.to_string())
    })?;
    Ok((cfg, part))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_table(ConfigTable::load(path)?)
    }

    pub fn from_table(table: ConfigTable) -> Result<Self, ConfigError> {
        let (geometry, partition) = geometry_block(&table)?;

        let r = Reader {
            table: &table,
            section: "weights",
        };
        let weights = WeightsBlock {
            beta: r.positive("beta")?,
            lambda: r.positive("lambda")?,
            s: r.auto_or("s", |v| v > 0.0, "must be 'auto' or a positive number")?,
            s0: r.positive("s0")?,
            m0: r.auto_or("M0", |v| v >= 0.0, "must be 'auto' or a non-negative number")?,
            normalization: match r.raw("normalization") {
                "normalized" => Normalization::Normalized,
                "raw" => Normalization::Raw,
                _ => return Err(r.invalid("normalization", "expected normalized or raw")),
            },
        };

        let r = Reader {
            table: &table,
            section: "grid",
        };
        let nx: Vec<usize> = r
            .list("nx")
            .iter()
            .map(|v| v.parse::<usize>().ok().filter(|&n| n >= 3))
            .collect::<Option<_>>()
            .ok_or_else(|| r.invalid("nx", "expected integers >= 3"))?;
        let nx = match (nx.len(), geometry.domain.dim()) {
            (1, d) => vec![nx[0]; d],
            (2, 2) => nx,
            _ => return Err(r.invalid("nx", "one value, or one per spatial dimension")),
        };
        let grid = GridBlock {
            nx,
            nt: match r.raw("nt") {
                "auto" => None,
                _ => Some(r.count("nt", 4)?),
            },
            cfl: r.float("cfl", |v| v > 0.0 && v <= 0.95, "must lie in (0, 0.95]")?,
        };

        let r = Reader {
            table: &table,
            section: "data",
        };
        let data = DataBlock {
            u0: r.profile("u0")?,
            u1: r.profile("u1")?,
            z0: r.profile("z0")?,
            z1: r.profile("z1")?,
        };

        let r = Reader {
            table: &table,
            section: "nonlinearity",
        };
        let name = r.raw("name").to_string();
        if !BUILTIN_NAMES.contains(&name.as_str()) {
            return Err(r.invalid("name", format!("expected one of {}", BUILTIN_NAMES.join(", "))));
        }
        let nonlinearity = NonlinearityBlock {
            name,
            a: r.float("a", |_| true, "must be a number")?,
            p: r.float("p", |v| (0.0..=1.5).contains(&v), "must lie in [0, 1.5]")?,
            range: r.float("range", |v| v >= 1.0, "must be >= 1")?,
            samples: r.count("samples", 2)?,
        };

        let r = Reader {
            table: &table,
            section: "solver",
        };
        let solver = SolverBlock {
            kind: match r.raw("kind") {
                "banded" => SolverKind::Banded,
                "pcg" => SolverKind::Pcg,
                "dense" => SolverKind::Dense,
                _ => return Err(r.invalid("kind", "expected banded, pcg or dense")),
            },
            epsilon: r.auto_or("epsilon", |v| v >= 0.0, "must be 'auto' or a non-negative number")?,
            tol: r.positive("tol")?,
            fp_tol: r.positive("fp_tol")?,
            max_iter: r.count("max_iter", 1)?,
            residual_bound: r.positive("residual_bound")?,
            kkt_bound: r.positive("kkt_bound")?,
            samples: r.count("samples", 1)?,
            seed: r
                .raw("seed")
                .parse::<u64>()
                .map_err(|_| r.invalid("seed", "must be an unsigned 64-bit integer"))?,
        };

        let r = Reader {
            table: &table,
            section: "output",
        };
        if r.raw("directory").is_empty() {
            return Err(r.invalid("directory", "must not be empty"));
        }
        let output = OutputBlock {
            directory: PathBuf::from(r.raw("directory")),
            plots: match r.raw("plots") {
                "true" => true,
                "false" => false,
                _ => return Err(r.invalid("plots", "expected true or false")),
            },
        };

        Ok(RunConfig {
            geometry,
            partition,
            weights,
            grid,
            data,
            nonlinearity,
            solver,
            output,
            table,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::from_table(ConfigTable::parse_str(text, Path::new("."))?)
    }

    #[test]
    fn minimal_file_gets_every_default() {
        let cfg = parse("[geometry]\nT = 2.6\n").unwrap();
        assert_eq!(cfg.table, ConfigTable::default());
        let text = cfg.table.to_ini();
        for (section, keys) in SCHEMA {
            assert!(text.contains(&format!("[{section}]")));
            for (key, value) in *keys {
                assert!(text.contains(&format!("{key} = {value}\n")), "{key}");
            }
        }
        assert_eq!(cfg.grid.nx, vec![64]);
        assert_eq!(cfg.weights.s, Some(4.0));
        assert_eq!(cfg.solver.seed, 42);
    }

    #[test]
    fn resolved_text_round_trips() {
        let cfg = parse("[weights]\ns = 2.5\n[grid]\nnx = 12\nnt = 40\n").unwrap();
        let again = ConfigTable::parse_str(&cfg.table.to_ini(), Path::new(".")).unwrap();
        assert_eq!(again, cfg.table);
        assert_eq!(again.hash(), cfg.table.hash());
        assert_ne!(again.hash(), ConfigTable::default().hash());
    }

    #[test]
    fn x0_inside_domain_is_invalid() {
        match parse("[geometry]\nx0 = 0.5\n") {
            Err(ConfigError::InvalidValue { key, constraint, .. }) => {
                assert_eq!(key, "x0");
                assert!(constraint.contains("closure of the domain"), "{constraint}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(matches!(
            parse("[geometry]\ngamma2 = 1\n"),
            Err(ConfigError::UnknownKey { ref key, .. }) if key == "gamma2"
        ));
        assert!(matches!(parse("[plot]\nx = 1\n"), Err(ConfigError::UnknownSection(_))));
        assert!(matches!(parse("stray = 1\n"), Err(ConfigError::UnknownKey { .. })));
    }

    #[test]
    fn parse_errors_carry_position() {
        match ConfigTable::parse_str("[geometry]\n[weights\n", Path::new(".")) {
            // the unclosed header is detected at the end of its line
            Err(ConfigError::Parse { line, .. }) => assert!((2..=3).contains(&line), "{line}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_name_the_constraint() {
        for (text, key) in [
            ("[grid]\ncfl = 1.2\n", "cfl"),
            ("[grid]\nnx = 2\n", "nx"),
            ("[weights]\nnormalization = log\n", "normalization"),
            ("[nonlinearity]\nname = cubic\n", "name"),
            ("[nonlinearity]\np = 2\n", "p"),
            ("[data]\nu0 = gaussian\n", "u0"),
            ("[geometry]\ndomain = rectangle\n", "x0"),
            ("[geometry]\nT = 0.3\n", "T"),
        ] {
            match parse(text) {
                Err(ConfigError::InvalidValue { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn rectangle_and_profiles() {
        let cfg = parse(
            "[geometry]\ndomain = rectangle\nx0 = -0.4, -0.3\nT = 4.2\ndelta = 0.15\n\
             [grid]\nnx = 6\n[data]\nu0 = 2*parabola\nu1 = csv:init/u1.csv\n",
        )
        .unwrap();
        assert_eq!(cfg.grid.nx, vec![6, 6]);
        assert_eq!(cfg.data.u0, Profile::Parabola(2.0));
        assert_eq!(cfg.data.u1, Profile::Csv(PathBuf::from("./init/u1.csv")));
    }

    #[test]
    fn qualified_and_bare_names() {
        assert_eq!(ConfigTable::qualify("s").unwrap(), ("weights", "s"));
        assert_eq!(ConfigTable::qualify("grid.nx").unwrap(), ("grid", "nx"));
        // "samples" exists in two sections
        assert!(ConfigTable::qualify("samples").is_err());
        assert!(ConfigTable::qualify("weights.gamma").is_err());
    }
}
