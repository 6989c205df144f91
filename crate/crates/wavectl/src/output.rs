//! Run directories and the CSV artifacts written into them.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use wavecontrol::fixed_point::IterationRecord;
use wavecontrol::linear::{ReportRow, StateControlPair};
use wavecontrol::mesh::{write_boundary_csv, write_field_csv, SpaceTimeGrid};

use crate::error::CliError;

/// 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// One row of `report.csv`: a bound's name and both of its sides.
#[derive(Clone, Debug, PartialEq)]
pub struct Bound {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub s: Option<f64>,
    pub r: Option<f64>,
}

impl Bound {
    pub fn new(name: &str, lhs: f64, rhs: f64) -> Self {
        Bound {
            name: name.to_string(),
            lhs,
            rhs,
            s: None,
            r: None,
        }
    }

    pub fn at_s(mut self, s: f64) -> Self {
        self.s = Some(s);
        self
    }

    pub fn holds(&self) -> bool {
        self.lhs.is_finite() && self.lhs <= self.rhs
    }
}

impl From<&ReportRow> for Bound {
    fn from(row: &ReportRow) -> Self {
        Bound {
            name: row.name.clone(),
            lhs: row.lhs,
            rhs: row.rhs,
            s: Some(row.s),
            r: Some(row.r),
        }
    }
}

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates the directory and removes a stale `error.txt`.
    pub fn create(path: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        let stale = path.join("error.txt");
        if stale.exists() {
            fs::remove_file(&stale).map_err(|source| CliError::Io { path: stale, source })?;
        }
        Ok(RunDir { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(
        &self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
    ) -> Result<(), CliError> {
        let path = self.path.join(name);
        let io = |source| CliError::Io {
            path: path.clone(),
            source,
        };
        let file = fs::File::create(&path).map_err(io)?;
        let mut out = BufWriter::new(file);
        body(&mut out).map_err(io)?;
        out.flush().map_err(io)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), CliError> {
        self.write(name, |out| out.write_all(text.as_bytes()))
    }

    /// Writes a table with a header row.
    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        self.write(name, |out| {
            writeln!(out, "{}", header.join(","))?;
            for row in rows {
                writeln!(out, "{}", row.join(","))?;
            }
            Ok(())
        })
    }

    pub fn write_pair(&self, grid: &SpaceTimeGrid, pair: &StateControlPair) -> Result<(), CliError> {
        self.write("y.csv", |out| write_field_csv(grid, &pair.y, out))?;
        self.write("v.csv", |out| write_boundary_csv(grid, &pair.v, out))?;
        self.write("w.csv", |out| write_field_csv(grid, &pair.w, out))
    }

    pub fn write_report(&self, bounds: &[Bound]) -> Result<(), CliError> {
        let rows: Vec<Vec<String>> = bounds
            .iter()
            .map(|b| {
                vec![
                    b.name.clone(),
                    num(b.lhs),
                    num(b.rhs),
                    num(b.lhs / b.rhs),
                    opt(b.s),
                    opt(b.r),
                ]
            })
            .collect();
        self.write_csv("report.csv", &["name", "lhs", "rhs", "ratio", "s", "r"], &rows)
    }

    pub fn write_trace(&self, trace: &[IterationRecord]) -> Result<(), CliError> {
        let mut header = vec!["k".to_string(), "d_k".into(), "d_boundary_k".into(), "ratio".into()];
        if let Some(first) = trace.first() {
            header.extend(first.class.margins.iter().map(|m| format!("margin_{}", m.name)));
        }
        header.push("forward_residual".into());
        let rows: Vec<Vec<String>> = trace
            .iter()
            .map(|rec| {
                let mut row = vec![rec.k.to_string(), num(rec.d), num(rec.d_boundary), opt(rec.ratio)];
                row.extend(rec.class.margins.iter().map(|m| num(m.margin)));
                row.push(num(rec.forward_residual));
                row
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        self.write_csv("trace.csv", &header, &rows)
    }
}
