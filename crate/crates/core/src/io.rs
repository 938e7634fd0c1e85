//! Model files (JSON) and trajectory tables (CSV).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{ParseError, SymbolTable};
use crate::manifold::{ImplicitSurface, ManifoldError, MetricField};
use crate::model::{ModelError, SdeModel};
use crate::scheme::{ClosedForm, TrajectorySet};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("CSV line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormTag {
    Ito,
    Stratonovich,
    Jet,
    Vector,
    Manifold,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<String>>,
    #[serde(default, rename = "A", skip_serializing_if = "Option::is_none")]
    pub vector_a: Option<Vec<String>>,
    #[serde(default, rename = "B", skip_serializing_if = "Option::is_none")]
    pub vector_b: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldBlock {
    /// `F` over the ambient states; the surface is `F = 0`.
    #[serde(default, rename = "implicit_F", skip_serializing_if = "Option::is_none")]
    pub implicit_f: Option<String>,
    /// Root search radius for implicit charts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    /// Chart metric `g_ij` over the states.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<Vec<Vec<String>>>,
    /// Clamp radius of chart curves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub name: String,
    pub n: usize,
    pub d: usize,
    pub form: FormTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drivers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<CoefficientBlock>,
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub constants: BTreeMap<String, f64>,
    /// Per-state lower bounds applied after each step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifold: Option<ManifoldBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_form: Option<ClosedForm>,
}

pub const DEFAULT_CLAMP: f64 = 0.25;
pub const DEFAULT_BOUND: f64 = 2.0;

/// What a model file describes.
#[derive(Debug, Clone)]
pub enum Dynamics {
    Sde(SdeModel),
    Surface { surface: ImplicitSurface, clamp: f64 },
    Metric(MetricField),
}

#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub name: String,
    pub symbols: SymbolTable,
    pub x0: Vec<f64>,
    pub floors: Vec<Option<f64>>,
    pub closed_form: Option<ClosedForm>,
    pub dynamics: Dynamics,
}

impl LoadedModel {
    pub fn sde(&self) -> Option<&SdeModel> {
        match &self.dynamics {
            Dynamics::Sde(m) => Some(m),
            _ => None,
        }
    }
}

fn schema(msg: impl Into<String>) -> IoError {
    IoError::Schema(msg.into())
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

impl ModelFile {
    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(schema(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                file.format_version
            )));
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model files serialize")
    }

    fn symbols(&self) -> Result<SymbolTable, IoError> {
        let states = match &self.states {
            Some(s) => s.clone(),
            None => (1..=self.n).map(|i| format!("x{i}")).collect(),
        };
        let drivers = match &self.drivers {
            Some(s) => s.clone(),
            None => (1..=self.d).map(|i| format!("u{i}")).collect(),
        };
        if states.len() != self.n || drivers.len() != self.d {
            return Err(schema(format!(
                "{} state and {} driver names declared for n = {}, d = {}",
                states.len(),
                drivers.len(),
                self.n,
                self.d
            )));
        }
        Ok(SymbolTable::new(states, drivers, self.constants.clone())?)
    }

    pub fn load(&self) -> Result<LoadedModel, IoError> {
        let symbols = self.symbols()?;
        if self.x0.len() != self.n {
            return Err(schema(format!("x0 has {} entries for n = {}", self.x0.len(), self.n)));
        }
        let floors = match &self.floor {
            Some(f) if f.len() != self.n => return Err(schema(format!("floor has {} entries for n = {}", f.len(), self.n))),
            Some(f) => f.clone(),
            None => vec![None; self.n],
        };
        let c = self.coefficients.clone().unwrap_or_default();
        let present = [
            ("a", c.a.is_some()),
            ("b", c.b.is_some()),
            ("gamma", c.gamma.is_some()),
            ("A", c.vector_a.is_some()),
            ("B", c.vector_b.is_some()),
        ];
        let required: &[&str] = match self.form {
            FormTag::Ito | FormTag::Stratonovich => &["a", "b"],
            FormTag::Jet => &["gamma"],
            FormTag::Vector => &["A", "B"],
            FormTag::Manifold => &[],
        };
        for (key, here) in present {
            if here != required.contains(&key) {
                return Err(schema(format!(
                    "coefficient '{key}' must be {} for form {:?}",
                    if here { "absent" } else { "present" },
                    self.form
                )));
            }
        }
        if (self.form == FormTag::Manifold) != self.manifold.is_some() {
            return Err(schema("a manifold block is required exactly for form \"manifold\""));
        }
        let dynamics = match self.form {
            FormTag::Ito | FormTag::Stratonovich => {
                let a = c.a.unwrap();
                let b = c.b.unwrap();
                let rows: Vec<Vec<&str>> = b.iter().map(|r| strs(r)).collect();
                let rows: Vec<&[&str]> = rows.iter().map(Vec::as_slice).collect();
                let model = if self.form == FormTag::Ito {
                    SdeModel::ito(&self.name, symbols.clone(), self.x0.clone(), &strs(&a), &rows)
                } else {
                    SdeModel::stratonovich(&self.name, symbols.clone(), self.x0.clone(), &strs(&a), &rows)
                };
                Dynamics::Sde(model?)
            }
            FormTag::Jet => Dynamics::Sde(SdeModel::jet_field(
                &self.name,
                symbols.clone(),
                self.x0.clone(),
                &strs(&c.gamma.unwrap()),
            )?),
            FormTag::Vector => Dynamics::Sde(SdeModel::vector_pair(
                &self.name,
                symbols.clone(),
                self.x0.clone(),
                &strs(&c.vector_a.unwrap()),
                &strs(&c.vector_b.unwrap()),
            )?),
            FormTag::Manifold => self.load_manifold(&symbols)?,
        };
        if self.closed_form.is_some() && (self.n != 1 || self.d != 1) {
            return Err(schema("closed forms are registered for one state and one driver only"));
        }
        Ok(LoadedModel {
            name: self.name.clone(),
            symbols,
            x0: self.x0.clone(),
            floors,
            closed_form: self.closed_form,
            dynamics,
        })
    }

    fn load_manifold(&self, symbols: &SymbolTable) -> Result<Dynamics, IoError> {
        let block = self.manifold.as_ref().unwrap();
        match (&block.implicit_f, &block.metric) {
            (Some(f), None) => {
                if self.d + 1 != self.n {
                    return Err(schema("an implicit surface needs d = n - 1"));
                }
                let clamp = block.clamp.unwrap_or(DEFAULT_CLAMP);
                if !(clamp > 0.0) {
                    return Err(schema("clamp must be positive"));
                }
                let surface = ImplicitSurface::new(symbols.clone(), f, block.bound.unwrap_or(DEFAULT_BOUND))?;
                let residual = surface.value(&self.x0)?;
                if residual.abs() > 1e-8 {
                    return Err(schema(format!("x0 is off the surface (F = {residual:e})")));
                }
                Ok(Dynamics::Surface { surface, clamp })
            }
            (None, Some(g)) => {
                if self.d != self.n {
                    return Err(schema("a chart metric needs d = n"));
                }
                let rows: Vec<Vec<&str>> = g.iter().map(|r| strs(r)).collect();
                Ok(Dynamics::Metric(MetricField::new(symbols.clone(), &rows)?))
            }
            _ => Err(schema("the manifold block needs exactly one of implicit_F and metric")),
        }
    }
}

/// Reads and loads a model file.
pub fn load_model(path: &std::path::Path) -> Result<LoadedModel, IoError> {
    let text = std::fs::read_to_string(path)?;
    ModelFile::from_json(&text)?.load()
}

/// Writes `path,step,time,<states>,diverged` rows after a version comment.
pub fn write_trajectories(out: &mut dyn Write, set: &TrajectorySet, states: &[String]) -> Result<(), IoError> {
    writeln!(out, "# format_version={FORMAT_VERSION}")?;
    write!(out, "path,step,time")?;
    for s in states {
        write!(out, ",{s}")?;
    }
    writeln!(out, ",diverged")?;
    for (p, path) in set.paths.iter().enumerate() {
        let flag = u8::from(path.diverged_at.is_some());
        for (r, &step) in set.steps.iter().enumerate() {
            write!(out, "{p},{step},{}", set.times[r])?;
            for v in &path.states[r * set.n..(r + 1) * set.n] {
                write!(out, ",{v}")?;
            }
            writeln!(out, ",{flag}")?;
        }
    }
    Ok(())
}

/// Trajectories read back from CSV: per path, `(time, states)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub states: Vec<String>,
    pub paths: Vec<Vec<(f64, Vec<f64>)>>,
    pub diverged: Vec<bool>,
}

pub fn read_trajectories(input: &mut dyn BufRead) -> Result<TrajectoryTable, IoError> {
    let mut lines = input.lines().enumerate();
    let bad = |line: usize, msg: &str| IoError::Csv {
        line: line + 1,
        msg: msg.to_string(),
    };
    let (i, first) = lines.next().ok_or_else(|| bad(0, "empty file"))?;
    if first?.trim() != format!("# format_version={FORMAT_VERSION}") {
        return Err(bad(i, "missing format_version comment"));
    }
    let (i, header) = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let header = header?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 5 || cols[..3] != ["path", "step", "time"] || cols[cols.len() - 1] != "diverged" {
        return Err(bad(i, "header must be path,step,time,<states>,diverged"));
    }
    let states: Vec<String> = cols[3..cols.len() - 1].iter().map(|s| s.to_string()).collect();
    let mut table = TrajectoryTable {
        states,
        paths: Vec::new(),
        diverged: Vec::new(),
    };
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != cols.len() {
            return Err(bad(i, "wrong number of fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i, &format!("'{s}' is not a number")));
        let p: usize = fields[0].parse().map_err(|_| bad(i, "path index"))?;
        if p > table.paths.len() {
            return Err(bad(i, "paths must be listed in order"));
        }
        if p == table.paths.len() {
            table.paths.push(Vec::new());
            table.diverged.push(false);
        }
        let t = num(fields[2])?;
        let x = fields[3..fields.len() - 1].iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>()?;
        table.diverged[p] |= fields[fields.len() - 1] == "1";
        table.paths[p].push((t, x));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::GridSpec;
    use crate::scheme::{simulate_2jet, SimConfig};

    const GBM: &str = r#"{
        "format_version": 1, "name": "gbm", "n": 1, "d": 1, "form": "ito",
        "states": ["S"], "coefficients": {"a": ["mu*S"], "b": [["sigma*S"]]},
        "x0": [1.0], "constants": {"mu": 0.05, "sigma": 0.2},
        "closed_form": {"kind": "gbm", "mu": 0.05, "sigma": 0.2}
    }"#;

    #[test]
    fn loads_an_ito_model() {
        let m = ModelFile::from_json(GBM).unwrap().load().unwrap();
        assert_eq!(m.symbols.states(), &["S".to_string()]);
        assert!(matches!(m.closed_form, Some(ClosedForm::Gbm { .. })));
        let sde = m.sde().unwrap();
        assert_eq!(sde.form.tag(), "ito");
    }

    #[test]
    fn rejects_schema_violations() {
        let cases = [
            GBM.replace("\"format_version\": 1", "\"format_version\": 2"),
            GBM.replace("\"a\": [\"mu*S\"], ", ""),
            GBM.replace("\"form\": \"ito\"", "\"form\": \"jet\""),
            GBM.replace("\"x0\": [1.0]", "\"x0\": [1.0, 2.0]"),
            GBM.replace("mu*S", "mu*Q"),
            GBM.replace("\"name\"", "\"nickname\""),
            GBM.replace("\"form\": \"ito\"", "\"form\": \"manifold\""),
        ];
        for text in cases {
            assert!(ModelFile::from_json(&text).and_then(|f| f.load()).is_err(), "{text}");
        }
    }

    #[test]
    fn loads_manifolds() {
        let sphere = r#"{"format_version": 1, "name": "s2", "n": 3, "d": 2, "form": "manifold",
            "manifold": {"implicit_F": "x1^2 + x2^2 + x3^2 - 1"}, "x0": [1, 0, 0]}"#;
        let m = ModelFile::from_json(sphere).unwrap().load().unwrap();
        assert!(matches!(m.dynamics, Dynamics::Surface { .. }));
        let off = sphere.replace("[1, 0, 0]", "[1, 1, 0]");
        assert!(ModelFile::from_json(&off).unwrap().load().is_err());
        let hyperbolic = r#"{"format_version": 1, "name": "h2", "n": 2, "d": 2, "form": "manifold",
            "manifold": {"metric": [["1/x2^2", "0"], ["0", "1/x2^2"]]}, "x0": [0, 1]}"#;
        let m = ModelFile::from_json(hyperbolic).unwrap().load().unwrap();
        assert!(matches!(m.dynamics, Dynamics::Metric(_)));
    }

    #[test]
    fn model_files_round_trip() {
        let file = ModelFile::from_json(GBM).unwrap();
        assert_eq!(ModelFile::from_json(&file.to_json()).unwrap(), file);
    }

    #[test]
    fn trajectories_round_trip_through_csv() {
        let m = ModelFile::from_json(GBM).unwrap().load().unwrap();
        let field = m.sde().unwrap().to_jet_field().unwrap();
        let grid = GridSpec::new(5, 1, 1.0, 8).unwrap();
        let set = simulate_2jet(&field, &grid, &m.x0, 3, &SimConfig::new(8), "gbm").unwrap();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &set, m.symbols.states()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# format_version=1\npath,step,time,S,diverged\n0,0,0,1,0\n"));
        let table = read_trajectories(&mut buf.as_slice()).unwrap();
        assert_eq!(table.paths.len(), 3);
        for p in 0..3 {
            for (r, (t, x)) in table.paths[p].iter().enumerate() {
                assert_eq!(*t, set.times[r]);
                assert_eq!(x.as_slice(), set.state(p, r));
            }
        }
    }
}
