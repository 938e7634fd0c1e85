//! The 2-jet scheme, the Euler scheme and strong-convergence measurement.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::brownian::{GridError, GridSpec};
use crate::model::{JetField, ModelError};

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// `X_{k+1} = γ_{X_k}(δW_k)`.
    #[serde(rename = "2jet")]
    TwoJet,
    /// `X_{k+1} = X_k + a δt + b δW_k`.
    Euler,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::TwoJet => "2jet",
            Scheme::Euler => "euler",
        })
    }
}

/// Which steps of a path to keep.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Full,
    Terminal,
    /// Step indices on the level grid, `0..=steps`.
    Steps(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Number of steps over the horizon; a dyadic coarsening of the grid.
    pub steps: usize,
    pub record: Record,
    /// Per-state lower bounds applied after every step (reflection floor).
    pub floors: Vec<Option<f64>>,
}

impl SimConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            record: Record::Full,
            floors: Vec::new(),
        }
    }

    pub fn record(mut self, record: Record) -> Self {
        self.record = record;
        self
    }

    pub fn floors(mut self, floors: Vec<Option<f64>>) -> Self {
        self.floors = floors;
        self
    }

    fn recorded_steps(&self) -> Result<Vec<usize>, SchemeError> {
        let steps = match &self.record {
            Record::Full => (0..=self.steps).collect(),
            Record::Terminal => vec![self.steps],
            Record::Steps(s) => s.clone(),
        };
        if steps.windows(2).any(|w| w[0] >= w[1]) || steps.last().is_some_and(|&s| s > self.steps) {
            return Err(SchemeError::Config(
                "recorded steps must be increasing and within the horizon".into(),
            ));
        }
        Ok(steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// One row of `n` states per recorded step; NaN after divergence.
    pub states: Vec<f64>,
    /// First level step whose result was not finite or not computable.
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrajectorySet {
    pub n: usize,
    pub scheme: Scheme,
    pub model: String,
    pub seed: u64,
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub paths: Vec<Path>,
}

impl TrajectorySet {
    pub fn state(&self, path: usize, record: usize) -> &[f64] {
        &self.paths[path].states[record * self.n..(record + 1) * self.n]
    }

    pub fn diverged(&self) -> usize {
        self.paths.iter().filter(|p| p.diverged_at.is_some()).count()
    }

    /// Coordinate `coord` at record `record` over the paths that did not diverge.
    pub fn samples(&self, record: usize, coord: usize) -> Vec<f64> {
        self.paths
            .iter()
            .filter(|p| p.diverged_at.is_none())
            .map(|p| p.states[record * self.n + coord])
            .collect()
    }
}

/// Advances one path over a level's increments, keeping the requested steps.
#[allow(clippy::too_many_arguments)]
pub fn run_path(
    field: &dyn JetField,
    scheme: Scheme,
    x0: &[f64],
    increments: &[f64],
    dt: f64,
    recorded: &[usize],
    floors: &[Option<f64>],
) -> Path {
    let (n, d) = (field.n(), field.d());
    let steps = increments.len() / d;
    let mut states = Vec::with_capacity(recorded.len() * n);
    let mut next_record = recorded.iter().peekable();
    let mut x = x0.to_vec();
    let mut out = vec![0.0; n];
    let mut diverged_at = None;
    for k in 0..=steps {
        while next_record.next_if_eq(&&k).is_some() {
            states.extend_from_slice(&x);
        }
        if k == steps {
            break;
        }
        let du = &increments[k * d..(k + 1) * d];
        let t = k as f64 * dt;
        let ok = match scheme {
            Scheme::TwoJet => field.step(&x, t, du, &mut out).is_ok(),
            Scheme::Euler => match field.coefficients(&x, t) {
                Ok((a, b)) => {
                    for i in 0..n {
                        out[i] = x[i] + a[i] * dt + (0..d).map(|al| b[(i, al)] * du[al]).sum::<f64>();
                    }
                    true
                }
                Err(_) => false,
            },
        };
        if !ok || out.iter().any(|v| !v.is_finite()) {
            diverged_at = Some(k + 1);
            break;
        }
        for (i, floor) in floors.iter().enumerate() {
            if let Some(f) = floor {
                out[i] = out[i].max(*f);
            }
        }
        std::mem::swap(&mut x, &mut out);
    }
    states.resize(recorded.len() * n, f64::NAN);
    Path { states, diverged_at }
}

/// Simulates `paths` paths of `field` on the shared Brownian grid.
pub fn simulate(
    field: &dyn JetField,
    scheme: Scheme,
    grid: &GridSpec,
    x0: &[f64],
    paths: usize,
    config: &SimConfig,
    model: &str,
) -> Result<TrajectorySet, SchemeError> {
    if grid.d != field.d() || x0.len() != field.n() {
        return Err(SchemeError::Config(format!(
            "field has n = {}, d = {}; got x0 of length {} and a grid with d = {}",
            field.n(),
            field.d(),
            x0.len(),
            grid.d
        )));
    }
    grid.factor(config.steps)?;
    let recorded = config.recorded_steps()?;
    let dt = grid.horizon / config.steps as f64;
    let paths: Vec<Path> = (0..paths as u64)
        .into_par_iter()
        .map(|p| {
            let increments = grid.path(p).coarsen(config.steps).expect("level checked above");
            run_path(field, scheme, x0, &increments, dt, &recorded, &config.floors)
        })
        .collect();
    Ok(TrajectorySet {
        n: field.n(),
        scheme,
        model: model.to_string(),
        seed: grid.seed,
        times: recorded.iter().map(|&k| k as f64 * dt).collect(),
        steps: recorded,
        paths,
    })
}

pub fn simulate_2jet(
    field: &dyn JetField,
    grid: &GridSpec,
    x0: &[f64],
    paths: usize,
    config: &SimConfig,
    model: &str,
) -> Result<TrajectorySet, SchemeError> {
    simulate(field, Scheme::TwoJet, grid, x0, paths, config, model)
}

pub fn simulate_euler(
    field: &dyn JetField,
    grid: &GridSpec,
    x0: &[f64],
    paths: usize,
    config: &SimConfig,
    model: &str,
) -> Result<TrajectorySet, SchemeError> {
    simulate(field, Scheme::Euler, grid, x0, paths, config, model)
}

/// Dense output inside a step: `X_{t+ε} = γ_{X_t}((ε/δt) δW)` with
/// `fraction = ε/δt`.
pub fn interpolate(
    field: &dyn JetField,
    x: &[f64],
    t: f64,
    increment: &[f64],
    fraction: f64,
) -> Result<Vec<f64>, ModelError> {
    let u: Vec<f64> = increment.iter().map(|v| fraction * v).collect();
    let mut out = vec![0.0; x.len()];
    field.step(x, t, &u, &mut out)?;
    Ok(out)
}

/// Exact strong solutions driven by the same Brownian path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClosedForm {
    /// `dS = μ S dt + σ S dW`.
    Gbm { mu: f64, sigma: f64 },
    /// `dX = κ (m − X) dt + σ dW`; the stochastic integral is a midpoint sum
    /// over the finest grid.
    OrnsteinUhlenbeck { kappa: f64, mean: f64, sigma: f64 },
}

impl ClosedForm {
    pub fn solve(&self, x0: f64, fine_increments: &[f64], fine_dt: f64) -> f64 {
        let horizon = fine_increments.len() as f64 * fine_dt;
        match *self {
            ClosedForm::Gbm { mu, sigma } => {
                let w: f64 = fine_increments.iter().sum();
                x0 * ((mu - 0.5 * sigma * sigma) * horizon + sigma * w).exp()
            }
            ClosedForm::OrnsteinUhlenbeck { kappa, mean, sigma } => {
                let decay = (-kappa * horizon).exp();
                let noise: f64 = fine_increments
                    .iter()
                    .enumerate()
                    .map(|(k, dw)| (-kappa * (horizon - (k as f64 + 0.5) * fine_dt)).exp() * dw)
                    .sum();
                x0 * decay + mean * (1.0 - decay) + sigma * noise
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    /// The 2-jet scheme on the finest grid (four times the finest level).
    FinestTwoJet,
    FinestEuler,
    ClosedForm(ClosedForm),
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reference::FinestTwoJet => f.write_str("2-jet scheme at 4x the finest level"),
            Reference::FinestEuler => f.write_str("Euler scheme at 4x the finest level"),
            Reference::ClosedForm(c) => write!(f, "closed form {c:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelError {
    pub steps: usize,
    pub dt: f64,
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub format_version: u32,
    pub model: String,
    pub scheme: Scheme,
    pub reference: String,
    pub seed: u64,
    pub horizon: f64,
    pub paths: usize,
    pub diverged: usize,
    pub levels: Vec<LevelError>,
    /// Least-squares slope of log2 RMS against log2 δt.
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub scheme: Scheme,
    pub seed: u64,
    pub horizon: f64,
    /// Step counts, strictly increasing, each a power of two times the first.
    pub levels: Vec<usize>,
    pub paths: usize,
    pub reference: Reference,
}

impl ConvergenceStudy {
    pub fn run(&self, field: &dyn JetField, x0: &[f64], model: &str) -> Result<ConvergenceReport, SchemeError> {
        if self.levels.len() < 2 || self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SchemeError::Config("need at least two strictly increasing levels".into()));
        }
        if matches!(self.reference, Reference::ClosedForm(_)) && field.n() != 1 {
            return Err(SchemeError::Config("closed forms are one-dimensional".into()));
        }
        let finest = 4 * self.levels.last().unwrap();
        let grid = GridSpec::new(self.seed, field.d(), self.horizon, finest)?;
        for &l in &self.levels {
            grid.factor(l)?;
        }
        let per_path: Vec<Option<Vec<f64>>> = (0..self.paths as u64)
            .into_par_iter()
            .map(|p| {
                let bm = grid.path(p);
                let end = |scheme: Scheme, steps: usize| -> Option<Vec<f64>> {
                    let inc = bm.coarsen(steps).ok()?;
                    let rec = [steps];
                    let path = run_path(field, scheme, x0, &inc, self.horizon / steps as f64, &rec, &[]);
                    path.diverged_at.is_none().then_some(path.states)
                };
                let reference = match self.reference {
                    Reference::FinestTwoJet => end(Scheme::TwoJet, finest)?,
                    Reference::FinestEuler => end(Scheme::Euler, finest)?,
                    Reference::ClosedForm(c) => vec![c.solve(x0[0], bm.fine(), grid.fine_dt())],
                };
                self.levels
                    .iter()
                    .map(|&l| {
                        let x = end(self.scheme, l)?;
                        Some(x.iter().zip(&reference).map(|(p, q)| (p - q).powi(2)).sum())
                    })
                    .collect()
            })
            .collect();
        let kept: Vec<&Vec<f64>> = per_path.iter().flatten().collect();
        let diverged = self.paths - kept.len();
        if kept.is_empty() {
            return Err(SchemeError::Config("every path diverged".into()));
        }
        let levels: Vec<LevelError> = self
            .levels
            .iter()
            .enumerate()
            .map(|(i, &steps)| {
                let mean = kept.iter().map(|e| e[i]).sum::<f64>() / kept.len() as f64;
                LevelError {
                    steps,
                    dt: self.horizon / steps as f64,
                    rms: mean.sqrt(),
                }
            })
            .collect();
        let xs: Vec<f64> = levels.iter().map(|l| l.dt.log2()).collect();
        let ys: Vec<f64> = levels.iter().map(|l| l.rms.log2()).collect();
        let (slope, intercept) = least_squares(&xs, &ys);
        Ok(ConvergenceReport {
            format_version: 1,
            model: model.to_string(),
            scheme: self.scheme,
            reference: self.reference.to_string(),
            seed: self.seed,
            horizon: self.horizon,
            paths: self.paths,
            diverged,
            levels,
            slope,
            intercept,
        })
    }
}

/// Slope and intercept of the least-squares line through `(xs, ys)`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
