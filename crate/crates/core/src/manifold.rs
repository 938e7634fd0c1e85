//! Brownian motion on Riemannian manifolds through charts.
//!
//! In a chart with metric `g`, the Brownian jet has diffusion `chol(g⁻¹)` and
//! drift `(1/(2√|g|)) ∂_j(√|g| g^{ij})`, spread equally over the diagonal of
//! the curve's Hessian. Embedded surfaces `F = 0` are covered by graph charts
//! obtained by projecting along a coordinate axis.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use thiserror::Error;

use crate::brownian::GridSpec;
use crate::dsl::{Expr, ParseError, SymbolTable};
use crate::jet::{canonical_jet, canonical_step, extract_ab, pushforward, Jet2, JetError, JetPoint};
use crate::model::{state_jets, JetField, ModelError};
use crate::scheme::{Path, Scheme, SchemeError, SimConfig, TrajectorySet};

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error("metric is not positive definite at {x:?}")]
    Metric { x: Vec<f64> },
    #[error("atlas: {0}")]
    Atlas(String),
    #[error("root finding failed: {0}")]
    Root(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Jet(#[from] JetError),
}

impl From<ManifoldError> for ModelError {
    fn from(e: ManifoldError) -> Self {
        match e {
            ManifoldError::Model(m) => m,
            other => ModelError::Invalid(other.to_string()),
        }
    }
}

/// Metric tensor and its first derivatives `(g, [∂_k g])` at a chart point.
pub type MetricDerivatives = (DMatrix<f64>, Vec<DMatrix<f64>>);

/// Brownian jet at chart point `x` of a metric with derivatives `dg`.
pub fn brownian_jet(x: &[f64], g: &DMatrix<f64>, dg: &[DMatrix<f64>]) -> Result<JetPoint, ManifoldError> {
    let (a, b) = brownian_coefficients(x, g, dg)?;
    Ok(canonical_jet(x, &a, &b)?)
}

/// Itô drift and `chol(g⁻¹)` of Brownian motion for the metric `g`.
pub fn brownian_coefficients(
    x: &[f64],
    g: &DMatrix<f64>,
    dg: &[DMatrix<f64>],
) -> Result<(Vec<f64>, DMatrix<f64>), ManifoldError> {
    let m = g.nrows();
    let not_pd = || ManifoldError::Metric { x: x.to_vec() };
    let ginv = Cholesky::new(g.clone()).ok_or_else(not_pd)?.inverse();
    let b = Cholesky::new(ginv.clone()).ok_or_else(not_pd)?.l();
    let mut drift = vec![0.0; m];
    for (j, dgj) in dg.iter().enumerate() {
        // ∂_j log √|g| = ½ tr(g⁻¹ ∂_j g); ∂_j g⁻¹ = −g⁻¹ (∂_j g) g⁻¹
        let half_trace = 0.5 * (&ginv * dgj).trace();
        let dginv = -(&ginv * dgj * &ginv);
        for (i, d) in drift.iter_mut().enumerate() {
            *d += 0.5 * (half_trace * ginv[(i, j)] + dginv[(i, j)]);
        }
    }
    Ok((drift, b))
}

/// A metric given by expressions over chart coordinates.
#[derive(Debug, Clone)]
pub struct MetricField {
    symbols: SymbolTable,
    entries: Vec<Expr>,
}

impl MetricField {
    /// `entries` is row-major `m × m` over the states of `symbols`; the
    /// symmetric part is used.
    pub fn new(symbols: SymbolTable, entries: &[Vec<&str>]) -> Result<Self, ManifoldError> {
        let m = symbols.n();
        if entries.len() != m || entries.iter().any(|r| r.len() != m) {
            return Err(ManifoldError::Atlas(format!("metric must be {m} x {m}")));
        }
        let entries = entries
            .iter()
            .flatten()
            .map(|s| Expr::parse(s, &symbols))
            .collect::<Result<_, _>>()?;
        Ok(Self { symbols, entries })
    }

    pub fn dim(&self) -> usize {
        self.symbols.n()
    }

    pub fn symbols(&self) -> &SymbolTable {
        &self.symbols
    }

    pub fn metric(&self, x: &[f64]) -> Result<MetricDerivatives, ManifoldError> {
        let m = self.dim();
        let slots = state_jets(&self.symbols, x, 0.0);
        let jets = self
            .entries
            .iter()
            .map(|e| e.eval_jet(&slots))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|source| ModelError::Eval {
                source,
                state: x.to_vec(),
            })?;
        let sym = |f: &dyn Fn(&Jet2) -> f64| {
            DMatrix::from_fn(m, m, |i, j| 0.5 * (f(&jets[i * m + j]) + f(&jets[j * m + i])))
        };
        let g = sym(&|j| j.value());
        let dg = (0..m).map(|k| sym(&|j| j.grad()[k])).collect();
        Ok((g, dg))
    }
}

impl JetField for MetricField {
    fn n(&self) -> usize {
        self.dim()
    }

    fn d(&self) -> usize {
        self.dim()
    }

    fn jet(&self, x: &[f64], _t: f64) -> Result<JetPoint, ModelError> {
        let (g, dg) = self.metric(x)?;
        Ok(brownian_jet(x, &g, &dg)?)
    }

    fn coefficients(&self, x: &[f64], _t: f64) -> Result<(Vec<f64>, DMatrix<f64>), ModelError> {
        let (g, dg) = self.metric(x)?;
        Ok(brownian_coefficients(x, &g, &dg)?)
    }
}

/// The surface `F(y) = 0` in `R^{m+1}`.
#[derive(Debug, Clone)]
pub struct ImplicitSurface {
    symbols: SymbolTable,
    f: Expr,
    /// Radius of the region searched for roots.
    bound: f64,
}

/// A graph chart: the `axis` coordinate is solved for, on the `positive` side
/// when no continuation hint is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chart {
    pub axis: usize,
    pub positive: bool,
}

impl Chart {
    pub fn free(&self, ambient: usize) -> Vec<usize> {
        (0..ambient).filter(|&i| i != self.axis).collect()
    }

    pub fn id(&self) -> String {
        format!("y{}{}", self.axis + 1, if self.positive { '+' } else { '-' })
    }
}

const SOLVE_TOL: f64 = 1e-12;

impl ImplicitSurface {
    pub fn new(symbols: SymbolTable, f: &str, bound: f64) -> Result<Self, ManifoldError> {
        if symbols.n() < 2 {
            return Err(ManifoldError::Atlas("need at least two ambient coordinates".into()));
        }
        if !(bound > 0.0) {
            return Err(ManifoldError::Atlas(format!("bound must be positive, got {bound}")));
        }
        let f = Expr::parse(f, &symbols)?;
        Ok(Self { symbols, f, bound })
    }

    /// `|y|² − 1` in `R^{m+1}`.
    pub fn sphere(m: usize) -> Self {
        let symbols = SymbolTable::standard(m + 1, 1);
        let f = (1..=m + 1).map(|i| format!("x{i}^2")).collect::<Vec<_>>().join(" + ") + " - 1";
        Self::new(symbols, &f, 2.0).expect("sphere expression is valid")
    }

    /// The genus-2 surface `((y1−1) y1² (y1+1) + y2²)² + y3² = 1/30`.
    pub fn genus_two() -> Self {
        Self::new(
            SymbolTable::standard(3, 1),
            "((x1 - 1)*x1^2*(x1 + 1) + x2^2)^2 + x3^2 - 1/30",
            2.0,
        )
        .expect("genus-2 expression is valid")
    }

    pub fn ambient(&self) -> usize {
        self.symbols.n()
    }

    pub fn dim(&self) -> usize {
        self.ambient() - 1
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn symbols(&self) -> &SymbolTable {
        &self.symbols
    }

    pub fn value(&self, y: &[f64]) -> Result<f64, ManifoldError> {
        let slots = self.symbols.bind(y, 0.0, &vec![0.0; self.symbols.d()]);
        self.f.eval_real(&slots).map_err(|source| {
            ModelError::Eval {
                source,
                state: y.to_vec(),
            }
            .into()
        })
    }

    /// `F` with gradient and Hessian at `y`.
    pub fn jet(&self, y: &[f64]) -> Result<Jet2, ManifoldError> {
        let slots = state_jets(&self.symbols, y, 0.0);
        self.f.eval_jet(&slots).map_err(|source| {
            ModelError::Eval {
                source,
                state: y.to_vec(),
            }
            .into()
        })
    }

    /// Graph charts along every axis and side.
    pub fn atlas(&self) -> Vec<Chart> {
        (0..self.ambient())
            .flat_map(|axis| [true, false].map(|positive| Chart { axis, positive }))
            .collect()
    }

    /// The chart whose axis has the largest normal component at `y`, lowest
    /// axis on ties, side from the sign of that coordinate.
    pub fn select_chart(&self, y: &[f64]) -> Result<Chart, ManifoldError> {
        Ok(self.ranked_charts(y)?[0])
    }

    /// One chart per axis, by decreasing normal component (stable in the
    /// axis index), excluding axes tangent to the surface.
    pub fn ranked_charts(&self, y: &[f64]) -> Result<Vec<Chart>, ManifoldError> {
        let jet = self.jet(y)?;
        if jet.value().abs() > 1e-8 {
            return Err(ManifoldError::Atlas(format!("{y:?} is off the surface (F = {:e})", jet.value())));
        }
        let grad = jet.grad();
        let mut axes: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0 && grad[i].is_finite()).collect();
        if axes.is_empty() {
            return Err(ManifoldError::Atlas(format!("singular point {y:?}")));
        }
        axes.sort_by(|&i, &j| grad[j].abs().total_cmp(&grad[i].abs()));
        Ok(axes
            .into_iter()
            .map(|axis| Chart {
                axis,
                positive: y[axis] >= 0.0,
            })
            .collect())
    }

    /// Ambient point over chart coordinates `z`; `hint` continues the sheet
    /// of a nearby solution, otherwise the outermost root on the chart's side
    /// is taken.
    pub fn solve(&self, chart: Chart, z: &[f64], hint: Option<f64>) -> Result<Vec<f64>, ManifoldError> {
        let free = chart.free(self.ambient());
        let mut y = vec![0.0; self.ambient()];
        for (k, &i) in free.iter().enumerate() {
            y[i] = z[k];
        }
        let mut eval = |s: f64| -> Result<f64, ManifoldError> {
            y[chart.axis] = s;
            self.value(&y)
        };
        let (lo, hi) = match hint {
            Some(h) => self.bracket_near(&mut eval, h)?,
            None => self.bracket_outermost(&mut eval, chart.positive)?,
        };
        let root = safeguarded_newton(self, &free, chart.axis, z, lo, hi)?;
        let mut y = vec![0.0; self.ambient()];
        for (k, &i) in free.iter().enumerate() {
            y[i] = z[k];
        }
        y[chart.axis] = root;
        Ok(y)
    }

    fn bracket_near(
        &self,
        eval: &mut dyn FnMut(f64) -> Result<f64, ManifoldError>,
        hint: f64,
    ) -> Result<(f64, f64), ManifoldError> {
        let f0 = eval(hint)?;
        if f0 == 0.0 {
            return Ok((hint, hint));
        }
        let mut step = 1e-6 * hint.abs().max(1.0);
        while step <= 2.0 * self.bound {
            // nearest sign change on either side keeps the current sheet
            for s in [hint - step, hint + step] {
                if eval(s)?.signum() != f0.signum() {
                    return Ok(if s < hint { (s, hint) } else { (hint, s) });
                }
            }
            step *= 2.0;
        }
        Err(ManifoldError::Root(format!("no root near {hint}")))
    }

    fn bracket_outermost(
        &self,
        eval: &mut dyn FnMut(f64) -> Result<f64, ManifoldError>,
        positive: bool,
    ) -> Result<(f64, f64), ManifoldError> {
        const SAMPLES: usize = 2000;
        let side = if positive { 1.0 } else { -1.0 };
        let at = |k: usize| side * self.bound * (SAMPLES - k) as f64 / SAMPLES as f64;
        let mut prev = eval(at(0))?;
        for k in 1..=SAMPLES {
            let s = at(k);
            let cur = eval(s)?;
            if cur == 0.0 || cur.signum() != prev.signum() {
                let (p, q) = (at(k - 1), s);
                return Ok((p.min(q), p.max(q)));
            }
            prev = cur;
        }
        Err(ManifoldError::Root(format!(
            "no root on the {} side within {}",
            if positive { "positive" } else { "negative" },
            self.bound
        )))
    }

    /// Graph derivatives `(h, ∇h, ∇²h)` of the chart at the surface point `y`.
    pub fn graph_derivatives(&self, chart: Chart, y: &[f64]) -> Result<(f64, Vec<f64>, DMatrix<f64>), ManifoldError> {
        let jet = self.jet(y)?;
        let free = chart.free(self.ambient());
        let s = chart.axis;
        let fs = jet.grad()[s];
        if fs.abs() < 1e-12 {
            return Err(ManifoldError::Atlas(format!("chart {} is singular at {y:?}", chart.id())));
        }
        let dh: Vec<f64> = free.iter().map(|&i| -jet.grad()[i] / fs).collect();
        let m = free.len();
        let hh = DMatrix::from_fn(m, m, |p, q| {
            let (i, j) = (free[p], free[q]);
            -(jet.hess(i, j) + jet.hess(i, s) * dh[q] + jet.hess(j, s) * dh[p] + jet.hess(s, s) * dh[p] * dh[q]) / fs
        });
        Ok((y[s], dh, hh))
    }

    /// Induced metric `I + ∇h ∇hᵀ` of the chart and its derivatives.
    pub fn induced_metric(&self, chart: Chart, y: &[f64]) -> Result<MetricDerivatives, ManifoldError> {
        let (_, dh, hh) = self.graph_derivatives(chart, y)?;
        let m = dh.len();
        let g = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.0 } + dh[i] * dh[j]);
        let dg = (0..m)
            .map(|k| DMatrix::from_fn(m, m, |i, j| hh[(i, k)] * dh[j] + dh[i] * hh[(j, k)]))
            .collect();
        Ok((g, dg))
    }

    /// Jets of the chart's embedding `z ↦ y` at the surface point `y`.
    pub fn embedding_jets(&self, chart: Chart, y: &[f64]) -> Result<Vec<Jet2>, ManifoldError> {
        let (h, dh, hh) = self.graph_derivatives(chart, y)?;
        let free = chart.free(self.ambient());
        let m = free.len();
        let mut jets = vec![Jet2::constant(0.0, m); self.ambient()];
        for (k, &i) in free.iter().enumerate() {
            jets[i] = Jet2::variable(y[i], k, m);
        }
        jets[chart.axis] = Jet2::from_parts(h, dh, &hh);
        Ok(jets)
    }

    /// Brownian jet in `chart` at the surface point `y`, in chart coordinates.
    pub fn chart_jet(&self, chart: Chart, y: &[f64]) -> Result<JetPoint, ManifoldError> {
        let (g, dg) = self.induced_metric(chart, y)?;
        brownian_jet(&self.chart_coords(chart, y), &g, &dg)
    }

    /// The Brownian jet pushed into ambient coordinates.
    pub fn ambient_jet(&self, chart: Chart, y: &[f64]) -> Result<JetPoint, ManifoldError> {
        let jet = self.chart_jet(chart, y)?;
        Ok(pushforward(&jet, &self.embedding_jets(chart, y)?)?)
    }

    pub fn chart_coords(&self, chart: Chart, y: &[f64]) -> Vec<f64> {
        chart.free(self.ambient()).iter().map(|&i| y[i]).collect()
    }

    /// One clamped 2-jet step of Brownian motion from the surface point `y`
    /// in the selected chart, falling back to the other charts at `y` when
    /// the step leaves the selected one.
    pub fn step(&self, y: &[f64], du: &[f64], eps: f64) -> Result<Vec<f64>, ManifoldError> {
        let u = clamp_argument(du, eps);
        let mut last = None;
        for chart in self.ranked_charts(y)? {
            match self.step_in(chart, y, &u) {
                Ok(next) => return Ok(next),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one chart is ranked"))
    }

    fn step_in(&self, chart: Chart, y: &[f64], u: &[f64]) -> Result<Vec<f64>, ManifoldError> {
        let z = self.chart_coords(chart, y);
        let (g, dg) = self.induced_metric(chart, y)?;
        let (a, b) = brownian_coefficients(&z, &g, &dg)?;
        let mut next = vec![0.0; z.len()];
        canonical_step(&z, &a, &b, u, &mut next);
        let solved = self.solve(chart, &next, Some(y[chart.axis]))?;
        // a root far beyond the linear prediction belongs to another sheet
        let slope = g.trace() - (z.len() as f64 - 1.0);
        let dz = z.iter().zip(&next).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let jump = (solved[chart.axis] - y[chart.axis]).abs();
        if jump > 3.0 * slope.sqrt() * dz + 1e-9 {
            return Err(ManifoldError::Root(format!("chart {} jumped sheets at {y:?}", chart.id())));
        }
        Ok(solved)
    }
}

fn safeguarded_newton(
    surface: &ImplicitSurface,
    free: &[usize],
    axis: usize,
    z: &[f64],
    mut lo: f64,
    mut hi: f64,
) -> Result<f64, ManifoldError> {
    let mut y = vec![0.0; surface.ambient()];
    for (k, &i) in free.iter().enumerate() {
        y[i] = z[k];
    }
    let mut f_and_df = |s: f64| -> Result<(f64, f64), ManifoldError> {
        y[axis] = s;
        let jet = surface.jet(&y)?;
        Ok((jet.value(), jet.grad()[axis]))
    };
    let (f_lo, _) = f_and_df(lo)?;
    if lo == hi {
        return Ok(lo);
    }
    let lo_sign = f_lo.signum();
    let mut s = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (f, df) = f_and_df(s)?;
        if f.abs() <= SOLVE_TOL {
            return Ok(s);
        }
        if f.signum() == lo_sign {
            lo = s;
        } else {
            hi = s;
        }
        let newton = s - f / df;
        s = if df != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * s.abs().max(1.0) {
            let (f, _) = f_and_df(s)?;
            if f.abs() <= SOLVE_TOL {
                return Ok(s);
            }
            break;
        }
    }
    Err(ManifoldError::Root(format!("no convergence to |F| <= {SOLVE_TOL:e} at {z:?}")))
}

/// The radial profile of the clamp: identity up to `ε/2`, increasing, below
/// `3ε/4`, with matching first and second derivatives at `ε/2`.
pub fn clamp_radius(r: f64, eps: f64) -> f64 {
    let (c, k) = (0.5 * eps, 0.25 * eps);
    if r <= c {
        r
    } else {
        c + k * ((r - c) / k).tanh()
    }
}

/// `u ρ(|u|) / |u|`.
pub fn clamp_argument(u: &[f64], eps: f64) -> Vec<f64> {
    let r = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if r <= 0.5 * eps {
        return u.to_vec();
    }
    let scale = clamp_radius(r, eps) / r;
    u.iter().map(|v| v * scale).collect()
}

/// Jets of the clamped argument, for jets `u` of the driver coordinates.
pub fn clamp_argument_jet(u: &[Jet2], eps: f64) -> Result<Vec<Jet2>, JetError> {
    let r2 = u.iter().map(|v| v.value() * v.value()).sum::<f64>();
    if r2.sqrt() <= 0.5 * eps {
        // the clamp is the identity on a neighbourhood
        return Ok(u.to_vec());
    }
    let d = u[0].dim();
    let mut sq = Jet2::constant(0.0, d);
    for v in u {
        sq = &sq + &(v * v);
    }
    let r = sq.powf(0.5)?;
    let (c, k) = (0.5 * eps, 0.25 * eps);
    let blended = &(&r + -c).scale(1.0 / k).apply(crate::jet::Elementary::Tanh)?.scale(k) + c;
    let scale = blended.checked_div(&r)?;
    Ok(u.iter().map(|v| v * &scale).collect())
}

/// Brownian motion on an implicit surface by clamped 2-jet steps, with chart
/// selection at every step. Paths that leave every chart are flagged.
pub fn simulate_manifold_bm(
    surface: &ImplicitSurface,
    grid: &GridSpec,
    y0: &[f64],
    paths: usize,
    config: &SimConfig,
    eps: f64,
    model: &str,
) -> Result<TrajectorySet, SchemeError> {
    let n = surface.ambient();
    if grid.d != surface.dim() || y0.len() != n {
        return Err(SchemeError::Config(format!(
            "surface of dimension {} in R^{n} needs {} drivers and a start point of length {n}",
            surface.dim(),
            surface.dim()
        )));
    }
    let f0 = surface.value(y0).map_err(ModelError::from)?;
    if f0.abs() > 1e-8 {
        return Err(SchemeError::Config(format!("start point is off the surface (F = {f0:e})")));
    }
    if !(eps > 0.0) {
        return Err(SchemeError::Config(format!("clamp radius must be positive, got {eps}")));
    }
    grid.factor(config.steps)?;
    let recorded = match &config.record {
        crate::scheme::Record::Full => (0..=config.steps).collect::<Vec<_>>(),
        crate::scheme::Record::Terminal => vec![config.steps],
        crate::scheme::Record::Steps(s) => s.clone(),
    };
    let dt = grid.horizon / config.steps as f64;
    let d = grid.d;
    let out: Vec<Path> = (0..paths as u64)
        .into_par_iter()
        .map(|p| {
            let inc = grid.path(p).coarsen(config.steps).expect("level checked above");
            let mut states = Vec::with_capacity(recorded.len() * n);
            let mut next = recorded.iter().peekable();
            let mut y = y0.to_vec();
            let mut diverged_at = None;
            for k in 0..=config.steps {
                while next.next_if_eq(&&k).is_some() {
                    states.extend_from_slice(&y);
                }
                if k == config.steps {
                    break;
                }
                match surface.step(&y, &inc[k * d..(k + 1) * d], eps) {
                    Ok(v) if v.iter().all(|c| c.is_finite()) => y = v,
                    _ => {
                        diverged_at = Some(k + 1);
                        break;
                    }
                }
            }
            states.resize(recorded.len() * n, f64::NAN);
            Path { states, diverged_at }
        })
        .collect();
    Ok(TrajectorySet {
        n,
        scheme: Scheme::TwoJet,
        model: model.to_string(),
        seed: grid.seed,
        times: recorded.iter().map(|&k| k as f64 * dt).collect(),
        steps: recorded,
        paths: out,
    })
}

/// Largest `|F|` over all finite recorded points.
pub fn max_residual(surface: &ImplicitSurface, set: &TrajectorySet) -> Result<f64, ManifoldError> {
    let mut worst: f64 = 0.0;
    for p in &set.paths {
        for y in p.states.chunks(set.n) {
            if y.iter().all(|v| v.is_finite()) {
                worst = worst.max(surface.value(y)?.abs());
            }
        }
    }
    Ok(worst)
}

/// Ambient drift and `b bᵀ` of the chart Brownian jet; chart independent.
pub fn ambient_generator(surface: &ImplicitSurface, chart: Chart, y: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>), ManifoldError> {
    let (a, b) = extract_ab(&surface.ambient_jet(chart, y)?);
    let bbt = &b * b.transpose();
    Ok((a, bbt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn metric(entries: &[Vec<&str>]) -> MetricField {
        let m = entries.len();
        MetricField::new(SymbolTable::standard(m, m), entries).unwrap()
    }

    #[test]
    fn flat_metric_gives_standard_brownian_motion() {
        let field = metric(&[vec!["1", "0"], vec!["0", "1"]]);
        let (a, b) = field.coefficients(&[0.3, -2.0], 0.0).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
        assert_eq!(b, DMatrix::identity(2, 2));
    }

    #[test]
    fn indefinite_metric_is_rejected() {
        let field = metric(&[vec!["1", "0"], vec!["0", "-1"]]);
        assert!(field.coefficients(&[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn hyperbolic_generator_is_half_laplace_beltrami() {
        let field = metric(&[vec!["1/x2^2", "0"], vec!["0", "1/x2^2"]]);
        let symbols = field.symbols().clone();
        for x in [[0.0, 1.0], [0.4, 2.5], [-1.0, 0.3]] {
            for (f, half_lap) in [
                ("x2", 0.0),
                ("x2^2", x[1] * x[1]),
                ("x1*x2", 0.0),
                ("x1^2 + 3*x2^3", 0.5 * x[1] * x[1] * (2.0 + 18.0 * x[1])),
            ] {
                let e = Expr::parse(f, &symbols).unwrap();
                let lf = crate::model::backward_operator(&field, &e, &symbols, &x, 0.0).unwrap();
                assert!((lf - half_lap).abs() < 1e-8 * half_lap.abs().max(1.0), "{f} at {x:?}: {lf}");
            }
        }
    }

    #[test]
    fn sphere_in_spherical_chart_has_mean_curvature_drift() {
        let field = metric(&[vec!["1", "0"], vec!["0", "sin(x1)^2"]]);
        let symbols = SymbolTable::standard(2, 2);
        let embed: Vec<Expr> = ["sin(x1)*cos(x2)", "sin(x1)*sin(x2)", "cos(x1)"]
            .iter()
            .map(|s| Expr::parse(s, &symbols).unwrap())
            .collect();
        for x in [[0.7, 0.2], [1.5, -2.0], [2.3, 4.0]] {
            let jet = crate::model::pushforward_at(&field, &embed, &symbols, &x, 0.0).unwrap();
            let (a, b) = extract_ab(&jet);
            let y = jet.value();
            for i in 0..3 {
                assert!((a[i] + y[i]).abs() < 1e-6, "{a:?} vs {y:?}");
            }
            // tangent projector I − y yᵀ
            let bbt = &b * b.transpose();
            for i in 0..3 {
                for j in 0..3 {
                    let p = if i == j { 1.0 } else { 0.0 } - y[i] * y[j];
                    assert!((bbt[(i, j)] - p).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn diffusion_squares_to_inverse_metric() {
        let field = metric(&[vec!["2 + x2^2", "x1*x2/3"], vec!["x1*x2/3", "1 + x1^2"]]);
        for x in [[0.1, 0.2], [1.0, -1.0], [-0.5, 2.0]] {
            let (g, _) = field.metric(&x).unwrap();
            let (_, b) = field.coefficients(&x, 0.0).unwrap();
            let err = (&b * b.transpose() * &g - DMatrix::identity(2, 2)).abs().max();
            assert!(err < 1e-10);
        }
    }

    #[test]
    fn sphere_chart_solves_and_is_flat_at_the_pole() {
        let sphere = ImplicitSurface::sphere(2);
        let top = Chart { axis: 2, positive: true };
        let y = sphere.solve(top, &[0.3, 0.4], None).unwrap();
        assert_relative_eq!(y[2], 0.75_f64.sqrt(), epsilon = 1e-12);
        let below = sphere.solve(Chart { axis: 2, positive: false }, &[0.3, 0.4], None).unwrap();
        assert_relative_eq!(below[2], -0.75_f64.sqrt(), epsilon = 1e-12);
        let (g, _) = sphere.induced_metric(top, &[0.0, 0.0, 1.0]).unwrap();
        assert_relative_eq!(g, DMatrix::identity(2, 2), epsilon = 1e-15);
        assert!(sphere.solve(top, &[1.5, 0.0], None).is_err());
    }

    #[test]
    fn chart_selection_rule() {
        let sphere = ImplicitSurface::sphere(2);
        assert_eq!(sphere.select_chart(&[0.0, 0.0, 1.0]).unwrap(), Chart { axis: 2, positive: true });
        let s = 1.0 / 3.0_f64.sqrt();
        assert_eq!(sphere.select_chart(&[s, s, s]).unwrap().axis, 0);
        assert_eq!(sphere.select_chart(&[0.0, -1.0, 0.0]).unwrap(), Chart { axis: 1, positive: false });
        assert!(sphere.select_chart(&[0.0, 0.0, 0.5]).is_err());
    }

    #[test]
    fn genus_two_anchor() {
        let surface = ImplicitSurface::genus_two();
        let chart = Chart { axis: 2, positive: true };
        let y = surface.solve(chart, &[1.05, 0.0], None).unwrap();
        // independent closed form for the y3 root
        let q: f64 = 0.05 * 1.05 * 1.05 * 2.05;
        assert_relative_eq!(y[2], (1.0 / 30.0 - q * q).sqrt(), epsilon = 1e-12);
        assert!(surface.value(&y).unwrap().abs() <= 1e-10);
        // ∂F/∂y1 dominates at this anchor
        let jet = surface.jet(&y).unwrap();
        assert!(jet.grad()[0].abs() > jet.grad()[2].abs());
        assert_eq!(surface.select_chart(&y).unwrap().axis, 0);
        assert_eq!(surface.atlas().len(), 6);
    }

    #[test]
    fn sphere_drift_is_minus_position_in_every_chart() {
        let sphere = ImplicitSurface::sphere(2);
        let y = [0.48, -0.6, 0.64];
        for chart in sphere.atlas() {
            let (a, bbt) = ambient_generator(&sphere, chart, &y).unwrap();
            for i in 0..3 {
                assert!((a[i] + y[i]).abs() < 1e-10, "{} {a:?}", chart.id());
                for j in 0..3 {
                    let p = if i == j { 1.0 } else { 0.0 } - y[i] * y[j];
                    assert!((bbt[(i, j)] - p).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn clamp_is_identity_near_zero_and_bounded() {
        let eps = 0.2;
        assert_eq!(clamp_argument(&[0.05, 0.05], eps), vec![0.05, 0.05]);
        for r in [0.11, 0.5, 10.0, 1e6] {
            let c = clamp_argument(&[r, 0.0], eps);
            assert!(c[0] < eps && c[0] > 0.0);
        }
        // strictly increasing until tanh saturates in double precision
        let mut prev = 0.0;
        for k in 1..100 {
            let r = k as f64 * 0.005;
            let v = clamp_radius(r, eps);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn clamp_jet_agrees_with_finite_differences() {
        let eps = 0.2;
        let u0 = [0.12, -0.05];
        let jets: Vec<Jet2> = (0..2).map(|k| Jet2::variable(u0[k], k, 2)).collect();
        let out = clamp_argument_jet(&jets, eps).unwrap();
        let h = 1e-4;
        let f = |u: [f64; 2], i: usize| clamp_argument(&u, eps)[i];
        for (i, o) in out.iter().enumerate() {
            assert_relative_eq!(o.value(), f(u0, i), epsilon = 1e-15);
            for k in 0..2 {
                let mut p = u0;
                let mut m = u0;
                p[k] += h;
                m[k] -= h;
                let fd = (f(p, i) - f(m, i)) / (2.0 * h);
                assert!((o.grad()[k] - fd).abs() < 1e-6);
            }
            let (mut p, mut m) = (u0, u0);
            p[0] += h;
            m[0] -= h;
            let fd2 = (f(p, i) - 2.0 * f(u0, i) + f(m, i)) / (h * h);
            assert!((o.hess(0, 0) - fd2).abs() < 1e-4);
        }
    }

    #[test]
    fn clamping_preserves_the_jet_at_zero() {
        let jets: Vec<Jet2> = (0..2).map(|k| Jet2::variable(0.0, k, 2)).collect();
        let out = clamp_argument_jet(&jets, 0.1).unwrap();
        assert_eq!(out, jets);
    }

    #[test]
    fn zero_increments_stay_put() {
        let sphere = ImplicitSurface::sphere(2);
        let y = [0.6, 0.0, 0.8];
        let grid = GridSpec::new(1, 2, 1.0, 4).unwrap();
        // single step with du = 0 moves only by the drift ε² term, which is zero at u = 0
        let next = sphere.step(&y, &[0.0, 0.0], 0.2).unwrap();
        for i in 0..3 {
            assert_relative_eq!(next[i], y[i], epsilon = 1e-12);
        }
        let set = simulate_manifold_bm(&sphere, &grid, &y, 4, &SimConfig::new(4), 0.2, "sphere").unwrap();
        assert_eq!(set.diverged(), 0);
        assert!(max_residual(&sphere, &set).unwrap() <= 1e-8);
    }
}
