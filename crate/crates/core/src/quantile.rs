//! Short-time percentiles, medians and modes of one-dimensional SDEs.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;
use thiserror::Error;

use crate::brownian::GridSpec;
use crate::jet::{extract_ab, pushforward, Jet2, JetPoint};
use crate::model::{ito_to_strat, JetField, ModelError, SdeModel};
use crate::scheme::{simulate_2jet, least_squares, Record, SchemeError, SimConfig};

#[derive(Debug, Error)]
pub enum QuantileError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

/// `Φ⁻¹(p)`; exactly zero at `p = ½`.
pub fn inverse_normal(p: f64) -> Result<f64, QuantileError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(QuantileError::Domain(format!("probability {p} is not in (0, 1)")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    Ok(-std::f64::consts::SQRT_2 * erfc_inv(2.0 * p))
}

/// `x0 + b0 √t Φ⁻¹(α) + (a0 − ½ b0 b0′ (1 − Φ⁻¹(α)²)) t`.
pub fn percentile_expansion(alpha: f64, t: f64, x0: f64, a0: f64, b0: f64, b0p: f64) -> Result<f64, QuantileError> {
    if t < 0.0 {
        return Err(QuantileError::Domain(format!("time {t} is negative")));
    }
    let z = inverse_normal(alpha)?;
    Ok(x0 + b0 * t.sqrt() * z + (a0 - 0.5 * b0 * b0p * (1.0 - z * z)) * t)
}

/// Itô drift, diffusion and diffusion slope of a scalar model at `(x, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalCoefficients {
    pub x: f64,
    pub a: f64,
    pub b: f64,
    pub b_prime: f64,
}

impl LocalCoefficients {
    pub fn of(model: &SdeModel, x: f64, t: f64) -> Result<Self, QuantileError> {
        scalar(model)?;
        let (a, _) = model.to_jet_field()?.coefficients(&[x], t)?;
        let (b, db) = model.diffusion_with_derivatives(&[x], t)?;
        Ok(Self {
            x,
            a: a[0],
            b: b[(0, 0)],
            b_prime: db[0][(0, 0)],
        })
    }

    pub fn percentile(&self, alpha: f64, t: f64) -> Result<f64, QuantileError> {
        percentile_expansion(alpha, t, self.x, self.a, self.b, self.b_prime)
    }

    /// Leading-order mode path `x + a t − (3/2) b b′ t`.
    pub fn mode(&self, t: f64) -> f64 {
        self.x + (self.a - 1.5 * self.b * self.b_prime) * t
    }

    /// Stratonovich drift `a − ½ b b′`, the tangent of the median.
    pub fn stratonovich_drift(&self) -> f64 {
        self.a - 0.5 * self.b * self.b_prime
    }
}

fn scalar(model: &SdeModel) -> Result<(), QuantileError> {
    if model.n() != 1 || model.d() != 1 {
        return Err(QuantileError::Domain(format!(
            "one state and one driver required, got n = {}, d = {}",
            model.n(),
            model.d()
        )));
    }
    Ok(())
}

const SEGMENT_SAMPLES: usize = 256;

/// Drift of `Z = φ(X)` with `φ′ = 1/b`, at `x`, by pushing the jet of the
/// model through `φ`. The diffusion of `Z` is one by construction.
pub fn lamperti_drift(model: &SdeModel, x: f64) -> Result<f64, QuantileError> {
    scalar(model)?;
    if model.depends_on_time() {
        return Err(QuantileError::Domain("time-dependent coefficients are not supported".into()));
    }
    let x0 = model.x0[0];
    let field = model.to_jet_field()?;
    let b_at = |y: f64| -> Result<f64, QuantileError> { Ok(field.coefficients(&[y], 0.0)?.1[(0, 0)]) };
    let b0 = b_at(x0)?;
    for k in 0..=SEGMENT_SAMPLES {
        let y = x0 + (x - x0) * k as f64 / SEGMENT_SAMPLES as f64;
        let b = b_at(y)?;
        if b == 0.0 || b.signum() != b0.signum() {
            return Err(QuantileError::Domain(format!("diffusion vanishes between {x0} and {x}")));
        }
    }
    let local = LocalCoefficients::of(model, x, 0.0)?;
    let phi = Jet2::from_parts(
        0.0,
        vec![1.0 / local.b],
        &nalgebra::DMatrix::from_element(1, 1, -local.b_prime / (local.b * local.b)),
    );
    let jet: JetPoint = field.jet(&[x], 0.0)?;
    let (a, _) = extract_ab(&pushforward(&jet, &[phi]).map_err(ModelError::from)?);
    Ok(a[0])
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Half-width of the distribution-free 95% interval for the `p` quantile,
/// from order statistics at ranks `Mp ± 1.96 √(M p (1 − p))`.
pub fn quantile_half_width(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len() as f64;
    let spread = 1.96 * (m * p * (1.0 - p)).sqrt();
    let rank = |r: f64| (r.round().max(1.0).min(m) as usize) - 1;
    0.5 * (sorted[rank(m * p + spread)] - sorted[rank(m * p - spread)])
}

const KDE_GRID: usize = 512;
const KDE_CUTOFF: f64 = 8.0;

/// Argmax of a Gaussian kernel density estimate with bandwidth
/// `1.06 σ̂ M^{-1/5}` on a grid spanning the sorted sample, refined by a parabola.
pub fn kde_mode(sorted: &[f64]) -> f64 {
    let m = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / m;
    let sd = (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    let h = 1.06 * sd * m.powf(-0.2);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if h == 0.0 || hi == lo {
        return lo;
    }
    let spacing = (hi - lo) / (KDE_GRID - 1) as f64;
    let density = |x: f64| -> f64 {
        let start = sorted.partition_point(|&v| v < x - KDE_CUTOFF * h);
        let end = sorted.partition_point(|&v| v <= x + KDE_CUTOFF * h);
        sorted[start..end].iter().map(|v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum()
    };
    let values: Vec<f64> = (0..KDE_GRID).map(|k| density(lo + k as f64 * spacing)).collect();
    let best = (0..KDE_GRID).fold(0, |b, k| if values[k] > values[b] { k } else { b });
    let x = lo + best as f64 * spacing;
    if best == 0 || best == KDE_GRID - 1 {
        return x;
    }
    let (l, c, r) = (values[best - 1], values[best], values[best + 1]);
    let curvature = l - 2.0 * c + r;
    if curvature >= 0.0 {
        return x;
    }
    x + 0.5 * spacing * (l - r) / curvature
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileSpec {
    pub alphas: Vec<f64>,
    /// Horizons, each a whole number of steps.
    pub times: Vec<f64>,
    pub paths: usize,
    /// Steps up to the largest horizon; a power of two.
    pub steps: usize,
    pub seed: u64,
    /// Antithetic path pairs.
    pub antithetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub alpha: f64,
    pub t: f64,
    pub expansion: f64,
    pub monte_carlo: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub t: f64,
    pub kde: f64,
    /// `x0 + a t − (3/2) b b′ t`; both band endpoints agree to this order.
    pub band: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanReport {
    pub format_version: u32,
    pub model: String,
    pub seed: u64,
    pub paths: usize,
    pub diverged: usize,
    pub x0: f64,
    pub coefficients: LocalCoefficients,
    /// Drift of the Stratonovich form at `x0`.
    pub stratonovich_drift: f64,
    /// Least-squares slope of the Monte Carlo median over the horizons.
    pub median_slope: Option<f64>,
    pub rows: Vec<PercentileRow>,
    pub modes: Vec<ModeRow>,
}

impl FanReport {
    pub fn row(&self, alpha: f64, t: f64) -> Option<&PercentileRow> {
        self.rows
            .iter()
            .find(|r| (r.alpha - alpha).abs() < 1e-12 && (r.t - t).abs() < 1e-12)
    }
}

/// Monte Carlo percentiles and modes by the 2-jet scheme, beside the
/// short-time expansion.
pub fn mc_percentiles(model: &SdeModel, spec: &PercentileSpec) -> Result<FanReport, QuantileError> {
    scalar(model)?;
    let x0 = model.x0[0];
    let local = LocalCoefficients::of(model, x0, 0.0)?;
    if local.b == 0.0 {
        return Err(QuantileError::Domain(format!("diffusion vanishes at x0 = {x0}")));
    }
    if spec.alphas.is_empty() || spec.times.is_empty() || spec.paths < 2 {
        return Err(QuantileError::Domain("need levels, horizons and at least two paths".into()));
    }
    let horizon = spec.times.iter().cloned().fold(0.0, f64::max);
    if !(horizon > 0.0) || spec.times.iter().any(|&t| t <= 0.0) {
        return Err(QuantileError::Domain("horizons must be positive".into()));
    }
    let dt = horizon / spec.steps as f64;
    let mut record = Vec::with_capacity(spec.times.len());
    for &t in &spec.times {
        let k = (t / dt).round();
        if ((k * dt - t) / t).abs() > 1e-9 {
            return Err(QuantileError::Domain(format!("horizon {t} is not a multiple of the step {dt}")));
        }
        record.push(k as usize);
    }
    let mut order: Vec<usize> = (0..record.len()).collect();
    order.sort_by_key(|&i| record[i]);
    let sorted_steps: Vec<usize> = order.iter().map(|&i| record[i]).collect();
    let grid = GridSpec::new(spec.seed, 1, horizon, spec.steps)
        .map_err(SchemeError::from)?
        .with_antithetic(spec.antithetic);
    let field = model.to_jet_field()?;
    let config = SimConfig::new(spec.steps).record(Record::Steps(sorted_steps));
    let set = simulate_2jet(&field, &grid, &[x0], spec.paths, &config, &model.name)?;

    let strat = ito_to_strat_drift(model, x0)?;
    let mut rows = Vec::new();
    let mut modes = Vec::new();
    let mut medians = Vec::new();
    for (rec, &i) in order.iter().enumerate() {
        let t = spec.times[i];
        let mut samples = set.samples(rec, 0);
        samples.sort_by(f64::total_cmp);
        if samples.len() < 2 {
            return Err(QuantileError::Domain("too few surviving paths".into()));
        }
        for &alpha in &spec.alphas {
            rows.push(PercentileRow {
                alpha,
                t,
                expansion: local.percentile(alpha, t)?,
                monte_carlo: quantile_sorted(&samples, alpha),
                half_width: quantile_half_width(&samples, alpha),
            });
        }
        medians.push((t, quantile_sorted(&samples, 0.5)));
        modes.push(ModeRow {
            t,
            kde: kde_mode(&samples),
            band: local.mode(t),
        });
    }
    let median_slope = (medians.len() >= 2).then(|| {
        let (ts, ms): (Vec<f64>, Vec<f64>) = medians.into_iter().unzip();
        least_squares(&ts, &ms).0
    });
    Ok(FanReport {
        format_version: 1,
        model: model.name.clone(),
        seed: spec.seed,
        paths: spec.paths,
        diverged: set.diverged(),
        x0,
        coefficients: local,
        stratonovich_drift: strat,
        median_slope,
        rows,
        modes,
    })
}

/// Drift of the Stratonovich form of `model` at `x`.
pub fn ito_to_strat_drift(model: &SdeModel, x: f64) -> Result<f64, QuantileError> {
    let ito = match model.form {
        crate::model::Form::Ito { .. } | crate::model::Form::JetField { .. } => model.clone(),
        _ => crate::model::to_ito(model)?,
    };
    let strat = ito_to_strat(&ito)?;
    let crate::model::Form::Stratonovich { drift, .. } = &strat.form else {
        unreachable!("conversion yields a Stratonovich model");
    };
    let slots = strat.symbols.bind(&[x], 0.0, &[0.0]);
    drift[0]
        .eval_slots(&slots, 1)
        .map_err(|source| ModelError::Eval { source, state: vec![x] }.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FanPoint {
    pub alpha: f64,
    pub t: f64,
    pub value: f64,
}

/// `γ_{x0}(Φ⁻¹(α) √t)` on a grid of levels and horizons.
pub fn fan_curves(field: &dyn JetField, x0: f64, alphas: &[f64], times: &[f64]) -> Result<Vec<FanPoint>, QuantileError> {
    if field.n() != 1 || field.d() != 1 {
        return Err(QuantileError::Domain("fan curves need one state and one driver".into()));
    }
    let mut out = Vec::with_capacity(alphas.len() * times.len());
    let mut value = [0.0];
    for &alpha in alphas {
        let z = inverse_normal(alpha)?;
        for &t in times {
            if t < 0.0 {
                return Err(QuantileError::Domain(format!("time {t} is negative")));
            }
            field.step(&[x0], 0.0, &[z * t.sqrt()], &mut value)?;
            out.push(FanPoint { alpha, t, value: value[0] });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::SymbolTable;
    use approx::assert_relative_eq;

    fn gbm(mu: f64, sigma: f64) -> SdeModel {
        let symbols = SymbolTable::standard(1, 1);
        SdeModel::ito(
            "gbm",
            symbols,
            vec![1.0],
            &[&format!("{mu}*x1")],
            &[&[&format!("{sigma}*x1")]],
        )
        .unwrap()
    }

    #[test]
    fn inverse_normal_values() {
        assert_eq!(inverse_normal(0.5).unwrap(), 0.0);
        // Φ(1) = 0.841344746068543 to 15 digits
        assert_relative_eq!(inverse_normal(0.841344746068543).unwrap(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(inverse_normal(0.025).unwrap(), -1.959963984540054, epsilon = 1e-9);
        assert!(inverse_normal(0.0).is_err() && inverse_normal(1.0).is_err());
    }

    #[test]
    fn expansion_against_lognormal_quantiles() {
        let (sigma, t) = (0.2, 0.01);
        let median = percentile_expansion(0.5, t, 1.0, 0.0, 0.2, 0.2).unwrap();
        assert_relative_eq!(median, 0.9998, epsilon = 1e-15);
        assert!((median - (-0.5 * sigma * sigma * t).exp()).abs() < 1e-6);
        let upper = percentile_expansion(0.841344746068543, t, 1.0, 0.0, 0.2, 0.2).unwrap();
        assert_relative_eq!(upper, 1.02, epsilon = 1e-9);
        assert!((upper - (sigma * t.sqrt() - 0.5 * sigma * sigma * t).exp()).abs() < 1e-5);
        assert!(percentile_expansion(1.5, t, 1.0, 0.0, 0.2, 0.2).is_err());
        assert!(percentile_expansion(0.5, -1.0, 1.0, 0.0, 0.2, 0.2).is_err());
    }

    #[test]
    fn expansion_is_increasing_in_alpha() {
        let mut prev = f64::NEG_INFINITY;
        for k in 1..100 {
            let v = percentile_expansion(k as f64 / 100.0, 0.01, 1.0, 0.05, 0.2, 0.2).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn lamperti_drifts() {
        let bm = SdeModel::ito("bm", SymbolTable::standard(1, 1), vec![0.0], &["0"], &[&["1"]]).unwrap();
        assert_eq!(lamperti_drift(&bm, 0.7).unwrap(), 0.0);
        let (mu, sigma) = (0.05, 0.2);
        assert_relative_eq!(
            lamperti_drift(&gbm(mu, sigma), 1.3).unwrap(),
            (mu - 0.5 * sigma * sigma) / sigma,
            epsilon = 1e-14
        );
        let ou = SdeModel::ito("ou", SymbolTable::standard(1, 1), vec![0.5], &["-2*x1"], &[&["0.3"]]).unwrap();
        assert_relative_eq!(lamperti_drift(&ou, 0.5).unwrap(), -2.0 * 0.5 / 0.3, epsilon = 1e-14);
        // b = x1 vanishes between x0 = 1 and -1
        assert!(lamperti_drift(&gbm(0.0, 1.0), -1.0).is_err());
    }

    #[test]
    fn local_coefficients_of_gbm() {
        let c = LocalCoefficients::of(&gbm(0.0, 0.2), 1.0, 0.0).unwrap();
        assert_relative_eq!(c.b, 0.2);
        assert_relative_eq!(c.b_prime, 0.2);
        assert_relative_eq!(c.stratonovich_drift(), -0.02);
        assert_relative_eq!(ito_to_strat_drift(&gbm(0.0, 0.2), 1.0).unwrap(), -0.02, epsilon = 1e-15);
        assert_relative_eq!(c.mode(0.01), 1.0 - 1.5 * 0.04 * 0.01);
    }

    #[test]
    fn type_seven_quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
        assert_relative_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_relative_eq!(quantile_sorted(&s, 0.25), 1.75);
    }

    #[test]
    fn kde_mode_of_a_symmetric_sample() {
        // normal quantiles form a deterministic symmetric sample
        let m = 20_001;
        let s: Vec<f64> = (1..=m)
            .map(|k| 3.0 + inverse_normal(k as f64 / (m + 1) as f64).unwrap())
            .collect();
        assert!((kde_mode(&s) - 3.0).abs() < 1e-3);
    }

    #[test]
    fn deterministic_model_is_rejected() {
        let ode = SdeModel::ito("ode", SymbolTable::standard(1, 1), vec![1.0], &["1"], &[&["0"]]).unwrap();
        let spec = PercentileSpec {
            alphas: vec![0.5],
            times: vec![0.01],
            paths: 10,
            steps: 4,
            seed: 1,
            antithetic: false,
        };
        assert!(matches!(mc_percentiles(&ode, &spec), Err(QuantileError::Domain(_))));
    }

    #[test]
    fn fan_curves_of_gbm() {
        let field = gbm(0.0, 0.2).to_jet_field().unwrap();
        let pts = fan_curves(&field, 1.0, &[0.5, 0.841344746068543], &[0.0, 0.01]).unwrap();
        assert_eq!(pts[0].value, 1.0);
        assert_eq!(pts[1].value, 1.0);
        assert_eq!(pts[2].value, 1.0);
        // canonical curve x (1 + σ u) at u = √t: no quadratic term since a = 0
        assert_relative_eq!(pts[3].value, 1.02, epsilon = 1e-9);
    }

    #[test]
    fn small_monte_carlo_run_is_consistent() {
        let spec = PercentileSpec {
            alphas: vec![0.1587, 0.5, 0.8413],
            times: vec![0.005, 0.01],
            paths: 4000,
            steps: 16,
            seed: 3,
            antithetic: true,
        };
        let report = mc_percentiles(&gbm(0.0, 0.2), &spec).unwrap();
        assert_eq!(report.rows.len(), 6);
        for t in [0.005, 0.01] {
            let q: Vec<f64> = spec.alphas.iter().map(|&a| report.row(a, t).unwrap().monte_carlo).collect();
            assert!(q[0] < q[1] && q[1] < q[2]);
            for &a in &spec.alphas {
                let r = report.row(a, t).unwrap();
                assert!((r.monte_carlo - r.expansion).abs() < 3e-3);
            }
        }
        let bad = PercentileSpec { times: vec![0.003, 0.01], ..spec };
        assert!(mc_percentiles(&gbm(0.0, 0.2), &bad).is_err());
    }
}
