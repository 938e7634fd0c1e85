//! SDE models in Itô, Stratonovich, jet-field and vector-pair form.
//!
//! Every form can be turned into a [`JetField`], the coordinate-free datum the
//! schemes step along. Conversions between forms compute their drift
//! corrections from jet-evaluated derivatives of the diffusion, and the
//! converted drift is carried as a numeric coefficient rather than rebuilt
//! expression text.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsl::{EvalError, Expr, ParseError, SymbolTable};
use crate::jet::{self, canonical_jet, canonical_step, extract_ab, Jet2, JetError, JetPoint};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("evaluation failed at state {state:?}: {source}")]
    Eval { source: EvalError, state: Vec<f64> },
    #[error(transparent)]
    Jet(#[from] JetError),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("{0} has no expression to differentiate")]
    NotDifferentiable(String),
}

fn at(state: &[f64]) -> impl FnOnce(EvalError) -> ModelError + '_ {
    move |source| ModelError::Eval {
        source,
        state: state.to_vec(),
    }
}

pub type NumericFn = dyn Fn(&[f64], f64) -> Result<f64, EvalError> + Send + Sync;

/// A coefficient function of `(x, t)`: either parsed text or a numeric
/// callable produced by a conversion.
#[derive(Clone)]
pub enum Coefficient {
    Expr(Expr),
    Numeric { f: Arc<NumericFn>, note: String },
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Expr(e) => write!(f, "{e}"),
            Coefficient::Numeric { note, .. } => write!(f, "<numeric: {note}>"),
        }
    }
}

impl Coefficient {
    pub fn parse(src: &str, symbols: &SymbolTable) -> Result<Self, ParseError> {
        Expr::parse(src, symbols).map(Coefficient::Expr)
    }

    pub fn numeric(
        note: impl Into<String>,
        f: impl Fn(&[f64], f64) -> Result<f64, EvalError> + Send + Sync + 'static,
    ) -> Self {
        Coefficient::Numeric {
            f: Arc::new(f),
            note: note.into(),
        }
    }

    /// Evaluates on a slot vector laid out by the model's symbol table.
    pub fn eval_slots(&self, slots: &[f64], n: usize) -> Result<f64, EvalError> {
        match self {
            Coefficient::Expr(e) => e.eval_real(slots),
            Coefficient::Numeric { f, .. } => f(&slots[..n], slots[n]),
        }
    }

    /// The 2-jet in the state variables at `(x, t)`.
    pub fn state_jet(&self, symbols: &SymbolTable, x: &[f64], t: f64) -> Result<Jet2, ModelError> {
        match self {
            Coefficient::Expr(e) => e.eval_jet(&state_jets(symbols, x, t)).map_err(at(x)),
            Coefficient::Numeric { note, .. } => Err(ModelError::NotDifferentiable(note.clone())),
        }
    }

    fn uses_drivers(&self, symbols: &SymbolTable) -> bool {
        match self {
            Coefficient::Expr(e) => (0..symbols.d()).any(|a| e.uses_slot(symbols.driver_slot(a))),
            Coefficient::Numeric { .. } => false,
        }
    }
}

/// Slot jets seeding each state variable (in `n` variables), with time and
/// drivers held constant.
pub fn state_jets(symbols: &SymbolTable, x: &[f64], t: f64) -> Vec<Jet2> {
    let n = symbols.n();
    let mut slots: Vec<Jet2> = x
        .iter()
        .enumerate()
        .map(|(k, &v)| Jet2::variable(v, k, n))
        .collect();
    slots.push(Jet2::constant(t, n));
    slots.extend((0..symbols.d()).map(|_| Jet2::constant(0.0, n)));
    slots
}

#[derive(Debug, Clone)]
pub enum Form {
    Ito {
        drift: Vec<Coefficient>,
        diffusion: Vec<Vec<Coefficient>>,
    },
    Stratonovich {
        drift: Vec<Coefficient>,
        diffusion: Vec<Vec<Coefficient>>,
    },
    /// Curves `γ_x(u)` over states, `t` and drivers.
    JetField { curve: Vec<Expr> },
    /// `γ_x(t) = Φ_A^{t²}(Φ_B^t(x))`, one driver.
    VectorPair { a: Vec<Coefficient>, b: Vec<Coefficient> },
}

impl Form {
    pub fn tag(&self) -> &'static str {
        match self {
            Form::Ito { .. } => "ito",
            Form::Stratonovich { .. } => "stratonovich",
            Form::JetField { .. } => "jet",
            Form::VectorPair { .. } => "vector",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SdeModel {
    pub name: String,
    pub symbols: SymbolTable,
    pub x0: Vec<f64>,
    pub form: Form,
}

const IDENTITY_TOL: f64 = 1e-9;
const IDENTITY_PROBES: usize = 20;

impl SdeModel {
    pub fn new(name: impl Into<String>, symbols: SymbolTable, x0: Vec<f64>, form: Form) -> Result<Self, ModelError> {
        let model = Self {
            name: name.into(),
            symbols,
            x0,
            form,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn ito(
        name: &str,
        symbols: SymbolTable,
        x0: Vec<f64>,
        drift: &[&str],
        diffusion: &[&[&str]],
    ) -> Result<Self, ModelError> {
        let (drift, diffusion) = parse_pair(&symbols, drift, diffusion)?;
        Self::new(name, symbols, x0, Form::Ito { drift, diffusion })
    }

    pub fn stratonovich(
        name: &str,
        symbols: SymbolTable,
        x0: Vec<f64>,
        drift: &[&str],
        diffusion: &[&[&str]],
    ) -> Result<Self, ModelError> {
        let (drift, diffusion) = parse_pair(&symbols, drift, diffusion)?;
        Self::new(name, symbols, x0, Form::Stratonovich { drift, diffusion })
    }

    pub fn jet_field(name: &str, symbols: SymbolTable, x0: Vec<f64>, curve: &[&str]) -> Result<Self, ModelError> {
        let curve = curve
            .iter()
            .map(|s| Expr::parse(s, &symbols))
            .collect::<Result<_, _>>()?;
        Self::new(name, symbols, x0, Form::JetField { curve })
    }

    pub fn vector_pair(
        name: &str,
        symbols: SymbolTable,
        x0: Vec<f64>,
        a: &[&str],
        b: &[&str],
    ) -> Result<Self, ModelError> {
        let parse = |v: &[&str]| -> Result<Vec<Coefficient>, ParseError> {
            v.iter().map(|s| Coefficient::parse(s, &symbols)).collect()
        };
        let (a, b) = (parse(a)?, parse(b)?);
        Self::new(name, symbols, x0, Form::VectorPair { a, b })
    }

    pub fn n(&self) -> usize {
        self.symbols.n()
    }

    pub fn d(&self) -> usize {
        self.symbols.d()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (n, d) = (self.n(), self.d());
        if self.x0.len() != n {
            return Err(ModelError::Invalid(format!("x0 has {} entries, expected {n}", self.x0.len())));
        }
        let check_len = |what: &str, len: usize, want: usize| {
            if len == want {
                Ok(())
            } else {
                Err(ModelError::Invalid(format!("{what} has {len} entries, expected {want}")))
            }
        };
        let no_drivers = |cs: &[Coefficient]| {
            if cs.iter().any(|c| c.uses_drivers(&self.symbols)) {
                Err(ModelError::Invalid("coefficients may not depend on drivers".into()))
            } else {
                Ok(())
            }
        };
        match &self.form {
            Form::Ito { drift, diffusion } | Form::Stratonovich { drift, diffusion } => {
                check_len("drift", drift.len(), n)?;
                check_len("diffusion", diffusion.len(), n)?;
                for row in diffusion {
                    check_len("diffusion row", row.len(), d)?;
                    no_drivers(row)?;
                }
                no_drivers(drift)?;
            }
            Form::VectorPair { a, b } => {
                if d != 1 {
                    return Err(ModelError::Invalid("vector pairs need exactly one driver".into()));
                }
                check_len("A", a.len(), n)?;
                check_len("B", b.len(), n)?;
                no_drivers(a)?;
                no_drivers(b)?;
            }
            Form::JetField { curve } => {
                check_len("gamma", curve.len(), n)?;
                self.check_curve_passes_through_base_point()?;
            }
        }
        Ok(())
    }

    /// `γ_x(0) = x` at `x0` and at random probes around it.
    fn check_curve_passes_through_base_point(&self) -> Result<(), ModelError> {
        let Form::JetField { curve } = &self.form else {
            return Ok(());
        };
        let mut points = vec![self.x0.clone()];
        points.extend(latin_hypercube(&self.x0, IDENTITY_PROBES, 1.0, 0x6a65_7473));
        let zeros = vec![0.0; self.d()];
        for x in &points {
            let slots = self.symbols.bind(x, 0.0, &zeros);
            for (i, g) in curve.iter().enumerate() {
                let v = match g.eval_real(&slots) {
                    Ok(v) => v,
                    // probes may leave the model's domain; only x0 is mandatory
                    Err(_) if x != &self.x0 => continue,
                    Err(e) => return Err(at(x)(e)),
                };
                if (v - x[i]).abs() > IDENTITY_TOL * (1.0 + x[i].abs()) {
                    return Err(ModelError::Invalid(format!(
                        "gamma_x(0) != x: coordinate {} is {v} at {x:?}",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_jet_field(&self) -> Result<ModelField, ModelError> {
        let symbols = self.symbols.clone();
        match &self.form {
            Form::JetField { curve } => Ok(ModelField {
                symbols,
                kind: FieldKind::Curve(curve.clone()),
            }),
            Form::Ito { drift, diffusion } => Ok(ModelField {
                symbols,
                kind: FieldKind::Coefficients {
                    drift: drift.clone(),
                    diffusion: diffusion.clone(),
                },
            }),
            Form::Stratonovich { .. } => strat_to_ito(self)?.to_jet_field(),
            Form::VectorPair { .. } => vector_to_standard(self)?.to_jet_field(),
        }
    }

    /// Diffusion matrix and its state derivatives `∂_h b` at `(x, t)`.
    pub fn diffusion_with_derivatives(&self, x: &[f64], t: f64) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>), ModelError> {
        let (n, d) = (self.n(), self.d());
        let mut b = DMatrix::zeros(n, d);
        let mut db = vec![DMatrix::zeros(n, d); n];
        let mut fill = |i: usize, alpha: usize, value: f64, grad: &[f64]| {
            b[(i, alpha)] = value;
            for h in 0..n {
                db[h][(i, alpha)] = grad[h];
            }
        };
        match &self.form {
            Form::Ito { diffusion, .. } | Form::Stratonovich { diffusion, .. } => {
                for (i, row) in diffusion.iter().enumerate() {
                    for (alpha, c) in row.iter().enumerate() {
                        let j = c.state_jet(&self.symbols, x, t)?;
                        fill(i, alpha, j.value(), j.grad());
                    }
                }
            }
            Form::VectorPair { b: field, .. } => {
                for (i, c) in field.iter().enumerate() {
                    let j = c.state_jet(&self.symbols, x, t)?;
                    fill(i, 0, j.value(), j.grad());
                }
            }
            Form::JetField { curve } => {
                // joint jet in (x, u): mixed partials give ∂_h b_{iα}
                let m = n + d;
                let mut slots: Vec<Jet2> = x.iter().enumerate().map(|(k, &v)| Jet2::variable(v, k, m)).collect();
                slots.push(Jet2::constant(t, m));
                slots.extend((0..d).map(|a| Jet2::variable(0.0, n + a, m)));
                for (i, g) in curve.iter().enumerate() {
                    let j = g.eval_jet(&slots).map_err(at(x))?;
                    for alpha in 0..d {
                        let grad: Vec<f64> = (0..n).map(|h| j.hess(h, n + alpha)).collect();
                        fill(i, alpha, j.grad()[n + alpha], &grad);
                    }
                }
            }
        }
        Ok((b, db))
    }

    /// `½ Σ_α Σ_h ∂_h b_{iα} b_{hα}`, the Itô–Stratonovich drift gap.
    pub fn stratonovich_correction(&self, x: &[f64], t: f64) -> Result<Vec<f64>, ModelError> {
        let (b, db) = self.diffusion_with_derivatives(x, t)?;
        let (n, d) = b.shape();
        Ok((0..n)
            .map(|i| {
                let mut c = 0.0;
                for alpha in 0..d {
                    for h in 0..n {
                        c += db[h][(i, alpha)] * b[(h, alpha)];
                    }
                }
                0.5 * c
            })
            .collect())
    }

    /// Drift and diffusion as the form states them: Stratonovich drift for
    /// Stratonovich models, `(A, B)` for vector pairs, Itô coefficients for
    /// Itô models and jet fields.
    pub fn form_coefficients(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, DMatrix<f64>), ModelError> {
        let (n, d) = (self.n(), self.d());
        let slots = self.symbols.bind(x, t, &vec![0.0; d]);
        let eval = |c: &Coefficient| c.eval_slots(&slots, n).map_err(at(x));
        match &self.form {
            Form::Ito { drift, diffusion } | Form::Stratonovich { drift, diffusion } => {
                let a = drift.iter().map(eval).collect::<Result<Vec<_>, _>>()?;
                let mut b = DMatrix::zeros(n, d);
                for (i, row) in diffusion.iter().enumerate() {
                    for (alpha, c) in row.iter().enumerate() {
                        b[(i, alpha)] = eval(c)?;
                    }
                }
                Ok((a, b))
            }
            Form::VectorPair { a, b } => {
                let av = a.iter().map(eval).collect::<Result<Vec<_>, _>>()?;
                let bv = b.iter().map(eval).collect::<Result<Vec<_>, _>>()?;
                Ok((av, DMatrix::from_column_slice(n, 1, &bv)))
            }
            Form::JetField { .. } => self.to_jet_field()?.coefficients(x, t),
        }
    }

    /// Whether any parsed coefficient or curve reads `t`.
    pub fn depends_on_time(&self) -> bool {
        let slot = self.symbols.time_slot();
        let coeff = |c: &Coefficient| matches!(c, Coefficient::Expr(e) if e.uses_slot(slot));
        match &self.form {
            Form::Ito { drift, diffusion } | Form::Stratonovich { drift, diffusion } => {
                drift.iter().any(coeff) || diffusion.iter().flatten().any(coeff)
            }
            Form::VectorPair { a, b } => a.iter().chain(b).any(coeff),
            Form::JetField { curve } => curve.iter().any(|e| e.uses_slot(slot)),
        }
    }

    fn diffusion_coefficients(&self) -> Result<Vec<Vec<Coefficient>>, ModelError> {
        match &self.form {
            Form::Ito { diffusion, .. } | Form::Stratonovich { diffusion, .. } => Ok(diffusion.clone()),
            Form::VectorPair { b, .. } => Ok(b.iter().map(|c| vec![c.clone()]).collect()),
            Form::JetField { .. } => {
                let field = self.to_jet_field()?;
                let n = self.n();
                Ok((0..n)
                    .map(|i| {
                        (0..self.d())
                            .map(|alpha| {
                                let field = field.clone();
                                Coefficient::numeric(format!("b[{i}][{alpha}] of jet field"), move |x, t| {
                                    let (_, b) = field.coefficients(x, t).map_err(model_to_eval)?;
                                    Ok(b[(i, alpha)])
                                })
                            })
                            .collect()
                    })
                    .collect())
            }
        }
    }

    fn with_form(&self, suffix: &str, form: Form) -> SdeModel {
        SdeModel {
            name: format!("{}{suffix}", self.name),
            symbols: self.symbols.clone(),
            x0: self.x0.clone(),
            form,
        }
    }
}

fn model_to_eval(e: ModelError) -> EvalError {
    match e {
        ModelError::Eval { source, .. } => source,
        other => EvalError::Shape(other.to_string()),
    }
}

fn parse_pair(
    symbols: &SymbolTable,
    drift: &[&str],
    diffusion: &[&[&str]],
) -> Result<(Vec<Coefficient>, Vec<Vec<Coefficient>>), ParseError> {
    let drift = drift
        .iter()
        .map(|s| Coefficient::parse(s, symbols))
        .collect::<Result<_, _>>()?;
    let diffusion = diffusion
        .iter()
        .map(|row| row.iter().map(|s| Coefficient::parse(s, symbols)).collect())
        .collect::<Result<_, _>>()?;
    Ok((drift, diffusion))
}

/// Drift coefficients shifted by `sign ·` the Stratonovich correction of `source`.
fn corrected_drift(source: &SdeModel, drift: &[Coefficient], sign: f64, note: &str) -> Vec<Coefficient> {
    let source = Arc::new(source.clone());
    let n = source.n();
    drift
        .iter()
        .enumerate()
        .map(|(i, base)| {
            let source = Arc::clone(&source);
            let base = base.clone();
            Coefficient::numeric(format!("{note} of drift[{i}]"), move |x, t| {
                let slots = source.symbols.bind(x, t, &vec![0.0; source.d()]);
                let a = base.eval_slots(&slots, n)?;
                let c = source.stratonovich_correction(x, t).map_err(model_to_eval)?;
                Ok(a + sign * c[i])
            })
        })
        .collect()
}

/// Stratonovich drift `ã` to Itô drift `ã + ½ Σ ∂_h b_{iα} b_{hα}`.
pub fn strat_to_ito(model: &SdeModel) -> Result<SdeModel, ModelError> {
    let Form::Stratonovich { drift, diffusion } = &model.form else {
        return Err(ModelError::Invalid(format!(
            "expected a Stratonovich model, got {}",
            model.form.tag()
        )));
    };
    let drift = corrected_drift(model, drift, 1.0, "Ito conversion");
    Ok(model.with_form(
        " (Ito)",
        Form::Ito {
            drift,
            diffusion: diffusion.clone(),
        },
    ))
}

/// Itô drift `a` to Stratonovich drift `a − ½ Σ ∂_h b_{iα} b_{hα}`. Jet-field
/// models are accepted and read through their Itô coefficients.
pub fn ito_to_strat(model: &SdeModel) -> Result<SdeModel, ModelError> {
    let drift = match &model.form {
        Form::Ito { drift, .. } => drift.clone(),
        Form::JetField { .. } => {
            let field = model.to_jet_field()?;
            (0..model.n())
                .map(|i| {
                    let field = field.clone();
                    Coefficient::numeric(format!("a[{i}] of jet field"), move |x, t| {
                        let (a, _) = field.coefficients(x, t).map_err(model_to_eval)?;
                        Ok(a[i])
                    })
                })
                .collect()
        }
        other => {
            return Err(ModelError::Invalid(format!("expected an Ito model, got {}", other.tag())));
        }
    };
    let diffusion = model.diffusion_coefficients()?;
    let drift = corrected_drift(model, &drift, -1.0, "Stratonovich conversion");
    Ok(model.with_form(" (Stratonovich)", Form::Stratonovich { drift, diffusion }))
}

/// Any form to Itô form.
pub fn to_ito(model: &SdeModel) -> Result<SdeModel, ModelError> {
    match &model.form {
        Form::Ito { .. } => Ok(model.clone()),
        Form::Stratonovich { .. } => strat_to_ito(model),
        Form::VectorPair { .. } => vector_to_standard(model),
        Form::JetField { .. } => {
            let field = model.to_jet_field()?;
            let n = model.n();
            let drift = (0..n)
                .map(|i| {
                    let field = field.clone();
                    Coefficient::numeric(format!("a[{i}] of jet field"), move |x, t| {
                        let (a, _) = field.coefficients(x, t).map_err(model_to_eval)?;
                        Ok(a[i])
                    })
                })
                .collect();
            let diffusion = model.diffusion_coefficients()?;
            Ok(model.with_form(" (Ito)", Form::Ito { drift, diffusion }))
        }
    }
}

/// Any form to Stratonovich form.
pub fn to_stratonovich(model: &SdeModel) -> Result<SdeModel, ModelError> {
    match &model.form {
        Form::Stratonovich { .. } => Ok(model.clone()),
        // A is the Stratonovich drift of a vector pair
        Form::VectorPair { a, b } => Ok(model.with_form(
            " (Stratonovich)",
            Form::Stratonovich {
                drift: a.clone(),
                diffusion: b.iter().map(|c| vec![c.clone()]).collect(),
            },
        )),
        _ => ito_to_strat(model),
    }
}

/// Vector pair `(A, B)` to the standard representation
/// `a = A + ½ (∂B/∂x) B`, `b = B`.
pub fn vector_to_standard(model: &SdeModel) -> Result<SdeModel, ModelError> {
    let Form::VectorPair { a, b } = &model.form else {
        return Err(ModelError::Invalid(format!(
            "expected a vector-pair model, got {}",
            model.form.tag()
        )));
    };
    let drift = corrected_drift(model, a, 1.0, "vector-pair conversion");
    Ok(model.with_form(
        " (standard)",
        Form::Ito {
            drift,
            diffusion: b.iter().map(|c| vec![c.clone()]).collect(),
        },
    ))
}

/// A 2-jet at every state: the section an SDE defines.
pub trait JetField: Send + Sync {
    fn n(&self) -> usize;
    fn d(&self) -> usize;

    /// The 2-jet of `γ_x` at `u = 0`.
    fn jet(&self, x: &[f64], t: f64) -> Result<JetPoint, ModelError>;

    fn coefficients(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, DMatrix<f64>), ModelError> {
        Ok(extract_ab(&self.jet(x, t)?))
    }

    /// `γ_x(u)` at a real argument.
    fn step(&self, x: &[f64], t: f64, u: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        let (a, b) = self.coefficients(x, t)?;
        canonical_step(x, &a, &b, u, out);
        Ok(())
    }
}

#[derive(Clone)]
enum FieldKind {
    /// Full user curve; stepping evaluates it at real `u`.
    Curve(Vec<Expr>),
    /// Itô coefficients; stepping uses the canonical quadratic curve.
    Coefficients {
        drift: Vec<Coefficient>,
        diffusion: Vec<Vec<Coefficient>>,
    },
}

/// Jet field of an [`SdeModel`].
#[derive(Clone)]
pub struct ModelField {
    symbols: SymbolTable,
    kind: FieldKind,
}

impl ModelField {
    pub fn symbols(&self) -> &SymbolTable {
        &self.symbols
    }

    pub fn has_full_curve(&self) -> bool {
        matches!(self.kind, FieldKind::Curve(_))
    }
}

impl JetField for ModelField {
    fn n(&self) -> usize {
        self.symbols.n()
    }

    fn d(&self) -> usize {
        self.symbols.d()
    }

    fn jet(&self, x: &[f64], t: f64) -> Result<JetPoint, ModelError> {
        match &self.kind {
            FieldKind::Curve(curve) => {
                let d = self.d();
                let mut slots: Vec<Jet2> = x.iter().map(|&v| Jet2::constant(v, d)).collect();
                slots.push(Jet2::constant(t, d));
                slots.extend((0..d).map(|a| Jet2::variable(0.0, a, d)));
                let coords = curve
                    .iter()
                    .map(|g| g.eval_jet(&slots))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(at(x))?;
                let jet = JetPoint::new(coords)?;
                if !jet.is_finite() {
                    return Err(ModelError::Invalid(format!("non-finite jet at {x:?}")));
                }
                Ok(jet)
            }
            FieldKind::Coefficients { .. } => {
                let (a, b) = self.coefficients(x, t)?;
                Ok(canonical_jet(x, &a, &b)?)
            }
        }
    }

    fn coefficients(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, DMatrix<f64>), ModelError> {
        match &self.kind {
            FieldKind::Curve(_) => Ok(extract_ab(&self.jet(x, t)?)),
            FieldKind::Coefficients { drift, diffusion } => {
                let (n, d) = (self.n(), self.d());
                let slots = self.symbols.bind(x, t, &vec![0.0; d]);
                let a = drift
                    .iter()
                    .map(|c| c.eval_slots(&slots, n))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(at(x))?;
                let mut b = DMatrix::zeros(n, d);
                for (i, row) in diffusion.iter().enumerate() {
                    for (alpha, c) in row.iter().enumerate() {
                        b[(i, alpha)] = c.eval_slots(&slots, n).map_err(at(x))?;
                    }
                }
                Ok((a, b))
            }
        }
    }

    fn step(&self, x: &[f64], t: f64, u: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        match &self.kind {
            FieldKind::Curve(curve) => {
                let slots = self.symbols.bind(x, t, u);
                for (o, g) in out.iter_mut().zip(curve) {
                    *o = g.eval_real(&slots).map_err(at(x))?;
                }
                Ok(())
            }
            FieldKind::Coefficients { .. } => {
                let (a, b) = self.coefficients(x, t)?;
                canonical_step(x, &a, &b, u, out);
                Ok(())
            }
        }
    }
}

/// Replaces every jet of `inner` by its canonical quadratic representative.
pub struct Canonicalized<F>(pub F);

impl<F: JetField> JetField for Canonicalized<F> {
    fn n(&self) -> usize {
        self.0.n()
    }
    fn d(&self) -> usize {
        self.0.d()
    }
    fn jet(&self, x: &[f64], t: f64) -> Result<JetPoint, ModelError> {
        let (a, b) = self.0.coefficients(x, t)?;
        Ok(canonical_jet(x, &a, &b)?)
    }
    fn coefficients(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, DMatrix<f64>), ModelError> {
        self.0.coefficients(x, t)
    }
}

/// Jets of a map given by expressions over the states of `symbols`, at `x`.
pub fn map_jets(map: &[Expr], symbols: &SymbolTable, x: &[f64], t: f64) -> Result<Vec<Jet2>, ModelError> {
    let slots = state_jets(symbols, x, t);
    map.iter()
        .map(|f| f.eval_jet(&slots).map_err(at(x)))
        .collect()
}

/// The jet at `f(x)` of the SDE transformed by `f`, given `x` in the original
/// coordinates.
pub fn pushforward_at(
    field: &dyn JetField,
    map: &[Expr],
    symbols: &SymbolTable,
    x: &[f64],
    t: f64,
) -> Result<JetPoint, ModelError> {
    let jet = field.jet(x, t)?;
    let map = map_jets(map, symbols, x, t)?;
    Ok(jet::pushforward(&jet, &map)?)
}

/// The generator `L f = ½ Δ_E (f ∘ γ_x)|₀` at `(x, t)`.
pub fn backward_operator(
    field: &dyn JetField,
    f: &Expr,
    symbols: &SymbolTable,
    x: &[f64],
    t: f64,
) -> Result<f64, ModelError> {
    let composed = pushforward_at(field, std::slice::from_ref(f), symbols, x, t)?;
    Ok(0.5 * composed.coords()[0].laplacian())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equivalence {
    Strong,
    Weak,
    None,
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Classifies two fields by comparing drifts, `b bᵀ` and `b` at each probe.
pub fn equivalence(
    first: &dyn JetField,
    second: &dyn JetField,
    probes: &[(Vec<f64>, f64)],
    tol: f64,
) -> Result<Equivalence, ModelError> {
    if first.n() != second.n() || first.d() != second.d() {
        return Err(ModelError::Invalid("fields differ in n or d".into()));
    }
    let mut strong = true;
    for (x, t) in probes {
        let (a1, b1) = first.coefficients(x, *t)?;
        let (a2, b2) = second.coefficients(x, *t)?;
        if a1.iter().zip(&a2).any(|(p, q)| !close(*p, *q, tol)) {
            return Ok(Equivalence::None);
        }
        let (c1, c2) = (&b1 * b1.transpose(), &b2 * b2.transpose());
        if c1.iter().zip(c2.iter()).any(|(p, q)| !close(*p, *q, tol)) {
            return Ok(Equivalence::None);
        }
        if b1.iter().zip(b2.iter()).any(|(p, q)| !close(*p, *q, tol)) {
            strong = false;
        }
    }
    Ok(if strong { Equivalence::Strong } else { Equivalence::Weak })
}

/// Default probe set: `x0` plus a Latin hypercube in the unit box around it.
pub fn default_probes(x0: &[f64], count: usize, seed: u64) -> Vec<(Vec<f64>, f64)> {
    let mut probes = vec![(x0.to_vec(), 0.0)];
    probes.extend(
        latin_hypercube(x0, count.saturating_sub(1), 1.0, seed)
            .into_iter()
            .map(|x| (x, 0.0)),
    );
    probes
}

/// `count` points in `center ± half_width`, one per stratum in every coordinate.
pub fn latin_hypercube(center: &[f64], count: usize, half_width: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; center.len()]; count];
    for (k, &c) in center.iter().enumerate() {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(&mut rng);
        for (p, s) in points.iter_mut().zip(strata) {
            let u = (s as f64 + rng.random::<f64>()) / count as f64;
            p[k] = c + half_width * (2.0 * u - 1.0);
        }
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn curve_e() -> SdeModel {
        SdeModel::jet_field(
            "gamma-E",
            SymbolTable::standard(2, 1),
            vec![1.0, 0.0],
            &["x1 - x2*u1 + 3*x1*u1^2", "x2 + x1*u1 + 3*x2*u1^2"],
        )
        .unwrap()
    }

    fn gbm_strat(sigma: f64) -> SdeModel {
        let s = SymbolTable::standard(1, 1)
            .with_constants([("sigma".to_string(), sigma)].into())
            .unwrap();
        SdeModel::stratonovich("gbm", s, vec![1.0], &["0"], &[&["sigma*x1"]]).unwrap()
    }

    fn gbm_ito(sigma: f64) -> SdeModel {
        let s = SymbolTable::standard(1, 1)
            .with_constants([("sigma".to_string(), sigma)].into())
            .unwrap();
        SdeModel::ito("gbm", s, vec![1.0], &["0"], &[&["sigma*x1"]]).unwrap()
    }

    #[test]
    fn standard_brownian_motion_jet() {
        let m = SdeModel::ito("bm", SymbolTable::standard(1, 1), vec![0.0], &["0"], &[&["1"]]).unwrap();
        let jet = m.to_jet_field().unwrap().jet(&[0.4], 0.0).unwrap();
        let c = &jet.coords()[0];
        assert_eq!(c.value(), 0.4);
        assert_eq!(c.grad(), &[1.0]);
        assert_eq!(c.hess(0, 0), 0.0);
    }

    #[test]
    fn quadratic_curve_has_unit_drift() {
        let m = SdeModel::jet_field("alpha2", SymbolTable::standard(1, 1), vec![0.0], &["x1 + u1^2"]).unwrap();
        let (a, b) = m.to_jet_field().unwrap().coefficients(&[0.3], 0.0).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(b[(0, 0)], 0.0);
    }

    #[test]
    fn heston_coefficients() {
        let constants = [("xi", 1.0), ("theta", 0.4), ("kappa", 1.0), ("mu", 0.1), ("rho", 0.5)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let s = SymbolTable::new(vec!["S".into(), "v".into()], vec!["u1".into(), "u2".into()], constants).unwrap();
        let m = SdeModel::ito(
            "heston",
            s,
            vec![1.0, 0.4],
            &["mu*S", "kappa*(theta - v)"],
            &[&["sqrt(v)*S", "0"], &["xi*rho*sqrt(v)", "xi*sqrt(1 - rho^2)*sqrt(v)"]],
        )
        .unwrap();
        let (a, b) = m.to_jet_field().unwrap().coefficients(&[1.0, 0.4], 0.0).unwrap();
        assert_relative_eq!(a[0], 0.1, epsilon = 1e-15);
        assert_relative_eq!(a[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(b[(1, 0)], 0.5 * 0.4_f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(b[(1, 1)], 0.75_f64.sqrt() * 0.4_f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn jet_field_must_pass_through_base_point() {
        let err = SdeModel::jet_field("bad", SymbolTable::standard(1, 1), vec![0.0], &["x1 + 1 + u1"]).unwrap_err();
        assert!(matches!(err, ModelError::Invalid(_)));
    }

    #[test]
    fn vector_pair_needs_one_driver() {
        let err = SdeModel::vector_pair("bad", SymbolTable::standard(1, 2), vec![0.0], &["0"], &["1"]).unwrap_err();
        assert!(matches!(err, ModelError::Invalid(_)));
    }

    #[test]
    fn coefficients_may_not_read_drivers() {
        let err = SdeModel::ito("bad", SymbolTable::standard(1, 1), vec![0.0], &["u1"], &[&["1"]]).unwrap_err();
        assert!(matches!(err, ModelError::Invalid(_)));
    }

    #[test]
    fn constant_diffusion_needs_no_correction() {
        let m = SdeModel::stratonovich("add", SymbolTable::standard(1, 1), vec![0.0], &["-x1"], &[&["2"]]).unwrap();
        let ito = strat_to_ito(&m).unwrap().to_jet_field().unwrap();
        let (a, _) = ito.coefficients(&[0.7], 0.0).unwrap();
        assert_eq!(a, vec![-0.7]);
        let back = ito_to_strat(&strat_to_ito(&m).unwrap()).unwrap();
        let Form::Stratonovich { drift, .. } = &back.form else { panic!() };
        assert_eq!(drift[0].eval_slots(&[0.7, 0.0, 0.0], 1).unwrap(), -0.7);
    }

    #[test]
    fn gbm_stratonovich_to_ito() {
        let ito = strat_to_ito(&gbm_strat(0.2)).unwrap().to_jet_field().unwrap();
        for s in [0.5, 1.0, 3.0] {
            let (a, _) = ito.coefficients(&[s], 0.0).unwrap();
            assert_relative_eq!(a[0], 0.02 * s, epsilon = 1e-15);
        }
    }

    #[test]
    fn gbm_ito_to_stratonovich() {
        let strat = ito_to_strat(&gbm_ito(0.2)).unwrap();
        let Form::Stratonovich { drift, .. } = &strat.form else { panic!() };
        for s in [0.5, 1.0, 3.0] {
            assert_relative_eq!(drift[0].eval_slots(&[s, 0.0, 0.0], 1).unwrap(), -0.02 * s, epsilon = 1e-15);
        }
    }

    #[test]
    fn conversions_are_mutual_inverses_on_probes() {
        let s = SymbolTable::standard(2, 2);
        let m = SdeModel::stratonovich(
            "mixed",
            s,
            vec![0.3, -0.2],
            &["sin(x1)*x2", "x1 - x2^3"],
            &[&["1 + x1^2", "x2*x1"], &["cos(x2)", "exp(0.3*x1)"]],
        )
        .unwrap();
        let back = ito_to_strat(&strat_to_ito(&m).unwrap()).unwrap();
        let (Form::Stratonovich { drift: d0, .. }, Form::Stratonovich { drift: d1, .. }) = (&m.form, &back.form) else {
            panic!()
        };
        for (x, t) in default_probes(&m.x0, 20, 7) {
            let slots = m.symbols.bind(&x, t, &[0.0, 0.0]);
            for i in 0..2 {
                let (p, q) = (d0[i].eval_slots(&slots, 2).unwrap(), d1[i].eval_slots(&slots, 2).unwrap());
                assert!((p - q).abs() <= 1e-10, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn vector_pair_examples() {
        let m = SdeModel::vector_pair("vp", SymbolTable::standard(1, 1), vec![1.0], &["0"], &["x1"]).unwrap();
        let (a, b) = vector_to_standard(&m).unwrap().to_jet_field().unwrap().coefficients(&[2.0], 0.0).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(b[(0, 0)], 2.0);

        let m = SdeModel::vector_pair("vp", SymbolTable::standard(2, 1), vec![1.0, 0.0], &["0", "0"], &["3", "-1"]).unwrap();
        let (a, b) = m.to_jet_field().unwrap().coefficients(&[5.0, 4.0], 0.0).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
        assert_eq!(b.as_slice(), &[3.0, -1.0]);
    }

    #[test]
    fn vector_pair_stratonovich_drift_is_a() {
        let m = SdeModel::vector_pair("vp", SymbolTable::standard(1, 1), vec![1.0], &["x1^2"], &["sin(x1)"]).unwrap();
        let strat = to_stratonovich(&m).unwrap();
        let ito_direct = vector_to_standard(&m).unwrap().to_jet_field().unwrap();
        let ito_via_strat = strat_to_ito(&strat).unwrap().to_jet_field().unwrap();
        for x in [-1.0, 0.2, 0.9] {
            let (a1, _) = ito_direct.coefficients(&[x], 0.0).unwrap();
            let (a2, _) = ito_via_strat.coefficients(&[x], 0.0).unwrap();
            assert_relative_eq!(a1[0], a2[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn jet_field_models_convert_through_joint_jets() {
        // γ^E: b = (-x2, x1), ∂b·b = (-x1, -x2), so the Stratonovich drift is 3x + x/2
        let strat = ito_to_strat(&curve_e()).unwrap();
        let Form::Stratonovich { drift, .. } = &strat.form else { panic!() };
        let slots = [0.4, -1.1, 0.0, 0.0];
        assert_relative_eq!(drift[0].eval_slots(&slots, 2).unwrap(), 3.5 * 0.4, epsilon = 1e-14);
        assert_relative_eq!(drift[1].eval_slots(&slots, 2).unwrap(), -3.5 * 1.1, epsilon = 1e-14);
    }

    #[test]
    fn generator_of_curve_e() {
        let field = curve_e().to_jet_field().unwrap();
        let s = SymbolTable::standard(2, 1);
        let f = Expr::parse("x1^2 + x2^2", &s).unwrap();
        assert_relative_eq!(backward_operator(&field, &f, &s, &[1.0, 0.0], 0.0).unwrap(), 7.0, epsilon = 1e-14);

        let bm = SdeModel::ito("bm", SymbolTable::standard(2, 2), vec![0.0, 0.0], &["0", "0"], &[&["1", "0"], &["0", "1"]])
            .unwrap()
            .to_jet_field()
            .unwrap();
        let linear = Expr::parse("2*x1 - 5*x2 + 1", &SymbolTable::standard(2, 2)).unwrap();
        assert_eq!(backward_operator(&bm, &linear, &SymbolTable::standard(2, 2), &[0.3, 0.1], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn generator_matches_coefficient_formula() {
        let m = SdeModel::ito(
            "m",
            SymbolTable::standard(2, 2),
            vec![0.0, 0.0],
            &["x2", "-sin(x1)"],
            &[&["1 + 0.1*x2^2", "0.3"], &["x1", "cos(x2)"]],
        )
        .unwrap();
        let field = m.to_jet_field().unwrap();
        let s = &m.symbols;
        let f = Expr::parse("exp(x1)*x2 + x2^3", s).unwrap();
        for (x, t) in default_probes(&[0.0, 0.0], 10, 3) {
            let (a, b) = field.coefficients(&x, t).unwrap();
            let fj = f.eval_jet(&state_jets(s, &x, t)).unwrap();
            let hb = fj.hessian() * &b;
            let expected = a[0] * fj.grad()[0] + a[1] * fj.grad()[1] + 0.5 * (b.transpose() * hb).trace();
            let got = backward_operator(&field, &f, s, &x, t).unwrap();
            assert_relative_eq!(got, expected, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn equivalent_jets_are_strongly_equivalent() {
        let s = SymbolTable::standard(2, 2);
        let make = |first: &str| {
            SdeModel::jet_field("eq", s.clone(), vec![0.0, 0.0], &[first, "x2 + 2*u2"])
                .unwrap()
                .to_jet_field()
                .unwrap()
        };
        let fields = [
            make("x1 + u1 + 2*u1^2"),
            make("x1 + u1 + 2*u2^2"),
            make("x1 + u1 + (u1^2 + u2^2)"),
        ];
        let probes = default_probes(&[0.0, 0.0], 20, 1);
        for f in &fields {
            for g in &fields {
                assert_eq!(equivalence(f, g, &probes, 1e-9).unwrap(), Equivalence::Strong);
            }
        }
    }

    #[test]
    fn sign_flip_is_weak_only() {
        let s = SymbolTable::standard(1, 1);
        let plus = SdeModel::ito("p", s.clone(), vec![0.0], &["x1"], &[&["1 + x1^2"]]).unwrap().to_jet_field().unwrap();
        let minus = SdeModel::ito("m", s.clone(), vec![0.0], &["x1"], &[&["-(1 + x1^2)"]]).unwrap().to_jet_field().unwrap();
        let other = SdeModel::ito("o", s, vec![0.0], &["2*x1"], &[&["1 + x1^2"]]).unwrap().to_jet_field().unwrap();
        let probes = default_probes(&[0.0], 20, 1);
        assert_eq!(equivalence(&plus, &minus, &probes, 1e-9).unwrap(), Equivalence::Weak);
        assert_eq!(equivalence(&plus, &other, &probes, 1e-9).unwrap(), Equivalence::None);
    }

    #[test]
    fn canonicalization_preserves_the_sde() {
        let field = curve_e().to_jet_field().unwrap();
        let canon = Canonicalized(field.clone());
        let probes = default_probes(&[1.0, 0.0], 20, 11);
        assert_eq!(equivalence(&field, &canon, &probes, 1e-9).unwrap(), Equivalence::Strong);
    }

    #[test]
    fn latin_hypercube_covers_each_stratum_once() {
        let pts = latin_hypercube(&[0.0, 10.0], 8, 1.0, 5);
        for k in 0..2 {
            let c = [0.0, 10.0][k];
            let mut strata: Vec<usize> = pts.iter().map(|p| (((p[k] - c + 1.0) / 2.0) * 8.0) as usize).collect();
            strata.sort();
            assert_eq!(strata, (0..8).collect::<Vec<_>>());
        }
    }
}
