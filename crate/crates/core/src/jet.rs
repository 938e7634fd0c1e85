//! Second-order jets (truncated Taylor expansions) in `d` variables.
//!
//! A [`Jet2`] carries the value, gradient and Hessian of a scalar function at
//! a point. Arithmetic on jets propagates derivatives exactly to second order,
//! so composing jets is the chain rule, and composing the jet of a curve field
//! with the jet of a map is Itô's lemma.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JetError {
    #[error("{func} is undefined at {value}")]
    Domain { func: &'static str, value: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Index of `(i, j)`, `i <= j`, in a packed upper triangle of a `d x d` matrix.
#[inline]
fn packed_index(d: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * (2 * d - i + 1) / 2 + (j - i)
}

#[inline]
fn packed_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Value, gradient and symmetric Hessian of a scalar function of `d` variables.
///
/// The Hessian is stored once per unordered pair, so symmetry holds by
/// construction.
#[derive(Clone, PartialEq)]
pub struct Jet2 {
    value: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

impl fmt::Debug for Jet2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.dim();
        let rows: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| self.hess(i, j)).collect())
            .collect();
        f.debug_struct("Jet2")
            .field("value", &self.value)
            .field("grad", &self.grad)
            .field("hess", &rows)
            .finish()
    }
}

impl Jet2 {
    pub fn constant(value: f64, d: usize) -> Self {
        assert!(d >= 1, "jets need at least one variable");
        Self {
            value,
            grad: vec![0.0; d],
            hess: vec![0.0; packed_len(d)],
        }
    }

    /// The coordinate function `u_k` shifted to take `value` at the origin.
    pub fn variable(value: f64, k: usize, d: usize) -> Self {
        assert!(k < d, "variable index {k} out of range for d = {d}");
        let mut jet = Self::constant(value, d);
        jet.grad[k] = 1.0;
        jet
    }

    /// Builds a jet from a value, a gradient and a full Hessian. Only the upper
    /// triangle of `hess` is read.
    pub fn from_parts(value: f64, grad: Vec<f64>, hess: &DMatrix<f64>) -> Self {
        let d = grad.len();
        assert!(d >= 1, "jets need at least one variable");
        assert_eq!(hess.shape(), (d, d), "Hessian must be d x d");
        let mut packed = Vec::with_capacity(packed_len(d));
        for i in 0..d {
            for j in i..d {
                packed.push(hess[(i, j)]);
            }
        }
        Self {
            value,
            grad,
            hess: packed,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.value
    }

    #[inline]
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    #[inline]
    pub fn hess(&self, i: usize, j: usize) -> f64 {
        self.hess[packed_index(self.dim(), i, j)]
    }

    pub fn hessian(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.hess(i, j))
    }

    /// Sum of the Hessian diagonal.
    pub fn laplacian(&self) -> f64 {
        (0..self.dim()).map(|i| self.hess(i, i)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad.iter().all(|g| g.is_finite())
            && self.hess.iter().all(|h| h.is_finite())
    }

    fn check_dim(&self, other: &Jet2) -> Result<(), JetError> {
        if self.dim() == other.dim() {
            Ok(())
        } else {
            Err(JetError::Shape(format!(
                "jets in {} and {} variables",
                self.dim(),
                other.dim()
            )))
        }
    }

    /// Applies a scalar function given its value and first two derivatives at
    /// `self.value()`.
    pub fn chain(&self, f0: f64, f1: f64, f2: f64) -> Jet2 {
        let d = self.dim();
        let grad = self.grad.iter().map(|g| f1 * g).collect();
        let mut hess = Vec::with_capacity(self.hess.len());
        for i in 0..d {
            for j in i..d {
                let k = hess.len();
                hess.push(f1 * self.hess[k] + f2 * self.grad[i] * self.grad[j]);
            }
        }
        Jet2 {
            value: f0,
            grad,
            hess,
        }
    }

    pub fn checked_add(&self, other: &Jet2) -> Result<Jet2, JetError> {
        self.check_dim(other)?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn checked_sub(&self, other: &Jet2) -> Result<Jet2, JetError> {
        self.check_dim(other)?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn checked_mul(&self, other: &Jet2) -> Result<Jet2, JetError> {
        self.check_dim(other)?;
        let d = self.dim();
        let (a, b) = (self, other);
        let grad = (0..d)
            .map(|i| a.value * b.grad[i] + b.value * a.grad[i])
            .collect();
        let mut hess = Vec::with_capacity(a.hess.len());
        for i in 0..d {
            for j in i..d {
                let k = hess.len();
                hess.push(
                    a.value * b.hess[k]
                        + b.value * a.hess[k]
                        + a.grad[i] * b.grad[j]
                        + b.grad[i] * a.grad[j],
                );
            }
        }
        Ok(Jet2 {
            value: a.value * b.value,
            grad,
            hess,
        })
    }

    pub fn checked_div(&self, other: &Jet2) -> Result<Jet2, JetError> {
        self.check_dim(other)?;
        let recip = other.recip()?;
        self.checked_mul(&recip)
    }

    pub fn recip(&self) -> Result<Jet2, JetError> {
        let v = self.value;
        if v == 0.0 {
            return Err(JetError::Domain {
                func: "division",
                value: v,
            });
        }
        Ok(self.chain(1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v)))
    }

    pub fn scale(&self, c: f64) -> Jet2 {
        self.map(|x| c * x)
    }

    /// `self^p` for a constant exponent.
    pub fn powf(&self, p: f64) -> Result<Jet2, JetError> {
        let v = self.value;
        if p == 0.0 {
            return Ok(Jet2::constant(1.0, self.dim()));
        }
        if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
            let n = p as i32;
            if v == 0.0 && n < 0 {
                return Err(JetError::Domain { func: "pow", value: v });
            }
            let f0 = v.powi(n);
            let f1 = if n == 1 { 1.0 } else { p * v.powi(n - 1) };
            let f2 = match n {
                1 => 0.0,
                2 => 2.0,
                _ => p * (p - 1.0) * v.powi(n - 2),
            };
            return Ok(self.chain(f0, f1, f2));
        }
        if v <= 0.0 {
            return Err(JetError::Domain { func: "pow", value: v });
        }
        let f0 = v.powf(p);
        Ok(self.chain(f0, p * f0 / v, p * (p - 1.0) * f0 / (v * v)))
    }

    pub fn apply(&self, func: Elementary) -> Result<Jet2, JetError> {
        let v = self.value;
        let (f0, f1, f2) = func.derivatives(v)?;
        Ok(self.chain(f0, f1, f2))
    }

    fn zip(&self, other: &Jet2, f: impl Fn(f64, f64) -> f64) -> Jet2 {
        Jet2 {
            value: f(self.value, other.value),
            grad: self
                .grad
                .iter()
                .zip(&other.grad)
                .map(|(a, b)| f(*a, *b))
                .collect(),
            hess: self
                .hess
                .iter()
                .zip(&other.hess)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Jet2 {
        Jet2 {
            value: f(self.value),
            grad: self.grad.iter().map(|g| f(*g)).collect(),
            hess: self.hess.iter().map(|h| f(*h)).collect(),
        }
    }
}

/// Twice-differentiable elementary functions understood by jets and the DSL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Elementary {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Atan,
    Tanh,
}

impl Elementary {
    pub const ALL: [Elementary; 8] = [
        Elementary::Sin,
        Elementary::Cos,
        Elementary::Tan,
        Elementary::Exp,
        Elementary::Log,
        Elementary::Sqrt,
        Elementary::Atan,
        Elementary::Tanh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Elementary::Sin => "sin",
            Elementary::Cos => "cos",
            Elementary::Tan => "tan",
            Elementary::Exp => "exp",
            Elementary::Log => "log",
            Elementary::Sqrt => "sqrt",
            Elementary::Atan => "atan",
            Elementary::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Plain evaluation. `sqrt(0)` is allowed here even though its jet is not.
    pub fn eval(self, v: f64) -> Result<f64, JetError> {
        let domain = JetError::Domain {
            func: self.name(),
            value: v,
        };
        match self {
            Elementary::Sin => Ok(v.sin()),
            Elementary::Cos => Ok(v.cos()),
            Elementary::Tan if v.cos() == 0.0 => Err(domain),
            Elementary::Tan => Ok(v.tan()),
            Elementary::Exp => Ok(v.exp()),
            Elementary::Log if v <= 0.0 => Err(domain),
            Elementary::Log => Ok(v.ln()),
            Elementary::Sqrt if v < 0.0 => Err(domain),
            Elementary::Sqrt => Ok(v.sqrt()),
            Elementary::Atan => Ok(v.atan()),
            Elementary::Tanh => Ok(v.tanh()),
        }
    }

    /// `(f(v), f'(v), f''(v))`.
    pub fn derivatives(self, v: f64) -> Result<(f64, f64, f64), JetError> {
        let domain = JetError::Domain {
            func: self.name(),
            value: v,
        };
        Ok(match self {
            Elementary::Sin => {
                let (s, c) = v.sin_cos();
                (s, c, -s)
            }
            Elementary::Cos => {
                let (s, c) = v.sin_cos();
                (c, -s, -c)
            }
            Elementary::Tan => {
                let c = v.cos();
                if c == 0.0 {
                    return Err(domain);
                }
                let t = v.tan();
                let sec2 = 1.0 / (c * c);
                (t, sec2, 2.0 * t * sec2)
            }
            Elementary::Exp => {
                let e = v.exp();
                (e, e, e)
            }
            Elementary::Log => {
                if v <= 0.0 {
                    return Err(domain);
                }
                (v.ln(), 1.0 / v, -1.0 / (v * v))
            }
            Elementary::Sqrt => {
                if v <= 0.0 {
                    return Err(domain);
                }
                let s = v.sqrt();
                (s, 0.5 / s, -0.25 / (s * v))
            }
            Elementary::Atan => {
                let q = 1.0 + v * v;
                (v.atan(), 1.0 / q, -2.0 * v / (q * q))
            }
            Elementary::Tanh => {
                let t = v.tanh();
                let s = 1.0 - t * t;
                (t, s, -2.0 * t * s)
            }
        })
    }
}

impl Add for &Jet2 {
    type Output = Jet2;
    fn add(self, rhs: &Jet2) -> Jet2 {
        self.checked_add(rhs).expect("jet dimension mismatch")
    }
}

impl Sub for &Jet2 {
    type Output = Jet2;
    fn sub(self, rhs: &Jet2) -> Jet2 {
        self.checked_sub(rhs).expect("jet dimension mismatch")
    }
}

impl Mul for &Jet2 {
    type Output = Jet2;
    fn mul(self, rhs: &Jet2) -> Jet2 {
        self.checked_mul(rhs).expect("jet dimension mismatch")
    }
}

impl Neg for &Jet2 {
    type Output = Jet2;
    fn neg(self) -> Jet2 {
        self.map(|x| -x)
    }
}

impl Add<f64> for &Jet2 {
    type Output = Jet2;
    fn add(self, rhs: f64) -> Jet2 {
        let mut out = self.clone();
        out.value += rhs;
        out
    }
}

impl Mul<f64> for &Jet2 {
    type Output = Jet2;
    fn mul(self, rhs: f64) -> Jet2 {
        self.scale(rhs)
    }
}

/// The 2-jet at `u = 0` of a map `R^d -> R^n`, one [`Jet2`] per output.
#[derive(Debug, Clone, PartialEq)]
pub struct JetPoint {
    coords: Vec<Jet2>,
}

impl JetPoint {
    pub fn new(coords: Vec<Jet2>) -> Result<Self, JetError> {
        let Some(first) = coords.first() else {
            return Err(JetError::Shape("a jet point needs at least one coordinate".into()));
        };
        let d = first.dim();
        if coords.iter().any(|c| c.dim() != d) {
            return Err(JetError::Shape("coordinate jets disagree on d".into()));
        }
        Ok(Self { coords })
    }

    /// The identity map of `R^n` at `x`, as a jet in `n` variables.
    pub fn identity(x: &[f64]) -> Self {
        let n = x.len();
        Self {
            coords: x
                .iter()
                .enumerate()
                .map(|(k, &v)| Jet2::variable(v, k, n))
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn d(&self) -> usize {
        self.coords[0].dim()
    }

    pub fn coords(&self) -> &[Jet2] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<Jet2> {
        self.coords
    }

    pub fn value(&self) -> Vec<f64> {
        self.coords.iter().map(Jet2::value).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(Jet2::is_finite)
    }
}

/// Composes the jet of a curve field at `x` with the jet of a map `f` at `x`.
///
/// `map` holds one jet per output of `f`, each in `jet.n()` variables. The
/// result is the jet of `f ∘ γ_x`: the gradient picks up `J_f · ∇γ` and each
/// Hessian picks up both `∇γᵀ H_f ∇γ` and `J_f · H_γ`, which is Itô's lemma
/// once the drift and diffusion are read off.
pub fn pushforward(jet: &JetPoint, map: &[Jet2]) -> Result<JetPoint, JetError> {
    let n = jet.n();
    let d = jet.d();
    if map.is_empty() {
        return Err(JetError::Shape("map has no outputs".into()));
    }
    if let Some(bad) = map.iter().find(|m| m.dim() != n) {
        return Err(JetError::Shape(format!(
            "map jet in {} variables composed with a jet in R^{n}",
            bad.dim()
        )));
    }
    let g = &jet.coords;
    let coords = map
        .iter()
        .map(|f| {
            let grad: Vec<f64> = (0..d)
                .map(|a| (0..n).map(|k| f.grad[k] * g[k].grad[a]).sum())
                .collect();
            let mut hess = Vec::with_capacity(packed_len(d));
            for a in 0..d {
                for b in a..d {
                    let idx = hess.len();
                    let mut h = 0.0;
                    for k in 0..n {
                        h += f.grad[k] * g[k].hess[idx];
                        for l in 0..n {
                            h += f.hess(k, l) * g[k].grad[a] * g[l].grad[b];
                        }
                    }
                    hess.push(h);
                }
            }
            Jet2 {
                value: f.value,
                grad,
                hess,
            }
        })
        .collect();
    Ok(JetPoint { coords })
}

/// Reads off the Itô drift (half the Laplacian of each coordinate) and the
/// diffusion matrix (`n x d` gradient matrix) of a jet.
pub fn extract_ab(jet: &JetPoint) -> (Vec<f64>, DMatrix<f64>) {
    let a = jet.coords.iter().map(|c| 0.5 * c.laplacian()).collect();
    let b = DMatrix::from_fn(jet.n(), jet.d(), |i, alpha| jet.coords[i].grad[alpha]);
    (a, b)
}

/// The quadratic representative `x + (1/d) a |s|² + b s` of the SDE `(a, b)`.
pub fn canonical_jet(x: &[f64], a: &[f64], b: &DMatrix<f64>) -> Result<JetPoint, JetError> {
    let n = x.len();
    let d = b.ncols();
    if a.len() != n || b.nrows() != n {
        return Err(JetError::Shape(format!(
            "canonical jet: x in R^{n}, a in R^{}, b is {}x{}",
            a.len(),
            b.nrows(),
            d
        )));
    }
    if d == 0 {
        return Err(JetError::Shape("canonical jet needs d >= 1".into()));
    }
    let coords = (0..n)
        .map(|i| {
            let mut jet = Jet2::constant(x[i], d);
            for alpha in 0..d {
                jet.grad[alpha] = b[(i, alpha)];
                jet.hess[packed_index(d, alpha, alpha)] = 2.0 * a[i] / d as f64;
            }
            jet
        })
        .collect();
    Ok(JetPoint { coords })
}

/// Evaluates the canonical quadratic curve at a real argument `u`.
pub fn canonical_step(x: &[f64], a: &[f64], b: &DMatrix<f64>, u: &[f64], out: &mut [f64]) {
    let d = b.ncols();
    let r2: f64 = u.iter().map(|v| v * v).sum();
    for i in 0..x.len() {
        let mut v = x[i] + a[i] * r2 / d as f64;
        for alpha in 0..d {
            v += b[(i, alpha)] * u[alpha];
        }
        out[i] = v;
    }
}
