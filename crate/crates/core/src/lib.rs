//! Stochastic differential equations as fields of 2-jets.
//!
//! An SDE is described by a curve `γ_x(u)` at every state `x`. Only the
//! second-order jet of each curve at `u = 0` matters: its gradient is the
//! diffusion matrix and half the trace of its Hessian is the Itô drift.
//! Stepping along the curves by Brownian increments simulates the SDE, and
//! composing jets with a map performs Itô's lemma.

// positivity checks are written `!(x > 0.0)` so that NaN fails them
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod brownian;
pub mod dsl;
pub mod io;
pub mod jet;
pub mod manifold;
pub mod model;
pub mod plot;
pub mod quantile;
pub mod scheme;

pub use dsl::{EvalError, Expr, ParseError, SymbolTable};
pub use jet::{canonical_jet, extract_ab, pushforward, Elementary, Jet2, JetError, JetPoint};
pub use model::{Equivalence, JetField, ModelError, ModelField, SdeModel};
pub use brownian::{BrownianGrid, GridError, GridSpec};
pub use scheme::{ConvergenceReport, ConvergenceStudy, Reference, Scheme, SchemeError, SimConfig, TrajectorySet};
