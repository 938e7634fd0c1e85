//! Expression language for coefficients, curves, maps and metrics.
//!
//! Expressions are parsed against a [`SymbolTable`] that fixes the slot of
//! every variable, and are evaluated over any [`Scalar`]: plain `f64` or
//! [`Jet2`]. Derivatives always come from jet evaluation.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::jet::{Elementary, Jet2, JetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unknown symbol `{name}` at {line}:{col}")]
    UnknownSymbol { name: String, line: usize, col: usize },
    #[error("`{func}` takes {expected} argument(s), got {got}")]
    Arity {
        func: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid symbol table: {0}")]
    Symbols(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{func} is undefined at {value}")]
    Domain { func: &'static str, value: f64 },
    #[error("jet shape mismatch: {0}")]
    Shape(String),
    #[error("expected {expected} bindings, got {got}")]
    Bindings { expected: usize, got: usize },
}

impl From<JetError> for EvalError {
    fn from(e: JetError) -> Self {
        match e {
            JetError::Domain { func, value } => EvalError::Domain { func, value },
            JetError::Shape(s) => EvalError::Shape(s),
        }
    }
}

/// Names visible to expressions of one model.
///
/// Variables occupy slots `[states..., time, drivers...]`; named constants are
/// substituted at parse time.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolTable {
    states: Vec<String>,
    drivers: Vec<String>,
    time: String,
    constants: BTreeMap<String, f64>,
}

impl SymbolTable {
    pub fn new(
        states: Vec<String>,
        drivers: Vec<String>,
        constants: BTreeMap<String, f64>,
    ) -> Result<Self, ParseError> {
        let table = Self {
            states,
            drivers,
            time: "t".to_string(),
            constants,
        };
        table.validate()?;
        Ok(table)
    }

    /// States `x1..xn` and drivers `u1..ud`.
    pub fn standard(n: usize, d: usize) -> Self {
        Self::new(
            (1..=n).map(|i| format!("x{i}")).collect(),
            (1..=d).map(|i| format!("u{i}")).collect(),
            BTreeMap::new(),
        )
        .expect("standard names are valid")
    }

    pub fn with_constants(mut self, constants: BTreeMap<String, f64>) -> Result<Self, ParseError> {
        self.constants = constants;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), ParseError> {
        if self.states.is_empty() {
            return Err(ParseError::Symbols("need at least one state".into()));
        }
        if self.drivers.is_empty() {
            return Err(ParseError::Symbols("need at least one driver".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let names = self
            .states
            .iter()
            .chain(&self.drivers)
            .chain(std::iter::once(&self.time))
            .chain(self.constants.keys());
        for name in names {
            if !is_identifier(name) {
                return Err(ParseError::Symbols(format!("`{name}` is not an identifier")));
            }
            if Elementary::from_name(name).is_some() || name == "pow" {
                return Err(ParseError::Symbols(format!("`{name}` is a function name")));
            }
            if !seen.insert(name.as_str()) {
                return Err(ParseError::Symbols(format!("`{name}` declared twice")));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.states.len()
    }

    pub fn d(&self) -> usize {
        self.drivers.len()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn drivers(&self) -> &[String] {
        &self.drivers
    }

    pub fn constants(&self) -> &BTreeMap<String, f64> {
        &self.constants
    }

    /// Number of variable slots an evaluation needs.
    pub fn slots(&self) -> usize {
        self.n() + 1 + self.d()
    }

    pub fn time_slot(&self) -> usize {
        self.n()
    }

    pub fn driver_slot(&self, alpha: usize) -> usize {
        self.n() + 1 + alpha
    }

    fn lookup(&self, name: &str) -> Option<Lookup> {
        if let Some(i) = self.states.iter().position(|s| s == name) {
            return Some(Lookup::Slot(i));
        }
        if name == self.time {
            return Some(Lookup::Slot(self.time_slot()));
        }
        if let Some(a) = self.drivers.iter().position(|s| s == name) {
            return Some(Lookup::Slot(self.driver_slot(a)));
        }
        self.constants.get(name).map(|v| Lookup::Constant(*v))
    }

    /// Packs `(x, t, u)` into the slot layout.
    pub fn bind(&self, x: &[f64], t: f64, u: &[f64]) -> Vec<f64> {
        let mut slots = Vec::with_capacity(self.slots());
        slots.extend_from_slice(x);
        slots.push(t);
        slots.extend_from_slice(u);
        slots
    }

    /// Binds variables by name; unnamed slots are zero.
    pub fn bind_named(&self, values: &[(&str, f64)]) -> Result<Vec<f64>, ParseError> {
        let mut slots = vec![0.0; self.slots()];
        for (name, v) in values {
            match self.lookup(name) {
                Some(Lookup::Slot(i)) => slots[i] = *v,
                _ => {
                    return Err(ParseError::UnknownSymbol {
                        name: name.to_string(),
                        line: 0,
                        col: 0,
                    })
                }
            }
        }
        Ok(slots)
    }
}

enum Lookup {
    Slot(usize),
    Constant(f64),
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

/// Parsed expression tree. Variables are resolved to slots.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Number(f64),
    Variable { slot: usize, name: String },
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Elementary, Box<Expr>),
}

impl Expr {
    pub fn parse(source: &str, symbols: &SymbolTable) -> Result<Expr, ParseError> {
        let tokens = lex(source)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            symbols,
        };
        let expr = parser.expr()?;
        let tok = parser.peek();
        if tok.kind != Tok::End {
            return Err(syntax(tok, format!("unexpected {}", tok.kind)));
        }
        Ok(expr)
    }

    /// The value of a variable-free subtree.
    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Expr::Number(v) => Some(*v),
            Expr::Variable { .. } => None,
            Expr::Neg(e) => e.as_constant().map(|v| -v),
            Expr::Binary(op, l, r) => {
                let (l, r) = (l.as_constant()?, r.as_constant()?);
                eval_binary(*op, &l, &r, Some(r)).ok()
            }
            Expr::Call(f, e) => f.eval(e.as_constant()?).ok(),
        }
    }

    /// Whether the expression reads slot `slot`.
    pub fn uses_slot(&self, slot: usize) -> bool {
        match self {
            Expr::Number(_) => false,
            Expr::Variable { slot: s, .. } => *s == slot,
            Expr::Neg(e) | Expr::Call(_, e) => e.uses_slot(slot),
            Expr::Binary(_, l, r) => l.uses_slot(slot) || r.uses_slot(slot),
        }
    }

    pub fn eval_real(&self, slots: &[f64]) -> Result<f64, EvalError> {
        self.eval(slots)
    }

    pub fn eval_jet(&self, slots: &[Jet2]) -> Result<Jet2, EvalError> {
        let Some(first) = slots.first() else {
            return Err(EvalError::Bindings { expected: 1, got: 0 });
        };
        if slots.iter().any(|j| j.dim() != first.dim()) {
            return Err(EvalError::Shape("bindings disagree on d".into()));
        }
        self.eval(slots)
    }

    /// Tree walk shared by every scalar type.
    pub fn eval<S: Scalar>(&self, slots: &[S]) -> Result<S, EvalError> {
        if slots.is_empty() {
            return Err(EvalError::Bindings { expected: 1, got: 0 });
        }
        self.walk(slots)
    }

    fn walk<S: Scalar>(&self, slots: &[S]) -> Result<S, EvalError> {
        match self {
            Expr::Number(v) => Ok(S::lift(&slots[0], *v)),
            Expr::Variable { slot, .. } => slots.get(*slot).cloned().ok_or(EvalError::Bindings {
                expected: slot + 1,
                got: slots.len(),
            }),
            Expr::Neg(e) => Ok(e.walk(slots)?.negate()),
            Expr::Binary(op, l, r) => {
                let lv = l.walk(slots)?;
                let constant_exp = if *op == BinOp::Pow { r.as_constant() } else { None };
                let rv = match constant_exp {
                    Some(c) => S::lift(&lv, c),
                    None => r.walk(slots)?,
                };
                eval_binary(*op, &lv, &rv, constant_exp)
            }
            Expr::Call(f, e) => e.walk(slots)?.elementary(*f),
        }
    }
}

fn eval_binary<S: Scalar>(op: BinOp, l: &S, r: &S, constant_exp: Option<f64>) -> Result<S, EvalError> {
    match op {
        BinOp::Add => Ok(l.plus(r)),
        BinOp::Sub => Ok(l.minus(r)),
        BinOp::Mul => Ok(l.times(r)),
        BinOp::Div => l.over(r),
        BinOp::Pow => match constant_exp {
            Some(p) => l.powc(p),
            // general power through exp(e log b), which needs b > 0
            None => l.elementary(Elementary::Log)?.times(r).elementary(Elementary::Exp),
        },
    }
}

/// Number type an expression can be evaluated over.
pub trait Scalar: Clone {
    /// A constant shaped like `like`.
    fn lift(like: &Self, c: f64) -> Self;
    fn plus(&self, o: &Self) -> Self;
    fn minus(&self, o: &Self) -> Self;
    fn times(&self, o: &Self) -> Self;
    fn over(&self, o: &Self) -> Result<Self, EvalError>;
    fn negate(&self) -> Self;
    fn powc(&self, p: f64) -> Result<Self, EvalError>;
    fn elementary(&self, f: Elementary) -> Result<Self, EvalError>;
}

impl Scalar for f64 {
    fn lift(_: &Self, c: f64) -> Self {
        c
    }
    fn plus(&self, o: &Self) -> Self {
        self + o
    }
    fn minus(&self, o: &Self) -> Self {
        self - o
    }
    fn times(&self, o: &Self) -> Self {
        self * o
    }
    fn over(&self, o: &Self) -> Result<Self, EvalError> {
        if *o == 0.0 {
            return Err(EvalError::Domain {
                func: "division",
                value: *o,
            });
        }
        Ok(self / o)
    }
    fn negate(&self) -> Self {
        -self
    }
    fn powc(&self, p: f64) -> Result<Self, EvalError> {
        let v = *self;
        if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
            if v == 0.0 && p < 0.0 {
                return Err(EvalError::Domain { func: "pow", value: v });
            }
            return Ok(v.powi(p as i32));
        }
        if v < 0.0 {
            return Err(EvalError::Domain { func: "pow", value: v });
        }
        Ok(v.powf(p))
    }
    fn elementary(&self, f: Elementary) -> Result<Self, EvalError> {
        Ok(f.eval(*self)?)
    }
}

impl Scalar for Jet2 {
    fn lift(like: &Self, c: f64) -> Self {
        Jet2::constant(c, like.dim())
    }
    fn plus(&self, o: &Self) -> Self {
        self + o
    }
    fn minus(&self, o: &Self) -> Self {
        self - o
    }
    fn times(&self, o: &Self) -> Self {
        self * o
    }
    fn over(&self, o: &Self) -> Result<Self, EvalError> {
        Ok(self.checked_div(o)?)
    }
    fn negate(&self) -> Self {
        -self
    }
    fn powc(&self, p: f64) -> Result<Self, EvalError> {
        Ok(self.powf(p)?)
    }
    fn elementary(&self, f: Elementary) -> Result<Self, EvalError> {
        Ok(self.apply(f)?)
    }
}

/// Canonical printed form: fully parenthesised binary nodes.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Number(v) if v.is_sign_negative() => write!(f, "(-{:?})", -v),
            Expr::Number(v) => write!(f, "{v:?}"),
            Expr::Variable { name, .. } => f.write_str(name),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
        }
    }
}

// --- lexer ---

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(v) => write!(f, "number {v}"),
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Op(c) => write!(f, "`{c}`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::End => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Tok,
    line: usize,
    col: usize,
}

fn syntax(tok: &Token, msg: String) -> ParseError {
    ParseError::Syntax {
        line: tok.line,
        col: tok.col,
        msg,
    }
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut tokens = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let (start_line, start_col) = (line, col);
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let kind = if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            col += i - start;
            let v = text.parse::<f64>().map_err(|_| ParseError::Syntax {
                line: start_line,
                col: start_col,
                msg: format!("malformed number `{text}`"),
            })?;
            Tok::Num(v)
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            Tok::Ident(chars[start..i].iter().collect())
        } else {
            i += 1;
            col += 1;
            match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                _ => {
                    return Err(ParseError::Syntax {
                        line: start_line,
                        col: start_col,
                        msg: format!("unexpected character `{c}`"),
                    })
                }
            }
        };
        tokens.push(Token {
            kind,
            line: start_line,
            col: start_col,
        });
    }
    tokens.push(Token {
        kind: Tok::End,
        line,
        col,
    });
    Ok(tokens)
}

// --- parser ---

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    symbols: &'a SymbolTable,
}

impl Parser<'_> {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn next(&mut self) -> Token {
        let tok = self.tokens[self.pos].clone();
        if tok.kind != Tok::End {
            self.pos += 1;
        }
        tok
    }

    fn expect(&mut self, kind: Tok) -> Result<(), ParseError> {
        let tok = self.next();
        if tok.kind == kind {
            Ok(())
        } else {
            Err(syntax(&tok, format!("expected {kind}, found {}", tok.kind)))
        }
    }

    // expr := term (('+' | '-') term)*
    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().kind {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.next();
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    // term := unary (('*' | '/') unary)*
    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().kind {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.next();
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    // unary := '-' unary | power
    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek().kind == Tok::Op('-') {
            self.next();
            return Ok(match self.unary()? {
                Expr::Number(v) => Expr::Number(-v),
                e => Expr::Neg(Box::new(e)),
            });
        }
        self.power()
    }

    // power := atom ('^' unary)?
    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek().kind == Tok::Op('^') {
            self.next();
            let exponent = self.unary()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let tok = self.next();
        match tok.kind {
            Tok::Num(v) => Ok(Expr::Number(v)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(ref name) if self.peek().kind == Tok::LParen => self.call(name.clone(), &tok),
            Tok::Ident(name) => match self.symbols.lookup(&name) {
                Some(Lookup::Slot(slot)) => Ok(Expr::Variable { slot, name }),
                Some(Lookup::Constant(v)) => Ok(Expr::Number(v)),
                None => Err(ParseError::UnknownSymbol {
                    name,
                    line: tok.line,
                    col: tok.col,
                }),
            },
            ref other => Err(syntax(&tok, format!("unexpected {other}"))),
        }
    }

    fn call(&mut self, name: String, tok: &Token) -> Result<Expr, ParseError> {
        self.expect(Tok::LParen)?;
        let mut args = Vec::new();
        if self.peek().kind != Tok::RParen {
            loop {
                args.push(self.expr()?);
                if self.peek().kind == Tok::Comma {
                    self.next();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen)?;
        if name == "pow" {
            if args.len() != 2 {
                return Err(ParseError::Arity {
                    func: name,
                    expected: 2,
                    got: args.len(),
                });
            }
            let exponent = args.pop().unwrap();
            let base = args.pop().unwrap();
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        let Some(func) = Elementary::from_name(&name) else {
            return Err(ParseError::UnknownSymbol {
                name,
                line: tok.line,
                col: tok.col,
            });
        };
        if args.len() != 1 {
            return Err(ParseError::Arity {
                func: name,
                expected: 1,
                got: args.len(),
            });
        }
        Ok(Expr::Call(func, Box::new(args.pop().unwrap())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn table() -> SymbolTable {
        SymbolTable::standard(2, 1)
    }

    fn var(name: &str, slot: usize) -> Box<Expr> {
        Box::new(Expr::Variable {
            slot,
            name: name.into(),
        })
    }

    #[test]
    fn grammar_smoke() {
        let ast = Expr::parse("x1 + 3*t^2", &table()).unwrap();
        let expected = Expr::Binary(
            BinOp::Add,
            var("x1", 0),
            Box::new(Expr::Binary(
                BinOp::Mul,
                Box::new(Expr::Number(3.0)),
                Box::new(Expr::Binary(BinOp::Pow, var("t", 2), Box::new(Expr::Number(2.0)))),
            )),
        );
        assert_eq!(ast, expected);
    }

    #[test]
    fn multiplication_commutes_at_evaluation() {
        let s = table();
        let slots = s.bind(&[1.7, 0.0], 0.0, &[0.0]);
        let a = Expr::parse("3*x1", &s).unwrap().eval_real(&slots).unwrap();
        let b = Expr::parse("x1*3", &s).unwrap().eval_real(&slots).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unary_minus_binds_tighter_than_plus() {
        let s = table();
        let ast = Expr::parse("-x2 + x1*u1", &s).unwrap();
        assert!(matches!(&ast, Expr::Binary(BinOp::Add, l, _) if matches!(**l, Expr::Neg(_))));
        let v = ast.eval_real(&s.bind(&[1.0, 2.0], 0.0, &[0.5])).unwrap();
        assert_eq!(v, -1.5);
    }

    #[test]
    fn power_is_right_associative_and_binds_over_negation() {
        let s = table();
        let slots = s.bind(&[2.0, 0.0], 0.0, &[0.0]);
        assert_eq!(Expr::parse("x1^3^2", &s).unwrap().eval_real(&slots).unwrap(), 512.0);
        assert_eq!(Expr::parse("-x1^2", &s).unwrap().eval_real(&slots).unwrap(), -4.0);
        assert_eq!(Expr::parse("x1^-1", &s).unwrap().eval_real(&slots).unwrap(), 0.5);
        assert_eq!(Expr::parse("pow(x1, 3)", &s).unwrap().eval_real(&slots).unwrap(), 8.0);
    }

    #[test]
    fn scientific_numbers() {
        let s = table();
        let v = Expr::parse("1.5e-3 + 2E2 + .25", &s).unwrap().as_constant().unwrap();
        assert_relative_eq!(v, 200.2515, epsilon = 1e-12);
    }

    #[test]
    fn real_evaluation_examples() {
        let s = table();
        let quartic = Expr::parse("(x1-1)*x1^2*(x1+1)", &s).unwrap();
        assert_eq!(quartic.eval_real(&s.bind(&[1.0, 0.0], 0.0, &[0.0])).unwrap(), 0.0);
        let angle = Expr::parse("atan(x2/x1)", &s).unwrap();
        assert_relative_eq!(
            angle.eval_real(&s.bind(&[1.0, 1.0], 0.0, &[0.0])).unwrap(),
            std::f64::consts::FRAC_PI_4,
            epsilon = 1e-15
        );
        let inverse = Expr::parse("exp(log(x1))", &s).unwrap();
        assert_relative_eq!(
            inverse.eval_real(&s.bind(&[2.5, 0.0], 0.0, &[0.0])).unwrap(),
            2.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn errors_are_reported() {
        let s = table();
        assert!(matches!(
            Expr::parse("x1 + y", &s),
            Err(ParseError::UnknownSymbol { col: 6, .. })
        ));
        assert!(matches!(
            Expr::parse("x1 +\n  * 2", &s),
            Err(ParseError::Syntax { line: 2, col: 3, .. })
        ));
        assert!(matches!(Expr::parse("sin(x1, x2)", &s), Err(ParseError::Arity { .. })));
        assert!(matches!(Expr::parse("abs(x1)", &s), Err(ParseError::UnknownSymbol { .. })));
        assert!(matches!(Expr::parse("(x1", &s), Err(ParseError::Syntax { .. })));
        assert!(matches!(Expr::parse("x1 $ 2", &s), Err(ParseError::Syntax { .. })));

        let log = Expr::parse("log(x1)", &s).unwrap();
        assert!(matches!(
            log.eval_real(&s.bind(&[-1.0, 0.0], 0.0, &[0.0])),
            Err(EvalError::Domain { func: "log", .. })
        ));
        let frac = Expr::parse("x1^0.5", &s).unwrap();
        assert!(frac.eval_real(&s.bind(&[-1.0, 0.0], 0.0, &[0.0])).is_err());
    }

    #[test]
    fn constants_are_substituted() {
        let s = table()
            .with_constants([("sigma".to_string(), 0.2)].into_iter().collect())
            .unwrap();
        let e = Expr::parse("sigma*x1", &s).unwrap();
        assert_relative_eq!(e.eval_real(&s.bind(&[3.0, 0.0], 0.0, &[0.0])).unwrap(), 0.6);
    }

    #[test]
    fn duplicate_symbols_are_rejected() {
        let err = SymbolTable::new(vec!["x".into(), "x".into()], vec!["u".into()], BTreeMap::new());
        assert!(err.is_err());
        let err = SymbolTable::new(vec!["exp".into()], vec!["u".into()], BTreeMap::new());
        assert!(err.is_err());
    }

    #[test]
    fn jet_of_square() {
        let s = SymbolTable::standard(1, 1);
        let e = Expr::parse("u1^2", &s).unwrap();
        let slots = [Jet2::constant(0.0, 1), Jet2::constant(0.0, 1), Jet2::variable(0.0, 0, 1)];
        let j = e.eval_jet(&slots).unwrap();
        assert_eq!(j.value(), 0.0);
        assert_eq!(j.grad(), &[0.0]);
        assert_eq!(j.hess(0, 0), 2.0);
    }

    #[test]
    fn jet_of_curve_e_first_coordinate() {
        let s = table();
        let e = Expr::parse("x1 - x2*u1 + 3*x1*u1^2", &s).unwrap();
        let slots = [
            Jet2::constant(1.0, 1),
            Jet2::constant(0.0, 1),
            Jet2::constant(0.0, 1),
            Jet2::variable(0.0, 0, 1),
        ];
        let j = e.eval_jet(&slots).unwrap();
        assert_eq!(j.value(), 1.0);
        assert_eq!(j.grad(), &[0.0]);
        assert_eq!(j.hess(0, 0), 6.0);
    }

    #[test]
    fn constant_jets_degenerate_to_real_evaluation() {
        let s = table();
        let e = Expr::parse("sin(x1)*exp(x2) / (1 + x1^2) - atan(u1 + t)", &s).unwrap();
        let real = s.bind(&[0.3, -1.2], 0.7, &[0.1]);
        let jets: Vec<Jet2> = real.iter().map(|v| Jet2::constant(*v, 2)).collect();
        assert_eq!(e.eval_jet(&jets).unwrap().value(), e.eval_real(&real).unwrap());
    }
}
