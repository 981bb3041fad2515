//! Closed-form scalar expressions over an ordered list of real coordinates.
//!
//! Variables are stored by position in the coordinate list, so an [`Expr`] on
//! its own carries no names; printing takes the names as an argument. Every
//! bracket, vector field and certificate in the crate is built from these
//! trees.

mod parse;
mod poly;

use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use parse::{parse, ParseError};
pub use poly::Poly;

/// Functions of one argument recognised by the grammar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    fn apply(self, x: f64) -> Result<f64, &'static str> {
        match self {
            Func::Sin => Ok(x.sin()),
            Func::Cos => Ok(x.cos()),
            Func::Tan => Ok(x.tan()),
            Func::Exp => Ok(x.exp()),
            Func::Log if x <= 0.0 => Err("log of a non-positive number"),
            Func::Log => Ok(x.ln()),
            Func::Sqrt if x < 0.0 => Err("sqrt of a negative number"),
            Func::Sqrt => Ok(x.sqrt()),
        }
    }
}

/// Immutable expression tree. `Pow` only admits a constant exponent.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Call(Func, Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("domain error: {reason} in `{expr}`")]
    Domain { expr: String, reason: &'static str },
    #[error("point has {got} coordinates, expression expects at least {expected}")]
    Arity { expected: usize, got: usize },
}

impl Expr {
    pub fn zero() -> Expr {
        Expr::Const(0.0)
    }

    pub fn one() -> Expr {
        Expr::Const(1.0)
    }

    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    /// True for the canonical zero node (either sign of zero).
    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 1.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    /// One past the largest variable index referenced, or 0 for closed trees.
    pub fn arity(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Neg(a) | Expr::Call(_, a) | Expr::Pow(a, _) => a.arity(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.arity().max(b.arity())
            }
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Neg(a) | Expr::Call(_, a) | Expr::Pow(a, _) => 1 + a.node_count(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                1 + a.node_count() + b.node_count()
            }
        }
    }

    pub fn depends_on(&self, v: usize) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(i) => *i == v,
            Expr::Neg(a) | Expr::Call(_, a) | Expr::Pow(a, _) => a.depends_on(v),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.depends_on(v) || b.depends_on(v)
            }
        }
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<f64, EvalError> {
        let need = self.arity();
        if point.len() < need {
            return Err(EvalError::Arity {
                expected: need,
                got: point.len(),
            });
        }
        self.eval_unchecked(point)
    }

    fn domain(&self, reason: &'static str) -> EvalError {
        EvalError::Domain {
            expr: self.display_indexed().to_string(),
            reason,
        }
    }

    fn eval_unchecked(&self, x: &[f64]) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Const(c) => return Ok(*c),
            Expr::Var(i) => return Ok(x[*i]),
            Expr::Neg(a) => -a.eval_unchecked(x)?,
            Expr::Call(f, a) => {
                let u = a.eval_unchecked(x)?;
                f.apply(u).map_err(|r| self.domain(r))?
            }
            Expr::Add(a, b) => a.eval_unchecked(x)? + b.eval_unchecked(x)?,
            Expr::Sub(a, b) => a.eval_unchecked(x)? - b.eval_unchecked(x)?,
            Expr::Mul(a, b) => a.eval_unchecked(x)? * b.eval_unchecked(x)?,
            Expr::Div(a, b) => {
                let num = a.eval_unchecked(x)?;
                let den = b.eval_unchecked(x)?;
                if den == 0.0 {
                    return Err(self.domain("division by zero"));
                }
                num / den
            }
            Expr::Pow(a, c) => {
                let base = a.eval_unchecked(x)?;
                pow_checked(base, *c).map_err(|r| self.domain(r))?
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.domain("non-finite result"))
        }
    }

    /// Exact symbolic partial derivative with respect to variable `v`.
    pub fn differentiate(&self, v: usize) -> Expr {
        self.diff_raw(v).simplify()
    }

    fn diff_raw(&self, v: usize) -> Expr {
        if !self.depends_on(v) {
            return Expr::zero();
        }
        match self {
            Expr::Const(_) => Expr::zero(),
            Expr::Var(i) => {
                if *i == v {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Expr::Neg(a) => neg(a.diff_raw(v)),
            Expr::Add(a, b) => add(a.diff_raw(v), b.diff_raw(v)),
            Expr::Sub(a, b) => sub(a.diff_raw(v), b.diff_raw(v)),
            Expr::Mul(a, b) => add(
                mul(a.diff_raw(v), (**b).clone()),
                mul((**a).clone(), b.diff_raw(v)),
            ),
            Expr::Div(a, b) => {
                if !b.depends_on(v) {
                    div(a.diff_raw(v), (**b).clone())
                } else {
                    let top = sub(
                        mul(a.diff_raw(v), (**b).clone()),
                        mul((**a).clone(), b.diff_raw(v)),
                    );
                    div(top, pow((**b).clone(), 2.0))
                }
            }
            Expr::Pow(a, c) => {
                if *c == 0.0 {
                    return Expr::zero();
                }
                // An integer exponent keeps an integer exponent, so negative bases stay valid.
                let outer = mul(Expr::Const(*c), pow((**a).clone(), c - 1.0));
                mul(outer, a.diff_raw(v))
            }
            Expr::Call(f, a) => {
                let u = (**a).clone();
                let outer = match f {
                    Func::Sin => call(Func::Cos, u),
                    Func::Cos => neg(call(Func::Sin, u)),
                    Func::Tan => add(Expr::one(), pow(call(Func::Tan, u), 2.0)),
                    Func::Exp => call(Func::Exp, u),
                    Func::Log => return div(a.diff_raw(v), u),
                    Func::Sqrt => {
                        return div(a.diff_raw(v), mul(Expr::Const(2.0), call(Func::Sqrt, u)))
                    }
                };
                mul(outer, a.diff_raw(v))
            }
        }
    }

    /// Constant folding and identity rules, iterated to a fixed point (at most
    /// 32 passes). Never changes the value at a point where `self` is defined.
    pub fn simplify(&self) -> Expr {
        let mut cur = self.clone();
        for _ in 0..32 {
            let next = cur.simplify_pass();
            if next == cur {
                return next;
            }
            cur = next;
        }
        cur
    }

    fn simplify_pass(&self) -> Expr {
        match self {
            Expr::Const(_) | Expr::Var(_) => self.clone(),
            Expr::Neg(a) => neg(a.simplify_pass()),
            Expr::Call(f, a) => call(*f, a.simplify_pass()),
            Expr::Add(a, b) => add(a.simplify_pass(), b.simplify_pass()),
            Expr::Sub(a, b) => sub(a.simplify_pass(), b.simplify_pass()),
            Expr::Mul(a, b) => mul(a.simplify_pass(), b.simplify_pass()),
            Expr::Div(a, b) => div(a.simplify_pass(), b.simplify_pass()),
            Expr::Pow(a, c) => pow(a.simplify_pass(), *c),
        }
    }

    /// Polynomial trees are rewritten into expanded normal form with exact
    /// rational coefficients (so identically vanishing polynomials become the
    /// zero node); other trees are only simplified.
    pub fn canonicalize(&self) -> Expr {
        match Poly::from_expr(self) {
            Some(p) => p.to_expr(),
            None => self.simplify(),
        }
    }

    /// Replace every variable `i` by `subs[i]`.
    pub fn substitute(&self, subs: &[Expr]) -> Expr {
        match self {
            Expr::Const(_) => self.clone(),
            Expr::Var(i) => subs[*i].clone(),
            Expr::Neg(a) => Expr::Neg(Box::new(a.substitute(subs))),
            Expr::Call(f, a) => Expr::Call(*f, Box::new(a.substitute(subs))),
            Expr::Add(a, b) => Expr::Add(Box::new(a.substitute(subs)), Box::new(b.substitute(subs))),
            Expr::Sub(a, b) => Expr::Sub(Box::new(a.substitute(subs)), Box::new(b.substitute(subs))),
            Expr::Mul(a, b) => Expr::Mul(Box::new(a.substitute(subs)), Box::new(b.substitute(subs))),
            Expr::Div(a, b) => Expr::Div(Box::new(a.substitute(subs)), Box::new(b.substitute(subs))),
            Expr::Pow(a, c) => Expr::Pow(Box::new(a.substitute(subs)), *c),
        }
    }

    pub fn display<'a, S: AsRef<str>>(&'a self, names: &'a [S]) -> ExprDisplay<'a, S> {
        ExprDisplay { expr: self, names }
    }

    /// Display using `x0, x1, ...` for variables.
    pub fn display_indexed(&self) -> impl fmt::Display + '_ {
        struct Indexed<'a>(&'a Expr);
        impl fmt::Display for Indexed<'_> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write_expr(self.0, f, &|f, i| write!(f, "x{i}"))
            }
        }
        Indexed(self)
    }
}

fn pow_checked(base: f64, c: f64) -> Result<f64, &'static str> {
    if c.fract() == 0.0 && c.abs() <= i32::MAX as f64 {
        if base == 0.0 && c < 0.0 {
            return Err("zero raised to a negative power");
        }
        Ok(base.powi(c as i32))
    } else if base < 0.0 {
        Err("negative base with non-integer exponent")
    } else if base == 0.0 && c < 0.0 {
        Err("zero raised to a negative power")
    } else {
        Ok(base.powf(c))
    }
}

/// Structural equality up to swapping the operands of `+` and `*`, both of
/// which commute exactly in IEEE arithmetic.
fn equivalent(a: &Expr, b: &Expr) -> bool {
    match (a, b) {
        (Expr::Add(a1, a2), Expr::Add(b1, b2)) | (Expr::Mul(a1, a2), Expr::Mul(b1, b2)) => {
            (equivalent(a1, b1) && equivalent(a2, b2)) || (equivalent(a1, b2) && equivalent(a2, b1))
        }
        (Expr::Sub(a1, a2), Expr::Sub(b1, b2)) | (Expr::Div(a1, a2), Expr::Div(b1, b2)) => {
            equivalent(a1, b1) && equivalent(a2, b2)
        }
        (Expr::Neg(x), Expr::Neg(y)) => equivalent(x, y),
        (Expr::Call(f, x), Expr::Call(g, y)) => f == g && equivalent(x, y),
        (Expr::Pow(x, c), Expr::Pow(y, d)) => c == d && equivalent(x, y),
        _ => a == b,
    }
}

fn fold(e: Expr) -> Expr {
    match e.evaluate(&[]) {
        Ok(v) => Expr::Const(v),
        Err(_) => e,
    }
}

// Smart constructors: each applies the local identity rules for its node.

pub(crate) fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

pub(crate) fn call(f: Func, a: Expr) -> Expr {
    let e = Expr::Call(f, Box::new(a));
    if let Expr::Call(_, ref inner) = e {
        if inner.as_const().is_some() {
            return fold(e);
        }
    }
    e
}

pub(crate) fn add(a: Expr, b: Expr) -> Expr {
    if a.is_zero() {
        return b;
    }
    if b.is_zero() {
        return a;
    }
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => fold(Expr::Add(Box::new(Expr::Const(x)), Box::new(Expr::Const(y)))),
        (a, Expr::Neg(b)) => sub(a, *b),
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

pub(crate) fn sub(a: Expr, b: Expr) -> Expr {
    if b.is_zero() {
        return a;
    }
    if a.is_zero() {
        return neg(b);
    }
    if equivalent(&a, &b) {
        return Expr::zero();
    }
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => fold(Expr::Sub(Box::new(Expr::Const(x)), Box::new(Expr::Const(y)))),
        (a, Expr::Neg(b)) => add(a, *b),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

pub(crate) fn mul(a: Expr, b: Expr) -> Expr {
    if a.is_zero() || b.is_zero() {
        return Expr::zero();
    }
    if a.is_one() {
        return b;
    }
    if b.is_one() {
        return a;
    }
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => fold(Expr::Mul(Box::new(Expr::Const(x)), Box::new(Expr::Const(y)))),
        (Expr::Const(c), b) if c == -1.0 => neg(b),
        (a, Expr::Const(c)) if c == -1.0 => neg(a),
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

pub(crate) fn div(a: Expr, b: Expr) -> Expr {
    if b.is_one() {
        return a;
    }
    if a.is_zero() && !b.is_zero() {
        return Expr::zero();
    }
    if a == b && !b.is_zero() {
        return Expr::one();
    }
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => fold(Expr::Div(Box::new(Expr::Const(x)), Box::new(Expr::Const(y)))),
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

pub(crate) fn pow(a: Expr, c: f64) -> Expr {
    if c == 1.0 {
        return a;
    }
    if c == 0.0 {
        return Expr::one();
    }
    match a {
        Expr::Const(x) => fold(Expr::Pow(Box::new(Expr::Const(x)), c)),
        a => Expr::Pow(Box::new(a), c),
    }
}

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::Add(Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::Sub(Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::Mul(Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::Div(Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::Neg(Box::new(self))
    }
}

pub struct ExprDisplay<'a, S> {
    expr: &'a Expr,
    names: &'a [S],
}

impl<S: AsRef<str>> fmt::Display for ExprDisplay<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(self.expr, f, &|f, i| match self.names.get(i) {
            Some(n) => f.write_str(n.as_ref()),
            None => write!(f, "x{i}"),
        })
    }
}

fn is_atomic(e: &Expr) -> bool {
    match e {
        Expr::Var(_) | Expr::Call(..) => true,
        Expr::Const(c) => *c >= 0.0 && !(c.is_sign_negative()),
        _ => false,
    }
}

fn write_const(f: &mut fmt::Formatter<'_>, c: f64) -> fmt::Result {
    // `{:?}` is the shortest round-trip representation.
    let s = format!("{c:?}");
    if c < 0.0 || c.is_sign_negative() {
        write!(f, "({s})")
    } else {
        f.write_str(&s)
    }
}

fn write_expr(
    e: &Expr,
    f: &mut fmt::Formatter<'_>,
    var: &dyn Fn(&mut fmt::Formatter<'_>, usize) -> fmt::Result,
) -> fmt::Result {
    let wrapped = |f: &mut fmt::Formatter<'_>, e: &Expr| -> fmt::Result {
        if is_atomic(e) {
            write_expr(e, f, var)
        } else {
            f.write_str("(")?;
            write_expr(e, f, var)?;
            f.write_str(")")
        }
    };
    match e {
        Expr::Const(c) => write_const(f, *c),
        Expr::Var(i) => var(f, *i),
        Expr::Neg(a) => {
            f.write_str("-")?;
            wrapped(f, a)
        }
        Expr::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_expr(a, f, var)?;
            f.write_str(")")
        }
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
            let op = match e {
                Expr::Add(..) => " + ",
                Expr::Sub(..) => " - ",
                Expr::Mul(..) => "*",
                _ => "/",
            };
            wrapped(f, a)?;
            f.write_str(op)?;
            wrapped(f, b)
        }
        Expr::Pow(a, c) => {
            wrapped(f, a)?;
            f.write_str("^")?;
            write_const(f, *c)
        }
    }
}

/// Outcome of a zero test: symbolic folding backed by random-point evaluation.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ZeroCertificate {
    /// The expression folds to the zero node (rule-based or exact polynomial normal form).
    pub symbolic: bool,
    /// Largest |value| over the sampled points where the expression is defined.
    pub max_sampled: f64,
    pub samples: usize,
}

impl ZeroCertificate {
    pub const NUMERIC_TOL: f64 = 1e-12;
    pub const SAMPLES: usize = 64;

    pub fn holds(&self) -> bool {
        self.symbolic || (self.samples > 0 && self.max_sampled < Self::NUMERIC_TOL)
    }
}

/// Test whether `e` vanishes identically on the box `lo..hi`.
pub fn certify_zero(e: &Expr, lo: &[f64], hi: &[f64], seed: u64) -> ZeroCertificate {
    let symbolic = e.simplify().is_zero()
        || Poly::from_expr(e).map(|p| p.is_zero()).unwrap_or(false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_sampled: f64 = 0.0;
    let mut samples = 0;
    let mut x = vec![0.0; lo.len()];
    for _ in 0..ZeroCertificate::SAMPLES {
        for (k, xk) in x.iter_mut().enumerate() {
            *xk = if hi[k] > lo[k] { rng.gen_range(lo[k]..hi[k]) } else { lo[k] };
        }
        if let Ok(v) = e.evaluate(&x) {
            max_sampled = max_sampled.max(v.abs());
            samples += 1;
        }
    }
    ZeroCertificate {
        symbolic,
        max_sampled,
        samples,
    }
}
