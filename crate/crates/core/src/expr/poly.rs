//! Sparse multivariate polynomials with exact rational coefficients.
//!
//! Every finite `f64` is a dyadic rational, so converting a polynomial tree is
//! exact and cancellation such as `x/3 + x - 4x/3` is decided without rounding.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use super::Expr;

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Poly {
    // exponent vector (trailing zeros trimmed) -> coefficient; no zero coefficients stored
    terms: BTreeMap<Vec<u32>, BigRational>,
}

const MAX_POWER: f64 = 64.0;

impl Poly {
    pub fn constant(c: BigRational) -> Poly {
        let mut terms = BTreeMap::new();
        if !c.is_zero() {
            terms.insert(Vec::new(), c);
        }
        Poly { terms }
    }

    pub fn var(i: usize) -> Poly {
        let mut exps = vec![0; i + 1];
        exps[i] = 1;
        let mut terms = BTreeMap::new();
        terms.insert(exps, BigRational::one());
        Poly { terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    fn as_constant(&self) -> Option<BigRational> {
        match self.terms.len() {
            0 => Some(BigRational::zero()),
            1 => self.terms.get(&Vec::new()).cloned(),
            _ => None,
        }
    }

    /// Convert a tree built from `+ - *`, non-negative integer powers and
    /// division by constants. Returns `None` for anything else.
    pub fn from_expr(e: &Expr) -> Option<Poly> {
        Some(match e {
            Expr::Const(c) => Poly::constant(BigRational::from_float(*c)?),
            Expr::Var(i) => Poly::var(*i),
            Expr::Neg(a) => Poly::from_expr(a)?.scale(&-BigRational::one()),
            Expr::Add(a, b) => Poly::from_expr(a)?.add(&Poly::from_expr(b)?),
            Expr::Sub(a, b) => Poly::from_expr(a)?.add(&Poly::from_expr(b)?.scale(&-BigRational::one())),
            Expr::Mul(a, b) => Poly::from_expr(a)?.mul(&Poly::from_expr(b)?),
            Expr::Div(a, b) => {
                let den = Poly::from_expr(b)?.as_constant()?;
                if den.is_zero() {
                    return None;
                }
                Poly::from_expr(a)?.scale(&den.recip())
            }
            Expr::Pow(a, c) => {
                if c.fract() != 0.0 || *c < 0.0 || *c > MAX_POWER {
                    return None;
                }
                let base = Poly::from_expr(a)?;
                let mut acc = Poly::constant(BigRational::one());
                for _ in 0..(*c as u32) {
                    acc = acc.mul(&base);
                }
                acc
            }
            Expr::Call(_, _) => return None,
        })
    }

    fn scale(mut self, k: &BigRational) -> Poly {
        if k.is_zero() {
            return Poly::default();
        }
        for c in self.terms.values_mut() {
            *c = &*c * k;
        }
        self
    }

    fn add(mut self, other: &Poly) -> Poly {
        for (m, c) in &other.terms {
            let entry = self.terms.entry(m.clone()).or_insert_with(BigRational::zero);
            *entry = &*entry + c;
            if entry.is_zero() {
                self.terms.remove(m);
            }
        }
        self
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::default();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                let len = ma.len().max(mb.len());
                let mut m: Vec<u32> = (0..len)
                    .map(|k| ma.get(k).copied().unwrap_or(0) + mb.get(k).copied().unwrap_or(0))
                    .collect();
                while m.last() == Some(&0) {
                    m.pop();
                }
                let entry = out.terms.entry(m).or_insert_with(BigRational::zero);
                *entry = &*entry + ca * cb;
            }
        }
        out.terms.retain(|_, c| !c.is_zero());
        out
    }

    /// Expanded tree. Coefficients that are not exact doubles are emitted as
    /// `num/den` so a later conversion recovers them exactly.
    pub fn to_expr(&self) -> Expr {
        let mut acc: Option<Expr> = None;
        for (m, c) in &self.terms {
            let negative = c.is_negative();
            let mag = c.abs();
            let mut term: Option<Expr> = None;
            for (i, &k) in m.iter().enumerate() {
                if k == 0 {
                    continue;
                }
                let factor = if k == 1 {
                    Expr::Var(i)
                } else {
                    Expr::Pow(Box::new(Expr::Var(i)), k as f64)
                };
                term = Some(match term {
                    None => factor,
                    Some(t) => t * factor,
                });
            }
            let coeff = coefficient_expr(&mag);
            let term = match term {
                None => coeff,
                Some(t) if mag.is_one() => t,
                Some(t) => coeff * t,
            };
            acc = Some(match (acc, negative) {
                (None, false) => term,
                (None, true) => -term,
                (Some(a), false) => a + term,
                (Some(a), true) => a - term,
            });
        }
        acc.unwrap_or_else(Expr::zero)
    }
}

fn exact_f64(x: &BigInt) -> Option<f64> {
    let f = x.to_f64()?;
    (f.is_finite() && BigRational::from_float(f)? == BigRational::from_integer(x.clone())).then_some(f)
}

fn coefficient_expr(c: &BigRational) -> Expr {
    if let Some(f) = c.to_f64() {
        if f.is_finite() && BigRational::from_float(f).as_ref() == Some(c) {
            return Expr::Const(f);
        }
    }
    match (exact_f64(c.numer()), exact_f64(c.denom())) {
        (Some(n), Some(d)) => Expr::Const(n) / Expr::Const(d),
        _ => Expr::Const(c.to_f64().unwrap_or(f64::NAN)),
    }
}
