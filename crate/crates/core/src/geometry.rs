//! Poisson structures in global coordinates: brackets, Hamiltonian vector
//! fields, Jacobi certification, pointwise rank, the Schouten residual of a
//! numerically given vector field, and polar subspaces.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, certify_zero, EvalError, Expr};
use crate::{linalg, par};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeometryError {
    #[error("expression uses {arity} coordinates but the structure has dimension {dim}")]
    CoordinateMismatch { arity: usize, dim: usize },
    #[error("bivector entry ({i},{j}) is not strictly upper triangular in dimension {dim}")]
    BadEntry { i: usize, j: usize, dim: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("vector field evaluation failed near {point:?}: {message}")]
    Field { point: Vec<f64>, message: String },
}

/// Coordinate-aligned box used for random sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SampleBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> SampleBox {
        SampleBox { lo, hi }
    }

    pub fn cube(n: usize, half: f64) -> SampleBox {
        SampleBox::new(vec![-half; n], vec![half; n])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().enumerate().all(|(k, v)| *v >= self.lo[k] && *v <= self.hi[k])
    }

    /// `n` uniform points from a fixed seed.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..self.dim())
                    .map(|k| {
                        if self.hi[k] > self.lo[k] {
                            rng.gen_range(self.lo[k]..self.hi[k])
                        } else {
                            self.lo[k]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Antisymmetric bivector with symbolic entries; only `i < j` is stored.
#[derive(Debug)]
pub struct PoissonStructure {
    coords: Vec<String>,
    upper: Vec<Expr>,
    entry_grads: OnceLock<Vec<Vec<Expr>>>,
}

impl Clone for PoissonStructure {
    fn clone(&self) -> Self {
        PoissonStructure {
            coords: self.coords.clone(),
            upper: self.upper.clone(),
            entry_grads: OnceLock::new(),
        }
    }
}

impl PartialEq for PoissonStructure {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords && self.upper == other.upper
    }
}

fn upper_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

impl PoissonStructure {
    /// Build from `(i, j, expr)` entries with `i < j`; omitted entries are zero.
    pub fn new(
        coords: Vec<String>,
        entries: impl IntoIterator<Item = (usize, usize, Expr)>,
    ) -> Result<PoissonStructure, GeometryError> {
        let n = coords.len();
        let mut upper = vec![Expr::zero(); n * n.saturating_sub(1) / 2];
        for (i, j, e) in entries {
            if i >= j || j >= n {
                return Err(GeometryError::BadEntry { i, j, dim: n });
            }
            check_arity(&e, n)?;
            upper[upper_index(n, i, j)] = e;
        }
        Ok(PoissonStructure {
            coords,
            upper,
            entry_grads: OnceLock::new(),
        })
    }

    /// Constant canonical structure on `(q1, p1, q2, p2, ...)`.
    pub fn canonical(coords: Vec<String>) -> PoissonStructure {
        let n = coords.len();
        let entries = (0..n / 2).map(|k| (2 * k, 2 * k + 1, Expr::one()));
        PoissonStructure::new(coords, entries).expect("valid canonical entries")
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[String] {
        &self.coords
    }

    /// Entry `Π^{ij}` of the full antisymmetric matrix.
    pub fn entry(&self, i: usize, j: usize) -> Expr {
        let n = self.dim();
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => Expr::zero(),
            std::cmp::Ordering::Less => self.upper[upper_index(n, i, j)].clone(),
            std::cmp::Ordering::Greater => expr::neg(self.upper[upper_index(n, j, i)].clone()),
        }
    }

    /// Non-zero strictly upper entries.
    pub fn upper_entries(&self) -> Vec<(usize, usize, &Expr)> {
        let n = self.dim();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let e = &self.upper[upper_index(n, i, j)];
                if !e.is_zero() {
                    out.push((i, j, e));
                }
            }
        }
        out
    }

    pub fn matrix_at(&self, m: &[f64]) -> Result<PointwiseBivector, GeometryError> {
        let n = self.dim();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let v = self.upper[upper_index(n, i, j)].evaluate(m)?;
                a[(i, j)] = v;
                a[(j, i)] = -v;
            }
        }
        Ok(PointwiseBivector { a })
    }

    fn grads(&self) -> &Vec<Vec<Expr>> {
        self.entry_grads.get_or_init(|| {
            let n = self.dim();
            self.upper
                .iter()
                .map(|e| (0..n).map(|k| e.differentiate(k).canonicalize()).collect())
                .collect()
        })
    }

    /// `∂_k Π^{ij}` evaluated at `m`, full antisymmetric `[k][i][j]` layout.
    fn entry_derivatives_at(&self, m: &[f64]) -> Result<Vec<DMatrix<f64>>, GeometryError> {
        let n = self.dim();
        let grads = self.grads();
        let mut out = vec![DMatrix::zeros(n, n); n];
        for i in 0..n {
            for j in i + 1..n {
                for (k, g) in grads[upper_index(n, i, j)].iter().enumerate() {
                    if g.is_zero() {
                        continue;
                    }
                    let v = g.evaluate(m)?;
                    out[k][(i, j)] = v;
                    out[k][(j, i)] = -v;
                }
            }
        }
        Ok(out)
    }
}

fn check_arity(e: &Expr, n: usize) -> Result<(), GeometryError> {
    let arity = e.arity();
    if arity > n {
        Err(GeometryError::CoordinateMismatch { arity, dim: n })
    } else {
        Ok(())
    }
}

/// Antisymmetric real matrix, the value of a bivector at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseBivector {
    a: DMatrix<f64>,
}

impl PointwiseBivector {
    /// Antisymmetrize `(A - Aᵀ)/2`.
    pub fn from_matrix(m: DMatrix<f64>) -> PointwiseBivector {
        let a = (&m - m.transpose()) * 0.5;
        PointwiseBivector { a }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn max_abs(&self) -> f64 {
        self.a.amax()
    }

    /// `Π_m(ξ, η)`.
    pub fn pair(&self, xi: &[f64], eta: &[f64]) -> f64 {
        let n = self.dim();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += xi[i] * self.a[(i, j)] * eta[j];
            }
        }
        s
    }
}

/// Symbolic vector field, one component per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldExpr {
    pub components: Vec<Expr>,
}

impl VectorFieldExpr {
    pub fn evaluate(&self, m: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.components.iter().map(|c| c.evaluate(m)).collect()
    }

    pub fn evaluate_into(&self, m: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.evaluate(m)?;
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(Expr::is_zero)
    }
}

fn gradient(f: &Expr, n: usize) -> Vec<Expr> {
    (0..n).map(|k| f.differentiate(k)).collect()
}

/// `{f, g} = Σ_{i<j} Π^{ij} (∂_i f ∂_j g − ∂_j f ∂_i g)`.
pub fn poisson_bracket(p: &PoissonStructure, f: &Expr, g: &Expr) -> Result<Expr, GeometryError> {
    let n = p.dim();
    check_arity(f, n)?;
    check_arity(g, n)?;
    let df = gradient(f, n);
    let dg = gradient(g, n);
    let mut acc = Expr::zero();
    for (i, j, pij) in p.upper_entries() {
        let inner = expr::sub(
            expr::mul(df[i].clone(), dg[j].clone()),
            expr::mul(df[j].clone(), dg[i].clone()),
        );
        if inner.is_zero() {
            continue;
        }
        acc = expr::add(acc, expr::mul(pij.clone(), inner));
    }
    Ok(acc.canonicalize())
}

/// `X_h` with components `X_h[x_i] = {x_i, h} = Σ_j Π^{ij} ∂_j h`.
pub fn hamiltonian_vector_field(p: &PoissonStructure, h: &Expr) -> Result<VectorFieldExpr, GeometryError> {
    let n = p.dim();
    check_arity(h, n)?;
    let dh = gradient(h, n);
    let components = (0..n)
        .map(|i| {
            let mut acc = Expr::zero();
            for (j, dhj) in dh.iter().enumerate() {
                if dhj.is_zero() {
                    continue;
                }
                acc = expr::add(acc, expr::mul(p.entry(i, j), dhj.clone()));
            }
            acc.canonicalize()
        })
        .collect();
    Ok(VectorFieldExpr { components })
}

/// `{f,{g,h}} + {g,{h,f}} + {h,{f,g}}`.
pub fn jacobiator(p: &PoissonStructure, f: &Expr, g: &Expr, h: &Expr) -> Result<Expr, GeometryError> {
    let a = poisson_bracket(p, f, &poisson_bracket(p, g, h)?)?;
    let b = poisson_bracket(p, g, &poisson_bracket(p, h, f)?)?;
    let c = poisson_bracket(p, h, &poisson_bracket(p, f, g)?)?;
    Ok(expr::add(expr::add(a, b), c).canonicalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleResidual {
    pub triple: [usize; 3],
    pub symbolic_zero: bool,
    pub max_abs: f64,
    pub witness: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobiReport {
    pub triples: Vec<TripleResidual>,
    pub max_residual: f64,
    pub witness: Vec<f64>,
    pub samples: usize,
    pub tol: f64,
    pub passed: bool,
}

impl JacobiReport {
    pub fn all_symbolic(&self) -> bool {
        self.triples.iter().all(|t| t.symbolic_zero)
    }
}

pub const JACOBI_SEED: u64 = 0x5eed_0001;

/// Jacobi identity on every coordinate triple, which suffices by the Leibniz rule.
pub fn verify_poisson(p: &PoissonStructure, sample_box: &SampleBox, n_samples: usize, tol: f64) -> JacobiReport {
    let n = p.dim();
    let coords: Vec<Expr> = (0..n).map(Expr::var).collect();
    let mut triples = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                triples.push([i, j, k]);
            }
        }
    }
    let points = sample_box.sample(n_samples, JACOBI_SEED);
    let residuals: Vec<TripleResidual> = par::map_slice(&triples, |&[i, j, k]| {
        let jac = jacobiator(p, &coords[i], &coords[j], &coords[k]).expect("coordinates match");
        let symbolic_zero = jac.is_zero()
            || certify_zero(&jac, &sample_box.lo, &sample_box.hi, JACOBI_SEED).symbolic;
        let mut max_abs = 0.0f64;
        let mut witness = points.first().cloned().unwrap_or_default();
        for x in &points {
            let v = match jac.evaluate(x) {
                Ok(v) => v.abs(),
                Err(_) => f64::INFINITY,
            };
            if v > max_abs {
                max_abs = v;
                witness = x.clone();
            }
        }
        TripleResidual {
            triple: [i, j, k],
            symbolic_zero,
            max_abs,
            witness,
        }
    });
    let (max_residual, witness) = residuals
        .iter()
        .fold((0.0f64, points.first().cloned().unwrap_or_default()), |(m, w), t| {
            if t.max_abs > m {
                (t.max_abs, t.witness.clone())
            } else {
                (m, w)
            }
        });
    JacobiReport {
        passed: max_residual < tol,
        triples: residuals,
        max_residual,
        witness,
        samples: points.len(),
        tol,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    /// Ratio of the smallest kept to the largest dropped singular value.
    pub gap: f64,
    pub singular_values: Vec<f64>,
}

pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// Numerical rank of `Π(m)`; even for any antisymmetric input.
pub fn rank_at(p: &PoissonStructure, m: &[f64], tol: f64) -> Result<RankReport, GeometryError> {
    let b = p.matrix_at(m)?;
    let (rank, gap, singular_values) = linalg::rank_with_gap(b.matrix(), tol);
    assert!(rank % 2 == 0, "odd rank {rank} for an antisymmetric matrix: {singular_values:?}");
    Ok(RankReport {
        rank,
        gap,
        singular_values,
    })
}

/// Default central-difference step for coordinate `k` at `m`.
pub fn fd_step(m: &[f64], k: usize) -> f64 {
    1e-5 * m[k].abs().max(1.0)
}

/// `[Y, Π]` at `m` in coordinates:
/// `Σ_k (Y^k ∂_k Π^{ij} − Π^{kj} ∂_k Y^i − Π^{ik} ∂_k Y^j)`, with `∂Y`
/// central-differenced and `∂Π` exact. `step` overrides the default
/// `1e-5·max(1,|m_k|)`.
pub fn lie_derivative_bivector<F, E>(
    y: F,
    p: &PoissonStructure,
    m: &[f64],
    step: Option<f64>,
) -> Result<PointwiseBivector, GeometryError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, E>,
    E: std::fmt::Display,
{
    let n = p.dim();
    let field_err = |x: &[f64], e: E| GeometryError::Field {
        point: x.to_vec(),
        message: e.to_string(),
    };
    let y0 = y(m).map_err(|e| field_err(m, e))?;
    // dy[k][i] = ∂_k Y^i
    let mut dy = vec![vec![0.0; n]; n];
    let mut x = m.to_vec();
    for k in 0..n {
        let h = step.unwrap_or_else(|| fd_step(m, k));
        x[k] = m[k] + h;
        let plus = y(&x).map_err(|e| field_err(&x, e))?;
        x[k] = m[k] - h;
        let minus = y(&x).map_err(|e| field_err(&x, e))?;
        x[k] = m[k];
        for i in 0..n {
            dy[k][i] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    let pi = p.matrix_at(m)?;
    let dpi = p.entry_derivatives_at(m)?;
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += y0[k] * dpi[k][(i, j)] - pi.get(k, j) * dy[k][i] - pi.get(i, k) * dy[k][j];
            }
            out[(i, j)] = s;
        }
    }
    Ok(PointwiseBivector::from_matrix(out))
}

/// Orthonormal basis (columns) of `{ξ : Π_m(ξ, σ) = 0 for σ in span(covectors)}`.
pub fn polar_subspace(b: &PointwiseBivector, covectors: &[Vec<f64>]) -> DMatrix<f64> {
    polar_subspace_tol(b, covectors, DEFAULT_RANK_TOL)
}

pub fn polar_subspace_tol(b: &PointwiseBivector, covectors: &[Vec<f64>], rel_tol: f64) -> DMatrix<f64> {
    let n = b.dim();
    if covectors.is_empty() {
        return DMatrix::identity(n, n);
    }
    // row k is (B σ_k)ᵀ, so row·ξ = -Π(ξ, σ_k)
    let mut rows = DMatrix::zeros(covectors.len(), n);
    for (k, s) in covectors.iter().enumerate() {
        let bs = b.matrix() * DVector::from_column_slice(s);
        rows.row_mut(k).copy_from(&bs.transpose());
    }
    linalg::null_space(&rows, rel_tol)
}
