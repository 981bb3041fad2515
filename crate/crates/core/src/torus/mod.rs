//! Period lattices: refining near-returns into exact return vectors,
//! reducing them to a basis, and continuing that basis over a grid of base
//! values to obtain the period-1 fields `Y_i = Σ_j λ_i^j X_{f_j}`.

mod field;
mod grid;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flows::{self, joint_flow, FlowConfig, FlowError};
use crate::geometry::GeometryError;
use crate::linalg;
use crate::systems::SystemSpec;

pub use field::{
    check_torus_action, continue_lattice, project_to_fiber, uniformized_field_at, LatticeField, LatticeNode,
    NodeStatus, TorusActionReport, JUMP_FRACTION, fmt_f64,
};
pub use grid::{GridSpec, EDGE_SLACK};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TorusError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("return Jacobian is singular at {point:?}")]
    Singular { point: Vec<f64> },
    #[error("Newton did not reach the defect tolerance after {iterations} iterations (defect {defect:.3e})")]
    Diverged { iterations: usize, defect: f64 },
    #[error("candidate is not a return: fiber-normal residual {normal:.3e} of {defect:.3e}")]
    NotAReturn { defect: f64, normal: f64 },
    #[error("candidates span only {found} of {needed} dimensions")]
    NoSpan { found: usize, needed: usize },
    #[error("seed base value {c:?} is not a grid node")]
    SeedNotOnGrid { c: Vec<f64> },
    #[error("base value {c:?} lies outside the grid")]
    OutOfGrid { c: Vec<f64> },
    #[error("lattice field has failed nodes {nodes:?} in the cells used")]
    FailedNodes { nodes: Vec<usize> },
    #[error("could not reach the fiber over {c:?}: residual {residual:.3e}")]
    Projection { c: Vec<f64>, residual: f64 },
    #[error("evaluation failed: {0}")]
    Eval(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl From<crate::expr::EvalError> for TorusError {
    fn from(e: crate::expr::EvalError) -> Self {
        TorusError::Eval(e.to_string())
    }
}

pub const DEFECT_TOL: f64 = 1e-9;
pub const MAX_NEWTON: usize = 25;

/// A refined return vector with its convergence history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refined {
    pub period: Vec<f64>,
    pub defect: f64,
    pub iterations: usize,
    /// `|Φ(L,m) − m|` per iteration.
    pub history: Vec<f64>,
}

/// Gauss-Newton on `L ↦ Φ(L,m) − m` with Jacobian columns `X_{f_j}(Φ(L,m))`.
pub fn refine_period(spec: &SystemSpec, m: &[f64], l0: &[f64], cfg: &FlowConfig) -> Result<Refined, TorusError> {
    refine_period_tol(spec, m, l0, cfg, DEFECT_TOL)
}

pub fn refine_period_tol(
    spec: &SystemSpec,
    m: &[f64],
    l0: &[f64],
    cfg: &FlowConfig,
    tol: f64,
) -> Result<Refined, TorusError> {
    let r = spec.r();
    let mut l = l0.to_vec();
    let mut history = Vec::new();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut polished = 0;
    for iteration in 0..=MAX_NEWTON {
        let end = joint_flow(spec, &l, m, cfg)?.point;
        let resid: Vec<f64> = end.iter().zip(m).map(|(a, b)| a - b).collect();
        let d = linalg::norm(&resid);
        history.push(d);
        let improved = best.as_ref().is_none_or(|(_, bd)| d < *bd);
        if improved {
            best = Some((l.clone(), d));
        }
        let (bl, bd) = best.clone().expect("set above");
        if bd < tol {
            // a couple of extra steps while they still help
            if !improved || polished >= 2 || d == 0.0 {
                return Ok(Refined {
                    period: bl,
                    defect: bd,
                    iterations: iteration,
                    history,
                });
            }
            polished += 1;
        }
        if iteration == MAX_NEWTON {
            break;
        }
        let jac = spec.action_fields_at(&end)?;
        if linalg::rank_with_gap(&jac, 1e-8).0 < r {
            return Err(TorusError::Singular { point: end });
        }
        let rhs = DVector::from_vec(resid.iter().map(|v| -v).collect());
        let step = linalg::lstsq(&jac, &rhs).ok_or(TorusError::Singular { point: end.clone() })?;
        let normal = (&jac * &step - &rhs).norm();
        if d > 1e3 * tol && normal > 0.5 * d {
            return Err(TorusError::NotAReturn { defect: d, normal });
        }
        for (li, si) in l.iter_mut().zip(step.iter()) {
            *li += si;
        }
    }
    let (_, bd) = best.expect("at least one iteration");
    Err(TorusError::Diverged {
        iterations: MAX_NEWTON,
        defect: bd,
    })
}

/// Reduced basis of the period lattice at one fiber.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodLattice {
    /// `F(anchor)`.
    pub base: Vec<f64>,
    pub anchor: Vec<f64>,
    /// `λ_1..λ_r`, each in `R^r`.
    pub basis: Vec<Vec<f64>>,
    /// `max_i |Φ(λ_i, anchor) − anchor|`.
    pub defect: f64,
    /// Set when the basis may generate only a finite-index sublattice.
    pub note: Option<String>,
}

impl PeriodLattice {
    /// `Λ` with rows `λ_i`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let r = self.basis.len();
        DMatrix::from_fn(r, r, |i, j| self.basis[i][j])
    }

    /// Whether `v` is an integer combination of the basis.
    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        match integer_coords(&self.basis, v) {
            Some(x) => x.iter().all(|c| (c - c.round()).abs() < tol),
            None => false,
        }
    }
}

/// Coefficients of `v` in the basis given as a list of vectors.
fn integer_coords(basis: &[Vec<f64>], v: &[f64]) -> Option<Vec<f64>> {
    let r = basis.len();
    let b = DMatrix::from_fn(r, r, |i, j| basis[j][i]);
    let inv = b.try_inverse()?;
    Some((inv * DVector::from_column_slice(v)).iter().copied().collect())
}

const INTEGER_TOL: f64 = 1e-6;
const MAX_DENOMINATOR: i64 = 12;

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Hermite-style column reduction: a basis of the integer column lattice.
fn integer_basis(mut cols: Vec<Vec<i64>>, r: usize) -> Option<Vec<Vec<i64>>> {
    for i in 0..r {
        loop {
            let pivot = (i..cols.len())
                .filter(|&j| cols[j][i] != 0)
                .min_by_key(|&j| cols[j][i].abs())?;
            cols.swap(i, pivot);
            let p = cols[i][i];
            let mut done = true;
            for j in i + 1..cols.len() {
                let q = cols[j][i].div_euclid(p);
                if q != 0 {
                    let pc = cols[i].clone();
                    for (x, y) in cols[j].iter_mut().zip(&pc) {
                        *x -= q * y;
                    }
                }
                if cols[j][i] != 0 {
                    done = false;
                }
            }
            if done {
                break;
            }
        }
        if cols[i][i] < 0 {
            for x in cols[i].iter_mut() {
                *x = -*x;
            }
        }
    }
    cols.truncate(r);
    Some(cols)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lagrange-Gauss reduction: `|b1| ≤ |b2| ≤ |b2 ± b1|`.
fn gauss_reduce(mut b1: Vec<f64>, mut b2: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    for _ in 0..200 {
        if dot(&b1, &b1) > dot(&b2, &b2) {
            std::mem::swap(&mut b1, &mut b2);
        }
        let mu = (dot(&b1, &b2) / dot(&b1, &b1)).round();
        if mu == 0.0 {
            break;
        }
        for (x, y) in b2.iter_mut().zip(&b1) {
            *x -= mu * y;
        }
    }
    (b1, b2)
}

/// Pairwise size reduction until nothing shrinks (a heuristic for `r ≥ 3`).
fn greedy_reduce(mut basis: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for _ in 0..200 {
        let mut changed = false;
        for i in 0..basis.len() {
            for j in 0..basis.len() {
                if i == j {
                    continue;
                }
                let mu = (dot(&basis[i], &basis[j]) / dot(&basis[j], &basis[j])).round();
                if mu != 0.0 {
                    let bj = basis[j].clone();
                    let trial: Vec<f64> = basis[i].iter().zip(&bj).map(|(x, y)| x - mu * y).collect();
                    if dot(&trial, &trial) < dot(&basis[i], &basis[i]) * (1.0 - 1e-12) {
                        basis[i] = trial;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    basis.sort_by(|a, b| dot(a, a).total_cmp(&dot(b, b)));
    basis
}

/// Flip `v` so its first significant component is positive.
fn orient(mut v: Vec<f64>) -> Vec<f64> {
    let scale = linalg::norm(&v);
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-9 * scale) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v
}

/// Reduced basis of the lattice generated by `candidates` (without probing).
pub fn reduce_candidates(candidates: &[Vec<f64>], r: usize) -> Result<Vec<Vec<f64>>, TorusError> {
    let b0 = flows::shortest_independent(candidates, r);
    if b0.len() < r {
        return Err(TorusError::NoSpan { found: b0.len(), needed: r });
    }
    // candidate coordinates in b0 must be rationals with a small denominator
    let mut denom = 1i64;
    let mut coords = Vec::new();
    for v in candidates {
        let x = integer_coords(&b0, v).ok_or(TorusError::NoSpan { found: r - 1, needed: r })?;
        let Some(d) = (1..=MAX_DENOMINATOR).find(|&d| x.iter().all(|c| (c * d as f64 - (c * d as f64).round()).abs() < INTEGER_TOL * d as f64)) else {
            // not commensurate with the others: an inaccurate candidate
            continue;
        };
        denom = denom / gcd(denom, d) * d;
        coords.push(x);
    }
    let mut cols: Vec<Vec<i64>> = (0..r)
        .map(|k| (0..r).map(|i| if i == k { denom } else { 0 }).collect())
        .collect();
    for x in &coords {
        cols.push(x.iter().map(|c| (c * denom as f64).round() as i64).collect());
    }
    let h = integer_basis(cols, r).ok_or(TorusError::NoSpan { found: r - 1, needed: r })?;
    let basis: Vec<Vec<f64>> = h
        .iter()
        .map(|col| {
            (0..r)
                .map(|i| (0..r).map(|k| b0[k][i] * col[k] as f64).sum::<f64>() / denom as f64)
                .collect()
        })
        .collect();
    let reduced = match r {
        1 => basis,
        2 => {
            let (a, b) = gauss_reduce(basis[0].clone(), basis[1].clone());
            vec![a, b]
        }
        _ => greedy_reduce(basis),
    };
    Ok(reduced.into_iter().map(orient).collect())
}

/// Reduce refined return vectors to a basis of the period lattice, probing
/// `v/2` and `v/3` for short vectors the candidates missed.
pub fn lattice_basis(spec: &SystemSpec, m: &[f64], candidates: &[Vec<f64>], cfg: &FlowConfig) -> Result<PeriodLattice, TorusError> {
    let r = spec.r();
    let mut pool: Vec<Vec<f64>> = candidates.to_vec();
    let mut found_by_probe = false;
    let mut basis = reduce_candidates(&pool, r)?;
    for _ in 0..3 {
        let lattice = PeriodLattice {
            base: vec![],
            anchor: vec![],
            basis: basis.clone(),
            defect: 0.0,
            note: None,
        };
        let mut probes = basis.clone();
        for i in 0..r {
            for j in i + 1..r {
                probes.push(basis[i].iter().zip(&basis[j]).map(|(a, b)| a + b).collect());
                probes.push(basis[i].iter().zip(&basis[j]).map(|(a, b)| a - b).collect());
            }
        }
        let mut extra = Vec::new();
        for v in &probes {
            for k in [2.0, 3.0] {
                let guess: Vec<f64> = v.iter().map(|x| x / k).collect();
                if let Ok(found) = refine_period(spec, m, &guess, cfg) {
                    if linalg::norm(&found.period) > 1e-6 && !lattice.contains(&found.period, 1e-4) {
                        extra.push(found.period);
                    }
                }
            }
        }
        if extra.is_empty() {
            break;
        }
        found_by_probe = true;
        pool.extend(extra);
        basis = reduce_candidates(&pool, r)?;
    }
    // polish the reduced vectors against the flow
    let mut defect: f64 = 0.0;
    let mut polished = Vec::with_capacity(r);
    for v in &basis {
        let refined = refine_period(spec, m, v, cfg)?;
        defect = defect.max(refined.defect);
        polished.push(refined.period);
    }
    let distinct = {
        let mut seen: Vec<&Vec<f64>> = Vec::new();
        for c in candidates {
            if !seen.iter().any(|s| linalg::dist(s, c) < 1e-6 * linalg::norm(c).max(1.0)) {
                seen.push(c);
            }
        }
        seen.len()
    };
    let note = if found_by_probe {
        Some("candidates generated a proper sublattice; shorter return vectors were found by probing".into())
    } else if distinct < r + 1 {
        Some(format!(
            "only {distinct} distinct candidates for rank {r}; primitivity checked by half and third probes only"
        ))
    } else {
        None
    };
    Ok(PeriodLattice {
        base: spec.eval_f(m)?,
        anchor: m.to_vec(),
        basis: polished,
        defect,
        note,
    })
}

/// Near-returns at `m`, refined and reduced.
pub fn seed_lattice(spec: &SystemSpec, m: &[f64], cfg: &FlowConfig) -> Result<PeriodLattice, TorusError> {
    let found = flows::find_returns(spec, m, cfg)?;
    let mut refined: Vec<Vec<f64>> = Vec::new();
    for (t, _) in &found.candidates {
        if let Ok(res) = refine_period(spec, m, t, cfg) {
            let p = res.period;
            if linalg::norm(&p) > 1e-6 && !refined.iter().any(|q| linalg::dist(q, &p) < 1e-6) {
                refined.push(p);
            }
        }
    }
    lattice_basis(spec, m, &refined, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::builtin;
    use std::f64::consts::PI;

    #[test]
    fn refine_examples() {
        let cfg = FlowConfig::default();
        let h = builtin("harmonic1d").unwrap();
        let l = refine_period(&h, &[1.0, 0.0], &[6.2], &cfg).unwrap();
        assert!((l.period[0] - 2.0 * PI).abs() < 1e-9, "{l:?}");

        let u = builtin("unitfreq1d").unwrap();
        let l = refine_period(&u, &[1.0, 0.0], &[0.98], &cfg).unwrap();
        assert!((l.period[0] - 1.0).abs() < 1e-10, "{l:?}");

        let o = builtin("oscillator2d").unwrap();
        let l = refine_period(&o, &o.seed, &[6.2, 0.1], &cfg).unwrap();
        assert!(linalg::dist(&l.period, &[2.0 * PI, 0.0]) < 1e-8, "{l:?}");
    }

    #[test]
    fn refine_rejects_non_returns() {
        let h = builtin("harmonic1d").unwrap();
        let err = refine_period(&h, &[1.0, 0.0], &[PI], &FlowConfig::default()).unwrap_err();
        assert!(matches!(err, TorusError::NotAReturn { .. } | TorusError::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn hermite_basis() {
        let b = integer_basis(vec![vec![2, 0], vec![0, 2], vec![1, 1]], 2).unwrap();
        // lattice {(a,b): a ≡ b mod 2} has determinant 2
        assert_eq!((b[0][0] * b[1][1] - b[0][1] * b[1][0]).abs(), 2);
    }

    #[test]
    fn reduction_examples() {
        let tau = 2.0 * PI;
        let b = reduce_candidates(&[vec![tau], vec![2.0 * tau]], 1).unwrap();
        assert!((b[0][0] - tau).abs() < 1e-12);
        let b = reduce_candidates(&[vec![tau, 0.0], vec![0.0, tau], vec![tau, tau]], 2).unwrap();
        let mut sorted = b.clone();
        sorted.sort_by(|a, b| b[0].total_cmp(&a[0]));
        assert!(linalg::dist(&sorted[0], &[tau, 0.0]) < 1e-12);
        assert!(linalg::dist(&sorted[1], &[0.0, tau]) < 1e-12);
        // a skewed basis of the same lattice reduces to the same vectors
        let b = reduce_candidates(&[vec![tau, 3.0 * tau], vec![2.0 * tau, 7.0 * tau]], 2).unwrap();
        let (x, y) = (&b[0], &b[1]);
        assert!((x[0] * y[1] - x[1] * y[0]).abs() - tau * tau < 1e-9);
        assert!(linalg::norm(x) <= tau * (1.0 + 1e-12) && linalg::norm(y) <= tau * (1.0 + 1e-12));
        assert!(matches!(
            reduce_candidates(&[vec![1.0, 1.0], vec![2.0, 2.0]], 2),
            Err(TorusError::NoSpan { .. })
        ));
    }

    #[test]
    fn gauss_condition_holds() {
        let (a, b) = gauss_reduce(vec![5.0, 1.0], vec![9.0, 2.0]);
        let n = |v: &[f64]| linalg::norm(v);
        let plus: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let minus: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y - x).collect();
        assert!(n(&a) <= n(&b) && n(&b) <= n(&plus) && n(&b) <= n(&minus));
    }

    #[test]
    fn seed_lattices() {
        let cfg = FlowConfig::default();
        let h = builtin("harmonic1d").unwrap();
        let lat = seed_lattice(&h, &h.seed, &cfg).unwrap();
        assert!((lat.basis[0][0] - 2.0 * PI).abs() < 1e-8, "{lat:?}");

        let o = builtin("oscillator2d").unwrap();
        let lat = seed_lattice(&o, &o.seed, &cfg).unwrap();
        let tau = 2.0 * PI;
        let det = lat.basis[0][0] * lat.basis[1][1] - lat.basis[0][1] * lat.basis[1][0];
        assert!((det.abs() - tau * tau).abs() < 1e-6, "{lat:?}");
        assert!(lat.contains(&[tau, 0.0], 1e-7) && lat.contains(&[0.0, tau], 1e-7));
    }

    #[test]
    fn probe_finds_primitive_period() {
        let h = builtin("harmonic1d").unwrap();
        let cfg = FlowConfig::default();
        let lat = lattice_basis(&h, &h.seed, &[vec![4.0 * PI]], &cfg).unwrap();
        assert!((lat.basis[0][0] - 2.0 * PI).abs() < 1e-8);
        assert!(lat.note.is_some());
    }
}
