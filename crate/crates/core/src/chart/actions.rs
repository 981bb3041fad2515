use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::ChartError;
use crate::torus::{GridSpec, LatticeField};

const GL_ORDER: usize = 32;

/// Gauss-Legendre nodes and weights on `[0, 1]`.
fn gauss_legendre() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_ORDER;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            // Newton on P_n from the Chebyshev-like initial guess
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            out.push(((1.0 - x) / 2.0, w / 2.0));
        }
        out
    })
}

/// Parameters in `(0, 1)` where the segment `c0 → c1` crosses grid lines.
fn breakpoints(grid: &GridSpec, c0: &[f64], c1: &[f64]) -> Vec<f64> {
    let mut ts = vec![0.0, 1.0];
    for k in 0..grid.dim() {
        let d = c1[k] - c0[k];
        if grid.nodes[k] <= 1 || d == 0.0 {
            continue;
        }
        for i in 0..grid.nodes[k] {
            let t = (grid.axis_value(k, i) - c0[k]) / d;
            if t > 1e-14 && t < 1.0 - 1e-14 {
                ts.push(t);
            }
        }
    }
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    ts
}

/// `∫₀¹ f(t) dt` with composite Gauss-Legendre on the given pieces,
/// doubling the panels per piece until two passes agree within `tol`.
fn integrate<F>(pieces: &[f64], dim: usize, f: F, tol: f64) -> Result<Vec<f64>, ChartError>
where
    F: Fn(f64) -> Result<Vec<f64>, ChartError>,
{
    let rule = gauss_legendre();
    let pass = |panels: usize| -> Result<Vec<f64>, ChartError> {
        let mut acc = vec![0.0; dim];
        for w in pieces.windows(2) {
            let (a, b) = (w[0], w[1]);
            let h = (b - a) / panels as f64;
            for p in 0..panels {
                let lo = a + h * p as f64;
                for &(x, wt) in rule {
                    let v = f(lo + h * x)?;
                    for (s, vi) in acc.iter_mut().zip(&v) {
                        *s += h * wt * vi;
                    }
                }
            }
        }
        Ok(acc)
    };
    let mut prev = pass(1)?;
    for level in 1..=6 {
        let next = pass(1 << level)?;
        let change = prev.iter().zip(&next).fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        prev = next;
        if change < tol {
            break;
        }
    }
    Ok(prev)
}

pub const QUADRATURE_TOL: f64 = 1e-10;

/// `∫₀¹ g(c0 + t(c1 − c0)) dt` over the first `r` base coordinates,
/// split at grid lines.
pub fn segment_integral<G>(grid: &GridSpec, c0: &[f64], c1: &[f64], dim: usize, g: G) -> Result<Vec<f64>, ChartError>
where
    G: Fn(&[f64], f64) -> Result<Vec<f64>, ChartError>,
{
    let r = grid.dim();
    let pieces = breakpoints(grid, c0, c1);
    integrate(
        &pieces,
        dim,
        |t| {
            let c: Vec<f64> = (0..r).map(|k| c0[k] + t * (c1[k] - c0[k])).collect();
            g(&c, t)
        },
        QUADRATURE_TOL,
    )
}

/// `p_i(c) = ∫₀¹ Σ_j λ_i^j(c0 + t(c − c0)) (c_j − c0_j) dt`.
pub fn action_at(field: &LatticeField, c0: &[f64], c: &[f64]) -> Result<Vec<f64>, ChartError> {
    let r = field.r();
    if grid_outside(&field.grid, c) || grid_outside(&field.grid, c0) {
        return Err(ChartError::OutOfGrid { c: c[..r].to_vec() });
    }
    let dc: Vec<f64> = (0..r).map(|j| c[j] - c0[j]).collect();
    if dc.iter().all(|d| *d == 0.0) {
        return Ok(vec![0.0; r]);
    }
    segment_integral(&field.grid, c0, c, r, |x, _| {
        let lam = field.lambda_at(x)?;
        Ok((0..r).map(|i| (0..r).map(|j| lam[(i, j)] * dc[j]).sum()).collect())
    })
}

/// Actions along a polyline of base points.
pub fn action_along(field: &LatticeField, path: &[Vec<f64>]) -> Result<Vec<f64>, ChartError> {
    let r = field.r();
    let mut total = vec![0.0; r];
    for w in path.windows(2) {
        let piece = action_at(field, &w[0], &w[1])?;
        for (t, p) in total.iter_mut().zip(piece) {
            *t += p;
        }
    }
    Ok(total)
}

fn grid_outside(grid: &GridSpec, c: &[f64]) -> bool {
    grid.locate(&c[..grid.dim()]).is_none()
}

/// Action values on every grid node, anchored at a reference node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionTable {
    pub reference: usize,
    pub c0: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl ActionTable {
    /// Actions at an arbitrary base value (by line integral, not interpolation).
    pub fn at(&self, field: &LatticeField, c: &[f64]) -> Result<Vec<f64>, ChartError> {
        action_at(field, &self.c0, c)
    }
}

pub fn action_values(field: &LatticeField, reference: usize) -> Result<ActionTable, ChartError> {
    let bad = field.interior_failed();
    if !bad.is_empty() {
        return Err(ChartError::FailedNodes { nodes: bad });
    }
    let c0 = field.grid.coords(reference);
    let values = crate::par::map_indexed(field.grid.len(), |k| action_at(field, &c0, &field.grid.coords(k)))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ActionTable { reference, c0, values })
}

/// Antisymmetrized centred differences of `λ_i^j` at interior nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosednessReport {
    pub max_abs: f64,
    /// Largest of `|∂λ_i^j/∂c_k|` and `|λ_i^j| / |c|`; the second term keeps
    /// a constant lattice from being measured against its own roundoff.
    pub scale: f64,
    pub relative: f64,
    pub worst_node: Option<usize>,
    pub nodes_checked: usize,
}

pub fn closedness_check(field: &LatticeField) -> ClosednessReport {
    let grid = &field.grid;
    let r = field.r();
    let mut report = ClosednessReport {
        max_abs: 0.0,
        scale: 0.0,
        relative: 0.0,
        worst_node: None,
        nodes_checked: 0,
    };
    for k in 0..grid.len() {
        if !grid.is_interior(k) || !field.nodes[k].is_ok() {
            continue;
        }
        let idx = grid.multi(k);
        // d[a] = ∂Λ/∂c_a; None on degenerate axes
        let mut d = Vec::with_capacity(r);
        let mut usable = true;
        for a in 0..r {
            if grid.nodes[a] <= 1 {
                d.push(None);
                continue;
            }
            let (mut up, mut down) = (idx.clone(), idx.clone());
            up[a] += 1;
            down[a] -= 1;
            let (u, w) = (grid.flat(&up), grid.flat(&down));
            if !field.nodes[u].is_ok() || !field.nodes[w].is_ok() {
                usable = false;
                break;
            }
            d.push(Some((field.lambda_node(u) - field.lambda_node(w)) / (2.0 * grid.spacing(a))));
        }
        if !usable {
            continue;
        }
        report.nodes_checked += 1;
        for da in d.iter().flatten() {
            report.scale = report.scale.max(da.amax());
        }
        for i in 0..r {
            for j in 0..r {
                for a in 0..r {
                    if let (Some(dj), Some(da)) = (&d[a], &d[j]) {
                        // ∂λ_i^j/∂c_a − ∂λ_i^a/∂c_j
                        let v = (dj[(i, j)] - da[(i, a)]).abs();
                        if v > report.max_abs {
                            report.max_abs = v;
                            report.worst_node = Some(k);
                        }
                    }
                }
            }
        }
    }
    let reach = (0..r).map(|a| grid.lo[a].abs().max(grid.hi[a].abs())).fold(0.0, f64::max);
    if reach > 0.0 {
        let size = (0..grid.len())
            .filter(|&k| field.nodes[k].is_ok())
            .map(|k| field.lambda_node(k).amax())
            .fold(0.0, f64::max);
        report.scale = report.scale.max(size / reach);
    }
    report.relative = if report.scale > 0.0 { report.max_abs / report.scale } else { 0.0 };
    report
}

/// Largest relative gap between centred differences of the action table
/// and `λ_i^j` at interior nodes.
pub fn action_gradient_check(field: &LatticeField, table: &ActionTable) -> f64 {
    let grid = &field.grid;
    let r = field.r();
    let mut worst: f64 = 0.0;
    for k in 0..grid.len() {
        if !grid.is_interior(k) {
            continue;
        }
        let idx = grid.multi(k);
        let lam = field.lambda_node(k);
        for a in 0..r {
            if grid.nodes[a] <= 1 {
                continue;
            }
            let (mut up, mut down) = (idx.clone(), idx.clone());
            up[a] += 1;
            down[a] -= 1;
            let (u, w) = (grid.flat(&up), grid.flat(&down));
            for i in 0..r {
                let fd = (table.values[u][i] - table.values[w][i]) / (2.0 * grid.spacing(a));
                let scale = lam.amax().max(f64::MIN_POSITIVE);
                worst = worst.max((fd - lam[(i, a)]).abs() / scale);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let rule = gauss_legendre();
        let total: f64 = rule.iter().map(|w| w.1).sum();
        assert!((total - 1.0).abs() < 1e-14);
        // exact through degree 63
        let m: f64 = rule.iter().map(|(x, w)| w * x.powi(63)).sum();
        assert!((m - 1.0 / 64.0).abs() < 1e-14);
        let s: f64 = rule.iter().map(|(x, w)| w * (std::f64::consts::PI * x).sin()).sum();
        assert!((s - 2.0 / std::f64::consts::PI).abs() < 1e-14);
    }

    #[test]
    fn breakpoints_hit_grid_lines() {
        let g = GridSpec::new(vec![0.0], vec![1.0], vec![5]);
        let b = breakpoints(&g, &[0.1], &[0.9]);
        assert_eq!(b.len(), 5);
        assert!((b[1] - 0.15 / 0.8).abs() < 1e-12);
    }
}
