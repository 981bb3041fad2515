use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{angle_near, segment_integral, Chart, ChartError};
use crate::flows::joint_flow;
use crate::geometry::fd_step;
use crate::systems::SystemSpec;

/// Largest `|{θ_i, θ_j}|` on the node fibers before and after.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StraightenReport {
    pub before: f64,
    pub after: f64,
    /// Relative residual of the exterior derivative of the measured form.
    pub closedness: f64,
}

/// Finite-difference gradient of the angles at `m`, Newton seeded at `guess`.
pub(crate) fn angle_gradients(spec: &SystemSpec, chart: &Chart, m: &[f64], guess: &[f64]) -> Result<Vec<Vec<f64>>, ChartError> {
    let (n, r) = (spec.n(), chart.r());
    let mut grads = vec![vec![0.0; n]; r];
    for k in 0..n {
        let h = fd_step(m, k);
        let mut up = m.to_vec();
        let mut down = m.to_vec();
        up[k] += h;
        down[k] -= h;
        let tu = angle_near(spec, chart, &up, guess)?;
        let td = angle_near(spec, chart, &down, guess)?;
        for i in 0..r {
            grads[i][k] = (tu[i] - td[i]) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// `{θ_i, θ_j}` on each node fiber, averaged over the section point and a
/// second point half way round every cycle. One `r × r` matrix per node;
/// boundary nodes take the value of the nearest interior node, since their
/// FD stencils would leave the grid.
pub fn measure_omega(spec: &SystemSpec, chart: &Chart) -> Result<Vec<DMatrix<f64>>, ChartError> {
    let grid = &chart.field.grid;
    let source = |k: usize| -> usize {
        let idx: Vec<usize> = grid
            .multi(k)
            .iter()
            .zip(&grid.nodes)
            .map(|(&i, &n)| if n >= 3 { i.clamp(1, n - 2) } else { i })
            .collect();
        grid.flat(&idx)
    };
    let measured: Vec<Option<Result<DMatrix<f64>, ChartError>>> = crate::par::map_indexed(grid.len(), |k| {
        (source(k) == k).then(|| omega_at_node(spec, chart, k))
    });
    (0..grid.len())
        .map(|k| measured[source(k)].clone().expect("interior nodes are measured"))
        .collect()
}

fn omega_at_node(spec: &SystemSpec, chart: &Chart, k: usize) -> Result<DMatrix<f64>, ChartError> {
    let r = chart.r();
    {
        let s = &chart.section[k];
        let lambda = chart.field.lambda_node(k);
        let half = vec![0.5; r];
        let t: Vec<f64> = (0..r).map(|j| (0..r).map(|i| 0.5 * lambda[(i, j)]).sum()).collect();
        let other = joint_flow(spec, &t, s, &chart.flow)?.point;
        let mut omega = DMatrix::zeros(r, r);
        for (m, guess) in [(s.clone(), vec![0.0; r]), (other, half)] {
            let g = angle_gradients(spec, chart, &m, &guess)?;
            let pi = spec.structure.matrix_at(&m)?;
            for i in 0..r {
                for j in 0..r {
                    omega[(i, j)] += 0.5 * pi.pair(&g[i], &g[j]);
                }
            }
        }
        Ok(omega)
    }
}

fn max_offdiag(omegas: &[DMatrix<f64>]) -> f64 {
    omegas.iter().map(|w| w.amax()).fold(0.0, f64::max)
}

/// `Ω̃_kl = Σ_ij ω_ij λ_i^k λ_j^l` at each node.
fn base_form(chart: &Chart, omegas: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    (0..omegas.len())
        .map(|k| {
            let lambda = chart.field.lambda_node(k);
            lambda.transpose() * &omegas[k] * lambda
        })
        .collect()
}

fn interpolate(chart: &Chart, nodes: &[DMatrix<f64>], c: &[f64]) -> Result<DMatrix<f64>, ChartError> {
    let r = chart.r();
    let corners = chart
        .field
        .grid
        .locate(c)
        .ok_or_else(|| ChartError::OutOfGrid { c: c.to_vec() })?;
    let mut out = DMatrix::zeros(r, r);
    for (k, w) in corners {
        if w != 0.0 {
            out += &nodes[k] * w;
        }
    }
    Ok(out)
}

/// Relative size of `∂_a Ω̃_bc + ∂_b Ω̃_ca + ∂_c Ω̃_ab` at interior nodes.
fn closedness(chart: &Chart, forms: &[DMatrix<f64>]) -> f64 {
    let grid = &chart.field.grid;
    let r = chart.r();
    if r < 3 {
        return 0.0;
    }
    let (mut worst, mut scale) = (0.0_f64, 0.0_f64);
    for k in 0..grid.len() {
        if !grid.is_interior(k) {
            continue;
        }
        let idx = grid.multi(k);
        let d: Vec<Option<DMatrix<f64>>> = (0..r)
            .map(|a| {
                (grid.nodes[a] > 1).then(|| {
                    let (mut up, mut down) = (idx.clone(), idx.clone());
                    up[a] += 1;
                    down[a] -= 1;
                    (&forms[grid.flat(&up)] - &forms[grid.flat(&down)]) / (2.0 * grid.spacing(a))
                })
            })
            .collect();
        let part = |a: usize, b: usize, c: usize| d[a].as_ref().map_or(0.0, |m| m[(b, c)]);
        for a in 0..r {
            for b in 0..r {
                for c in 0..r {
                    scale = scale.max(part(a, b, c).abs());
                    worst = worst.max((part(a, b, c) + part(b, c, a) + part(c, a, b)).abs());
                }
            }
        }
    }
    if scale > 0.0 {
        worst / scale
    } else {
        0.0
    }
}

const CLOSEDNESS_LIMIT: f64 = 0.05;

/// Shift the section along the torus action so that the angles commute.
pub fn straighten_section(spec: &SystemSpec, chart: &Chart) -> Result<(Chart, StraightenReport), ChartError> {
    let r = chart.r();
    if r == 1 {
        let mut out = chart.clone();
        out.straightened = true;
        return Ok((
            out,
            StraightenReport {
                before: 0.0,
                after: 0.0,
                closedness: 0.0,
            },
        ));
    }
    let bad = chart.field.failed();
    if !bad.is_empty() {
        return Err(ChartError::FailedNodes { nodes: bad });
    }
    let omegas = measure_omega(spec, chart)?;
    let before = max_offdiag(&omegas);
    let forms = base_form(chart, &omegas);
    let closed = closedness(chart, &forms);
    if closed > CLOSEDNESS_LIMIT {
        return Err(ChartError::NotClosed { residual: closed });
    }
    let grid = &chart.field.grid;
    let c0 = grid.coords(chart.actions.reference);
    let points = crate::par::map_indexed(grid.len(), |k| {
        let c = grid.coords(k);
        let dc: Vec<f64> = (0..r).map(|a| c[a] - c0[a]).collect();
        // homotopy primitive α̃_l = ∫ t Σ_k Ω̃_kl(c0 + t dc) dc_k dt
        let alpha = segment_integral(grid, &c0, &c, r, |x, t| {
            let w = interpolate(chart, &forms, x)?;
            Ok((0..r).map(|l| t * (0..r).map(|a| w[(a, l)] * dc[a]).sum::<f64>()).collect())
        })?;
        let lambda = chart.field.lambda_node(k);
        let g = lambda
            .transpose()
            .lu()
            .solve(&DVector::from_vec(alpha))
            .ok_or_else(|| ChartError::Eval("singular period matrix".into()))?;
        let t: Vec<f64> = (0..r).map(|j| (0..r).map(|i| g[i] * lambda[(i, j)]).sum()).collect();
        Ok(joint_flow(spec, &t, &chart.section[k], &chart.flow)?.point)
    })
    .into_iter()
    .collect::<Result<Vec<_>, ChartError>>()?;
    let mut out = chart.with_section(spec, points)?;
    out.straightened = true;
    let after = max_offdiag(&measure_omega(spec, &out)?);
    Ok((
        out,
        StraightenReport {
            before,
            after,
            closedness: closed,
        },
    ))
}
