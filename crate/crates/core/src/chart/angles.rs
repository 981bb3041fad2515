use nalgebra::{DMatrix, DVector};

use super::{Chart, ChartError};
use crate::flows::{joint_flow, FlowConfig};
use crate::linalg;
use crate::systems::SystemSpec;

/// Coarse samples per angle before Newton takes over.
pub const COARSE_SAMPLES: usize = 16;
const MAX_ITER: usize = 40;
const CONVERGED: f64 = 1e-12;
const ACCEPT: f64 = 1e-8;

/// `Φ(Σ_i θ_i λ_i, s)`.
fn torus_point(spec: &SystemSpec, lambda: &DMatrix<f64>, s: &[f64], theta: &[f64], cfg: &FlowConfig) -> Result<Vec<f64>, ChartError> {
    let r = theta.len();
    let t: Vec<f64> = (0..r).map(|j| (0..r).map(|i| theta[i] * lambda[(i, j)]).sum()).collect();
    Ok(joint_flow(spec, &t, s, cfg)?.point)
}

/// Gauss-Newton on `Φ(Σ θ_i λ_i, s) − m`; returns the unwrapped angles and
/// the final residual.
fn solve(
    spec: &SystemSpec,
    lambda: &DMatrix<f64>,
    s: &[f64],
    m: &[f64],
    guess: &[f64],
    cfg: &FlowConfig,
) -> Result<(Vec<f64>, f64), ChartError> {
    let r = guess.len();
    let scale = linalg::norm(m).max(1.0);
    let mut theta = guess.to_vec();
    let mut x = torus_point(spec, lambda, s, &theta, cfg)?;
    let mut d = linalg::dist(&x, m);
    for _ in 0..MAX_ITER {
        if d <= CONVERGED * scale {
            break;
        }
        let j = spec.action_fields_at(&x)? * lambda.transpose();
        let res = DVector::from_iterator(m.len(), m.iter().zip(&x).map(|(a, b)| a - b));
        let Some(step) = linalg::lstsq(&j, &res) else { break };
        // a quarter turn is the most one step may move
        let len = step.amax();
        let shrink = if len > 0.25 { 0.25 / len } else { 1.0 };
        let mut alpha = shrink;
        let mut improved = false;
        for _ in 0..10 {
            let trial: Vec<f64> = (0..r).map(|i| theta[i] + alpha * step[i]).collect();
            let xt = torus_point(spec, lambda, s, &trial, cfg)?;
            let dt = linalg::dist(&xt, m);
            if dt < d {
                theta = trial;
                x = xt;
                d = dt;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok((theta, d))
}

fn frame(spec: &SystemSpec, chart: &Chart, m: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>), ChartError> {
    let c = spec.eval_f(m)?;
    let s = chart.section_point(spec, &c)?;
    let lambda = chart.field.lambda_at(&c)?;
    Ok((s, lambda))
}

/// Angles of `m` starting Newton from `guess`, without wrapping.
pub fn angle_near(spec: &SystemSpec, chart: &Chart, m: &[f64], guess: &[f64]) -> Result<Vec<f64>, ChartError> {
    let (s, lambda) = frame(spec, chart, m)?;
    let (theta, d) = solve(spec, &lambda, &s, m, guess, &chart.flow)?;
    if d > ACCEPT * linalg::norm(m).max(1.0) {
        return Err(ChartError::NoPreimage {
            point: m.to_vec(),
            residual: d,
        });
    }
    Ok(theta)
}

/// Angles of `m` in `[0, 1)^r`.
pub fn angle_of(spec: &SystemSpec, chart: &Chart, m: &[f64]) -> Result<Vec<f64>, ChartError> {
    let r = chart.r();
    let (s, lambda) = frame(spec, chart, m)?;
    let coarse_cfg = FlowConfig {
        abs_tol: 1e-7,
        rel_tol: 1e-7,
        ..chart.flow.clone()
    };
    let total = COARSE_SAMPLES.pow(r as u32);
    let samples: Vec<(Vec<f64>, f64)> = crate::par::map_indexed(total, |k| {
        let mut rest = k;
        let theta: Vec<f64> = (0..r)
            .map(|_| {
                let i = rest % COARSE_SAMPLES;
                rest /= COARSE_SAMPLES;
                i as f64 / COARSE_SAMPLES as f64
            })
            .collect();
        let d = torus_point(spec, &lambda, &s, &theta, &coarse_cfg)
            .map(|x| linalg::dist(&x, m))
            .unwrap_or(f64::INFINITY);
        (theta, d)
    });
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| samples[a].1.total_cmp(&samples[b].1).then(a.cmp(&b)));
    let mut best = f64::INFINITY;
    for &k in order.iter().take(4) {
        let (theta, d) = solve(spec, &lambda, &s, m, &samples[k].0, &chart.flow)?;
        best = best.min(d);
        if d <= ACCEPT * linalg::norm(m).max(1.0) {
            return Ok(theta.into_iter().map(wrap).collect());
        }
    }
    Err(ChartError::NoPreimage {
        point: m.to_vec(),
        residual: best,
    })
}

fn wrap(x: f64) -> f64 {
    let w = x.rem_euclid(1.0);
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}
