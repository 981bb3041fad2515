use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::straighten::angle_gradients;
use super::{Chart, ChartError};
use crate::flows::joint_flow;
use crate::geometry::fd_step;
use crate::systems::{Kind, SystemSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalTolerances {
    pub theta_p: f64,
    pub p_p: f64,
    pub theta_theta: f64,
    pub casimir: f64,
}

impl Default for CanonicalTolerances {
    fn default() -> Self {
        CanonicalTolerances {
            theta_p: 1e-5,
            p_p: 1e-8,
            theta_theta: 1e-4,
            casimir: 1e-6,
        }
    }
}

/// Worst residual of one family of bracket relations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResidual {
    pub pair: String,
    pub worst: f64,
    pub tolerance: f64,
    /// False for relations reported but not required.
    pub enforced: bool,
    pub passed: bool,
    pub witness: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalReport {
    pub samples: usize,
    pub straightened: bool,
    pub pairs: Vec<PairResidual>,
    pub passed: bool,
}

impl CanonicalReport {
    pub fn pair(&self, name: &str) -> Option<&PairResidual> {
        self.pairs.iter().find(|p| p.pair == name)
    }

    pub fn worst(&self, name: &str) -> f64 {
        self.pair(name).map_or(0.0, |p| p.worst)
    }
}

/// Bracket residuals at one sample point, keyed like the report pairs.
struct Sample {
    point: Vec<f64>,
    theta_p: f64,
    p_p: f64,
    theta_theta: f64,
    p_z: f64,
    theta_z: f64,
    z_z: f64,
}

const FIBER_POINTS: usize = 3;

fn gradient(f: impl Fn(&[f64]) -> Result<Vec<f64>, ChartError>, m: &[f64], outputs: usize) -> Result<Vec<Vec<f64>>, ChartError> {
    let n = m.len();
    let mut grads = vec![vec![0.0; n]; outputs];
    for k in 0..n {
        let h = fd_step(m, k);
        let mut up = m.to_vec();
        let mut down = m.to_vec();
        up[k] += h;
        down[k] -= h;
        let (fu, fd) = (f(&up)?, f(&down)?);
        for i in 0..outputs {
            grads[i][k] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    Ok(grads)
}

fn check_point(spec: &SystemSpec, chart: &Chart, c: &[f64], theta: &[f64], extra: &[Vec<f64>]) -> Result<Sample, ChartError> {
    let r = chart.r();
    let s = chart.section_point(spec, c)?;
    let lambda = chart.field.lambda_at(c)?;
    let on_torus = |th: &[f64]| -> Result<Vec<f64>, ChartError> {
        let t: Vec<f64> = (0..r).map(|j| (0..r).map(|i| th[i] * lambda[(i, j)]).sum()).collect();
        Ok(joint_flow(spec, &t, &s, &chart.flow)?.point)
    };
    let m = on_torus(theta)?;
    let pi = spec.structure.matrix_at(&m)?;
    let dtheta = angle_gradients(spec, chart, &m, theta)?;
    let dp = gradient(|x| chart.actions_of(spec, x), &m, r)?;
    let zs = spec.transverse_indices();
    let grads = spec.gradients();
    let z_grad = |x: &[f64], z: usize| -> Result<Vec<f64>, ChartError> {
        Ok(grads[z].iter().map(|g| g.evaluate(x)).collect::<Result<Vec<_>, _>>()?)
    };
    let dz: Vec<Vec<f64>> = zs.iter().map(|&z| z_grad(&m, z)).collect::<Result<_, _>>()?;

    let mut out = Sample {
        point: m.clone(),
        theta_p: 0.0,
        p_p: 0.0,
        theta_theta: 0.0,
        p_z: 0.0,
        theta_z: 0.0,
        z_z: 0.0,
    };
    for i in 0..r {
        for j in 0..r {
            let delta = if i == j { 1.0 } else { 0.0 };
            out.theta_p = out.theta_p.max((pi.pair(&dtheta[i], &dp[j]) - delta).abs());
            if i < j {
                out.p_p = out.p_p.max(pi.pair(&dp[i], &dp[j]).abs());
                out.theta_theta = out.theta_theta.max(pi.pair(&dtheta[i], &dtheta[j]).abs());
            }
        }
        for g in &dz {
            out.p_z = out.p_z.max(pi.pair(&dp[i], g).abs());
            out.theta_z = out.theta_z.max(pi.pair(&dtheta[i], g).abs());
        }
    }
    let zz_at = |x: &[f64]| -> Result<Vec<f64>, ChartError> {
        let pi = spec.structure.matrix_at(x)?;
        let dz: Vec<Vec<f64>> = zs.iter().map(|&z| z_grad(x, z)).collect::<Result<_, _>>()?;
        let mut v = Vec::new();
        for a in 0..dz.len() {
            for b in a + 1..dz.len() {
                v.push(pi.pair(&dz[a], &dz[b]));
            }
        }
        Ok(v)
    };
    let here = zz_at(&m)?;
    match spec.kind {
        Kind::Commutative => {
            out.z_z = here.iter().fold(0.0, |a, v| a.max(v.abs()));
        }
        Kind::Noncommutative => {
            // {z_k, z_l} need not vanish, but must be constant on the fiber
            for th in extra {
                let other = zz_at(&on_torus(th)?)?;
                for (a, b) in here.iter().zip(&other) {
                    out.z_z = out.z_z.max((a - b).abs());
                }
            }
        }
    }
    Ok(out)
}

/// Largest change of each action base coordinate over one FD stencil at `m`.
fn stencil_reach(spec: &SystemSpec, m: &[f64], r: usize) -> Result<Vec<f64>, ChartError> {
    let j = spec.jacobian_at(m)?;
    Ok((0..r)
        .map(|a| (0..m.len()).map(|k| j[(a, k)].abs() * fd_step(m, k)).fold(0.0, f64::max))
        .collect())
}

/// Distance from `c_a` to the nearest grid line, per non-degenerate axis.
fn clear_of_grid_lines(chart: &Chart, c: &[f64], reach: &[f64]) -> bool {
    let grid = &chart.field.grid;
    (0..grid.dim()).all(|a| {
        if grid.nodes[a] <= 1 {
            return true;
        }
        let h = grid.spacing(a);
        let u = (c[a] - grid.lo[a]) / h;
        let d = (u - u.floor()).min(u.ceil() - u) * h;
        d > 2.0 * reach[a]
    })
}

const MAX_DRAWS: usize = 64;

/// One sample: `c` drawn inside the grid away from its edges, angles
/// uniform, redrawn until the FD stencil stays inside one grid cell (the
/// chart functions are smooth there but only continuous across cells).
fn draw(spec: &SystemSpec, chart: &Chart, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>), ChartError> {
    let r = chart.r();
    let grid = &chart.field.grid;
    let mut last = None;
    for _ in 0..MAX_DRAWS {
        let mut c: Vec<f64> = (0..r)
            .map(|k| {
                if grid.nodes[k] <= 1 {
                    grid.lo[k]
                } else {
                    let span = grid.hi[k] - grid.lo[k];
                    rng.gen_range(grid.lo[k] + 0.1 * span..grid.hi[k] - 0.1 * span)
                }
            })
            .collect();
        c.extend_from_slice(&chart.field.fixed);
        let theta: Vec<f64> = (0..r).map(|_| rng.gen::<f64>()).collect();
        let extra: Vec<Vec<f64>> = (0..FIBER_POINTS).map(|_| (0..r).map(|_| rng.gen::<f64>()).collect()).collect();
        let s = chart.section_point(spec, &c)?;
        let lambda = chart.field.lambda_at(&c)?;
        let t: Vec<f64> = (0..r).map(|j| (0..r).map(|i| theta[i] * lambda[(i, j)]).sum()).collect();
        let m = joint_flow(spec, &t, &s, &chart.flow)?.point;
        let sample = (c, theta, extra);
        if clear_of_grid_lines(chart, &sample.0, &stencil_reach(spec, &m, r)?) {
            return Ok(sample);
        }
        last = Some(sample);
    }
    Ok(last.expect("at least one draw"))
}

/// Check the canonical relations at `samples` points `Φ(Σ θ_i λ_i(c), s(c))`.
/// Each sample has its own generator derived from `seed`, so results do not
/// depend on scheduling.
pub fn verify_canonical(
    spec: &SystemSpec,
    chart: &Chart,
    samples: usize,
    seed: u64,
    tol: &CanonicalTolerances,
) -> Result<CanonicalReport, ChartError> {
    let r = chart.r();
    let results = crate::par::map_indexed(samples, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
        let (c, theta, extra) = draw(spec, chart, &mut rng)?;
        check_point(spec, chart, &c, &theta, &extra)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let commutative = spec.kind == Kind::Commutative;
    let families: [(&str, f64, bool, fn(&Sample) -> f64); 6] = [
        ("theta_p", tol.theta_p, true, |s| s.theta_p),
        ("p_p", tol.p_p, true, |s| s.p_p),
        ("theta_theta", tol.theta_theta, r > 1, |s| s.theta_theta),
        ("p_z", tol.casimir, true, |s| s.p_z),
        ("theta_z", tol.casimir, commutative, |s| s.theta_z),
        ("z_z", tol.casimir, true, |s| s.z_z),
    ];
    let pairs: Vec<PairResidual> = families
        .iter()
        .map(|&(name, tolerance, enforced, get)| {
            let worst_sample = results.iter().max_by(|a, b| get(a).total_cmp(&get(b)));
            let worst = worst_sample.map_or(0.0, get);
            PairResidual {
                pair: name.to_string(),
                worst,
                tolerance,
                enforced,
                passed: !enforced || worst < tolerance,
                witness: worst_sample.map(|s| s.point.clone()),
            }
        })
        .collect();
    let passed = pairs.iter().all(|p| p.passed);
    Ok(CanonicalReport {
        samples,
        straightened: chart.straightened,
        pairs,
        passed,
    })
}
