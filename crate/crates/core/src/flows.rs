//! Hamiltonian flows, the joint flow of the first `r` fields, torus tracing
//! and the near-return search that feeds period refinement.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::VectorFieldExpr;
use crate::linalg;
use crate::par;
use crate::systems::SystemSpec;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FlowError {
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("no function named `{0}`")]
    UnknownFunction(String),
    #[error("step limit of {steps} exceeded at t = {t}")]
    StepLimit { steps: usize, t: f64 },
    #[error("integration left the domain at t = {t}, x = {point:?}: {reason}")]
    DomainExit { t: f64, point: Vec<f64>, reason: String },
    #[error("fiber appears non-compact: |x| grew from {initial:.3e} to {reached:.3e} by t = {t:?} with no near-return")]
    NonCompact { initial: f64, reached: f64, t: Vec<f64> },
    #[error("no near-return found for horizons up to {horizon}")]
    NoReturn { horizon: f64 },
}

/// Adaptive step control for the 5(4) integrator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Largest step; `None` means one hundredth of the integration span.
    pub max_step: Option<f64>,
    pub max_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            max_step: None,
            max_steps: 1_000_000,
        }
    }
}

impl FlowConfig {
    pub fn with_tol(tol: f64) -> FlowConfig {
        FlowConfig {
            abs_tol: tol,
            rel_tol: tol,
            ..FlowConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.abs_tol) || !positive(self.rel_tol) {
            return Err(FlowError::Config("tolerances must be positive".into()));
        }
        if self.max_step.is_some_and(|h| !positive(h)) {
            return Err(FlowError::Config("max_step must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(FlowError::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Same configuration with both tolerances multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> FlowConfig {
        FlowConfig {
            abs_tol: self.abs_tol * factor,
            rel_tol: self.rel_tol * factor,
            ..self.clone()
        }
    }

    /// Scale of the conservation budget used by the drift checks.
    pub fn budget(&self) -> f64 {
        self.abs_tol.max(self.rel_tol)
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrator state carried across consecutive output times.
struct Stepper<'a> {
    field: &'a VectorFieldExpr,
    cfg: &'a FlowConfig,
    max_step: f64,
    h: f64,
    err_prev: f64,
    steps: usize,
    k: [Vec<f64>; 7],
    stage: Vec<f64>,
    next: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(field: &'a VectorFieldExpr, cfg: &'a FlowConfig, span: f64) -> Stepper<'a> {
        let n = field.components.len();
        Stepper {
            field,
            cfg,
            max_step: cfg.max_step.unwrap_or(span.abs() / 100.0).max(f64::MIN_POSITIVE),
            h: 0.0,
            err_prev: 1e-4,
            steps: 0,
            k: std::array::from_fn(|_| vec![0.0; n]),
            stage: vec![0.0; n],
            next: vec![0.0; n],
        }
    }

    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<(), FlowError> {
        self.field.evaluate_into(x, out).map_err(|e| FlowError::DomainExit {
            t,
            point: x.to_vec(),
            reason: e.to_string(),
        })?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::DomainExit {
                t,
                point: x.to_vec(),
                reason: "non-finite vector field".into(),
            });
        }
        Ok(())
    }

    fn initial_step(&mut self, x: &[f64], t: f64) -> Result<f64, FlowError> {
        let mut f = std::mem::take(&mut self.k[0]);
        self.eval(x, t, &mut f)?;
        let scale = |i: usize| self.cfg.abs_tol + self.cfg.rel_tol * x[i].abs();
        let n = x.len().max(1) as f64;
        let d0 = (x.iter().enumerate().map(|(i, v)| (v / scale(i)).powi(2)).sum::<f64>() / n).sqrt();
        let d1 = (f.iter().enumerate().map(|(i, v)| (v / scale(i)).powi(2)).sum::<f64>() / n).sqrt();
        self.k[0] = f;
        let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        Ok(h.min(self.max_step))
    }

    /// Advance `x` from `t0` to `t1`, landing exactly on `t1`.
    fn advance(&mut self, x: &mut [f64], t0: f64, t1: f64) -> Result<(), FlowError> {
        if t1 == t0 {
            return Ok(());
        }
        let dir = (t1 - t0).signum();
        if self.h == 0.0 {
            self.h = self.initial_step(x, t0)?;
        }
        let mut t = t0;
        let n = x.len();
        while (t1 - t) * dir > 0.0 {
            if self.steps >= self.cfg.max_steps {
                return Err(FlowError::StepLimit {
                    steps: self.cfg.max_steps,
                    t,
                });
            }
            let remaining = (t1 - t).abs();
            let mut h = self.h.min(self.max_step);
            let last = h >= remaining;
            if last {
                h = remaining;
            }
            let hs = h * dir;
            let mut k0 = std::mem::take(&mut self.k[0]);
            self.eval(x, t, &mut k0)?;
            self.k[0] = k0;
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, a) in A[s][..s].iter().enumerate() {
                        acc += a * self.k[j][i];
                    }
                    self.stage[i] = x[i] + hs * acc;
                }
                let stage = std::mem::take(&mut self.stage);
                let mut ks = std::mem::take(&mut self.k[s]);
                let res = self.eval(&stage, t + C[s] * hs, &mut ks);
                self.stage = stage;
                self.k[s] = ks;
                res?;
            }
            let mut err_sq = 0.0;
            for i in 0..n {
                let mut hi5 = 0.0;
                let mut hi4 = 0.0;
                for s in 0..7 {
                    hi5 += B5[s] * self.k[s][i];
                    hi4 += B4[s] * self.k[s][i];
                }
                self.next[i] = x[i] + hs * hi5;
                let sc = self.cfg.abs_tol + self.cfg.rel_tol * x[i].abs().max(self.next[i].abs());
                err_sq += (hs * (hi5 - hi4) / sc).powi(2);
            }
            let err = (err_sq / n.max(1) as f64).sqrt();
            self.steps += 1;
            if !err.is_finite() {
                self.h = h * 0.2;
            } else if err <= 1.0 {
                x.copy_from_slice(&self.next);
                t = if last { t1 } else { t + hs };
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.7 / 5.0) * self.err_prev.powf(0.4 / 5.0)).clamp(0.2, 5.0)
                };
                self.err_prev = err.max(1e-4);
                // keep the controller's step when the last step was clipped
                if !last || factor < 1.0 {
                    self.h = h * factor;
                }
            } else {
                self.h = h * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            }
            if self.h < 1e-14 * t.abs().max(1.0) && self.h < 1e-3 * self.max_step {
                return Err(FlowError::DomainExit {
                    t,
                    point: x.to_vec(),
                    reason: "step size underflow".into(),
                });
            }
        }
        Ok(())
    }
}

/// Endpoint of a flow with the largest change of any `f_j` along the way.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowResult {
    pub point: Vec<f64>,
    pub drift: f64,
    pub steps: usize,
}

fn drift(spec: &SystemSpec, a: &[f64], b: &[f64]) -> f64 {
    match (spec.eval_f(a), spec.eval_f(b)) {
        (Ok(fa), Ok(fb)) => fa.iter().zip(&fb).fold(0.0_f64, |d, (x, y)| d.max((x - y).abs())),
        _ => f64::NAN,
    }
}

/// Flow of an arbitrary field for time `t`, without the drift bookkeeping.
pub fn integrate_field(field: &VectorFieldExpr, m: &[f64], t: f64, cfg: &FlowConfig) -> Result<(Vec<f64>, usize), FlowError> {
    cfg.validate()?;
    let mut x = m.to_vec();
    let mut stepper = Stepper::new(field, cfg, t);
    stepper.advance(&mut x, 0.0, t)?;
    Ok((x, stepper.steps))
}

/// Flow of `X_{f_j}` for time `t`.
pub fn flow_by_index(spec: &SystemSpec, j: usize, m: &[f64], t: f64, cfg: &FlowConfig) -> Result<FlowResult, FlowError> {
    let (point, steps) = integrate_field(&spec.fields()[j], m, t, cfg)?;
    Ok(FlowResult {
        drift: drift(spec, m, &point),
        point,
        steps,
    })
}

/// Flow of the Hamiltonian field of the function named `h_name`.
pub fn integrate_flow(spec: &SystemSpec, h_name: &str, m: &[f64], t: f64, cfg: &FlowConfig) -> Result<FlowResult, FlowError> {
    let j = spec
        .function_index(h_name)
        .ok_or_else(|| FlowError::UnknownFunction(h_name.to_string()))?;
    flow_by_index(spec, j, m, t, cfg)
}

/// `Φ(t, m) = Φ¹_{t_1} ∘ … ∘ Φʳ_{t_r}(m)`: the last flow acts first.
pub fn joint_flow(spec: &SystemSpec, tvec: &[f64], m: &[f64], cfg: &FlowConfig) -> Result<FlowResult, FlowError> {
    assert_eq!(tvec.len(), spec.r(), "time vector must have r entries");
    cfg.validate()?;
    let mut x = m.to_vec();
    let mut steps = 0;
    for j in (0..spec.r()).rev() {
        if tvec[j] != 0.0 {
            let mut stepper = Stepper::new(&spec.fields()[j], cfg, tvec[j]);
            stepper.advance(&mut x, 0.0, tvec[j])?;
            steps += stepper.steps;
        }
    }
    Ok(FlowResult {
        drift: drift(spec, m, &x),
        point: x,
        steps,
    })
}

/// Box of time vectors searched for returns, minus a ball around 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub exclude_radius: f64,
}

impl Horizon {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, exclude_radius: f64) -> Horizon {
        assert_eq!(lo.len(), hi.len());
        Horizon { lo, hi, exclude_radius }
    }

    /// `[0, t_max]^r` without the ball of radius `exclude_radius`.
    pub fn cube(r: usize, t_max: f64, exclude_radius: f64) -> Horizon {
        Horizon::new(vec![0.0; r], vec![t_max; r], exclude_radius)
    }

    /// `[0, t_max] × [−t_max, t_max]^{r−1}`: half of a symmetric box, enough
    /// to see every lattice vector up to sign.
    pub fn half_space(r: usize, t_max: f64, exclude_radius: f64) -> Horizon {
        let mut lo = vec![-t_max; r];
        lo[0] = 0.0;
        Horizon::new(lo, vec![t_max; r], exclude_radius)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn extent(&self) -> f64 {
        self.lo.iter().zip(&self.hi).fold(0.0_f64, |a, (l, h)| a.max(h - l))
    }
}

/// Result of a grid sweep over the horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearReturns {
    /// Local minima of `|Φ(t,m) − m|` below the threshold, closest first.
    pub candidates: Vec<(Vec<f64>, f64)>,
    /// Bounding-box diagonal of the visited points.
    pub diameter: f64,
    /// Largest `|x|` reached and the time where the escape test tripped.
    pub escape: Option<(f64, Vec<f64>)>,
}

pub const MAX_CANDIDATES: usize = 16;
pub const RETURN_FRACTION: f64 = 0.05;
pub const ESCAPE_FACTOR: f64 = 10.0;

fn grid_axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

struct Line {
    points: Vec<Option<Vec<f64>>>,
    escape: Option<(f64, Vec<f64>)>,
}

/// One sequential sweep of `t_1` from the point `Φ(0, t_2..t_r, m)`.
fn sweep_line(spec: &SystemSpec, outer: &[f64], axis: &[f64], m: &[f64], cfg: &FlowConfig, escape_at: f64) -> Line {
    let mut points = vec![None; axis.len()];
    let mut tvec = vec![0.0; spec.r()];
    tvec[1..].copy_from_slice(outer);
    let start = match joint_flow(spec, &tvec, m, cfg) {
        Ok(res) => res.point,
        Err(_) => {
            return Line {
                points,
                escape: Some((f64::INFINITY, tvec)),
            }
        }
    };
    if linalg::norm(&start) > escape_at {
        tvec[0] = 0.0;
        return Line {
            points,
            escape: Some((linalg::norm(&start), tvec)),
        };
    }
    let span = axis.last().copied().unwrap_or(0.0) - axis[0].min(0.0);
    let local = FlowConfig {
        max_step: Some(cfg.max_step.unwrap_or(span.abs().max(1e-300) / 100.0)),
        ..cfg.clone()
    };
    let mut stepper = Stepper::new(&spec.fields()[0], &local, span);
    let mut x = start;
    let mut t = 0.0;
    for (k, &tk) in axis.iter().enumerate() {
        if let Err(e) = stepper.advance(&mut x, t, tk) {
            let reached = match &e {
                FlowError::DomainExit { point, .. } => linalg::norm(point),
                _ => f64::INFINITY,
            };
            tvec[0] = tk;
            return Line {
                points,
                escape: Some((reached.max(escape_at), tvec)),
            };
        }
        t = tk;
        let norm = linalg::norm(&x);
        if norm > escape_at {
            tvec[0] = tk;
            return Line {
                points,
                escape: Some((norm, tvec)),
            };
        }
        points[k] = Some(x.clone());
    }
    Line { points, escape: None }
}

/// Local minima of `t ↦ |Φ(t,m) − m|` over a regular grid of the horizon.
///
/// The `t_1` axis is swept as one trajectory per combination of the other
/// times; those lines run in parallel.
pub fn near_returns(
    spec: &SystemSpec,
    m: &[f64],
    horizon: &Horizon,
    grid_per_dim: usize,
    cfg: &FlowConfig,
) -> Result<NearReturns, FlowError> {
    cfg.validate()?;
    let r = spec.r();
    assert_eq!(horizon.dim(), r, "horizon must have r dimensions");
    let g = grid_per_dim.max(2);
    let axes: Vec<Vec<f64>> = (0..r).map(|k| grid_axis(horizon.lo[k], horizon.hi[k], g)).collect();
    let outer_count = g.pow(r as u32 - 1);
    let outer_times = |idx: usize| -> Vec<f64> {
        let mut rest = idx;
        (1..r)
            .map(|k| {
                let i = rest % g;
                rest /= g;
                axes[k][i]
            })
            .collect()
    };
    let escape_at = ESCAPE_FACTOR * linalg::norm(m).max(1.0);
    let lines = par::map_indexed(outer_count, |o| sweep_line(spec, &outer_times(o), &axes[0], m, cfg, escape_at));

    // flat index = i_1 + g·(i_2 + g·(…)), matching `outer_times`
    let total = g * outer_count;
    let mut dist = vec![f64::INFINITY; total];
    let mut lo = m.to_vec();
    let mut hi = m.to_vec();
    let mut escape: Option<(f64, Vec<f64>)> = None;
    for (o, line) in lines.iter().enumerate() {
        for (k, p) in line.points.iter().enumerate() {
            if let Some(p) = p {
                dist[o * g + k] = linalg::dist(p, m);
                for (i, v) in p.iter().enumerate() {
                    lo[i] = lo[i].min(*v);
                    hi[i] = hi[i].max(*v);
                }
            }
        }
        if let Some(e) = &line.escape {
            if escape.as_ref().is_none_or(|(_, t)| linalg::norm(&e.1) < linalg::norm(t)) {
                escape = Some(e.clone());
            }
        }
    }
    let diameter = linalg::dist(&lo, &hi);
    let threshold = RETURN_FRACTION * diameter;
    let spacing = (0..r)
        .map(|k| (horizon.hi[k] - horizon.lo[k]) / (g - 1) as f64)
        .fold(0.0_f64, |a, s| a + s * s)
        .sqrt();
    let time_of = |flat: usize| -> (Vec<usize>, Vec<f64>) {
        let mut rest = flat;
        let idx: Vec<usize> = (0..r)
            .map(|_| {
                let i = rest % g;
                rest /= g;
                i
            })
            .collect();
        let t = idx.iter().enumerate().map(|(k, &i)| axes[k][i]).collect();
        (idx, t)
    };
    let mut candidates = Vec::new();
    for flat in 0..total {
        let d = dist[flat];
        if !(d < threshold) {
            continue;
        }
        let (idx, t) = time_of(flat);
        // the trivial return and its immediate neighbourhood
        if linalg::norm(&t) < horizon.exclude_radius + spacing {
            continue;
        }
        if is_local_min(&dist, &idx, g, flat) {
            candidates.push((t, d));
        }
    }
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1));
    candidates.truncate(MAX_CANDIDATES);
    Ok(NearReturns {
        candidates,
        diameter,
        escape,
    })
}

fn is_local_min(dist: &[f64], idx: &[usize], g: usize, flat: usize) -> bool {
    let r = idx.len();
    let d = dist[flat];
    for code in 0..3usize.pow(r as u32) {
        let mut c = code;
        let mut other = 0usize;
        let mut stride = 1usize;
        let mut valid = true;
        let mut same = true;
        for &i in idx {
            let off = (c % 3) as isize - 1;
            c /= 3;
            same &= off == 0;
            let j = i as isize + off;
            if j < 0 || j >= g as isize {
                valid = false;
                break;
            }
            other += j as usize * stride;
            stride *= g;
        }
        if same || !valid {
            continue;
        }
        let e = dist[other];
        if e < d || (e == d && other < flat) {
            return false;
        }
    }
    true
}

/// Points of one traced fiber.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusSample {
    pub base_value: Vec<f64>,
    pub anchor: Vec<f64>,
    /// Time vectors spanning the sampled fundamental domain.
    pub domain: Vec<Vec<f64>>,
    pub samples: Vec<(Vec<f64>, Vec<f64>)>,
    /// Largest `|F(x) − F(anchor)|` over the samples.
    pub drift: f64,
}

/// Largest horizon tried when searching for returns.
pub const MAX_HORIZON: f64 = 640.0;

fn grid_for_rank(r: usize) -> usize {
    match r {
        1 => 400,
        2 => 120,
        _ => 30,
    }
}

/// Near-returns with a horizon doubled from 10 until `r` independent
/// candidates appear, or the orbit escapes.
pub fn find_returns(spec: &SystemSpec, m: &[f64], cfg: &FlowConfig) -> Result<NearReturns, FlowError> {
    let r = spec.r();
    let mut t_max = 10.0;
    loop {
        let horizon = Horizon::half_space(r, t_max, 0.02 * t_max);
        let found = near_returns(spec, m, &horizon, grid_for_rank(r), cfg)?;
        let times: Vec<Vec<f64>> = found.candidates.iter().map(|c| c.0.clone()).collect();
        if shortest_independent(&times, r).len() == r {
            return Ok(found);
        }
        if let Some((reached, t)) = found.escape {
            return Err(FlowError::NonCompact {
                initial: linalg::norm(m),
                reached,
                t,
            });
        }
        if t_max >= MAX_HORIZON {
            return Err(FlowError::NoReturn { horizon: t_max });
        }
        t_max *= 2.0;
    }
}

/// Greedy choice of up to `r` shortest linearly independent vectors.
pub fn shortest_independent(vectors: &[Vec<f64>], r: usize) -> Vec<Vec<f64>> {
    let mut sorted: Vec<&Vec<f64>> = vectors.iter().collect();
    sorted.sort_by(|a, b| linalg::norm(a).total_cmp(&linalg::norm(b)));
    let mut chosen: Vec<Vec<f64>> = Vec::new();
    for v in sorted {
        let mut trial = chosen.clone();
        trial.push(v.clone());
        let mat = nalgebra::DMatrix::from_fn(r, trial.len(), |i, j| trial[j][i]);
        if linalg::rank_with_gap(&mat, 1e-6).0 == trial.len() {
            chosen = trial;
            if chosen.len() == r {
                break;
            }
        }
    }
    chosen
}

/// Sample the fiber through `m` on a regular grid of one fundamental domain,
/// estimated from the shortest independent near-return times.
pub fn trace_torus(spec: &SystemSpec, m: &[f64], samples_per_dim: usize, cfg: &FlowConfig) -> Result<TorusSample, FlowError> {
    let returns = find_returns(spec, m, cfg)?;
    let times: Vec<Vec<f64>> = returns.candidates.iter().map(|c| c.0.clone()).collect();
    let domain = shortest_independent(&times, spec.r());
    trace_domain(spec, m, &domain, samples_per_dim, cfg)
}

/// Sample `Φ(Σ u_k b_k, m)` for `u` on the grid `{0, 1/n, …}^r`.
pub fn trace_domain(
    spec: &SystemSpec,
    m: &[f64],
    domain: &[Vec<f64>],
    samples_per_dim: usize,
    cfg: &FlowConfig,
) -> Result<TorusSample, FlowError> {
    let r = spec.r();
    let n = samples_per_dim.max(1);
    let base_value = spec.eval_f(m).map_err(|e| FlowError::DomainExit {
        t: 0.0,
        point: m.to_vec(),
        reason: e.to_string(),
    })?;
    let results = par::map_indexed(n.pow(r as u32), |flat| {
        let mut rest = flat;
        let mut t = vec![0.0; r];
        for b in domain {
            let u = (rest % n) as f64 / n as f64;
            rest /= n;
            for (i, bi) in b.iter().enumerate() {
                t[i] += u * bi;
            }
        }
        joint_flow(spec, &t, m, cfg).map(|res| (t, res))
    });
    let mut samples = Vec::with_capacity(results.len());
    let mut worst: f64 = 0.0;
    for res in results {
        let (t, flow) = res?;
        worst = worst.max(flow.drift);
        samples.push((t, flow.point));
    }
    Ok(TorusSample {
        base_value,
        anchor: m.to_vec(),
        domain: domain.to_vec(),
        samples,
        drift: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::builtin;
    use std::f64::consts::PI;

    #[test]
    fn harmonic_quarter_and_full_turn() {
        let spec = builtin("harmonic1d").unwrap();
        let cfg = FlowConfig::default();
        let q = integrate_flow(&spec, "H", &[1.0, 0.0], PI / 2.0, &cfg).unwrap();
        assert!(linalg::dist(&q.point, &[0.0, -1.0]) < 1e-8, "{:?}", q.point);
        let f = integrate_flow(&spec, "H", &[1.0, 0.0], 2.0 * PI, &cfg).unwrap();
        assert!(linalg::dist(&f.point, &[1.0, 0.0]) < 1e-8);
        assert!(f.drift < 1e-9);
        let z = integrate_flow(&spec, "H", &[0.3, 0.4], 0.0, &cfg).unwrap();
        assert_eq!(z.point, vec![0.3, 0.4]);
    }

    #[test]
    fn backward_time_inverts() {
        let spec = builtin("so3_rigid_body").unwrap();
        let cfg = FlowConfig::default();
        let fwd = integrate_flow(&spec, "H", &spec.seed, 3.7, &cfg).unwrap();
        let back = integrate_flow(&spec, "H", &fwd.point, -3.7, &cfg).unwrap();
        assert!(linalg::dist(&back.point, &spec.seed) < 1e-9);
    }

    #[test]
    fn oscillator_joint_flow() {
        let spec = builtin("oscillator2d").unwrap();
        let cfg = FlowConfig::default();
        let m = [1.0, 0.0, 1.0, 0.0];
        let full = joint_flow(&spec, &[2.0 * PI, 2.0 * PI], &m, &cfg).unwrap();
        assert!(linalg::dist(&full.point, &m) < 1e-7);
        let half = joint_flow(&spec, &[PI, 0.0], &m, &cfg).unwrap();
        assert!(linalg::dist(&half.point, &[-1.0, 0.0, 1.0, 0.0]) < 1e-7);
        assert_eq!(joint_flow(&spec, &[0.0, 0.0], &m, &cfg).unwrap().point, m.to_vec());
    }

    #[test]
    fn errors() {
        let spec = builtin("harmonic1d").unwrap();
        let cfg = FlowConfig {
            max_steps: 3,
            ..FlowConfig::default()
        };
        assert!(matches!(
            integrate_flow(&spec, "H", &[1.0, 0.0], 100.0, &cfg),
            Err(FlowError::StepLimit { .. })
        ));
        assert!(matches!(
            integrate_flow(&spec, "G", &[1.0, 0.0], 1.0, &FlowConfig::default()),
            Err(FlowError::UnknownFunction(_))
        ));
        let bad = FlowConfig::with_tol(0.0);
        assert!(matches!(bad.validate(), Err(FlowError::Config(_))));
    }

    #[test]
    fn near_returns_examples() {
        let cfg = FlowConfig::default();
        let h = builtin("harmonic1d").unwrap();
        let found = near_returns(&h, &[1.0, 0.0], &Horizon::new(vec![0.1], vec![10.0], 0.1), 400, &cfg).unwrap();
        assert!((found.candidates[0].0[0] - 2.0 * PI).abs() < 0.05, "{found:?}");

        let u = builtin("unitfreq1d").unwrap();
        let found = near_returns(&u, &[1.0, 0.0], &Horizon::new(vec![0.1], vec![3.0], 0.1), 300, &cfg).unwrap();
        let mut ts: Vec<f64> = found.candidates.iter().map(|c| c.0[0]).collect();
        ts.sort_by(f64::total_cmp);
        assert!(ts.iter().any(|t| (t - 1.0).abs() < 0.02), "{ts:?}");
        assert!(ts.iter().any(|t| (t - 2.0).abs() < 0.02), "{ts:?}");

        let o = builtin("oscillator2d").unwrap();
        let found = near_returns(&o, &o.seed, &Horizon::cube(2, 10.0, 0.1), 101, &cfg).unwrap();
        for target in [[2.0 * PI, 0.0], [0.0, 2.0 * PI], [2.0 * PI, 2.0 * PI]] {
            assert!(
                found.candidates.iter().any(|c| linalg::dist(&c.0, &target) < 0.15),
                "{target:?} missing from {:?}",
                found.candidates
            );
        }
    }

    #[test]
    fn trace_examples() {
        let cfg = FlowConfig::default();
        let h = builtin("harmonic1d").unwrap();
        let torus = trace_torus(&h, &[1.0, 0.0], 64, &cfg).unwrap();
        assert_eq!(torus.samples.len(), 64);
        assert!(torus.drift < 1e-9);
        for (_, p) in &torus.samples {
            assert!((p[0] * p[0] + p[1] * p[1] - 1.0).abs() < 1e-9);
        }

        let so3 = builtin("so3_rigid_body").unwrap();
        let torus = trace_torus(&so3, &so3.seed, 64, &cfg).unwrap();
        let c0 = so3.eval_f(&so3.seed).unwrap()[1];
        for (_, p) in &torus.samples {
            assert!((so3.eval_f(p).unwrap()[1] - c0).abs() < 1e-8);
        }

        let cjl = builtin("cjl_counterexample").unwrap();
        assert!(matches!(
            trace_torus(&cjl, &cjl.seed, 8, &cfg),
            Err(FlowError::NonCompact { .. })
        ));
    }
}
