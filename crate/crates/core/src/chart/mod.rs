//! Action-angle charts: a section of the fibration, actions by line
//! integrals of the period lattice, angles by inverting the torus action,
//! and a numerical check of the canonical bracket relations.

mod actions;
mod angles;
mod straighten;
mod verify;

use thiserror::Error;

use crate::flows::{FlowConfig, FlowError};
use crate::geometry::GeometryError;
use crate::systems::SystemSpec;
use crate::torus::{fmt_f64, project_to_fiber, LatticeField, TorusError};

pub use actions::{
    action_along, action_at, action_gradient_check, action_values, closedness_check, segment_integral, ActionTable,
    ClosednessReport, QUADRATURE_TOL,
};
pub use angles::{angle_near, angle_of, COARSE_SAMPLES};
pub use straighten::{measure_omega, straighten_section, StraightenReport};
pub use verify::{verify_canonical, CanonicalReport, CanonicalTolerances, PairResidual};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ChartError {
    #[error(transparent)]
    Torus(#[from] TorusError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("no torus-action preimage of {point:?} from the section (residual {residual:.3e})")]
    NoPreimage { point: Vec<f64>, residual: f64 },
    #[error("base value {c:?} lies outside the grid")]
    OutOfGrid { c: Vec<f64> },
    #[error("lattice field has failed interior nodes {nodes:?}")]
    FailedNodes { nodes: Vec<usize> },
    #[error("measured angle bracket form is not closed (relative residual {residual:.3e})")]
    NotClosed { residual: f64 },
    #[error("evaluation failed: {0}")]
    Eval(String),
}

impl From<crate::expr::EvalError> for ChartError {
    fn from(e: crate::expr::EvalError) -> Self {
        ChartError::Eval(e.to_string())
    }
}

/// A section point per grid node, a lattice field and the action table.
#[derive(Clone, Debug)]
pub struct Chart {
    pub field: LatticeField,
    pub section: Vec<Vec<f64>>,
    pub actions: ActionTable,
    pub flow: FlowConfig,
    pub straightened: bool,
}

impl Chart {
    /// Section from the continuation anchors, actions anchored at the seed node.
    pub fn build(spec: &SystemSpec, field: LatticeField, flow: &FlowConfig) -> Result<Chart, ChartError> {
        let bad = field.interior_failed();
        if !bad.is_empty() {
            return Err(ChartError::FailedNodes { nodes: bad });
        }
        let section = crate::par::map_indexed(field.grid.len(), |k| {
            let node = &field.nodes[k];
            if !node.is_ok() {
                return Ok(Vec::new());
            }
            project_to_fiber(spec, &node.anchor, &field.base_of(k))
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        let actions = action_values(&field, field.seed_node)?;
        Ok(Chart {
            field,
            section,
            actions,
            flow: flow.clone(),
            straightened: false,
        })
    }

    pub fn r(&self) -> usize {
        self.field.r()
    }

    /// Replace the section points; each must lie on its node's fiber.
    pub fn with_section(&self, spec: &SystemSpec, points: Vec<Vec<f64>>) -> Result<Chart, ChartError> {
        assert_eq!(points.len(), self.field.grid.len(), "one section point per node");
        let section = crate::par::map_indexed(points.len(), |k| {
            if points[k].is_empty() {
                return Ok(Vec::new());
            }
            project_to_fiber(spec, &points[k], &self.field.base_of(k))
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        Ok(Chart { section, ..self.clone() })
    }

    /// Section point over a full base value: multilinear blend of the corner
    /// points, projected onto the fiber.
    pub fn section_point(&self, spec: &SystemSpec, c: &[f64]) -> Result<Vec<f64>, ChartError> {
        let r = self.r();
        let corners = self
            .field
            .grid
            .locate(&c[..r])
            .ok_or_else(|| ChartError::OutOfGrid { c: c.to_vec() })?;
        let mut x = vec![0.0; spec.n()];
        for (k, w) in corners {
            if w == 0.0 {
                continue;
            }
            if self.section[k].is_empty() {
                return Err(ChartError::FailedNodes { nodes: vec![k] });
            }
            for (xi, si) in x.iter_mut().zip(&self.section[k]) {
                *xi += w * si;
            }
        }
        Ok(project_to_fiber(spec, &x, c)?)
    }

    /// Actions at a point of phase space.
    pub fn actions_of(&self, spec: &SystemSpec, m: &[f64]) -> Result<Vec<f64>, ChartError> {
        let c = spec.eval_f(m)?;
        self.actions.at(&self.field, &c)
    }

    /// One row per node: base value, actions, section point.
    pub fn to_csv(&self, spec: &SystemSpec) -> String {
        let r = self.r();
        let mut header: Vec<String> = spec.function_names().iter().map(|n| format!("c_{n}")).collect();
        header.extend((1..=r).map(|i| format!("p_{i}")));
        header.extend(spec.coords().iter().map(|x| format!("s_{x}")));
        let mut out = header.join(",");
        out.push('\n');
        for k in 0..self.field.grid.len() {
            let mut row: Vec<String> = self.field.base_of(k).iter().map(|v| fmt_f64(*v)).collect();
            row.extend(self.actions.values[k].iter().map(|v| fmt_f64(*v)));
            if self.section[k].is_empty() {
                row.extend(std::iter::repeat_n("nan".to_string(), spec.n()));
            } else {
                row.extend(self.section[k].iter().map(|v| fmt_f64(*v)));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::systems::builtin;
    use crate::torus::{continue_lattice, seed_lattice, GridSpec};
    use std::f64::consts::PI;

    fn chart_for(name: &str, grid: GridSpec) -> (SystemSpec, Chart) {
        let spec = builtin(name).unwrap();
        let cfg = FlowConfig::default();
        let seed = seed_lattice(&spec, &spec.seed, &cfg).unwrap();
        let field = continue_lattice(&spec, &grid, &seed, &cfg).unwrap();
        let chart = Chart::build(&spec, field, &cfg).unwrap();
        (spec, chart)
    }

    #[test]
    fn harmonic_actions_and_angles() {
        let (spec, chart) = chart_for("harmonic1d", GridSpec::new(vec![0.5], vec![1.5], vec![11]));
        for k in 0..chart.field.grid.len() {
            let c = chart.field.grid.coords(k)[0];
            assert!((chart.actions.values[k][0] - 2.0 * PI * (c - 0.5)).abs() < 1e-8);
        }
        let theta = 0.3;
        let m = [2f64.sqrt() * (2.0 * PI * theta).cos(), -(2f64.sqrt()) * (2.0 * PI * theta).sin()];
        let a = angle_of(&spec, &chart, &m).unwrap();
        assert!((a[0] - theta).abs() < 1e-9, "{a:?}");
        let p = chart.actions_of(&spec, &m).unwrap();
        assert!((p[0] - PI).abs() < 1e-9);
        let rep = verify_canonical(&spec, &chart, 6, 1, &CanonicalTolerances::default()).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.worst("theta_p") < 1e-6);
        let csv = chart.to_csv(&spec);
        assert!(csv.starts_with("c_H,p_1,s_q,s_p\n"));
    }

    #[test]
    fn angle_is_undefined_off_the_grid() {
        let (spec, chart) = chart_for("harmonic1d", GridSpec::new(vec![0.5], vec![1.5], vec![11]));
        let far = [3.0, 0.0];
        assert!(matches!(angle_of(&spec, &chart, &far), Err(ChartError::OutOfGrid { .. })));
    }

    #[test]
    fn oscillator_straightening_keeps_canonical() {
        let grid = GridSpec::around(&[0.5, 0.5], &[0.02, 0.02], 5);
        let (spec, chart) = chart_for("oscillator2d", grid);
        assert!(closedness_check(&chart.field).max_abs < 1e-9);
        assert!(action_gradient_check(&chart.field, &chart.actions) < 1e-9);
        let (straight, rep) = straighten_section(&spec, &chart).unwrap();
        assert!(rep.after < 1e-4, "{rep:?}");
        let v = verify_canonical(&spec, &straight, 4, 2, &CanonicalTolerances::default()).unwrap();
        assert!(v.passed, "{v:?}");
        let m = straight.section[straight.actions.reference].clone();
        let a = angle_of(&spec, &straight, &m).unwrap();
        assert!(a.iter().all(|t| t.min(1.0 - t) < 1e-9), "{a:?}");
        assert!(linalg::norm(&straight.actions.values[straight.actions.reference]) == 0.0);
    }

    #[test]
    fn so3_chart_respects_casimir() {
        let spec = builtin("so3_rigid_body").unwrap();
        let c = spec.eval_f(&spec.seed).unwrap();
        let grid = GridSpec::around(&c[..1], &GridSpec::default_half_width(&c[..1]), 5);
        let (spec, chart) = chart_for("so3_rigid_body", grid);
        let rep = verify_canonical(&spec, &chart, 4, 3, &CanonicalTolerances::default()).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.worst("theta_z") < 1e-6 && rep.worst("p_z") < 1e-6);
    }

    #[test]
    fn quarter_turn_on_the_unit_circle() {
        let (spec, chart) = chart_for("harmonic1d", GridSpec::new(vec![0.25], vec![0.75], vec![11]));
        assert_eq!(chart.section[chart.field.seed_node], spec.seed);
        let a = angle_of(&spec, &chart, &[0.0, -1.0]).unwrap();
        assert!((a[0] - 0.25).abs() < 1e-9, "{a:?}");
    }

    #[test]
    fn sheared_section_is_straightened() {
        const SHEAR: f64 = 1.0;
        let grid = GridSpec::around(&[0.5, 0.5], &[0.02, 0.02], 5);
        let (spec, chart) = chart_for("oscillator2d", grid);
        let cfg = FlowConfig::default();
        let sheared: Vec<Vec<f64>> = (0..chart.field.grid.len())
            .map(|k| {
                let h2 = chart.field.base_of(k)[1];
                crate::flows::flow_by_index(&spec, 0, &chart.section[k], SHEAR * h2, &cfg).unwrap().point
            })
            .collect();
        let sheared = chart.with_section(&spec, sheared).unwrap();
        let (fixed, rep) = straighten_section(&spec, &sheared).unwrap();
        // θ1 shifts by −κ·H2/(2π) and {θ2, H2} = 1/(2π)
        let expected = SHEAR / (4.0 * PI * PI);
        assert!((rep.before - expected).abs() < 1e-6, "{rep:?}");
        assert!(rep.before > 0.01 && rep.after < 1e-4, "{rep:?}");
        let v = verify_canonical(&spec, &fixed, 4, 5, &CanonicalTolerances::default()).unwrap();
        assert!(v.worst("theta_theta") < 1e-4, "{v:?}");
    }
}
