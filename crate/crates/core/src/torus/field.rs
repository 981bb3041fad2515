use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{refine_period, GridSpec, PeriodLattice, TorusError};
use crate::flows::{joint_flow, FlowConfig};
use crate::geometry::lie_derivative_bivector;
use crate::linalg;
use crate::par;
use crate::systems::SystemSpec;

/// Largest relative change of a basis vector between adjacent nodes.
pub const JUMP_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NodeStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeNode {
    /// Full base value `c ∈ R^s`.
    pub c: Vec<f64>,
    /// Point on the fiber over `c`, continued from the parent's anchor.
    pub anchor: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub defect: f64,
    pub status: NodeStatus,
    pub parent: Option<usize>,
}

impl LatticeNode {
    pub fn is_ok(&self) -> bool {
        self.status == NodeStatus::Ok
    }
}

/// Period lattices over a grid of base values, consistently labelled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeField {
    pub grid: GridSpec,
    /// Values of `f_{r+1}..f_s`, held fixed over the grid.
    pub fixed: Vec<f64>,
    pub seed_node: usize,
    pub nodes: Vec<LatticeNode>,
    pub note: Option<String>,
}

impl LatticeField {
    pub fn r(&self) -> usize {
        self.grid.dim()
    }

    /// Full base value of a grid node.
    pub fn base_of(&self, flat: usize) -> Vec<f64> {
        let mut c = self.grid.coords(flat);
        c.extend_from_slice(&self.fixed);
        c
    }

    pub fn failed(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&k| !self.nodes[k].is_ok()).collect()
    }

    pub fn interior_failed(&self) -> Vec<usize> {
        self.failed().into_iter().filter(|&k| self.grid.is_interior(k)).collect()
    }

    /// `Λ(node)` with rows `λ_i`.
    pub fn lambda_node(&self, flat: usize) -> DMatrix<f64> {
        let r = self.r();
        let b = &self.nodes[flat].basis;
        DMatrix::from_fn(r, r, |i, j| b[i][j])
    }

    /// Multilinear interpolation of `Λ` at the first `r` base coordinates.
    pub fn lambda_at(&self, c: &[f64]) -> Result<DMatrix<f64>, TorusError> {
        let r = self.r();
        let corners = self.grid.locate(&c[..r]).ok_or_else(|| TorusError::OutOfGrid { c: c.to_vec() })?;
        let bad: Vec<usize> = corners
            .iter()
            .filter(|(k, w)| *w != 0.0 && !self.nodes[*k].is_ok())
            .map(|(k, _)| *k)
            .collect();
        if !bad.is_empty() {
            return Err(TorusError::FailedNodes { nodes: bad });
        }
        let mut out = DMatrix::zeros(r, r);
        for (k, w) in corners {
            if w != 0.0 {
                out += self.lambda_node(k) * w;
            }
        }
        Ok(out)
    }

    /// One row per node: base coordinates, `λ_i^j`, defect, status.
    pub fn to_csv(&self, base_names: &[String]) -> String {
        let r = self.r();
        let mut out = String::new();
        let mut header: Vec<String> = base_names.iter().map(|n| format!("c_{n}")).collect();
        for i in 0..r {
            for j in 0..r {
                header.push(format!("lambda_{}_{}", i + 1, j + 1));
            }
        }
        header.push("defect".into());
        header.push("status".into());
        out.push_str(&header.join(","));
        out.push('\n');
        for (k, node) in self.nodes.iter().enumerate() {
            let mut row: Vec<String> = self.base_of(k).iter().map(|v| fmt_f64(*v)).collect();
            for i in 0..r {
                for j in 0..r {
                    row.push(node.basis.get(i).map_or("nan".into(), |b| fmt_f64(b[j])));
                }
            }
            row.push(fmt_f64(node.defect));
            row.push(match &node.status {
                NodeStatus::Ok => "ok".into(),
                NodeStatus::Failed(_) => "failed".into(),
            });
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Fixed 17-significant-digit formatting used by every table.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Gauss-Newton onto `F(x) = c`, stepping along the row space of `dF`.
pub fn project_to_fiber(spec: &SystemSpec, x0: &[f64], c: &[f64]) -> Result<Vec<f64>, TorusError> {
    let scale = linalg::norm(c).max(1.0);
    let residual = |x: &[f64]| -> Result<Vec<f64>, TorusError> {
        Ok(spec.eval_f(x)?.iter().zip(c).map(|(a, b)| a - b).collect())
    };
    let mut x = x0.to_vec();
    let mut res = residual(&x)?;
    let mut d = linalg::norm(&res);
    for _ in 0..60 {
        if d <= 1e-13 * scale {
            break;
        }
        let j = spec.jacobian_at(&x)?;
        let jjt = &j * j.transpose();
        let y = linalg::lstsq(&jjt, &DVector::from_column_slice(&res)).ok_or_else(|| TorusError::Projection {
            c: c.to_vec(),
            residual: d,
        })?;
        let step = j.transpose() * y;
        // backtrack if the full step overshoots
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a - alpha * s).collect();
            if let Ok(r) = residual(&trial) {
                let dt = linalg::norm(&r);
                if dt < d {
                    x = trial;
                    res = r;
                    d = dt;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if d > 1e-10 * scale {
        return Err(TorusError::Projection {
            c: c.to_vec(),
            residual: d,
        });
    }
    Ok(x)
}

/// Continue the seed lattice breadth-first over the grid.
pub fn continue_lattice(
    spec: &SystemSpec,
    grid: &GridSpec,
    seed: &PeriodLattice,
    cfg: &FlowConfig,
) -> Result<LatticeField, TorusError> {
    let r = spec.r();
    assert_eq!(grid.dim(), r, "grid must span the first r base coordinates");
    let seed_node = grid
        .node_at(&seed.base[..r])
        .ok_or_else(|| TorusError::SeedNotOnGrid { c: seed.base.clone() })?;
    let fixed = seed.base[r..].to_vec();
    let placeholder = |k: usize| LatticeNode {
        c: {
            let mut c = grid.coords(k);
            c.extend_from_slice(&fixed);
            c
        },
        anchor: vec![],
        basis: vec![],
        defect: f64::NAN,
        status: NodeStatus::Failed("not reached".into()),
        parent: None,
    };
    let mut nodes: Vec<LatticeNode> = (0..grid.len()).map(placeholder).collect();
    nodes[seed_node] = LatticeNode {
        c: seed.base.clone(),
        anchor: seed.anchor.clone(),
        basis: seed.basis.clone(),
        defect: seed.defect,
        status: NodeStatus::Ok,
        parent: None,
    };
    for layer in grid.bfs_layers(seed_node).into_iter().skip(1) {
        let snapshot = &nodes;
        let computed = par::map_slice(&layer, |&k| continue_node(spec, grid, snapshot, k, cfg));
        for (k, node) in layer.into_iter().zip(computed) {
            nodes[k] = node;
        }
    }
    Ok(LatticeField {
        grid: grid.clone(),
        fixed,
        seed_node,
        nodes,
        note: seed.note.clone(),
    })
}

fn continue_node(spec: &SystemSpec, grid: &GridSpec, nodes: &[LatticeNode], k: usize, cfg: &FlowConfig) -> LatticeNode {
    let mut node = nodes[k].clone();
    let Some(parent) = grid.neighbors(k).into_iter().find(|&p| nodes[p].is_ok()) else {
        node.status = NodeStatus::Failed("no converged neighbour".into());
        return node;
    };
    node.parent = Some(parent);
    let from = &nodes[parent];
    let anchor = match project_to_fiber(spec, &from.anchor, &node.c) {
        Ok(a) => a,
        Err(e) => {
            node.status = NodeStatus::Failed(e.to_string());
            return node;
        }
    };
    let mut basis = Vec::with_capacity(from.basis.len());
    let mut defect: f64 = 0.0;
    for old in &from.basis {
        match refine_period(spec, &anchor, old, cfg) {
            Ok(res) => {
                let jump = linalg::dist(&res.period, old);
                if jump > JUMP_FRACTION * linalg::norm(old) {
                    node.status = NodeStatus::Failed(format!("basis jumped by {jump:.3e}"));
                    return node;
                }
                defect = defect.max(res.defect);
                basis.push(res.period);
            }
            Err(e) => {
                node.status = NodeStatus::Failed(e.to_string());
                return node;
            }
        }
    }
    node.anchor = anchor;
    node.basis = basis;
    node.defect = defect;
    node.status = NodeStatus::Ok;
    node
}

/// `Y_i(m) = Σ_j λ_i^j(F(m)) X_{f_j}(m)`.
pub fn uniformized_field_at(spec: &SystemSpec, field: &LatticeField, m: &[f64], i: usize) -> Result<Vec<f64>, TorusError> {
    let c = spec.eval_f(m)?;
    let lambda = field.lambda_at(&c)?;
    let x = spec.action_fields_at(m)?;
    let y = x * lambda.row(i).transpose();
    Ok(y.iter().copied().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusActionReport {
    pub point: Vec<f64>,
    /// `|Φ(λ_i(F(m)), m) − m|` per slot.
    pub defects: Vec<f64>,
    /// Largest entry of `[Y_i, Π]` per slot.
    pub poisson_residuals: Vec<f64>,
}

impl TorusActionReport {
    pub fn max_defect(&self) -> f64 {
        self.defects.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_poisson_residual(&self) -> f64 {
        self.poisson_residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// Flow each `Y_i` for unit time (coefficients frozen along the fiber) and
/// measure how far it is from preserving `Π`.
pub fn check_torus_action(
    spec: &SystemSpec,
    field: &LatticeField,
    m: &[f64],
    cfg: &FlowConfig,
) -> Result<TorusActionReport, TorusError> {
    let r = spec.r();
    let lambda = field.lambda_at(&spec.eval_f(m)?)?;
    let mut defects = Vec::with_capacity(r);
    let mut poisson_residuals = Vec::with_capacity(r);
    for i in 0..r {
        let t: Vec<f64> = lambda.row(i).iter().copied().collect();
        let end = joint_flow(spec, &t, m, cfg)?.point;
        defects.push(linalg::dist(&end, m));
        let lie = lie_derivative_bivector(|x: &[f64]| uniformized_field_at(spec, field, x, i), &spec.structure, m, None)?;
        poisson_residuals.push(lie.max_abs());
    }
    Ok(TorusActionReport {
        point: m.to_vec(),
        defects,
        poisson_residuals,
    })
}
