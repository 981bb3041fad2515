use serde::{Deserialize, Serialize};

/// Rectangular grid over the first `r` base coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
}

/// Fraction of a cell width by which lookups may extrapolate past the hull.
pub const EDGE_SLACK: f64 = 0.01;

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, nodes: Vec<usize>) -> GridSpec {
        assert!(lo.len() == hi.len() && lo.len() == nodes.len(), "grid dimensions disagree");
        assert!(nodes.iter().all(|&k| k >= 1), "every axis needs a node");
        GridSpec { lo, hi, nodes }
    }

    /// `nodes` points per axis centred on `center` with the given half widths.
    pub fn around(center: &[f64], half_width: &[f64], nodes: usize) -> GridSpec {
        let nodes = if nodes > 1 && nodes % 2 == 0 { nodes + 1 } else { nodes.max(1) };
        let (lo, hi) = center
            .iter()
            .zip(half_width)
            .map(|(c, h)| if nodes == 1 { (*c, *c) } else { (c - h, c + h) })
            .unzip();
        GridSpec::new(lo, hi, vec![nodes; center.len()])
    }

    /// Default half width: 1% of `|c|`, floored at 1e-4 near zero.
    pub fn default_half_width(center: &[f64]) -> Vec<f64> {
        center.iter().map(|c| 0.01 * c.abs().max(0.01)).collect()
    }

    pub fn single(point: &[f64]) -> GridSpec {
        GridSpec::new(point.to_vec(), point.to_vec(), vec![1; point.len()])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, k: usize) -> f64 {
        if self.nodes[k] <= 1 {
            0.0
        } else {
            (self.hi[k] - self.lo[k]) / (self.nodes[k] - 1) as f64
        }
    }

    pub fn axis_value(&self, k: usize, i: usize) -> f64 {
        if self.nodes[k] <= 1 {
            self.lo[k]
        } else if i + 1 == self.nodes[k] {
            self.hi[k]
        } else {
            self.lo[k] + self.spacing(k) * i as f64
        }
    }

    /// Multi-index of a flat index; axis 0 varies fastest.
    pub fn multi(&self, flat: usize) -> Vec<usize> {
        let mut rest = flat;
        self.nodes
            .iter()
            .map(|&n| {
                let i = rest % n;
                rest /= n;
                i
            })
            .collect()
    }

    pub fn flat(&self, multi: &[usize]) -> usize {
        let mut flat = 0;
        let mut stride = 1;
        for (k, &i) in multi.iter().enumerate() {
            flat += i * stride;
            stride *= self.nodes[k];
        }
        flat
    }

    pub fn coords(&self, flat: usize) -> Vec<f64> {
        self.multi(flat)
            .iter()
            .enumerate()
            .map(|(k, &i)| self.axis_value(k, i))
            .collect()
    }

    /// Axis neighbours, in increasing flat index.
    pub fn neighbors(&self, flat: usize) -> Vec<usize> {
        let idx = self.multi(flat);
        let mut out = Vec::new();
        for k in 0..self.dim() {
            for d in [-1isize, 1] {
                let j = idx[k] as isize + d;
                if j >= 0 && (j as usize) < self.nodes[k] {
                    let mut m = idx.clone();
                    m[k] = j as usize;
                    out.push(self.flat(&m));
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// True when no axis index sits on the boundary of a non-degenerate axis.
    pub fn is_interior(&self, flat: usize) -> bool {
        self.multi(flat)
            .iter()
            .enumerate()
            .all(|(k, &i)| self.nodes[k] == 1 || (i > 0 && i + 1 < self.nodes[k]))
    }

    /// Node whose coordinates equal `c` up to a relative tolerance.
    pub fn node_at(&self, c: &[f64]) -> Option<usize> {
        let mut idx = Vec::with_capacity(self.dim());
        for k in 0..self.dim() {
            let tol = 1e-9 * c[k].abs().max(1.0);
            let i = if self.nodes[k] <= 1 {
                0
            } else {
                ((c[k] - self.lo[k]) / self.spacing(k)).round().clamp(0.0, (self.nodes[k] - 1) as f64) as usize
            };
            if (self.axis_value(k, i) - c[k]).abs() > tol {
                return None;
            }
            idx.push(i);
        }
        Some(self.flat(&idx))
    }

    /// Cell corners and multilinear weights for `c`. Degenerate axes accept
    /// any value (constant extension); other axes allow a small slack.
    pub fn locate(&self, c: &[f64]) -> Option<Vec<(usize, f64)>> {
        let mut base = Vec::with_capacity(self.dim());
        let mut frac = Vec::with_capacity(self.dim());
        for k in 0..self.dim() {
            if self.nodes[k] <= 1 {
                base.push(0);
                frac.push(0.0);
                continue;
            }
            let h = self.spacing(k);
            let u = (c[k] - self.lo[k]) / h;
            let last = (self.nodes[k] - 1) as f64;
            if !(u >= -EDGE_SLACK && u <= last + EDGE_SLACK) {
                return None;
            }
            let i = u.floor().clamp(0.0, last - 1.0);
            base.push(i as usize);
            frac.push(u - i);
        }
        let r = self.dim();
        let mut out = Vec::with_capacity(1 << r);
        for corner in 0..(1usize << r) {
            let mut idx = base.clone();
            let mut w = 1.0;
            let mut skip = false;
            for k in 0..r {
                let up = (corner >> k) & 1 == 1;
                if self.nodes[k] <= 1 {
                    if up {
                        skip = true;
                        break;
                    }
                    continue;
                }
                if up {
                    idx[k] += 1;
                    w *= frac[k];
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            if !skip {
                out.push((self.flat(&idx), w));
            }
        }
        Some(out)
    }

    /// Breadth-first layers of flat indices starting at `start`.
    pub fn bfs_layers(&self, start: usize) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.len()];
        seen[start] = true;
        let mut layers = vec![vec![start]];
        loop {
            let mut next = Vec::new();
            for &v in layers.last().expect("nonempty") {
                for w in self.neighbors(v) {
                    if !seen[w] {
                        seen[w] = true;
                        next.push(w);
                    }
                }
            }
            if next.is_empty() {
                return layers;
            }
            next.sort_unstable();
            layers.push(next);
        }
    }
}
