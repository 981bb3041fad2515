//! Dense helpers on top of nalgebra's SVD.

use nalgebra::{DMatrix, DVector};

/// Singular values in descending order.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Numerical rank: singular values above `rel_tol * max(1, sigma_max)`.
/// Also returns the ratio between the last kept and first dropped singular
/// value (infinite when nothing is dropped or nothing kept).
pub fn rank_with_gap(a: &DMatrix<f64>, rel_tol: f64) -> (usize, f64, Vec<f64>) {
    let s = singular_values(a);
    let scale = s.first().copied().unwrap_or(0.0).max(1.0);
    let rank = s.iter().filter(|&&v| v > rel_tol * scale).count();
    let gap = match (rank.checked_sub(1).and_then(|k| s.get(k)), s.get(rank)) {
        (Some(&kept), Some(&dropped)) if dropped > 0.0 => kept / dropped,
        _ => f64::INFINITY,
    };
    (rank, gap, s)
}

/// Orthonormal basis of the null space of `a` (columns of the result).
pub fn null_space(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.ncols();
    // pad to at least n rows so the SVD returns a full right basis
    let rows = a.nrows().max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let scale = svd.singular_values.iter().copied().fold(0.0f64, f64::max).max(1.0);
    let cols: Vec<DVector<f64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= rel_tol * scale)
        .map(|(k, _)| v_t.row(k).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Orthonormal basis of the column span of `a`.
pub fn column_basis(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    if a.ncols() == 0 {
        return DMatrix::zeros(n, 0);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("requested u");
    let scale = svd.singular_values.iter().copied().fold(0.0f64, f64::max).max(1.0);
    let cols: Vec<DVector<f64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > rel_tol * scale)
        .map(|(k, _)| u.column(k).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Sine of the largest principal angle between two subspaces given by
/// orthonormal column bases; 1 when the dimensions differ.
pub fn subspace_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() != b.ncols() {
        return 1.0;
    }
    if a.ncols() == 0 {
        return 0.0;
    }
    let residual = a - b * (b.transpose() * a);
    singular_values(&residual).first().copied().unwrap_or(0.0).min(1.0)
}

/// Minimum-norm least-squares solution of `a x = b`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let scale = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    if scale == 0.0 {
        return None;
    }
    svd.solve(b, 1e-13 * scale).ok()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_space_of_wide_matrix() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let ns = null_space(&a, 1e-12);
        assert_eq!(ns.ncols(), 2);
        assert!((a * ns).norm() < 1e-14);
    }

    #[test]
    fn rank_and_gap() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-12]);
        let (rank, gap, _) = rank_with_gap(&a, 1e-9);
        assert_eq!(rank, 1);
        assert!(gap > 1e11);
    }

    #[test]
    fn subspace_distance_detects_tilt() {
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let t = 0.1f64;
        let b = DMatrix::from_column_slice(2, 1, &[t.cos(), t.sin()]);
        assert!((subspace_distance(&a, &b) - t.sin()).abs() < 1e-14);
        assert_eq!(subspace_distance(&a, &a), 0.0);
    }
}
