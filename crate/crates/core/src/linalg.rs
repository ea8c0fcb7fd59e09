//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Dimension above which extreme eigenvalues switch from a dense
/// eigensolve to power / inverse iteration.
pub const DENSE_EIG_LIMIT: usize = 2000;

const EIG_TOL: f64 = 1e-10;
const MAX_POWER_ITERS: usize = 100_000;

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let n = m.nrows();
    if n == 0 {
        return (0.0, 0.0);
    }
    if n <= DENSE_EIG_LIMIT {
        let eig = SymmetricEigen::new(m.clone());
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    } else {
        let max = power_iteration(m);
        // shift so that the smallest eigenvalue becomes the dominant one
        let shifted = DMatrix::<f64>::identity(n, n) * max - m;
        let top = power_iteration(&shifted);
        (max - top, max)
    }
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    sym_eig_extremes(m).0
}

pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    sym_eig_extremes(m).1
}

fn power_iteration(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_7).fract());
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..MAX_POWER_ITERS {
        let w = m * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (next - est).abs() <= EIG_TOL * next.abs().max(1.0) {
            return next;
        }
        est = next;
    }
    est
}

/// Squared spectral norm `‖G‖²`, computed on the smaller Gram matrix.
pub fn spectral_norm_sq(g: &DMatrix<f64>) -> f64 {
    if g.nrows() == 0 || g.ncols() == 0 {
        return 0.0;
    }
    let gram = if g.nrows() <= g.ncols() {
        g * g.transpose()
    } else {
        g.transpose() * g
    };
    lambda_max(&gram).max(0.0)
}

pub fn frobenius_sq(g: &DMatrix<f64>) -> f64 {
    g.iter().map(|x| x * x).sum()
}

/// Euclidean norm of the positive part.
pub fn positive_part_norm(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.max(0.0).powi(2)).sum::<f64>().sqrt()
}

pub fn positive_part(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

/// `max_j v_j`, or `-inf` for an empty vector.
pub fn max_entry(v: &DVector<f64>) -> f64 {
    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Symmetric part `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Solve a symmetric positive semidefinite system in the least-squares
/// sense via an eigen-decomposition pseudo-inverse. Returns the
/// minimum-norm solution on the range of `m`.
pub fn psd_pinv_solve(m: &DMatrix<f64>, rhs: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
    let n = m.nrows();
    if n == 0 {
        return DVector::zeros(0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let top = eig.eigenvalues.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
    let cutoff = rel_tol * top.max(f64::MIN_POSITIVE);
    let coeffs = eig.eigenvectors.transpose() * rhs;
    let scaled = DVector::from_iterator(
        n,
        coeffs
            .iter()
            .zip(eig.eigenvalues.iter())
            .map(|(c, l)| if *l > cutoff { c / l } else { 0.0 }),
    );
    &eig.eigenvectors * scaled
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn extremes_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 2.0]));
        let (lo, hi) = sym_eig_extremes(&m);
        assert_relative_eq!(lo, -1.0, epsilon = 1e-12);
        assert_relative_eq!(hi, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn power_iteration_matches_dense() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let dense = lambda_max(&m);
        assert_relative_eq!(power_iteration(&m), dense, epsilon = 1e-8);
    }

    #[test]
    fn spectral_norm_of_row() {
        let g = DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]);
        assert_relative_eq!(spectral_norm_sq(&g), 2.0, epsilon = 1e-12);
        assert_relative_eq!(frobenius_sq(&g), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn pinv_solves_singular_consistent_system() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let rhs = DVector::from_vec(vec![2.0, 2.0]);
        let x = psd_pinv_solve(&m, &rhs, 1e-12);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-12);
    }
}
