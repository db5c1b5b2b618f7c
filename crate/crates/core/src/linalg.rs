//! Small dense linear-algebra helpers shared by the filters.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

/// Ridge added to a matrix whose Cholesky factorisation fails.
pub const RIDGE: f64 = 1e-12;

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest absolute asymmetry `max |A_ij - A_ji|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).amax()
}

/// Symmetrize and clip negative eigenvalues to zero.
pub fn psd_project(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return symmetrize(a);
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&clipped) * v.transpose()))
}

/// Floor the diagonal entries at `floor`.
pub fn floor_diagonal(a: &mut DMatrix<f64>, floor: f64) {
    for i in 0..a.nrows().min(a.ncols()) {
        if a[(i, i)] < floor {
            a[(i, i)] = floor;
        }
    }
}

/// Result of a ridge-protected inversion.
#[derive(Debug, Clone)]
pub struct Inverse {
    pub matrix: DMatrix<f64>,
    /// Set when a ridge had to be added before the factorisation succeeded.
    pub regularized: bool,
}

/// Inverse of a symmetric positive definite matrix through its Cholesky
/// factor. On failure a ridge starting at [`RIDGE`] is added and grown by
/// decades until the factorisation succeeds.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<Inverse> {
    let sym = symmetrize(a);
    if let Some(chol) = sym.clone().cholesky() {
        return Some(Inverse {
            matrix: chol.inverse(),
            regularized: false,
        });
    }
    let scale = sym.diagonal().amax().max(1.0);
    let mut ridge = RIDGE;
    while ridge <= 1e-3 * scale {
        let mut shifted = sym.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += ridge;
        }
        if let Some(chol) = shifted.cholesky() {
            return Some(Inverse {
                matrix: chol.inverse(),
                regularized: true,
            });
        }
        ridge *= 10.0;
    }
    None
}

/// Solve `A x = b` for symmetric positive definite `A`, with the same ridge
/// policy as [`spd_inverse`].
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    spd_inverse(a).map(|inv| inv.matrix * b)
}

/// Skew-symmetric cross-product matrix `[v]ₓ`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn all_finite(v: &DVector<f64>) -> Option<usize> {
    v.iter().position(|x| !x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_projection_clips_negative_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = psd_project(&a);
        assert!(min_eigenvalue(&p) >= -1e-12);
        // eigenvalues 3 and -1 -> only the 3 survives
        assert!((p.trace() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn singular_inverse_is_regularized() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let inv = spd_inverse(&a).unwrap();
        assert!(inv.regularized);
        assert!(inv.matrix.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn skew_matches_cross_product() {
        let a = Vector3::new(0.3, -1.2, 2.0);
        let b = Vector3::new(-0.7, 0.1, 0.5);
        assert!((skew(&a) * b - a.cross(&b)).norm() < 1e-15);
    }
}
