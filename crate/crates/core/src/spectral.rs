//! Symmetric eigendecomposition, regularized inverse square roots and
//! singular values. Decompositions are delegated to nalgebra; this module
//! fixes ordering, input checks and the regularization policy.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{NblError, Result};

const MAX_ITERATIONS: usize = 10_000;

/// Regularization shared by every inversion and whitening step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    /// Ridge added to C_XX, relative to `trace / dim`.
    pub ridge_rel: f64,
    /// Eigenvalue floor relative to the largest eigenvalue.
    pub floor_rel: f64,
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization {
            ridge_rel: 1e-8,
            floor_rel: 1e-10,
        }
    }
}

impl Regularization {
    /// `m + ridge_rel · (trace(m) / dim) · I`.
    pub fn ridged(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let dim = m.nrows();
        if dim == 0 {
            return m.clone();
        }
        let lambda = self.ridge_rel * m.trace() / dim as f64;
        let mut out = m.clone();
        for i in 0..dim {
            out[(i, i)] += lambda;
        }
        out
    }
}

/// Eigenvalues ascending, eigenvectors as orthonormal columns.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenPair {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = &self.vectors * DMatrix::from_diagonal(&self.values);
        scaled * self.vectors.transpose()
    }
}

pub fn sym_eig(m: &DMatrix<f64>) -> Result<EigenPair> {
    if !m.is_square() {
        return Err(NblError::DimensionMismatch(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.norm().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).norm() > 1e-8 * scale {
        return Err(NblError::InvalidArgument("matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, MAX_ITERATIONS)
        .ok_or(NblError::ConvergenceFailure("symmetric eigendecomposition"))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_columns(
        &order.iter().map(|&i| eig.eigenvectors.column(i)).collect::<Vec<_>>(),
    );
    Ok(EigenPair { values, vectors })
}

/// `V · diag(max(λ, floor_rel·λ_max)^(-1/2)) · Vᵀ`.
pub fn inv_sqrt_psd(m: &DMatrix<f64>, floor_rel: f64) -> Result<DMatrix<f64>> {
    if floor_rel.is_nan() || floor_rel <= 0.0 {
        return Err(NblError::InvalidArgument(format!("floor_rel must be positive, got {floor_rel}")));
    }
    let eig = sym_eig(m)?;
    let lambda_max = eig.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lambda_max.is_nan() || lambda_max <= 0.0 {
        return Err(NblError::Degenerate("largest eigenvalue is not positive".into()));
    }
    let floor = floor_rel * lambda_max;
    let inv = eig.values.map(|l| l.max(floor).powf(-0.5));
    let scaled = &eig.vectors * DMatrix::from_diagonal(&inv);
    let out = scaled * eig.vectors.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Singular values, descending, `min(rows, cols)` of them.
pub fn singular_values(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    let svd = SVD::try_new(m.clone(), false, false, f64::EPSILON, MAX_ITERATIONS)
        .ok_or(NblError::ConvergenceFailure("singular value decomposition"))?;
    let mut values: Vec<f64> = svd.singular_values.iter().map(|s| s.abs()).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(DVector::from_vec(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_spd(dim: usize, seed: u64) -> DMatrix<f64> {
        let a = random(dim, dim, seed);
        &a * a.transpose() + DMatrix::identity(dim, dim) * 0.5
    }

    #[test]
    fn identity_eigenvalues() {
        let e = sym_eig(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(e.values.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_eigenpairs() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 1.0, 4.0]));
        let e = sym_eig(&m).unwrap();
        assert_eq!(e.values.as_slice(), &[1.0, 4.0, 9.0]);
        // Columns are a signed permutation of the identity.
        for (col, want) in [(0, 1), (1, 2), (2, 0)] {
            assert!((e.vectors[(want, col)].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        let a = random(8, 8, 11);
        let m = (&a + a.transpose()) * 0.5;
        let e = sym_eig(&m).unwrap();
        assert!((e.reconstruct() - &m).norm() <= 1e-8 * m.norm());
        let gram = e.vectors.transpose() * &e.vectors;
        assert!((gram - DMatrix::identity(8, 8)).norm() <= 1e-8 * 8f64.sqrt());
        assert!(e.values.as_slice().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn eig_rejects_bad_input() {
        assert!(matches!(sym_eig(&DMatrix::zeros(2, 3)), Err(NblError::DimensionMismatch(_))));
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(sym_eig(&m).is_err());
    }

    #[test]
    fn inv_sqrt_identity_and_diagonal() {
        let id = inv_sqrt_psd(&DMatrix::identity(4, 4), 1e-10).unwrap();
        assert!((id - DMatrix::identity(4, 4)).norm() < 1e-14);
        let d = inv_sqrt_psd(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0])), 1e-10).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0 / 3.0]));
        assert!((d - want).norm() < 1e-14);
    }

    #[test]
    fn inv_sqrt_whitens_spd() {
        let m = random_spd(6, 5);
        let r = inv_sqrt_psd(&m, 1e-10).unwrap();
        assert_eq!(r, r.transpose());
        let w = &r * &m * &r;
        assert!((w - DMatrix::identity(6, 6)).norm() <= 1e-6 * 6f64.sqrt());
    }

    #[test]
    fn inv_sqrt_errors() {
        assert!(matches!(inv_sqrt_psd(&DMatrix::zeros(3, 3), 1e-10), Err(NblError::Degenerate(_))));
        assert!(inv_sqrt_psd(&DMatrix::identity(2, 2), 0.0).is_err());
    }

    #[test]
    fn floor_is_monotone() {
        // Rank-deficient PSD: raising the floor can only shrink the largest
        // eigenvalue of the inverse square root.
        let a = random(5, 2, 9);
        let m = &a * a.transpose();
        let mut prev = f64::INFINITY;
        for floor in [1e-12, 1e-10, 1e-6, 1e-3, 1e-1] {
            let r = inv_sqrt_psd(&m, floor).unwrap();
            let top = sym_eig(&r).unwrap().values[4];
            assert!(top <= prev * (1.0 + 1e-9));
            prev = top;
        }
    }

    #[test]
    fn singular_value_cases() {
        assert!(singular_values(&DMatrix::zeros(3, 2)).unwrap().iter().all(|&s| s == 0.0));
        let d = singular_values(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0])).unwrap();
        assert!((d[0] - 3.0).abs() < 1e-14 && (d[1] - 1.0).abs() < 1e-14);
        let m = random(5, 7, 3);
        let s = singular_values(&m).unwrap();
        assert_eq!(s.len(), 5);
        let frob = m.norm_squared();
        assert!((s.norm_squared() - frob).abs() <= 1e-8 * frob);
        assert!(s.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn ridge_scales_with_trace() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let r = Regularization { ridge_rel: 0.5, floor_rel: 1e-10 }.ridged(&m);
        assert_eq!(r, DMatrix::from_diagonal(&DVector::from_vec(vec![3.5, 5.5])));
    }
}
