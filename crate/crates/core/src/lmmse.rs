//! Closed-form affine substitute for an attention sublayer.
//!
//! `W = C_YX · C_XX⁻¹` and `b = E[Y] − W·E[X]`, computed by factorizing the
//! ridged C_XX (plus a couple of refinement passes) rather than inverting it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::activation_io::ActivationMatrix;
use crate::cca::direct_nmse;
use crate::error::{NblError, Result};
use crate::spectral::Regularization;
use crate::stats::CovarianceSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    /// `h_out × h_in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub source_layer: usize,
    /// Direct NMSE of the fit on its own calibration statistics.
    pub fit_nmse: f64,
}

/// Refinement passes after the ridged solve. Each pass multiplies the ridge
/// bias along an eigendirection λ by `ridge/(λ + ridge)`, so well-conditioned
/// directions become exact while near-null ones stay damped.
const REFINEMENT_STEPS: usize = 2;

type Solver = Box<dyn Fn(&DMatrix<f64>) -> Option<DMatrix<f64>>>;

/// Solves `C_XX · Z = rhs` by iterated Tikhonov: factorize `C_XX + ridge·I`
/// once, then refine against the unridged system.
pub(crate) fn solve_regularized(
    c_xx: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    reg: &Regularization,
) -> Result<DMatrix<f64>> {
    let a = reg.ridged(c_xx);
    let solve: Solver = match a.clone().cholesky() {
        Some(chol) => Box::new(move |b| Some(chol.solve(b))),
        None => {
            let lu = a.lu();
            Box::new(move |b| lu.solve(b))
        }
    };
    let singular = || NblError::Degenerate("input covariance is singular after ridge".into());
    let mut z = solve(rhs).ok_or_else(singular)?;
    for _ in 0..REFINEMENT_STEPS {
        let residual = rhs - c_xx * &z;
        z += solve(&residual).ok_or_else(singular)?;
    }
    Ok(z)
}

pub fn fit_lmmse(cs: &CovarianceSet, layer: usize, reg: &Regularization) -> Result<LinearMap> {
    if cs.sample_count < 2 {
        return Err(NblError::InsufficientSamples(cs.sample_count));
    }
    if cs.c_xx.trace().is_nan() || cs.c_xx.trace() <= 0.0 {
        return Err(NblError::Degenerate("input covariance is zero".into()));
    }
    let weight = solve_regularized(&cs.c_xx, &cs.c_yx.transpose(), reg)?.transpose();
    let bias = &cs.mean_y - &weight * &cs.mean_x;
    let fit_nmse = match direct_nmse(cs, reg) {
        Ok(v) => v,
        // Constant output is reproduced exactly by the bias.
        Err(NblError::ZeroOutputVariance) => 0.0,
        Err(e) => return Err(e),
    };
    let map = LinearMap {
        weight,
        bias,
        source_layer: layer,
        fit_nmse,
    };
    if map.weight.iter().chain(map.bias.iter()).any(|v| !v.is_finite()) {
        return Err(NblError::Degenerate("fitted map has non-finite entries".into()));
    }
    Ok(map)
}

impl LinearMap {
    pub fn h_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn h_out(&self) -> usize {
        self.weight.nrows()
    }

    /// `W·X + b` over column-major 64-bit activations.
    pub fn apply_f64(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.h_in() {
            return Err(NblError::DimensionMismatch(format!(
                "map expects {} input features, got {}",
                self.h_in(),
                x.nrows()
            )));
        }
        let mut out = &self.weight * x;
        for mut col in out.column_iter_mut() {
            col += &self.bias;
        }
        Ok(out)
    }

    pub fn apply(&self, x: &ActivationMatrix) -> Result<ActivationMatrix> {
        ActivationMatrix::from_f64(&self.apply_f64(&x.to_f64())?)
    }
}

/// `‖C_YX − W·C_XX‖_F / ‖C_YX‖_F`; zero when the estimation error is
/// uncorrelated with the centered input.
pub fn orthogonality_residual(cs: &CovarianceSet, map: &LinearMap) -> f64 {
    let num = (&cs.c_yx - &map.weight * &cs.c_xx).norm();
    let den = cs.c_yx.norm();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Mean squared error of an arbitrary affine predictor `(W, b)` expressed
/// through the moments: `Tr[C_YY − W·C_XY − C_YX·Wᵀ + W·C_XX·Wᵀ] + ‖E[Y] − W·E[X] − b‖²`.
pub fn affine_mse(cs: &CovarianceSet, weight: &DMatrix<f64>, bias: &DVector<f64>) -> f64 {
    let wc = weight * &cs.c_yx.transpose();
    let quad = (weight * &cs.c_xx * weight.transpose()).trace();
    let centered = cs.c_yy.trace() - 2.0 * wc.trace() + quad;
    let offset = &cs.mean_y - weight * &cs.mean_x - bias;
    centered + offset.norm_squared()
}
