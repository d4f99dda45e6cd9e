//! Canonical correlations and the linearization error measures built on them.
//!
//! For an (X, Y) pair with covariances C_XX, C_YY and C_YX the canonical
//! correlations are the singular values of the whitened cross-covariance
//! `C_W = C_YY^{-1/2} · C_YX · C_XX^{-1/2}`. The normalized error of the best
//! affine predictor of Y from X is bounded by
//!
//! ```text
//! NMSE ≤ (h_out − r) + Σ_{i≤r} (1 − ρ_i²),   r = min(h_in, h_out)
//! ```
//!
//! and equals `Tr[C_YY − C_YX·C_XX⁻¹·C_XY] / Tr(C_YY)` exactly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::activation_io::ActivationMatrix;
use crate::error::{NblError, Result};
use crate::lmmse::solve_regularized;
use crate::spectral::{inv_sqrt_psd, singular_values, Regularization};
use crate::stats::CovarianceSet;

/// Canonical correlations, descending and clamped into [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcaSpectrum {
    pub rho: Vec<f64>,
    pub h_in: usize,
    pub h_out: usize,
}

impl CcaSpectrum {
    pub fn rank(&self) -> usize {
        self.h_in.min(self.h_out)
    }
}

pub fn standardized_cross_correlation(cs: &CovarianceSet, reg: &Regularization) -> Result<DMatrix<f64>> {
    if cs.h_in() == 0 || cs.h_out() == 0 {
        return Err(NblError::DimensionMismatch("empty covariance set".into()));
    }
    let whiten_y = inv_sqrt_psd(&cs.c_yy, reg.floor_rel)
        .map_err(|e| degenerate_as("output", e))?;
    let whiten_x = inv_sqrt_psd(&diagonal_ridge(&cs.c_xx, reg), reg.floor_rel)
        .map_err(|e| degenerate_as("input", e))?;
    Ok(whiten_y * &cs.c_yx * whiten_x)
}

/// The shared ridge taken in correlation units: `C_XX + ridge_rel·diag(C_XX)`.
/// Rescaling X by a positive diagonal D maps this to `D·(…)·D`, so the
/// canonical correlations do not move. Constant features get the plain ridge.
fn diagonal_ridge(c_xx: &DMatrix<f64>, reg: &Regularization) -> DMatrix<f64> {
    let fallback = reg.ridge_rel * c_xx.trace() / c_xx.nrows() as f64;
    let mut out = c_xx.clone();
    for i in 0..out.nrows() {
        let v = out[(i, i)];
        out[(i, i)] += if v > 0.0 { reg.ridge_rel * v } else { fallback };
    }
    out
}

fn degenerate_as(which: &str, e: NblError) -> NblError {
    match e {
        NblError::Degenerate(msg) => NblError::Degenerate(format!("{which} covariance: {msg}")),
        other => other,
    }
}

pub fn canonical_correlations(cw: &DMatrix<f64>) -> Result<CcaSpectrum> {
    let sigma = singular_values(cw)?;
    let mut rho: Vec<f64> = sigma.iter().map(|s| s.clamp(0.0, 1.0)).collect();
    rho.sort_by(|a, b| b.total_cmp(a));
    Ok(CcaSpectrum {
        rho,
        h_in: cw.ncols(),
        h_out: cw.nrows(),
    })
}

/// `(h_out − r) + Σ (1 − ρ_i²)`.
pub fn cca_nmse_bound(spec: &CcaSpectrum) -> f64 {
    let r = spec.rank();
    let unmatched = (spec.h_out - r) as f64;
    let modes: f64 = spec.rho.iter().take(r).map(|p| 1.0 - p * p).sum();
    // Missing entries (rho shorter than r) count as uncorrelated modes.
    let missing = r.saturating_sub(spec.rho.len()) as f64;
    (unmatched + modes + missing).clamp(0.0, spec.h_out as f64)
}

/// Spectrum and bound in one call.
pub fn cca_bound_for(cs: &CovarianceSet, reg: &Regularization) -> Result<(CcaSpectrum, f64)> {
    let cw = standardized_cross_correlation(cs, reg)?;
    let spec = canonical_correlations(&cw)?;
    let bound = cca_nmse_bound(&spec);
    Ok((spec, bound))
}

/// Exact NMSE of the LMMSE predictor from the trace formula.
pub fn direct_nmse(cs: &CovarianceSet, reg: &Regularization) -> Result<f64> {
    let total = cs.c_yy.trace();
    if total.is_nan() || total <= 0.0 {
        return Err(NblError::ZeroOutputVariance);
    }
    if cs.c_xx.trace().is_nan() || cs.c_xx.trace() <= 0.0 {
        // Constant input explains nothing.
        return Ok(1.0);
    }
    let z = solve_regularized(&cs.c_xx, &cs.c_yx.transpose(), reg)?;
    let explained = (&cs.c_yx * z).trace();
    Ok(((total - explained) / total).max(0.0))
}

/// Streaming `1 − mean_t cos(x_t, x_t + y_t)` over token columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CosineAccumulator {
    sum_cos: f64,
    counted: u64,
    skipped: u64,
}

impl CosineAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, x: &ActivationMatrix, y: &ActivationMatrix) -> Result<()> {
        if x.rows() != y.rows() || x.cols() != y.cols() {
            return Err(NblError::DimensionMismatch(format!(
                "cosine score needs equal shapes, got {}x{} and {}x{}",
                x.rows(),
                x.cols(),
                y.rows(),
                y.cols()
            )));
        }
        for (xc, yc) in x.as_matrix().column_iter().zip(y.as_matrix().column_iter()) {
            let (mut dot, mut nx, mut ns) = (0.0f64, 0.0f64, 0.0f64);
            for (&a, &b) in xc.iter().zip(yc.iter()) {
                let (a, s) = (a as f64, a as f64 + b as f64);
                dot += a * s;
                nx += a * a;
                ns += s * s;
            }
            if nx == 0.0 || ns == 0.0 {
                self.skipped += 1;
                continue;
            }
            self.sum_cos += (dot / (nx.sqrt() * ns.sqrt())).clamp(-1.0, 1.0);
            self.counted += 1;
        }
        Ok(())
    }

    pub fn merge_from(&mut self, other: &CosineAccumulator) {
        self.sum_cos += other.sum_cos;
        self.counted += other.counted;
        self.skipped += other.skipped;
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn counted(&self) -> u64 {
        self.counted
    }

    pub fn score(&self) -> Result<f64> {
        if self.counted == 0 {
            return Err(NblError::AllTokensSkipped);
        }
        Ok((1.0 - self.sum_cos / self.counted as f64).clamp(0.0, 2.0))
    }
}

/// Cosine distance between block input and residual output, averaged over tokens.
pub fn cosine_distance_score(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    let mut acc = CosineAccumulator::new();
    acc.update(x, y)?;
    acc.score()
}
