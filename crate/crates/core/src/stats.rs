//! Streaming first and second moments of paired activations.
//!
//! Raw sums are kept in f64 and turned into unbiased covariances only at
//! [`MomentAccumulator::finalize`]. Accumulators merge by addition, so each
//! worker can own one and the results are combined at the end.

use nalgebra::{DMatrix, DVector};

use crate::activation_io::ActivationMatrix;
use crate::error::{NblError, Result};

/// Columns converted to f64 per gemm call.
const CHUNK_COLS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    count: u64,
    sum_x: DVector<f64>,
    sum_y: DVector<f64>,
    sum_xx: DMatrix<f64>,
    sum_yy: DMatrix<f64>,
    sum_yx: DMatrix<f64>,
}

/// Means and unbiased (cross-)covariances of an (X, Y) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSet {
    pub mean_x: DVector<f64>,
    pub mean_y: DVector<f64>,
    pub c_xx: DMatrix<f64>,
    pub c_yy: DMatrix<f64>,
    /// `h_out × h_in`.
    pub c_yx: DMatrix<f64>,
    pub sample_count: u64,
}

impl MomentAccumulator {
    pub fn new(h_in: usize, h_out: usize) -> Self {
        MomentAccumulator {
            count: 0,
            sum_x: DVector::zeros(h_in),
            sum_y: DVector::zeros(h_out),
            sum_xx: DMatrix::zeros(h_in, h_in),
            sum_yy: DMatrix::zeros(h_out, h_out),
            sum_yx: DMatrix::zeros(h_out, h_in),
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn h_in(&self) -> usize {
        self.sum_x.len()
    }

    pub fn h_out(&self) -> usize {
        self.sum_y.len()
    }

    pub fn accumulate(&mut self, x: &ActivationMatrix, y: &ActivationMatrix) -> Result<()> {
        self.check_batch(x.rows(), y.rows(), x.cols(), y.cols())?;
        let n = x.cols();
        let mut start = 0;
        while start < n {
            let len = CHUNK_COLS.min(n - start);
            let xs = x.as_matrix().columns(start, len).map(|v| v as f64);
            let ys = y.as_matrix().columns(start, len).map(|v| v as f64);
            self.add_columns(&xs, &ys);
            start += len;
        }
        Ok(())
    }

    /// Same as [`accumulate`](Self::accumulate) on 64-bit columns.
    pub fn accumulate_f64(&mut self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<()> {
        self.check_batch(xs.nrows(), ys.nrows(), xs.ncols(), ys.ncols())?;
        if let Some(i) = xs.iter().chain(ys.iter()).position(|v| !v.is_finite()) {
            return Err(NblError::NonFinite(i));
        }
        self.add_columns(xs, ys);
        Ok(())
    }

    fn check_batch(&self, x_rows: usize, y_rows: usize, x_cols: usize, y_cols: usize) -> Result<()> {
        if x_cols != y_cols {
            return Err(NblError::DimensionMismatch(format!(
                "{x_cols} input tokens vs {y_cols} output tokens"
            )));
        }
        if x_rows != self.h_in() || y_rows != self.h_out() {
            return Err(NblError::DimensionMismatch(format!(
                "accumulator is {}->{}, batch is {x_rows}->{y_rows}",
                self.h_in(),
                self.h_out(),
            )));
        }
        Ok(())
    }

    fn add_columns(&mut self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) {
        for c in xs.column_iter() {
            self.sum_x += c;
        }
        for c in ys.column_iter() {
            self.sum_y += c;
        }
        self.sum_xx.gemm(1.0, xs, &xs.transpose(), 1.0);
        self.sum_yy.gemm(1.0, ys, &ys.transpose(), 1.0);
        self.sum_yx.gemm(1.0, ys, &xs.transpose(), 1.0);
        self.count += xs.ncols() as u64;
    }

    pub fn merge(&self, other: &MomentAccumulator) -> Result<MomentAccumulator> {
        let mut out = self.clone();
        out.merge_from(other)?;
        Ok(out)
    }

    pub fn merge_from(&mut self, other: &MomentAccumulator) -> Result<()> {
        if self.h_in() != other.h_in() || self.h_out() != other.h_out() {
            return Err(NblError::DimensionMismatch(format!(
                "cannot merge {}->{} with {}->{}",
                self.h_in(),
                self.h_out(),
                other.h_in(),
                other.h_out()
            )));
        }
        self.count += other.count;
        self.sum_x += &other.sum_x;
        self.sum_y += &other.sum_y;
        self.sum_xx += &other.sum_xx;
        self.sum_yy += &other.sum_yy;
        self.sum_yx += &other.sum_yx;
        Ok(())
    }

    pub fn finalize(&self) -> Result<CovarianceSet> {
        if self.count < 2 {
            return Err(NblError::InsufficientSamples(self.count));
        }
        let n = self.count as f64;
        let mean_x = &self.sum_x / n;
        let mean_y = &self.sum_y / n;
        let cov = |sum: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>| {
            (sum - a * b.transpose() * n) / (n - 1.0)
        };
        let c_xx = symmetrize(cov(&self.sum_xx, &mean_x, &mean_x));
        let c_yy = symmetrize(cov(&self.sum_yy, &mean_y, &mean_y));
        let c_yx = cov(&self.sum_yx, &mean_y, &mean_x);
        Ok(CovarianceSet {
            mean_x,
            mean_y,
            c_xx,
            c_yy,
            c_yx,
            sample_count: self.count,
        })
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

impl CovarianceSet {
    pub fn h_in(&self) -> usize {
        self.mean_x.len()
    }

    pub fn h_out(&self) -> usize {
        self.mean_y.len()
    }

    /// Moments of `(X, Y + X)`, the block output after the residual add.
    pub fn derive_residual(&self) -> Result<CovarianceSet> {
        if self.h_in() != self.h_out() {
            return Err(NblError::DimensionMismatch(format!(
                "residual add needs h_in == h_out, got {} and {}",
                self.h_in(),
                self.h_out()
            )));
        }
        let c_yx_t = self.c_yx.transpose();
        let c_yy = symmetrize(&self.c_yy + &self.c_yx + &c_yx_t + &self.c_xx);
        Ok(CovarianceSet {
            mean_x: self.mean_x.clone(),
            mean_y: &self.mean_y + &self.mean_x,
            c_xx: self.c_xx.clone(),
            c_yy,
            c_yx: &self.c_yx + &self.c_xx,
            sample_count: self.sample_count,
        })
    }
}
