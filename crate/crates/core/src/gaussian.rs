//! Dense multivariate-Gaussian primitives.
//!
//! All solves go through the cached Cholesky factor; nothing here forms an
//! explicit inverse.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::masking::MaskPair;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

const SYMMETRY_RTOL: f64 = 1e-12;

/// A Gaussian `N(mean, cov)` with its Cholesky factor.
#[derive(Clone, Debug)]
pub struct GaussianJoint {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

/// `p(x_M | x_R)` for a given mask and observed rest block.
#[derive(Clone, Debug)]
pub struct ConditionalGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub mask: MaskPair,
}

/// Intermediate quantities of a block conditional, shared with the
/// gradient code. `u = S_RR^{-1} S_RM` and `alpha = S_RR^{-1} (x_R - mu_R)`.
#[derive(Clone, Debug)]
pub(crate) struct ConditionalParts {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub alpha: DVector<f64>,
    /// log-density of `x_R` under the rest marginal (0 when `R` is empty).
    pub rest_log_density: f64,
}

pub(crate) fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub(crate) fn gather(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub(crate) fn cholesky(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(m).ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l_dirty();
    if (0..l.nrows()).any(|i| !(l[(i, i)] > 0.0) || !l[(i, i)].is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(chol)
}

pub(crate) fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Log-density of `r = x - mean` under a factor with known log-determinant.
pub(crate) fn log_density_centered(chol: &Cholesky<f64, Dyn>, log_det: f64, r: &DVector<f64>) -> f64 {
    let y = chol
        .l_dirty()
        .solve_lower_triangular(r)
        .expect("factor has a positive diagonal");
    -0.5 * (y.norm_squared() + log_det + r.len() as f64 * LN_2PI)
}

/// Scalar normal log-density.
#[inline]
pub fn log_normal_1d(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

impl GaussianJoint {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::DimensionMismatch { expected: cov.nrows(), found: cov.ncols() });
        }
        if cov.nrows() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), found: cov.nrows() });
        }
        let scale = cov.amax();
        let mut worst = 0.0_f64;
        for i in 0..cov.nrows() {
            for j in 0..i {
                let dev = (cov[(i, j)] - cov[(j, i)]).abs();
                if dev > SYMMETRY_RTOL * scale {
                    worst = worst.max(dev / scale);
                }
            }
        }
        if worst > 0.0 {
            return Err(Error::AsymmetricInput(worst));
        }
        let chol = cholesky(cov.clone())?;
        let log_det = chol_log_det(&chol);
        Ok(GaussianJoint { mean, cov, chol, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower-triangular Cholesky factor.
    pub fn chol_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub(crate) fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        Ok(log_density_centered(&self.chol, self.log_det, &(x - &self.mean)))
    }

    /// Marginal over the given (ordered) indices.
    pub fn marginal(&self, idx: &[usize]) -> Result<GaussianJoint> {
        GaussianJoint::new(gather(&self.mean, idx), select(&self.cov, idx, idx))
    }

    /// Log-density of `x[idx]` under the marginal over `idx`; 0 for an empty set.
    pub fn marginal_log_density(&self, idx: &[usize], x: &DVector<f64>) -> Result<f64> {
        if idx.is_empty() {
            return Ok(0.0);
        }
        self.marginal(idx)?.log_density(&gather(x, idx))
    }

    /// With `grad_parts = false`, `u` and `alpha` are left empty.
    pub(crate) fn conditional_parts(
        &self,
        mask: &MaskPair,
        x_rest: &DVector<f64>,
        grad_parts: bool,
    ) -> Result<ConditionalParts> {
        self.check_mask(mask)?;
        let (m, r) = (mask.masked(), mask.rest());
        if x_rest.len() != r.len() {
            return Err(Error::DimensionMismatch { expected: r.len(), found: x_rest.len() });
        }
        let mu_m = gather(&self.mean, m);
        let s_mm = select(&self.cov, m, m);
        if r.is_empty() {
            return Ok(ConditionalParts {
                mean: mu_m,
                cov: s_mm,
                u: DMatrix::zeros(0, m.len()),
                alpha: DVector::zeros(0),
                rest_log_density: 0.0,
            });
        }
        let chol_rr = cholesky(select(&self.cov, r, r))?;
        let l = chol_rr.l_dirty();
        let resid = x_rest - gather(&self.mean, r);
        let y = l.solve_lower_triangular(&resid).ok_or(Error::NotPositiveDefinite)?;
        let z = l
            .solve_lower_triangular(&select(&self.cov, r, m))
            .ok_or(Error::NotPositiveDefinite)?;
        let mean = mu_m + z.tr_mul(&y);
        let mut cov = s_mm - z.tr_mul(&z);
        symmetrize(&mut cov);
        let (u, alpha) = if grad_parts {
            let lt = l.transpose();
            (
                lt.solve_upper_triangular(&z).ok_or(Error::NotPositiveDefinite)?,
                lt.solve_upper_triangular(&y).ok_or(Error::NotPositiveDefinite)?,
            )
        } else {
            (DMatrix::zeros(0, 0), DVector::zeros(0))
        };
        let log_det_rr = chol_log_det(&chol_rr);
        let rest_log_density = -0.5 * (y.norm_squared() + log_det_rr + r.len() as f64 * LN_2PI);
        Ok(ConditionalParts { mean, cov, u, alpha, rest_log_density })
    }

    /// Block conditional `p(x_M | x_R)` via the Schur complement
    /// `S_MM - S_MR S_RR^{-1} S_RM`.
    pub fn conditional(&self, mask: &MaskPair, x_rest: &DVector<f64>) -> Result<ConditionalGaussian> {
        let parts = self.conditional_parts(mask, x_rest, false)?;
        Ok(ConditionalGaussian { mean: parts.mean, cov: parts.cov, mask: mask.clone() })
    }

    fn check_mask(&self, mask: &MaskPair) -> Result<()> {
        if mask.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: mask.dim() });
        }
        Ok(())
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

impl ConditionalGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Joint (block) log-density of the masked values.
    pub fn log_density(&self, x_masked: &DVector<f64>) -> Result<f64> {
        if x_masked.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x_masked.len() });
        }
        let chol = cholesky(self.cov.clone())?;
        let log_det = chol_log_det(&chol);
        Ok(log_density_centered(&chol, log_det, &(x_masked - &self.mean)))
    }

    /// Per-token log-densities `log p(x_j | x_R)`, one per masked index.
    pub fn token_log_densities(&self, x_masked: &DVector<f64>) -> Result<Vec<f64>> {
        if x_masked.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x_masked.len() });
        }
        (0..self.dim())
            .map(|j| {
                let var = self.cov[(j, j)];
                if var > 0.0 {
                    Ok(log_normal_1d(x_masked[j], self.mean[j], var))
                } else {
                    Err(Error::NotPositiveDefinite)
                }
            })
            .collect()
    }
}
