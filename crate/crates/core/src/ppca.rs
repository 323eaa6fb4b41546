//! Probabilistic PCA: `x = W z + mu + eps`, `z ~ N(0, I_K)`,
//! `eps ~ N(0, sigma2 I_D)`, so that `p(x) = N(mu, W W^T + sigma2 I)`.
//!
//! Gradients are analytic. Every objective here is a function of the
//! marginal covariance `S` and the offset `mu`; the helpers first produce
//! the symmetric sensitivity `H = G + G^T` (with `G = dL/dS` entrywise) and
//! then chain it through `S = W W^T + sigma2 I`, which gives `dL/dW = H W`
//! and `dL/dlog(sigma2) = sigma2 * tr(H) / 2`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{cholesky, log_normal_1d, GaussianJoint};
use crate::masking::MaskPair;
use crate::par;
use crate::rng::{tag, RngKey};

/// Which conditional a masked objective scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionalForm {
    /// `sum_j log p(x_j | x_R)`: each masked token against the full rest.
    #[default]
    TokenWise,
    /// `log p(x_M | x_R)`: the joint conditional of the masked block.
    Block,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpcaParams {
    pub w: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub log_sigma2: f64,
}

impl PpcaParams {
    pub fn new(w: DMatrix<f64>, mu: DVector<f64>, log_sigma2: f64) -> Result<Self> {
        let (d, k) = w.shape();
        if d == 0 || k == 0 || k > d {
            return Err(Error::InvalidParams(format!("need 1 <= K <= D, got D={d}, K={k}")));
        }
        if mu.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: mu.len() });
        }
        if !log_sigma2.is_finite() || w.iter().chain(mu.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite entry".into()));
        }
        Ok(PpcaParams { w, mu, log_sigma2 })
    }

    /// Default trainable initialization: `W ~ N(0, 0.1^2)`, `mu = 0`, `sigma2 = 1`.
    pub fn random_init(dim: usize, latent: usize, key: RngKey) -> Result<Self> {
        Self::random(dim, latent, 0.1, 0.0, 0.0, key)
    }

    /// `W_ij ~ N(0, w_scale^2)`, `mu_d ~ N(0, mu_scale^2)`.
    pub fn random(dim: usize, latent: usize, w_scale: f64, mu_scale: f64, log_sigma2: f64, key: RngKey) -> Result<Self> {
        let mut rng = key.rng();
        let w = DMatrix::from_fn(dim, latent, |_, _| w_scale * rng.sample::<f64, _>(StandardNormal));
        let mu = DVector::from_fn(dim, |_, _| mu_scale * rng.sample::<f64, _>(StandardNormal));
        Self::new(w, mu, log_sigma2)
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }

    pub fn marginal_covariance(&self) -> Result<GaussianJoint> {
        let mut cov = &self.w * self.w.transpose();
        cov += DMatrix::identity(self.dim(), self.dim()) * self.sigma2();
        crate::gaussian::symmetrize(&mut cov);
        GaussianJoint::new(self.mu.clone(), cov)
    }

    /// Flattened as `[W row-major, mu, log_sigma2]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let (d, k) = self.w.shape();
        let mut v = Vec::with_capacity(d * k + d + 1);
        for i in 0..d {
            for j in 0..k {
                v.push(self.w[(i, j)]);
            }
        }
        v.extend(self.mu.iter());
        v.push(self.log_sigma2);
        v
    }

    pub fn from_flat(dim: usize, latent: usize, v: &[f64]) -> Result<Self> {
        let n = dim * latent + dim + 1;
        if v.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: v.len() });
        }
        let w = DMatrix::from_row_slice(dim, latent, &v[..dim * latent]);
        let mu = DVector::from_column_slice(&v[dim * latent..dim * latent + dim]);
        Self::new(w, mu, v[n - 1])
    }

    /// Applies a permutation to token order: token `perm[i]` becomes token `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let w = DMatrix::from_fn(self.dim(), self.latent_dim(), |i, j| self.w[(perm[i], j)]);
        let mu = DVector::from_fn(self.dim(), |i, _| self.mu[perm[i]]);
        PpcaParams { w, mu, log_sigma2: self.log_sigma2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetMeta {
    pub seed: Option<u64>,
    pub source: String,
}

/// `n x D` observations, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rows: DMatrix<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(rows: DMatrix<f64>, meta: DatasetMeta) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::InvalidParams("dataset needs at least one row and column".into()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("dataset has non-finite entries".into()));
        }
        Ok(Dataset { rows, meta })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.rows.row(i).transpose()
    }

    pub fn subset(&self, n: usize) -> Dataset {
        Dataset { rows: self.rows.rows(0, n.min(self.len())).into_owned(), meta: self.meta.clone() }
    }
}

/// Gradient with the same layout as [`PpcaParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub dw: DMatrix<f64>,
    pub dmu: DVector<f64>,
    pub dlog_sigma2: f64,
}

impl ParamGrad {
    pub fn zeros(dim: usize, latent: usize) -> Self {
        ParamGrad { dw: DMatrix::zeros(dim, latent), dmu: DVector::zeros(dim), dlog_sigma2: 0.0 }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let (d, k) = self.dw.shape();
        let mut v = Vec::with_capacity(d * k + d + 1);
        for i in 0..d {
            for j in 0..k {
                v.push(self.dw[(i, j)]);
            }
        }
        v.extend(self.dmu.iter());
        v.push(self.dlog_sigma2);
        v
    }

    pub fn norm(&self) -> f64 {
        (self.dw.norm_squared() + self.dmu.norm_squared() + self.dlog_sigma2 * self.dlog_sigma2).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.dlog_sigma2.is_finite() && self.dw.iter().chain(self.dmu.iter()).all(|v| v.is_finite())
    }
}

/// Gradient with respect to the marginal covariance and mean.
#[derive(Clone, Debug)]
pub(crate) struct CovGrad {
    /// `G + G^T` where `G_ab = dL/dS_ab`.
    pub h: DMatrix<f64>,
    pub dmu: DVector<f64>,
}

impl CovGrad {
    pub fn zeros(dim: usize) -> Self {
        CovGrad { h: DMatrix::zeros(dim, dim), dmu: DVector::zeros(dim) }
    }

    pub fn add_assign(&mut self, other: &CovGrad) {
        self.h += &other.h;
        self.dmu += &other.dmu;
    }

    pub fn into_param_grad(self, params: &PpcaParams) -> ParamGrad {
        let dw = &self.h * &params.w;
        let dlog_sigma2 = 0.5 * params.sigma2() * self.h.trace();
        ParamGrad { dw, dmu: self.dmu, dlog_sigma2 }
    }
}

/// Sum of per-row log-densities under `N(mu, W W^T + sigma2 I)`.
pub fn lml(params: &PpcaParams, data: &Dataset) -> Result<f64> {
    check_data(params, data)?;
    let joint = params.marginal_covariance()?;
    let per_row = par::map_indexed(data.len(), |i| joint.log_density(&data.row(i)));
    let values = per_row.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(par::sum(&values))
}

fn check_data(params: &PpcaParams, data: &Dataset) -> Result<()> {
    if data.dim() != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), found: data.dim() });
    }
    Ok(())
}

/// Draws `n` rows; row `i` uses its own stream so generation is order-free.
pub fn sample_dataset(params: &PpcaParams, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidParams("n must be at least 1".into()));
    }
    let (d, k) = (params.dim(), params.latent_dim());
    let sigma = params.sigma2().sqrt();
    let key = RngKey::new(seed).child(tag::DATA);
    let rows = par::map_indexed(n, |i| {
        let mut rng = key.child(i as u64).rng();
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eps = DVector::from_fn(d, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        &params.w * z + &params.mu + eps
    });
    let mut m = DMatrix::zeros(n, d);
    for (i, r) in rows.iter().enumerate() {
        m.set_row(i, &r.transpose());
    }
    Dataset::new(m, DatasetMeta { seed: Some(seed), source: "ppca".into() })
}

/// Analytic gradient of [`lml`]:
/// `dL/dS = 1/2 (S^-1 C S^-1 - n S^-1)` with `C = sum_i (x_i - mu)(x_i - mu)^T`.
pub fn lml_grad(params: &PpcaParams, data: &Dataset) -> Result<ParamGrad> {
    check_data(params, data)?;
    let joint = params.marginal_covariance()?;
    let n = data.len();
    let resid_t = DMatrix::from_fn(params.dim(), n, |d, i| data.rows[(i, d)] - params.mu[d]);
    let chol = joint.cholesky();
    let b = chol.solve(&resid_t);
    let precision = chol.solve(&DMatrix::identity(params.dim(), params.dim()));
    let h = &b * b.transpose() - precision * n as f64;
    let dmu = b.column_sum();
    Ok(CovGrad { h, dmu }.into_param_grad(params))
}

/// Value and covariance-gradient of one masked objective for a single row.
pub(crate) fn masked_loss_cov_grad(
    joint: &GaussianJoint,
    x: &DVector<f64>,
    mask: &MaskPair,
    form: ConditionalForm,
) -> Result<(f64, CovGrad)> {
    let (m_idx, r_idx) = (mask.masked(), mask.rest());
    let x_rest = crate::gaussian::gather(x, r_idx);
    let x_m = crate::gaussian::gather(x, m_idx);
    let parts = joint.conditional_parts(mask, &x_rest, true)?;
    let e = &x_m - &parts.mean;
    let nm = m_idx.len();

    // dL/de and dL/dV for the conditional mean residual e and covariance V.
    let (value, ge, gamma) = match form {
        ConditionalForm::TokenWise => {
            let mut value = 0.0;
            let mut ge = DVector::zeros(nm);
            let mut gamma = DMatrix::zeros(nm, nm);
            for j in 0..nm {
                let v = parts.cov[(j, j)];
                if !(v > 0.0) {
                    return Err(Error::NotPositiveDefinite);
                }
                value += log_normal_1d(x_m[j], parts.mean[j], v);
                ge[j] = -e[j] / v;
                gamma[(j, j)] = 0.5 * (e[j] * e[j] / (v * v) - 1.0 / v);
            }
            (value, ge, gamma)
        }
        ConditionalForm::Block => {
            let chol = cholesky(parts.cov.clone())?;
            let log_det = crate::gaussian::chol_log_det(&chol);
            let value = crate::gaussian::log_density_centered(&chol, log_det, &e);
            let beta = chol.solve(&e);
            let v_inv = chol.solve(&DMatrix::identity(nm, nm));
            let gamma = (&beta * beta.transpose() - v_inv) * 0.5;
            (value, -beta, gamma)
        }
    };

    let d = joint.dim();
    let mut h = DMatrix::zeros(d, d);
    let mut dmu = DVector::zeros(d);
    for (a, &i) in m_idx.iter().enumerate() {
        dmu[i] = -ge[a];
        for (b, &j) in m_idx.iter().enumerate() {
            h[(i, j)] = 2.0 * gamma[(a, b)];
        }
    }
    if !r_idx.is_empty() {
        let u = &parts.u;
        let alpha = &parts.alpha;
        let u_ge = u * &ge;
        let u_gamma = u * &gamma;
        // H_RM = -2 U Gamma - alpha ge^T
        let h_rm = &u_gamma * (-2.0) - alpha * ge.transpose();
        // H_RR = 2 U Gamma U^T + (U ge) alpha^T + alpha (U ge)^T
        let h_rr = &u_gamma * u.transpose() * 2.0 + &u_ge * alpha.transpose() + alpha * u_ge.transpose();
        for (a, &i) in r_idx.iter().enumerate() {
            dmu[i] = u_ge[a];
            for (b, &j) in m_idx.iter().enumerate() {
                h[(i, j)] = h_rm[(a, b)];
                h[(j, i)] = h_rm[(a, b)];
            }
            for (b, &j) in r_idx.iter().enumerate() {
                h[(i, j)] = h_rr[(a, b)];
            }
        }
    }
    Ok((value, CovGrad { h, dmu }))
}

/// Masked conditional log-likelihood of one row and its parameter gradient.
pub fn masked_loss_grad(
    params: &PpcaParams,
    x: &DVector<f64>,
    mask: &MaskPair,
    form: ConditionalForm,
) -> Result<(f64, ParamGrad)> {
    if x.len() != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), found: x.len() });
    }
    let joint = params.marginal_covariance()?;
    let (value, g) = masked_loss_cov_grad(&joint, x, mask, form)?;
    Ok((value, g.into_param_grad(params)))
}
