//! Linear latent model with Bernoulli likelihood,
//! `p(x | z) = prod_d Bern(x_d | sigmoid(w_d . z + mu_d))`, `z ~ N(0, I_2)`.
//!
//! The LML and every self-predictive conditional are computed on one fixed
//! tensor grid over the latent plane. Marginalizing a token out of the grid
//! sum just drops its likelihood factor, so
//! `log p(x_M | x_R) = log p(x_M, x_R) - log p(x_R)` holds exactly on the grid.
//! An ELBO with a free diagonal Gaussian per observation (expectation by
//! Gauss–Hermite tensor quadrature) serves as the variational baseline.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::masking::{fixed_rate_size, sample_mask, MaskPair};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::par;
use crate::rng::{tag, RngKey};

pub const LATENT_DIM: usize = 2;

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log Bern(x | sigmoid(logit))`
#[inline]
pub fn bernoulli_log_prob(x: f64, logit: f64) -> f64 {
    x * logit - softplus(logit)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().fold(0.0, |a, x| a + (x - max).exp()).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliLinearParams {
    pub w: DMatrix<f64>,
    pub mu: DVector<f64>,
}

impl BernoulliLinearParams {
    pub fn new(w: DMatrix<f64>, mu: DVector<f64>) -> Result<Self> {
        if w.ncols() != LATENT_DIM {
            return Err(Error::InvalidParams(format!("quadrature needs K = {LATENT_DIM}, got {}", w.ncols())));
        }
        if w.nrows() != mu.len() || mu.is_empty() {
            return Err(Error::DimensionMismatch { expected: w.nrows(), found: mu.len() });
        }
        if w.iter().chain(mu.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite entry".into()));
        }
        Ok(BernoulliLinearParams { w, mu })
    }

    pub fn random(dim: usize, w_std: f64, mu_std: f64, key: RngKey) -> Result<Self> {
        let mut rng = key.rng();
        let w = DMatrix::from_fn(dim, LATENT_DIM, |_, _| w_std * rng.sample::<f64, _>(StandardNormal));
        let mu = DVector::from_fn(dim, |_, _| mu_std * rng.sample::<f64, _>(StandardNormal));
        Self::new(w, mu)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `[W row-major, mu]`
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = (0..self.dim()).flat_map(|d| [self.w[(d, 0)], self.w[(d, 1)]]).collect();
        v.extend(self.mu.iter());
        v
    }

    pub fn from_flat(dim: usize, v: &[f64]) -> Result<Self> {
        if v.len() < 3 * dim {
            return Err(Error::DimensionMismatch { expected: 3 * dim, found: v.len() });
        }
        Self::new(DMatrix::from_row_slice(dim, LATENT_DIM, &v[..2 * dim]), DVector::from_column_slice(&v[2 * dim..3 * dim]))
    }

    fn logit(&self, d: usize, z: [f64; 2]) -> f64 {
        self.w[(d, 0)] * z[0] + self.w[(d, 1)] * z[1] + self.mu[d]
    }

    /// Draws binary observations from the model.
    pub fn sample(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let key = RngKey::new(seed).child(tag::DATA);
        let rows = par::map_indexed(n, |i| {
            let mut rng = key.child(i as u64).rng();
            let z = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
            (0..self.dim())
                .map(|d| if rng.random::<f64>() < sigmoid(self.logit(d, z)) { 1.0 } else { 0.0 })
                .collect::<Vec<_>>()
        });
        DMatrix::from_row_iterator(n, self.dim(), rows.into_iter().flatten())
    }
}

/// Uniform midpoint grid on `[-L, L]^2` with prior weights.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureGrid {
    pub half_width: f64,
    pub points_per_axis: usize,
    pub nodes: Vec<[f64; 2]>,
    /// Log of `N(z; 0, I) * cell area`, renormalized to sum to one.
    pub log_weights: Vec<f64>,
    /// Prior mass captured before renormalization.
    pub raw_mass: f64,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        QuadratureGrid::new(6.0, 80).expect("default grid is valid")
    }
}

impl QuadratureGrid {
    pub fn new(half_width: f64, points_per_axis: usize) -> Result<Self> {
        if !(half_width > 0.0) || points_per_axis == 0 {
            return Err(Error::InvalidConfig("grid needs L > 0 and G >= 1".into()));
        }
        let h = 2.0 * half_width / points_per_axis as f64;
        let axis: Vec<f64> = (0..points_per_axis).map(|k| -half_width + (k as f64 + 0.5) * h).collect();
        let mut nodes = Vec::with_capacity(points_per_axis * points_per_axis);
        let mut log_weights = Vec::with_capacity(nodes.capacity());
        for &a in &axis {
            for &b in &axis {
                nodes.push([a, b]);
                log_weights.push(-0.5 * (a * a + b * b) - (2.0 * std::f64::consts::PI).ln() + 2.0 * h.ln());
            }
        }
        let log_mass = log_sum_exp(&log_weights);
        if !(log_mass.exp() >= 0.99) {
            return Err(Error::InvalidConfig(format!("grid captures only {:.4} of the prior mass", log_mass.exp())));
        }
        log_weights.iter_mut().for_each(|w| *w -= log_mass);
        Ok(QuadratureGrid { half_width, points_per_axis, nodes, log_weights, raw_mass: log_mass.exp() })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Per-node likelihood tables for one parameter value, node-major.
struct NodeTables {
    dim: usize,
    /// `log p(x_d = v | z_g)` at `2 * (g * dim + d) + v`.
    lp: Vec<f64>,
    /// `sigmoid(l_gd) * (z_g0, z_g1, 1)` at `3 * (g * dim + d) + k`.
    pz: Vec<f64>,
}

impl NodeTables {
    fn new(params: &BernoulliLinearParams, grid: &QuadratureGrid) -> Self {
        let dim = params.dim();
        let n = grid.len() * dim;
        let (mut lp, mut pz) = (Vec::with_capacity(2 * n), Vec::with_capacity(3 * n));
        for z in &grid.nodes {
            for d in 0..dim {
                let l = params.logit(d, *z);
                lp.push(-softplus(l));
                lp.push(-softplus(-l));
                let p = sigmoid(l);
                pz.extend([p * z[0], p * z[1], p]);
            }
        }
        NodeTables { dim, lp, pz }
    }

    /// `log w_g + sum_{d in dims} log p(x_d | z_g)` for every node.
    fn node_log_joint(&self, grid: &QuadratureGrid, x: &[f64], dims: &[usize]) -> Vec<f64> {
        let mut out = grid.log_weights.clone();
        self.add_dims(x, dims, &mut out);
        out
    }

    fn add_dims(&self, x: &[f64], dims: &[usize], acc: &mut [f64]) {
        let bits: Vec<(usize, usize)> = dims.iter().map(|&d| (2 * d + usize::from(x[d] > 0.5), d)).collect();
        for (g, o) in acc.iter_mut().enumerate() {
            let row = &self.lp[2 * g * self.dim..2 * (g + 1) * self.dim];
            *o += bits.iter().map(|&(k, _)| row[k]).sum::<f64>();
        }
    }
}

fn check_x(params: &BernoulliLinearParams, x: &[f64]) -> Result<()> {
    if x.len() != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), found: x.len() });
    }
    Ok(())
}

/// `log p(x_S)` for the tokens in `dims` (0 for an empty set).
pub fn log_marginal_quadrature(params: &BernoulliLinearParams, x: &[f64], dims: &[usize], grid: &QuadratureGrid) -> Result<f64> {
    check_x(params, x)?;
    if dims.is_empty() {
        return Ok(0.0);
    }
    let tables = NodeTables::new(params, grid);
    Ok(log_sum_exp(&tables.node_log_joint(grid, x, dims)))
}

pub fn lml_quadrature(params: &BernoulliLinearParams, x: &[f64], grid: &QuadratureGrid) -> Result<f64> {
    let all: Vec<usize> = (0..params.dim()).collect();
    log_marginal_quadrature(params, x, &all, grid)
}

/// `log p(x_M | x_R)` as a ratio of grid sums.
pub fn conditional_quadrature(params: &BernoulliLinearParams, x: &[f64], mask: &MaskPair, grid: &QuadratureGrid) -> Result<f64> {
    check_x(params, x)?;
    if mask.dim() != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), found: mask.dim() });
    }
    let tables = NodeTables::new(params, grid);
    let rest = tables.node_log_joint(grid, x, mask.rest());
    let mut joint = rest.clone();
    tables.add_dims(x, mask.masked(), &mut joint);
    let rest_lml = if mask.rest().is_empty() { 0.0 } else { log_sum_exp(&rest) };
    Ok(log_sum_exp(&joint) - rest_lml)
}

pub fn dataset_lml(params: &BernoulliLinearParams, data: &DMatrix<f64>, grid: &QuadratureGrid) -> Result<f64> {
    Ok(par::sum(&per_row_lml(params, data, grid)?))
}

fn row(data: &DMatrix<f64>, i: usize) -> Vec<f64> {
    data.row(i).iter().copied().collect()
}

fn per_row_lml(params: &BernoulliLinearParams, data: &DMatrix<f64>, grid: &QuadratureGrid) -> Result<Vec<f64>> {
    if data.ncols() != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), found: data.ncols() });
    }
    let batch = BatchTables::new(params, grid);
    let chunks = par::map_indexed(data.nrows().div_ceil(CHUNK), |c| {
        let f = batch.full_joint(data, c * CHUNK..((c + 1) * CHUNK).min(data.nrows()));
        f.column_iter().map(|col| log_sum_exp(col.as_slice())).collect::<Vec<_>>()
    });
    Ok(chunks.into_iter().flatten().collect())
}

/// Rows per batched block.
const CHUNK: usize = 64;

/// Tables laid out for batched evaluation of many observations at once.
struct BatchTables {
    nodes: NodeTables,
    /// `log p(x_d = 1 | z_g) - log p(x_d = 0 | z_g)`, `G x D`.
    delta: DMatrix<f64>,
    /// `log w_g + sum_d log p(x_d = 0 | z_g)`.
    base: DVector<f64>,
    /// Rows `3d + k` hold `p_gd (z_g0, z_g1, 1)_k`; the last three rows hold `(z_g0, z_g1, 1)`.
    moments: DMatrix<f64>,
}

impl BatchTables {
    fn new(params: &BernoulliLinearParams, grid: &QuadratureGrid) -> Self {
        let nodes = NodeTables::new(params, grid);
        let (dim, n_nodes) = (params.dim(), grid.len());
        let delta = DMatrix::from_fn(n_nodes, dim, |g, d| nodes.lp[2 * (g * dim + d) + 1] - nodes.lp[2 * (g * dim + d)]);
        let base = DVector::from_fn(n_nodes, |g, _| {
            grid.log_weights[g] + (0..dim).map(|d| nodes.lp[2 * (g * dim + d)]).sum::<f64>()
        });
        let moments = DMatrix::from_fn(3 * dim + 3, n_nodes, |r, g| {
            if r < 3 * dim {
                nodes.pz[3 * g * dim + r]
            } else {
                [grid.nodes[g][0], grid.nodes[g][1], 1.0][r - 3 * dim]
            }
        });
        BatchTables { nodes, delta, base, moments }
    }

    /// Node log joints of the full observation, one column per row in `rows`.
    fn full_joint(&self, data: &DMatrix<f64>, rows: std::ops::Range<usize>) -> DMatrix<f64> {
        let xt = data.rows(rows.start, rows.len()).transpose();
        let mut f = &self.delta * xt;
        for mut col in f.column_iter_mut() {
            col += &self.base;
        }
        f
    }
}

/// Normalizes each column of node log weights into a posterior in place and
/// returns the column log-sum-exps.
fn posterior_columns(f: &mut DMatrix<f64>) -> Vec<f64> {
    f.column_iter_mut()
        .map(|mut col| {
            let lse = log_sum_exp(col.as_slice());
            col.iter_mut().for_each(|v| *v = (*v - lse).exp());
            lse
        })
        .collect()
}

/// Sum over rows and masks of the masked conditional log-likelihood, with
/// its gradient. `masks[i]` lists the masks applied to row `i`.
pub fn dataset_masked_loss_grad(
    params: &BernoulliLinearParams,
    data: &DMatrix<f64>,
    masks: &[Vec<MaskPair>],
    grid: &QuadratureGrid,
    form: BernoulliConditional,
) -> Result<(f64, BernoulliGrad)> {
    let (n, dim) = data.shape();
    if dim != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), found: dim });
    }
    if masks.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: masks.len() });
    }
    if let Some(m) = masks.iter().flatten().find(|m| m.dim() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, found: m.dim() });
    }
    let parts = match form {
        BernoulliConditional::Block => {
            let batch = BatchTables::new(params, grid);
            par::map_indexed(n.div_ceil(CHUNK), |c| block_chunk(&batch, data, masks, c * CHUNK..((c + 1) * CHUNK).min(n)))
        }
        BernoulliConditional::TokenWise => {
            let tables = NodeTables::new(params, grid);
            par::map_indexed(n, |i| {
                let x = row(data, i);
                let mut acc = (0.0, BernoulliGrad::zeros(dim));
                for mask in &masks[i] {
                    let (v, g) = signed_marginals_grad(&tables, grid, &x, &conditional_terms(mask, form));
                    acc.0 += v;
                    acc.1.add_assign(&g);
                }
                acc
            })
        }
    };
    let mut total = 0.0;
    let mut grad = BernoulliGrad::zeros(dim);
    for (v, g) in parts {
        total += v;
        grad.add_assign(&g);
    }
    Ok((total, grad))
}

fn block_chunk(batch: &BatchTables, data: &DMatrix<f64>, masks: &[Vec<MaskPair>], rows: std::ops::Range<usize>) -> (f64, BernoulliGrad) {
    let dim = data.ncols();
    let tables = &batch.nodes;
    let full = batch.full_joint(data, rows.clone());
    let mut post_full = full.clone();
    let lse_full = posterior_columns(&mut post_full);
    let m_full = &batch.moments * &post_full;
    let mut value = 0.0;
    let mut grad = BernoulliGrad::zeros(dim);
    let z = 3 * dim;
    let n_masks = rows.clone().map(|i| masks[i].len()).max().unwrap_or(0);
    for p in 0..n_masks {
        // rest-set log joints for every row that has a p-th mask
        let mut rest = full.clone();
        let mut has_rest = vec![false; rows.len()];
        for (b, i) in rows.clone().enumerate() {
            if let Some(mask) = masks[i].get(p) {
                has_rest[b] = !mask.rest().is_empty();
                let x = data.row(i);
                let mut col = rest.column_mut(b);
                for &d in mask.masked() {
                    let k = usize::from(x[d] > 0.5);
                    for (g, v) in col.iter_mut().enumerate() {
                        *v -= tables.lp[2 * (g * dim + d) + k];
                    }
                }
            }
        }
        let lse_rest = posterior_columns(&mut rest);
        let m_rest = &batch.moments * &rest;
        for (b, i) in rows.clone().enumerate() {
            let Some(mask) = masks[i].get(p) else { continue };
            let x = data.row(i);
            value += lse_full[b];
            for d in 0..dim {
                let t = |k: usize| x[d] * m_full[(z + k, b)] - m_full[(3 * d + k, b)];
                grad.dw[(d, 0)] += t(0);
                grad.dw[(d, 1)] += t(1);
                grad.dmu[d] += t(2);
            }
            if has_rest[b] {
                value -= lse_rest[b];
                for &d in mask.rest() {
                    let t = |k: usize| x[d] * m_rest[(z + k, b)] - m_rest[(3 * d + k, b)];
                    grad.dw[(d, 0)] -= t(0);
                    grad.dw[(d, 1)] -= t(1);
                    grad.dmu[d] -= t(2);
                }
            }
        }
    }
    (value, grad)
}

/// Gradient of a model objective with respect to `W` and `mu`.
#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliGrad {
    pub dw: DMatrix<f64>,
    pub dmu: DVector<f64>,
}

impl BernoulliGrad {
    pub fn zeros(dim: usize) -> Self {
        BernoulliGrad { dw: DMatrix::zeros(dim, LATENT_DIM), dmu: DVector::zeros(dim) }
    }

    fn add_assign(&mut self, o: &BernoulliGrad) {
        self.dw += &o.dw;
        self.dmu += &o.dmu;
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = (0..self.dmu.len()).flat_map(|d| [self.dw[(d, 0)], self.dw[(d, 1)]]).collect();
        v.extend(self.dmu.iter());
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BernoulliConditional {
    /// `log p(x_M | x_R)` as one grid ratio.
    #[default]
    Block,
    /// `sum_{j in M} log p(x_j | x_R)`.
    TokenWise,
}

/// Value and gradient of `sum_k sign_k * log p(x_{S_k})` for signed token
/// sets sharing one table. With posterior `pi` over nodes for set `S`,
/// `d/dlogit_gd log p(x_S) = pi_g (x_d - p_gd)` for `d in S`, so the
/// gradient needs only `sum_g pi_g (z_g, 1)` and `sum_g pi_g p_gd (z_g, 1)`.
fn signed_marginals_grad(
    tables: &NodeTables,
    grid: &QuadratureGrid,
    x: &[f64],
    terms: &[(f64, Vec<usize>)],
) -> (f64, BernoulliGrad) {
    let dim = tables.dim;
    let mut value = 0.0;
    let mut grad = BernoulliGrad::zeros(dim);
    let mut moments = vec![0.0; 3 * dim];
    for (sign, dims) in terms {
        if dims.is_empty() {
            continue;
        }
        let mut f = tables.node_log_joint(grid, x, dims);
        let lse = log_sum_exp(&f);
        value += sign * lse;
        f.iter_mut().for_each(|v| *v = (*v - lse).exp());
        let mut zbar = [0.0; 3];
        moments.iter_mut().for_each(|m| *m = 0.0);
        for (g, (&pi, z)) in f.iter().zip(&grid.nodes).enumerate() {
            if pi == 0.0 {
                continue;
            }
            zbar[0] += pi * z[0];
            zbar[1] += pi * z[1];
            zbar[2] += pi;
            let pz = &tables.pz[3 * g * dim..3 * (g + 1) * dim];
            moments.iter_mut().zip(pz).for_each(|(m, p)| *m += pi * p);
        }
        for &d in dims {
            let t = |k: usize| sign * (x[d] * zbar[k] - moments[3 * d + k]);
            grad.dw[(d, 0)] += t(0);
            grad.dw[(d, 1)] += t(1);
            grad.dmu[d] += t(2);
        }
    }
    (value, grad)
}

fn conditional_terms(mask: &MaskPair, form: BernoulliConditional) -> Vec<(f64, Vec<usize>)> {
    let rest = mask.rest().to_vec();
    match form {
        BernoulliConditional::Block => vec![(1.0, (0..mask.dim()).collect()), (-1.0, rest)],
        BernoulliConditional::TokenWise => {
            let mut terms: Vec<(f64, Vec<usize>)> = mask
                .masked()
                .iter()
                .map(|&j| {
                    let mut s = rest.clone();
                    s.push(j);
                    (1.0, s)
                })
                .collect();
            terms.push((-(mask.size() as f64), rest));
            terms
        }
    }
}

/// Masked conditional log-likelihood of one observation and its gradient.
pub fn conditional_quadrature_grad(
    params: &BernoulliLinearParams,
    x: &[f64],
    mask: &MaskPair,
    grid: &QuadratureGrid,
    form: BernoulliConditional,
) -> Result<(f64, BernoulliGrad)> {
    check_x(params, x)?;
    let tables = NodeTables::new(params, grid);
    Ok(signed_marginals_grad(&tables, grid, x, &conditional_terms(mask, form)))
}

/// Gauss–Hermite rule for `E_{N(0,1)}[f]`: nodes and probability weights.
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on the orthonormal Hermite recurrence.
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let m = n.div_ceil(2);
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    // physicists' rule (weight e^{-t^2}) -> standard normal expectation
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let nodes = nodes.iter().map(|t| t * std::f64::consts::SQRT_2).collect();
    let weights = weights.iter().map(|w| w / sqrt_pi).collect();
    (nodes, weights)
}

/// Per-observation diagonal Gaussian `q(z) = N(mean, diag(exp(log_var)))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariationalParams {
    pub mean: [f64; 2],
    pub log_var: [f64; 2],
}

impl Default for VariationalParams {
    fn default() -> Self {
        VariationalParams { mean: [0.0; 2], log_var: [0.0; 2] }
    }
}

/// Tensor Gauss–Hermite rule over the latent plane.
#[derive(Clone, Debug)]
pub struct HermiteRule {
    pub nodes: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl HermiteRule {
    pub fn new(order: usize) -> Self {
        let (t, w) = gauss_hermite(order);
        let mut nodes = Vec::with_capacity(order * order);
        let mut weights = Vec::with_capacity(order * order);
        for a in 0..order {
            for b in 0..order {
                nodes.push([t[a], t[b]]);
                weights.push(w[a] * w[b]);
            }
        }
        HermiteRule { nodes, weights }
    }
}

impl Default for HermiteRule {
    fn default() -> Self {
        HermiteRule::new(20)
    }
}

/// ELBO of one observation with gradients for the model and for `q`.
pub fn elbo_grad(
    params: &BernoulliLinearParams,
    q: &VariationalParams,
    x: &[f64],
    rule: &HermiteRule,
) -> Result<(f64, BernoulliGrad, [f64; 4])> {
    check_x(params, x)?;
    let dim = params.dim();
    let s = [(0.5 * q.log_var[0]).exp(), (0.5 * q.log_var[1]).exp()];
    let mut value = 0.0;
    let mut grad = BernoulliGrad::zeros(dim);
    let (mut dm, mut ds) = ([0.0; 2], [0.0; 2]);
    for (xi, &wt) in rule.nodes.iter().zip(&rule.weights) {
        let z = [q.mean[0] + s[0] * xi[0], q.mean[1] + s[1] * xi[1]];
        let mut dz = [0.0; 2];
        for d in 0..dim {
            let l = params.logit(d, z);
            let e = (-l.abs()).exp();
            let p = if l >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
            value += wt * (x[d] * l - l.max(0.0) - e.ln_1p());
            let r = wt * (x[d] - p);
            grad.dw[(d, 0)] += r * z[0];
            grad.dw[(d, 1)] += r * z[1];
            grad.dmu[d] += r;
            dz[0] += r * params.w[(d, 0)];
            dz[1] += r * params.w[(d, 1)];
        }
        for k in 0..2 {
            dm[k] += dz[k];
            ds[k] += dz[k] * xi[k];
        }
    }
    let mut dq = [0.0; 4];
    for k in 0..2 {
        let v = s[k] * s[k];
        value -= 0.5 * (v + q.mean[k] * q.mean[k] - 1.0 - q.log_var[k]);
        dq[k] = dm[k] - q.mean[k];
        dq[2 + k] = 0.5 * s[k] * ds[k] - 0.5 * (v - 1.0);
    }
    Ok((value, grad, dq))
}

pub fn elbo(params: &BernoulliLinearParams, q: &VariationalParams, x: &[f64], rule: &HermiteRule) -> Result<f64> {
    Ok(elbo_grad(params, q, x, rule)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BernoulliObjective {
    /// Fixed-rate MPT with grid-quadrature conditionals.
    Mpt,
    /// Variational lower bound with per-observation `q`.
    Elbo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BernoulliTrainConfig {
    pub objective: BernoulliObjective,
    #[serde(default = "default_rate")]
    pub rate: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default = "one")]
    pub masks_per_epoch: usize,
    pub seed: u64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub conditional: BernoulliConditional,
    #[serde(default = "default_half_width")]
    pub grid_half_width: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_hermite")]
    pub hermite_order: usize,
    /// Evaluate the quadrature LML every `n` epochs (and at the last one).
    #[serde(default = "one")]
    pub log_every: usize,
}

fn default_rate() -> f64 {
    0.33
}
fn one() -> usize {
    1
}
fn default_init_std() -> f64 {
    0.1
}
fn default_half_width() -> f64 {
    6.0
}
fn default_grid_points() -> usize {
    80
}
fn default_hermite() -> usize {
    20
}

impl BernoulliTrainConfig {
    pub fn new(objective: BernoulliObjective, epochs: usize, learning_rate: f64, seed: u64) -> Self {
        BernoulliTrainConfig {
            objective,
            rate: default_rate(),
            epochs,
            learning_rate,
            optimizer: OptimizerSpec::default(),
            masks_per_epoch: 1,
            seed,
            init_std: default_init_std(),
            conditional: BernoulliConditional::Block,
            grid_half_width: default_half_width(),
            grid_points: default_grid_points(),
            hermite_order: default_hermite(),
            log_every: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BernoulliRecord {
    pub epoch: usize,
    /// Dataset sum of the optimized objective (MPT loss or ELBO).
    pub objective: f64,
    /// Dataset sum of the quadrature LML (NaN on epochs that were not logged).
    pub lml: f64,
    /// `max_i (ELBO_i - LML_i)` for ELBO runs on logged epochs.
    pub max_elbo_excess: f64,
    pub grad_norm: f64,
    pub mask_size: usize,
}

#[derive(Clone, Debug)]
pub struct BernoulliTrace {
    pub records: Vec<BernoulliRecord>,
    pub final_params: BernoulliLinearParams,
    pub config: BernoulliTrainConfig,
}

pub const BERNOULLI_TRACE_HEADER: &str = "epoch,objective,lml,grad_norm,mask_size";

impl BernoulliTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(BERNOULLI_TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            let lml = if r.lml.is_nan() { String::new() } else { fmt_f64(r.lml) };
            out.push_str(&format!("{},{},{},{},{}\n", r.epoch, fmt_f64(r.objective), lml, fmt_f64(r.grad_norm), r.mask_size));
        }
        out
    }

    pub fn logged(&self) -> impl Iterator<Item = &BernoulliRecord> {
        self.records.iter().filter(|r| !r.lml.is_nan())
    }
}

/// Trains with either objective; the LML is tracked on the quadrature grid.
pub fn train_bernoulli(data: &DMatrix<f64>, config: &BernoulliTrainConfig) -> Result<BernoulliTrace> {
    let (n, dim) = data.shape();
    if n == 0 || dim < 2 {
        return Err(Error::InvalidConfig("need at least one row and two tokens".into()));
    }
    if data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidConfig("data must be binary".into()));
    }
    if config.epochs == 0 || config.masks_per_epoch == 0 || config.log_every == 0 {
        return Err(Error::InvalidConfig("epochs, masks_per_epoch and log_every must be positive".into()));
    }
    let grid = QuadratureGrid::new(config.grid_half_width, config.grid_points)?;
    let rule = HermiteRule::new(config.hermite_order);
    let size = fixed_rate_size(dim, config.rate)?;
    let root = RngKey::new(config.seed);
    let init = BernoulliLinearParams::random(dim, config.init_std, 0.0, root.child(tag::INIT))?;
    let n_model = 3 * dim;
    let mut flat = init.to_flat();
    if config.objective == BernoulliObjective::Elbo {
        flat.extend(std::iter::repeat_n(0.0, 4 * n));
    }
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, flat.len());
    let mut params = init;
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let logged = epoch % config.log_every == 0 || epoch + 1 == config.epochs;
        let (objective, grad_flat, per_obs_obj) = match config.objective {
            BernoulliObjective::Mpt => {
                let key = root.child(tag::MASK).child(epoch as u64);
                let masks = (0..n)
                    .map(|i| {
                        (0..config.masks_per_epoch)
                            .map(|p| sample_mask(dim, size, &mut key.child(i as u64).child(p as u64).rng()))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (total, mut grad) = dataset_masked_loss_grad(&params, data, &masks, &grid, config.conditional)?;
                let scale = 1.0 / config.masks_per_epoch as f64;
                grad.dw *= scale;
                grad.dmu *= scale;
                (total * scale, grad.to_flat(), Vec::new())
            }
            BernoulliObjective::Elbo => {
                let per_row = par::map_indexed(n, |i| {
                    let o = n_model + 4 * i;
                    let q = VariationalParams { mean: [flat[o], flat[o + 1]], log_var: [flat[o + 2], flat[o + 3]] };
                    elbo_grad(&params, &q, &row(data, i), &rule)
                });
                let mut total = 0.0;
                let mut grad = BernoulliGrad::zeros(dim);
                let mut q_grads = Vec::with_capacity(4 * n);
                let mut per_obs = Vec::with_capacity(n);
                for r in per_row {
                    let (v, g, dq) = r?;
                    total += v;
                    per_obs.push(v);
                    grad.add_assign(&g);
                    q_grads.extend(dq);
                }
                let mut g = grad.to_flat();
                g.extend(q_grads);
                (total, g, per_obs)
            }
        };
        let (lml, max_excess) = if logged {
            let rows = per_row_lml(&params, data, &grid)?;
            let excess = per_obs_obj
                .iter()
                .zip(&rows)
                .map(|(e, l)| e - l)
                .fold(f64::NEG_INFINITY, f64::max);
            (par::sum(&rows), excess)
        } else {
            (f64::NAN, f64::NEG_INFINITY)
        };
        let grad_norm = grad_flat[..n_model].iter().map(|g| g * g).sum::<f64>().sqrt();
        if !objective.is_finite() || (logged && !lml.is_finite()) || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        records.push(BernoulliRecord {
            epoch,
            objective,
            lml,
            max_elbo_excess: max_excess,
            grad_norm,
            mask_size: if config.objective == BernoulliObjective::Mpt { size } else { 0 },
        });
        opt.ascend(&mut flat, &grad_flat);
        params = BernoulliLinearParams::from_flat(dim, &flat).map_err(|_| Error::NonFiniteLoss { epoch })?;
    }
    Ok(BernoulliTrace { records, final_params: params, config: config.clone() })
}

/// Procedural grayscale glyphs (`side x side`, intensities in `[0, 1]`):
/// a horizontal, vertical or diagonal stroke at a random offset, with
/// pixel noise. Stands in for small digit images.
pub fn synthetic_glyphs(n: usize, side: usize, seed: u64) -> DMatrix<f64> {
    let key = RngKey::new(seed).child(tag::DATA);
    let rows = par::map_indexed(n, |i| {
        let mut rng = key.child(i as u64).rng();
        let kind = rng.random_range(0..4usize);
        let offset = rng.random_range(0..side) as f64;
        let ink = 0.75 + 0.25 * rng.random::<f64>();
        let mut px = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                let (r, c) = (r as f64, c as f64);
                let dist = match kind {
                    0 => (r - offset).abs(),
                    1 => (c - offset).abs(),
                    2 => (r - c - (offset - side as f64 / 2.0).round()).abs() / std::f64::consts::SQRT_2,
                    _ => (r + c - (side as f64 - 1.0) - (offset - side as f64 / 2.0).round()).abs() / std::f64::consts::SQRT_2,
                };
                let stroke = ink * (-dist * dist / 0.5).exp();
                let noise = 0.15 * rng.sample::<f64, _>(StandardNormal);
                px.push((stroke + noise).clamp(0.0, 1.0));
            }
        }
        px
    });
    DMatrix::from_row_iterator(n, side * side, rows.into_iter().flatten())
}
