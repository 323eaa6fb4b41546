//! Stochastic-gradient training of PPCA on MPT objectives, with the exact
//! LML tracked at every epoch, plus the mask-count convergence study.
//!
//! Each epoch is full-batch: one mask size is drawn for the epoch (uniform
//! on `1..=D` in the unfixed regime, fixed otherwise), every observation
//! gets `P` masks of that size, and the summed objective is ascended once.
//!
//! In the unfixed regime each observation contributes
//! `(D / m) * sum_{j in M} log p(x_j | x_R)`: with `m` uniform this is an
//! unbiased one-draw estimate of the cumulative score sum, hence of the LML
//! and (since the identity holds for every parameter value) of its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::masking::{fixed_rate_size, sample_mask, sample_mask_size};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::par;
use crate::ppca::{lml, masked_loss_cov_grad, ConditionalForm, CovGrad, Dataset, PpcaParams};
use crate::rng::{tag, RngKey};
use crate::scoring::{
    cumulative_with_joint, exact_cumulative, fixed_rate_bias, fixed_rate_loss_with_joint, mean_and_stderr, sample_std, MaskBudget,
    EXACT_MAX_DIM,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regime {
    /// Mask size uniform on `1..=D` each epoch.
    Unfixed,
    /// Mask size `floor(rate * D)`.
    FixedRate { rate: f64 },
}

/// Initialization descriptor: `W ~ N(0, w_std^2)`, `mu ~ N(0, mu_std^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    #[serde(default = "default_w_std")]
    pub w_std: f64,
    #[serde(default)]
    pub mu_std: f64,
    #[serde(default)]
    pub log_sigma2: f64,
}

fn default_w_std() -> f64 {
    0.1
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec { w_std: default_w_std(), mu_std: 0.0, log_sigma2: 0.0 }
    }
}

impl InitSpec {
    pub fn build(&self, dim: usize, latent: usize, key: RngKey) -> Result<PpcaParams> {
        PpcaParams::random(dim, latent, self.w_std, self.mu_std, self.log_sigma2, key)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerSpec,
    pub masks_per_epoch: usize,
    pub seed: u64,
    pub init: InitSpec,
    pub conditional_form: ConditionalForm,
    /// Keep a parameter snapshot every `n` epochs (and at the last epoch).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Unfixed,
            epochs: 500,
            learning_rate: 1e-2,
            optimizer: OptimizerSpec::default(),
            masks_per_epoch: 1,
            seed: 0,
            init: InitSpec::default(),
            conditional_form: ConditionalForm::TokenWise,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be finite and non-negative");
        }
        if self.masks_per_epoch == 0 {
            return bad("masks_per_epoch must be at least 1");
        }
        match self.regime {
            Regime::FixedRate { rate } => {
                fixed_rate_size(dim, rate)?;
            }
            Regime::Unfixed if self.conditional_form == ConditionalForm::Block => {
                return bad("the unfixed regime scores tokens individually; use conditional_form = token_wise");
            }
            Regime::Unfixed => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Dataset sum of the MPT objective at this epoch's parameters.
    pub neg_mpt: f64,
    /// Dataset sum of the exact LML at the same parameters.
    pub exact_lml: f64,
    pub grad_norm: f64,
    pub mask_size: usize,
}

#[derive(Clone, Debug)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    /// Parameters after the final update.
    pub final_params: PpcaParams,
    /// `(epoch, params evaluated in that epoch's record)`.
    pub snapshots: Vec<(usize, PpcaParams)>,
    pub config: TrainConfig,
}

pub const TRACE_HEADER: &str = "epoch,neg_mpt,exact_lml,grad_norm,mask_size";

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                fmt_f64(r.neg_mpt),
                fmt_f64(r.exact_lml),
                fmt_f64(r.grad_norm),
                r.mask_size
            ));
        }
        out
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("at least one epoch")
    }

    pub fn snapshot(&self, epoch: usize) -> Option<&PpcaParams> {
        self.snapshots.iter().find(|(e, _)| *e == epoch).map(|(_, p)| p)
    }
}

pub fn train(init: &PpcaParams, data: &Dataset, config: &TrainConfig) -> Result<TrainTrace> {
    let (dim, latent) = (init.dim(), init.latent_dim());
    if data.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: data.dim() });
    }
    config.validate(dim)?;
    let root = RngKey::new(config.seed);
    let n = data.len();
    let p_masks = config.masks_per_epoch;
    let mut flat = init.to_flat();
    let mut params = init.clone();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, flat.len());
    let mut records = Vec::with_capacity(config.epochs);
    let mut snapshots = Vec::new();

    for epoch in 0..config.epochs {
        let size = match config.regime {
            Regime::Unfixed => sample_mask_size(dim, &mut root.child(tag::SIZE).child(epoch as u64).rng()),
            Regime::FixedRate { rate } => fixed_rate_size(dim, rate)?,
        };
        let weight = match config.regime {
            Regime::Unfixed => dim as f64 / size as f64,
            Regime::FixedRate { .. } => 1.0,
        } / p_masks as f64;
        let joint = params.marginal_covariance().map_err(|_| Error::NonFiniteLoss { epoch })?;
        let epoch_key = root.child(tag::MASK).child(epoch as u64);

        let per_row = par::map_indexed(n, |i| -> Result<(f64, f64, CovGrad)> {
            let x = data.row(i);
            let mut value = 0.0;
            let mut grad = CovGrad::zeros(dim);
            for p in 0..p_masks {
                let mask = sample_mask(dim, size, &mut epoch_key.child(i as u64).child(p as u64).rng())?;
                let (v, g) = masked_loss_cov_grad(&joint, &x, &mask, config.conditional_form)?;
                value += v;
                grad.add_assign(&g);
            }
            Ok((value, joint.log_density(&x)?, grad))
        });
        let mut neg_mpt = 0.0;
        let mut exact_lml = 0.0;
        let mut total = CovGrad::zeros(dim);
        for row in per_row {
            let (v, l, g) = row.map_err(|e| match e {
                Error::NotPositiveDefinite => Error::NonFiniteLoss { epoch },
                other => other,
            })?;
            neg_mpt += v;
            exact_lml += l;
            total.add_assign(&g);
        }
        neg_mpt *= weight;
        total.h *= weight;
        total.dmu *= weight;
        let grad = total.into_param_grad(&params);
        let grad_norm = grad.norm();
        if !neg_mpt.is_finite() || !exact_lml.is_finite() || !grad.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        records.push(EpochRecord { epoch, neg_mpt, exact_lml, grad_norm, mask_size: size });
        let last = epoch + 1 == config.epochs;
        if config.checkpoint_every.is_some_and(|k| k > 0 && epoch % k == 0) || (last && config.checkpoint_every.is_some()) {
            snapshots.push((epoch, params.clone()));
        }
        opt.ascend(&mut flat, &grad.to_flat());
        params = PpcaParams::from_flat(dim, latent, &flat).map_err(|_| Error::NonFiniteLoss { epoch })?;
    }

    Ok(TrainTrace { records, final_params: params, snapshots, config: config.clone() })
}

/// Dataset sum of the fixed-rate bias `E_M[log p(x_R)]` with its standard
/// error; observation `i` draws masks from `key.child(i)`.
pub fn dataset_bias(params: &PpcaParams, data: &Dataset, size: usize, masks: usize, key: RngKey) -> Result<(f64, f64)> {
    let per_obs = par::map_indexed(data.len(), |i| {
        fixed_rate_bias(params, &data.row(i), size, MaskBudget::Sampled(masks), key.child(i as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = per_obs.iter().map(|e| e.value).collect();
    let var: f64 = per_obs.iter().map(|e| e.std_err * e.std_err).sum();
    Ok((par::sum(&values), var.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Cumulative estimator over all sizes with `P` sampled masks per size.
    Unfixed,
    /// Cumulative estimator with every mask of every size.
    Exhaustive,
    /// Block MPT loss at a fixed rate with `P` sampled masks.
    FixedRate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub variant: Variant,
    pub masks: usize,
    pub mean: f64,
    pub std: f64,
    /// `(mean - lml) / |lml|`.
    pub rel_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub lml: f64,
    pub rows: Vec<ConvergenceRow>,
    pub fixed_size: Option<usize>,
    /// Directly computed `-E_M[log p(x_R)]` summed over the data, with its
    /// standard error, and the same divided by `|lml|`.
    pub bias: Option<f64>,
    pub bias_std_err: Option<f64>,
    pub rel_bias: Option<f64>,
}

pub const CONVERGENCE_HEADER: &str = "variant,masks,mean,std,rel_diff,lml";

impl ConvergenceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CONVERGENCE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let v = match r.variant {
                Variant::Unfixed => "unfixed",
                Variant::Exhaustive => "exhaustive",
                Variant::FixedRate => "fixed_rate",
            };
            out.push_str(&format!(
                "{v},{},{},{},{},{}\n",
                r.masks,
                fmt_f64(r.mean),
                fmt_f64(r.std),
                fmt_f64(r.rel_diff),
                fmt_f64(self.lml)
            ));
        }
        out
    }

    pub fn row(&self, variant: Variant, masks: usize) -> Option<&ConvergenceRow> {
        self.rows.iter().find(|r| r.variant == variant && r.masks == masks)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceSettings {
    pub mask_counts: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    /// Also run the unfixed cumulative estimator (skip for large `D`).
    pub unfixed: bool,
    pub fixed_rate: Option<f64>,
    /// Masks per observation for the direct bias computation.
    pub bias_masks: usize,
}

/// Mean and spread of the dataset-sum estimators across replicates, for
/// each mask count `P`.
pub fn convergence_study(params: &PpcaParams, data: &Dataset, settings: &ConvergenceSettings) -> Result<ConvergenceReport> {
    if settings.replicates == 0 || settings.mask_counts.is_empty() {
        return Err(Error::InvalidConfig("need at least one replicate and one mask count".into()));
    }
    let truth = lml(params, data)?;
    let joint = params.marginal_covariance()?;
    let root = RngKey::new(settings.seed).child(tag::REPLICATE);
    let n = data.len();
    let dim = params.dim();
    let row = |variant, masks, values: &[f64]| {
        let (mean, _) = mean_and_stderr(values);
        ConvergenceRow { variant, masks, mean, std: sample_std(values), rel_diff: (mean - truth) / truth.abs() }
    };
    let mut rows = Vec::new();

    if settings.unfixed {
        if dim <= EXACT_MAX_DIM {
            let exact: Vec<f64> = par::map_indexed(n, |i| exact_cumulative(params, &data.row(i)))
                .into_iter()
                .collect::<Result<_>>()?;
            rows.push(row(Variant::Exhaustive, 0, &[par::sum(&exact)]));
        }
        for &p in &settings.mask_counts {
            let key = root.child(0).child(p as u64);
            let reps = par::map_indexed(settings.replicates, |r| -> Result<f64> {
                let mut total = 0.0;
                for i in 0..n {
                    total += cumulative_with_joint(&joint, &data.row(i), MaskBudget::Sampled(p), key.child(r as u64).child(i as u64))?;
                }
                Ok(total)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            rows.push(row(Variant::Unfixed, p, &reps));
        }
    }

    let (mut fixed_size, mut bias, mut bias_se) = (None, None, None);
    if let Some(rate) = settings.fixed_rate {
        let size = fixed_rate_size(dim, rate)?;
        fixed_size = Some(size);
        for &p in &settings.mask_counts {
            let key = root.child(1).child(p as u64);
            let reps = par::map_indexed(settings.replicates, |r| -> Result<f64> {
                let mut total = 0.0;
                for i in 0..n {
                    let est = fixed_rate_loss_with_joint(
                        &joint,
                        &data.row(i),
                        size,
                        MaskBudget::Sampled(p),
                        key.child(r as u64).child(i as u64),
                        ConditionalForm::Block,
                    )?;
                    total += est.value;
                }
                Ok(total)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            rows.push(row(Variant::FixedRate, p, &reps));
        }
        let (b, se) = dataset_bias(params, data, size, settings.bias_masks.max(2), RngKey::new(settings.seed).child(tag::BIAS))?;
        bias = Some(-b);
        bias_se = Some(se);
    }

    Ok(ConvergenceReport {
        lml: truth,
        rows,
        fixed_size,
        rel_bias: bias.map(|b| b / truth.abs()),
        bias,
        bias_std_err: bias_se,
    })
}
