//! Score functions and MPT estimators of the log-marginal likelihood.
//!
//! For a mask size `m`, the score of an observation is the average, over
//! masks of size `m`, of `(1/m) * sum_{j in M} log p(x_j | x_R)`. Summing
//! the score over every size `m = 1..D` recovers `log p(x)` exactly when the
//! average runs over all masks; averaging over a few random masks gives an
//! unbiased stochastic estimate. Fixing `m` instead yields the usual MPT
//! loss, which is biased by the expected log-marginal of the unmasked block.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::gaussian::{chol_log_det, cholesky, gather, log_density_centered, log_normal_1d, GaussianJoint};
use crate::io::fmt_f64;
use crate::masking::{enumerate_masks, sample_mask, MaskPair};
use crate::par;
use crate::ppca::{Dataset, PpcaParams};
use crate::rng::RngKey;

pub use crate::ppca::ConditionalForm;

/// Largest dimension accepted by [`exact_cumulative`].
pub const EXACT_MAX_DIM: usize = 12;

/// How many masks to average per mask size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskBudget {
    /// `P` masks drawn independently and uniformly (with replacement).
    Sampled(usize),
    /// Every mask of the given size exactly once.
    Exhaustive,
}

/// A Monte Carlo estimate with its per-mask samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEstimate {
    pub value: f64,
    pub samples: Vec<f64>,
    /// `std(samples) / sqrt(P)`; zero when `P = 1`.
    pub std_err: f64,
    /// False when a single sample leaves the standard error undefined.
    pub std_err_defined: bool,
    pub mask_size: usize,
    pub num_masks: usize,
}

impl ScoreEstimate {
    fn from_samples(samples: Vec<f64>, mask_size: usize) -> Self {
        let (value, std_err) = mean_and_stderr(&samples);
        let p = samples.len();
        ScoreEstimate { value, std_err, std_err_defined: p > 1, mask_size, num_masks: p, samples }
    }
}

/// Mean and standard error (sample std with `n - 1`, over `sqrt(n)`).
pub fn mean_and_stderr(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = par::sum(samples) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().fold(0.0, |a, s| a + (s - mean) * (s - mean)) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Sample standard deviation (`n - 1` denominator); zero for fewer than two values.
pub fn sample_std(samples: &[f64]) -> f64 {
    let (_, se) = mean_and_stderr(samples);
    if samples.len() < 2 {
        0.0
    } else {
        se * (samples.len() as f64).sqrt()
    }
}

fn masks_for(dim: usize, size: usize, budget: MaskBudget, key: RngKey) -> Result<Vec<MaskPair>> {
    match budget {
        MaskBudget::Exhaustive => enumerate_masks(dim, size),
        MaskBudget::Sampled(0) => Err(Error::InvalidConfig("at least one mask per size is required".into())),
        MaskBudget::Sampled(p) => (0..p as u64)
            .map(|i| sample_mask(dim, size, &mut key.child(i).rng()))
            .collect(),
    }
}

/// Per-mask quantities shared by all estimators.
#[derive(Clone, Copy, Debug)]
struct MaskTerms {
    /// `sum_{j in M} log p(x_j | x_R)`
    token_sum: f64,
    /// `log p(x_M | x_R)` (when requested)
    block: f64,
    /// `log p(x_R)`, zero for an empty rest
    rest: f64,
}

fn eval_mask(joint: &GaussianJoint, x: &DVector<f64>, mask: &MaskPair, block: bool) -> Result<MaskTerms> {
    let x_rest = gather(x, mask.rest());
    let x_m = gather(x, mask.masked());
    let parts = joint.conditional_parts(mask, &x_rest, false)?;
    let mut token_sum = 0.0;
    for j in 0..x_m.len() {
        let var = parts.cov[(j, j)];
        if !(var > 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        token_sum += log_normal_1d(x_m[j], parts.mean[j], var);
    }
    let block = if block {
        let chol = cholesky(parts.cov.clone())?;
        log_density_centered(&chol, chol_log_det(&chol), &(x_m - &parts.mean))
    } else {
        f64::NAN
    };
    Ok(MaskTerms { token_sum, block, rest: parts.rest_log_density })
}

fn eval_masks(
    joint: &GaussianJoint,
    x: &DVector<f64>,
    size: usize,
    budget: MaskBudget,
    key: RngKey,
    block: bool,
) -> Result<Vec<MaskTerms>> {
    let dim = joint.dim();
    if size == 0 || size > dim {
        return Err(Error::InvalidMaskSize { dim, size });
    }
    if x.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: x.len() });
    }
    let masks = masks_for(dim, size, budget, key)?;
    par::map_indexed(masks.len(), |i| eval_mask(joint, x, &masks[i], block))
        .into_iter()
        .collect()
}

pub(crate) fn score_with_joint(
    joint: &GaussianJoint,
    x: &DVector<f64>,
    size: usize,
    budget: MaskBudget,
    key: RngKey,
) -> Result<ScoreEstimate> {
    let terms = eval_masks(joint, x, size, budget, key, false)?;
    let samples = terms.iter().map(|t| t.token_sum / size as f64).collect();
    Ok(ScoreEstimate::from_samples(samples, size))
}

/// Score at mask size `size`. Mask `p` is drawn from `key.child(p)`.
pub fn score(params: &PpcaParams, x: &DVector<f64>, size: usize, budget: MaskBudget, key: RngKey) -> Result<ScoreEstimate> {
    score_with_joint(&params.marginal_covariance()?, x, size, budget, key)
}

pub(crate) fn cumulative_with_joint(joint: &GaussianJoint, x: &DVector<f64>, budget: MaskBudget, key: RngKey) -> Result<f64> {
    let mut total = 0.0;
    for size in 1..=joint.dim() {
        total += score_with_joint(joint, x, size, budget, key.child(size as u64))?.value;
    }
    Ok(total)
}

/// Cumulative MPT estimate `sum_{m=1..D} score(x; m)` of `log p(x)`.
/// Size `m` uses the stream `key.child(m)`.
pub fn cumulative_mpt(params: &PpcaParams, x: &DVector<f64>, budget: MaskBudget, key: RngKey) -> Result<f64> {
    cumulative_with_joint(&params.marginal_covariance()?, x, budget, key)
}

/// Deterministic exhaustive cumulative sum over every mask of every size.
pub fn exact_cumulative(params: &PpcaParams, x: &DVector<f64>) -> Result<f64> {
    let dim = params.dim();
    if dim > EXACT_MAX_DIM {
        return Err(Error::EnumerationTooLarge { count: format!("2^{dim} - 1"), cap: 1 << EXACT_MAX_DIM });
    }
    // The key is unused for exhaustive budgets.
    cumulative_mpt(params, x, MaskBudget::Exhaustive, RngKey::new(0))
}

fn check_fixed_size(dim: usize, size: usize) -> Result<()> {
    if size == 0 || size >= dim {
        return Err(Error::InvalidMaskSize { dim, size });
    }
    Ok(())
}

/// Fixed-size MPT objective: the masked conditional log-likelihood (no
/// `1/m` normalisation) averaged over masks.
pub fn fixed_rate_loss(
    params: &PpcaParams,
    x: &DVector<f64>,
    size: usize,
    budget: MaskBudget,
    key: RngKey,
    form: ConditionalForm,
) -> Result<ScoreEstimate> {
    fixed_rate_loss_with_joint(&params.marginal_covariance()?, x, size, budget, key, form)
}

pub(crate) fn fixed_rate_loss_with_joint(
    joint: &GaussianJoint,
    x: &DVector<f64>,
    size: usize,
    budget: MaskBudget,
    key: RngKey,
    form: ConditionalForm,
) -> Result<ScoreEstimate> {
    check_fixed_size(joint.dim(), size)?;
    let block = form == ConditionalForm::Block;
    let terms = eval_masks(joint, x, size, budget, key, block)?;
    let samples = terms.iter().map(|t| if block { t.block } else { t.token_sum }).collect();
    Ok(ScoreEstimate::from_samples(samples, size))
}

/// Expected log-marginal of the unmasked block, `E_M[log p(x_R)]`. With the
/// same key as [`fixed_rate_loss`] (block form), each pair of samples sums
/// to `log p(x)`.
pub fn fixed_rate_bias(params: &PpcaParams, x: &DVector<f64>, size: usize, budget: MaskBudget, key: RngKey) -> Result<ScoreEstimate> {
    check_fixed_size(params.dim(), size)?;
    let terms = eval_masks(&params.marginal_covariance()?, x, size, budget, key, false)?;
    Ok(ScoreEstimate::from_samples(terms.iter().map(|t| t.rest).collect(), size))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub mask_size: usize,
    pub score_mean: f64,
    pub std_err: f64,
}

/// Dataset-mean score against mask size.
#[derive(Clone, Debug, PartialEq)]
pub struct MptCurve {
    pub points: Vec<CurvePoint>,
    pub dim: usize,
    /// Masks per observation and size (0 when unknown, e.g. imported).
    pub num_masks: usize,
}

impl MptCurve {
    pub fn new(points: Vec<CurvePoint>, dim: usize, num_masks: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCurve);
        }
        let mut prev = 0;
        for p in &points {
            if p.mask_size <= prev || p.mask_size > dim {
                return Err(Error::InvalidMaskSize { dim, size: p.mask_size });
            }
            prev = p.mask_size;
        }
        Ok(MptCurve { points, dim, num_masks })
    }

    pub fn is_full_grid(&self) -> bool {
        self.points.len() == self.dim && self.points.iter().enumerate().all(|(i, p)| p.mask_size == i + 1)
    }

    /// Pooled standard error `sqrt(mean(se^2))` across points.
    pub fn pooled_std_err(&self) -> f64 {
        (self.points.iter().map(|p| p.std_err * p.std_err).sum::<f64>() / self.points.len() as f64).sqrt()
    }
}

/// Curve over `sizes`. Observation `i`, size `m`, mask `p` draws from
/// `key.child(i).child(m).child(p)`, matching [`cumulative_mpt`] with key
/// `key.child(i)`.
pub fn mpt_curve(params: &PpcaParams, data: &Dataset, sizes: &[usize], budget: MaskBudget, key: RngKey) -> Result<MptCurve> {
    if data.dim() != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), found: data.dim() });
    }
    let joint = params.marginal_covariance()?;
    let n = data.len();
    let mut points = Vec::with_capacity(sizes.len());
    let mut num_masks = 0;
    for &size in sizes {
        let per_obs = par::map_indexed(n, |i| {
            score_with_joint(&joint, &data.row(i), size, budget, key.child(i as u64).child(size as u64))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        num_masks = per_obs[0].num_masks;
        // Masks of one observation are correlated, so the error of the
        // dataset mean comes from the spread of per-observation means.
        let means: Vec<f64> = per_obs.iter().map(|s| s.value).collect();
        let std_err = if n > 1 { sample_std(&means) / (n as f64).sqrt() } else { 0.0 };
        points.push(CurvePoint { mask_size: size, score_mean: par::sum(&means) / n as f64, std_err });
    }
    MptCurve::new(points, params.dim(), num_masks)
}

/// Discrete integral of the curve. On the full grid `1..=D` this is the plain
/// sum of the points; on a coarser grid the sum is rescaled by `D / |sizes|`.
pub fn curve_area(curve: &MptCurve) -> Result<f64> {
    if curve.points.is_empty() {
        return Err(Error::EmptyCurve);
    }
    let sum = curve.points.iter().fold(0.0, |a, p| a + p.score_mean);
    if curve.is_full_grid() {
        Ok(sum)
    } else {
        Ok(sum * curve.dim as f64 / curve.points.len() as f64)
    }
}

pub const CURVE_HEADER: &str = "mask_size,rate,score_mean,score_stderr";

pub fn write_curve_csv(curve: &MptCurve) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in &curve.points {
        let rate = p.mask_size as f64 / curve.dim as f64;
        out.push_str(&format!("{},{},{},{}\n", p.mask_size, fmt_f64(rate), fmt_f64(p.score_mean), fmt_f64(p.std_err)));
    }
    out
}

/// Parses a curve CSV. Without `dim`, the dimension is inferred from the
/// last row as `round(mask_size / rate)`.
pub fn parse_curve_csv(text: &str, dim: Option<usize>) -> Result<MptCurve> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == CURVE_HEADER => {}
        _ => return Err(Error::Malformed { line: 1, message: format!("expected header `{CURVE_HEADER}`") }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Malformed { line: line_no, message };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let size: usize = fields[0].trim().parse().map_err(|_| bad(format!("bad mask_size `{}`", fields[0])))?;
        let num = |s: &str, name: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Malformed { line: line_no, message: format!("bad {name} `{s}`") })
        };
        let rate = num(fields[1], "rate")?;
        let mean = num(fields[2], "score_mean")?;
        let se = num(fields[3], "score_stderr")?;
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(bad(format!("rate {rate} outside (0, 1]")));
        }
        if se < 0.0 {
            return Err(bad("negative standard error".into()));
        }
        if rows.last().is_some_and(|&(prev, _, _, _): &(usize, f64, f64, f64)| size <= prev) || size == 0 {
            return Err(bad("mask sizes must be positive and strictly increasing".into()));
        }
        rows.push((size, rate, mean, se));
    }
    let &(last_size, last_rate, _, _) = rows.last().ok_or(Error::EmptyCurve)?;
    let dim = dim.unwrap_or_else(|| (last_size as f64 / last_rate).round() as usize);
    let points = rows
        .into_iter()
        .map(|(mask_size, _, score_mean, std_err)| CurvePoint { mask_size, score_mean, std_err })
        .collect();
    MptCurve::new(points, dim, 0)
}
