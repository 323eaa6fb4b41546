use anyhow::Result;
use mpt_core::io::{write_dataset_csv, Checkpoint};
use mpt_core::masking::fixed_rate_size;
use mpt_core::ppca::{lml, ConditionalForm};
use mpt_core::rng::{tag, RngKey};
use mpt_core::scoring::mean_and_stderr;
use mpt_core::training::{dataset_bias, train, Regime, TrainConfig};
use serde::{Deserialize, Serialize};

use super::PpcaSource;
use crate::config;
use crate::run::{with_workers, Run};
use crate::Common;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub seed: u64,
    pub source: PpcaSource,
    pub inits: usize,
    /// Per-init seeds are derived from `seed`; `train.seed` is ignored.
    pub train: TrainConfig,
    /// Epochs at the end of each run averaged for the converged values
    /// (default: the last tenth).
    pub tail_epochs: Option<usize>,
    /// Masks per observation for the direct fixed-rate bias, per tail epoch.
    pub bias_masks: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            seed: 0,
            source: PpcaSource::default(),
            inits: 5,
            train: TrainConfig { epochs: 300, learning_rate: 0.05, ..TrainConfig::default() },
            tail_epochs: None,
            bias_masks: 10,
        }
    }
}

#[derive(Serialize)]
struct InitSummary {
    init: usize,
    seed: u64,
    initial_exact_lml: f64,
    final_exact_lml: f64,
    /// `(gt_lml - final_exact_lml) / |gt_lml|`
    rel_gap: f64,
    tail_neg_mpt: f64,
    tail_neg_mpt_std_err: f64,
    /// Mean of `exact_lml - neg_mpt` over the tail epochs.
    tail_gap: f64,
    tail_gap_std_err: f64,
    /// Directly computed `sum_i E_M[log p(x_R)]` at each tail epoch's
    /// parameters, averaged (fixed-rate block objective only).
    tail_bias: Option<f64>,
    tail_bias_std_err: Option<f64>,
    /// Mean over tail epochs of `gap_t - bias_t`, paired at equal parameters.
    paired_diff: Option<f64>,
    paired_diff_std_err: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    gt_lml: f64,
    n: usize,
    dim: usize,
    mask_size: Option<usize>,
    inits: Vec<InitSummary>,
    max_abs_rel_gap: f64,
    /// `max - min` of the tail neg-MPT means across inits.
    neg_mpt_spread: f64,
    /// `sqrt(mean(se^2))` of the tail neg-MPT means.
    neg_mpt_pooled_std_err: f64,
}

pub fn run(common: &Common) -> Result<()> {
    let s: TrainSettings = config::load(common, |s: &mut TrainSettings, seed| s.seed = seed)?;
    if s.inits == 0 {
        anyhow::bail!(mpt_core::Error::InvalidConfig("inits must be at least 1".into()));
    }
    let mut run = Run::start(common, "train")?;
    with_workers(common, || -> Result<()> {
        let (gt, data) = s.source.load(s.seed)?;
        s.train.validate(data.dim())?;
        let gt_lml = lml(&gt, &data)?;
        if s.source.data.is_none() {
            run.write("data.csv", &write_dataset_csv(&data))?;
            run.write("gt_params.json", &Checkpoint::from_ppca(&gt).to_json())?;
        }
        let mask_size = match s.train.regime {
            Regime::FixedRate { rate } => Some(fixed_rate_size(data.dim(), rate)?),
            Regime::Unfixed => None,
        };
        let tail = s.tail_epochs.unwrap_or(s.train.epochs / 10).clamp(1, s.train.epochs);
        let mut inits = Vec::with_capacity(s.inits);
        for k in 0..s.inits {
            let seed = RngKey::new(s.seed).child(tag::INIT).child(k as u64).raw();
            let paired = mask_size.is_some() && s.train.conditional_form == ConditionalForm::Block;
            // the paired bias needs the parameters of every tail epoch
            let cfg = TrainConfig {
                seed,
                checkpoint_every: if paired { Some(1) } else { s.train.checkpoint_every },
                ..s.train.clone()
            };
            let init = cfg.init.build(data.dim(), gt.latent_dim(), RngKey::new(seed).child(tag::INIT))?;
            let trace = train(&init, &data, &cfg)?;
            run.write(&format!("trace_init{k}.csv"), &trace.to_csv())?;
            run.write(&format!("params_init{k}.json"), &Checkpoint::from_ppca(&trace.final_params).to_json())?;
            let last_epoch = s.train.epochs - 1;
            for (epoch, p) in &trace.snapshots {
                let Some(every) = s.train.checkpoint_every else { break };
                if epoch % every != 0 && *epoch != last_epoch {
                    continue;
                }
                run.write(&format!("checkpoints/init{k}/epoch{epoch}.json"), &Checkpoint::from_ppca(p).to_json())?;
            }
            let tail_records = &trace.records[trace.records.len() - tail..];
            let neg: Vec<f64> = tail_records.iter().map(|r| r.neg_mpt).collect();
            let gaps: Vec<f64> = tail_records.iter().map(|r| r.exact_lml - r.neg_mpt).collect();
            let (tail_neg_mpt, tail_neg_mpt_std_err) = mean_and_stderr(&neg);
            let (tail_gap, tail_gap_std_err) = mean_and_stderr(&gaps);
            let (mut tail_bias, mut tail_bias_std_err, mut paired_diff, mut paired_diff_std_err) = (None, None, None, None);
            if let (Some(size), true) = (mask_size, paired) {
                let key = RngKey::new(s.seed).child(tag::BIAS).child(k as u64);
                let mut biases = Vec::with_capacity(tail);
                let mut var = 0.0;
                for r in tail_records {
                    let params = trace.snapshot(r.epoch).expect("snapshot kept every epoch");
                    let (b, se) = dataset_bias(params, &data, size, s.bias_masks.max(2), key.child(r.epoch as u64))?;
                    biases.push(b);
                    var += se * se;
                }
                let diffs: Vec<f64> = gaps.iter().zip(&biases).map(|(g, b)| g - b).collect();
                let (d, d_se) = mean_and_stderr(&diffs);
                tail_bias = Some(biases.iter().sum::<f64>() / tail as f64);
                tail_bias_std_err = Some(var.sqrt() / tail as f64);
                paired_diff = Some(d);
                paired_diff_std_err = Some(d_se);
            }
            let final_exact_lml = trace.last().exact_lml;
            inits.push(InitSummary {
                init: k,
                seed,
                initial_exact_lml: trace.records[0].exact_lml,
                final_exact_lml,
                rel_gap: (gt_lml - final_exact_lml) / gt_lml.abs(),
                tail_neg_mpt,
                tail_neg_mpt_std_err,
                tail_gap,
                tail_gap_std_err,
                tail_bias,
                tail_bias_std_err,
                paired_diff,
                paired_diff_std_err,
            });
        }
        let means: Vec<f64> = inits.iter().map(|i| i.tail_neg_mpt).collect();
        let spread = means.iter().copied().fold(f64::NEG_INFINITY, f64::max) - means.iter().copied().fold(f64::INFINITY, f64::min);
        let pooled = (inits.iter().map(|i| i.tail_neg_mpt_std_err.powi(2)).sum::<f64>() / inits.len() as f64).sqrt();
        let summary = Summary {
            gt_lml,
            n: data.len(),
            dim: data.dim(),
            mask_size,
            max_abs_rel_gap: inits.iter().map(|i| i.rel_gap.abs()).fold(0.0, f64::max),
            inits,
            neg_mpt_spread: spread,
            neg_mpt_pooled_std_err: pooled,
        };
        run.write_json("summary.json", &summary)
    })?;
    run.finish(common, &s)
}
