use anyhow::Result;
use mpt_core::io::{write_dataset_csv, Checkpoint};
use mpt_core::training::{convergence_study, ConvergenceSettings};
use serde::{Deserialize, Serialize};

use super::PpcaSource;
use crate::config;
use crate::run::{with_workers, Run};
use crate::Common;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub seed: u64,
    pub source: PpcaSource,
    pub mask_counts: Vec<usize>,
    pub replicates: usize,
    /// Run the unfixed cumulative estimator (cost grows with `D`).
    pub unfixed: bool,
    pub fixed_rate: Option<f64>,
    /// Masks per observation for the direct bias computation.
    pub bias_masks: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            seed: 0,
            source: PpcaSource { dim: 5, n: 10, ..PpcaSource::default() },
            mask_counts: vec![1, 10, 100],
            replicates: 2000,
            unfixed: true,
            fixed_rate: Some(0.15),
            bias_masks: 100,
        }
    }
}

pub fn run(common: &Common) -> Result<()> {
    let cfg: ConvergenceConfig = config::load(common, |c: &mut ConvergenceConfig, seed| c.seed = seed)?;
    let mut run = Run::start(common, "convergence")?;
    with_workers(common, || -> Result<()> {
        let (params, data) = cfg.source.load(cfg.seed)?;
        let settings = ConvergenceSettings {
            mask_counts: cfg.mask_counts.clone(),
            replicates: cfg.replicates,
            seed: cfg.seed,
            unfixed: cfg.unfixed,
            fixed_rate: cfg.fixed_rate,
            bias_masks: cfg.bias_masks,
        };
        let report = convergence_study(&params, &data, &settings)?;
        if cfg.source.params.is_none() {
            run.write("params.json", &Checkpoint::from_ppca(&params).to_json())?;
        }
        if cfg.source.data.is_none() {
            run.write("data.csv", &write_dataset_csv(&data))?;
        }
        run.write("convergence.csv", &report.to_csv())?;
        run.write_json("summary.json", &report)
    })?;
    run.finish(common, &cfg)
}
