use std::path::PathBuf;

use anyhow::{bail, Result};
use mpt_core::bernoulli::{
    synthetic_glyphs, train_bernoulli, BernoulliConditional, BernoulliObjective, BernoulliTrainConfig,
};
use mpt_core::io::{parse_binary_dataset, parse_image_csv, Checkpoint};
use mpt_core::optim::OptimizerSpec;
use mpt_core::rng::{tag, RngKey};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{self, read_text};
use crate::run::{with_workers, Run};
use crate::Common;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// Flat CSV of intensities in `[0, 1]`, binarized at 0.5.
    Images,
    /// Rows of `0`/`1` characters.
    Binary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BernoulliSettings {
    pub seed: u64,
    /// Input file; synthetic glyphs of side `side` are generated when absent.
    pub data: Option<PathBuf>,
    pub format: DataFormat,
    /// Use only the first `n` rows (all rows when absent; glyph count when generating).
    pub n: Option<usize>,
    pub side: usize,
    pub inits: usize,
    pub objectives: Vec<BernoulliObjective>,
    pub rate: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerSpec,
    pub masks_per_epoch: usize,
    pub init_std: f64,
    pub conditional: BernoulliConditional,
    pub grid_half_width: f64,
    pub grid_points: usize,
    pub hermite_order: usize,
    pub log_every: usize,
}

impl Default for BernoulliSettings {
    fn default() -> Self {
        let base = BernoulliTrainConfig::new(BernoulliObjective::Mpt, 150, 0.1, 0);
        BernoulliSettings {
            seed: 0,
            data: None,
            format: DataFormat::Images,
            n: None,
            side: 4,
            inits: 5,
            objectives: vec![BernoulliObjective::Mpt, BernoulliObjective::Elbo],
            rate: base.rate,
            epochs: base.epochs,
            learning_rate: base.learning_rate,
            optimizer: base.optimizer,
            masks_per_epoch: base.masks_per_epoch,
            init_std: base.init_std,
            conditional: base.conditional,
            grid_half_width: base.grid_half_width,
            grid_points: base.grid_points,
            hermite_order: base.hermite_order,
            log_every: 10,
        }
    }
}

impl BernoulliSettings {
    fn trainer(&self, objective: BernoulliObjective, seed: u64) -> BernoulliTrainConfig {
        BernoulliTrainConfig {
            objective,
            rate: self.rate,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            masks_per_epoch: self.masks_per_epoch,
            seed,
            init_std: self.init_std,
            conditional: self.conditional,
            grid_half_width: self.grid_half_width,
            grid_points: self.grid_points,
            hermite_order: self.hermite_order,
            log_every: self.log_every,
        }
    }

    fn data(&self) -> Result<DMatrix<f64>> {
        let data = match &self.data {
            Some(path) => {
                let text = read_text(path)?;
                match self.format {
                    DataFormat::Images => parse_image_csv(&text)?,
                    DataFormat::Binary => parse_binary_dataset(&text)?,
                }
            }
            None => synthetic_glyphs(self.n.unwrap_or(2000), self.side, self.seed).map(|v| if v > 0.5 { 1.0 } else { 0.0 }),
        };
        match self.n {
            Some(0) => bail!(mpt_core::Error::InvalidConfig("n must be at least 1".into())),
            Some(n) if n > data.nrows() => {
                bail!(mpt_core::Error::InvalidConfig(format!("asked for {n} rows, file has {}", data.nrows())))
            }
            Some(n) => Ok(data.rows(0, n).into_owned()),
            None => Ok(data),
        }
    }
}

fn name(o: BernoulliObjective) -> &'static str {
    match o {
        BernoulliObjective::Mpt => "mpt",
        BernoulliObjective::Elbo => "elbo",
    }
}

#[derive(Serialize)]
struct RunSummary {
    objective: &'static str,
    init: usize,
    seed: u64,
    initial_lml_per_obs: f64,
    final_lml_per_obs: f64,
    final_objective_per_obs: f64,
    /// Largest per-observation `ELBO - LML` over logged epochs (ELBO runs).
    max_elbo_excess: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    n: usize,
    dim: usize,
    runs: Vec<RunSummary>,
    /// Mean final LML per observation for each objective.
    mean_final_lml_per_obs: Vec<(&'static str, f64)>,
}

pub fn run(common: &Common) -> Result<()> {
    let s: BernoulliSettings = config::load(common, |s: &mut BernoulliSettings, seed| s.seed = seed)?;
    if s.inits == 0 || s.objectives.is_empty() {
        bail!(mpt_core::Error::InvalidConfig("need at least one init and one objective".into()));
    }
    let mut run = Run::start(common, "train-bernoulli")?;
    with_workers(common, || -> Result<()> {
        let data = s.data()?;
        let n = data.nrows() as f64;
        let mut runs = Vec::new();
        let mut means = Vec::new();
        for &objective in &s.objectives {
            let mut total = 0.0;
            for k in 0..s.inits {
                // both objectives start from the same init for a given k
                let seed = RngKey::new(s.seed).child(tag::INIT).child(k as u64).raw();
                let trace = train_bernoulli(&data, &s.trainer(objective, seed))?;
                let tag = format!("{}_init{k}", name(objective));
                run.write(&format!("trace_{tag}.csv"), &trace.to_csv())?;
                let p = &trace.final_params;
                run.write(&format!("params_{tag}.json"), &Checkpoint::from_parts(&p.w, &p.mu, None).to_json())?;
                let last = trace.records.last().expect("at least one epoch");
                total += last.lml / n;
                runs.push(RunSummary {
                    objective: name(objective),
                    init: k,
                    seed,
                    initial_lml_per_obs: trace.records[0].lml / n,
                    final_lml_per_obs: last.lml / n,
                    final_objective_per_obs: last.objective / n,
                    max_elbo_excess: (objective == BernoulliObjective::Elbo)
                        .then(|| trace.logged().map(|r| r.max_elbo_excess).fold(f64::NEG_INFINITY, f64::max)),
                });
            }
            means.push((name(objective), total / s.inits as f64));
        }
        run.write_json("summary.json", &Summary { n: data.nrows(), dim: data.ncols(), runs, mean_final_lml_per_obs: means })
    })?;
    run.finish(common, &s)
}
