pub mod bernoulli;
pub mod convergence;
pub mod curve;
pub mod gen_data;
pub mod train;

use std::path::PathBuf;

use anyhow::{bail, Result};
use mpt_core::io::{parse_dataset_csv, Checkpoint};
use mpt_core::ppca::{sample_dataset, Dataset, PpcaParams};
use mpt_core::rng::{tag, RngKey};
use serde::{Deserialize, Serialize};

use crate::config::read_text;

/// Ground-truth linear-Gaussian model: read from files or drawn from the seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpcaSource {
    /// Dataset CSV (`x1..xD`); requires `params`.
    pub data: Option<PathBuf>,
    /// Parameter checkpoint JSON.
    pub params: Option<PathBuf>,
    pub dim: usize,
    pub latent: usize,
    pub n: usize,
    pub w_scale: f64,
    pub mu_scale: f64,
    pub log_sigma2: f64,
}

impl Default for PpcaSource {
    fn default() -> Self {
        PpcaSource { data: None, params: None, dim: 10, latent: 2, n: 2000, w_scale: 1.0, mu_scale: 1.0, log_sigma2: -1.0 }
    }
}

impl PpcaSource {
    pub fn generated_params(&self, seed: u64) -> Result<PpcaParams> {
        if self.n == 0 {
            bail!(mpt_core::Error::InvalidConfig("n must be at least 1".into()));
        }
        Ok(PpcaParams::random(
            self.dim,
            self.latent,
            self.w_scale,
            self.mu_scale,
            self.log_sigma2,
            RngKey::new(seed).child(tag::PARAMS),
        )?)
    }

    /// Parameters and data. The data seed equals `seed`, so a generated
    /// source reproduces `gen-data` with the same settings.
    pub fn load(&self, seed: u64) -> Result<(PpcaParams, Dataset)> {
        let params = match &self.params {
            Some(path) => Checkpoint::from_json(&read_text(path)?)?.to_ppca()?,
            None => self.generated_params(seed)?,
        };
        let data = match &self.data {
            Some(_) if self.params.is_none() => {
                bail!(mpt_core::Error::InvalidConfig("a data file needs its generating params".into()))
            }
            Some(path) => parse_dataset_csv(&read_text(path)?)?,
            None => sample_dataset(&params, self.n, seed)?,
        };
        if data.dim() != params.dim() {
            bail!(mpt_core::Error::DimensionMismatch { expected: params.dim(), found: data.dim() });
        }
        Ok((params, data))
    }
}
