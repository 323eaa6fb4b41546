use anyhow::{bail, Result};
use mpt_core::bernoulli::{dataset_lml, synthetic_glyphs, BernoulliLinearParams, QuadratureGrid};
use mpt_core::gaussian::LN_2PI;
use mpt_core::io::{write_binary_dataset, write_dataset_csv, write_image_csv, Checkpoint};
use mpt_core::par;
use mpt_core::ppca::sample_dataset;
use mpt_core::rng::{tag, RngKey};
use mpt_core::scoring::mean_and_stderr;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::PpcaSource;
use crate::config;
use crate::run::{with_workers, Run};
use crate::Common;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Linear-Gaussian rows, written as `data.csv`.
    Ppca,
    /// Binary rows from the Bernoulli linear model, written as `data.txt`.
    Bernoulli,
    /// Grayscale stroke images, written as `images.csv`.
    Glyphs,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataSettings {
    pub seed: u64,
    pub kind: DataKind,
    pub n: usize,
    pub dim: usize,
    pub latent: usize,
    pub w_scale: f64,
    pub mu_scale: f64,
    pub log_sigma2: f64,
    /// Image side length for glyphs (`D = side^2`).
    pub side: usize,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        GenDataSettings {
            seed: 0,
            kind: DataKind::Ppca,
            n: 2000,
            dim: 10,
            latent: 2,
            w_scale: 1.0,
            mu_scale: 1.0,
            log_sigma2: -1.0,
            side: 4,
        }
    }
}

pub fn run(common: &Common) -> Result<()> {
    let s: GenDataSettings = config::load(common, |s: &mut GenDataSettings, seed| s.seed = seed)?;
    if s.n == 0 {
        bail!(mpt_core::Error::InvalidConfig("n must be at least 1".into()));
    }
    let mut run = Run::start(common, "gen-data")?;
    with_workers(common, || match s.kind {
        DataKind::Ppca => ppca(&s, &mut run),
        DataKind::Bernoulli => bernoulli(&s, &mut run),
        DataKind::Glyphs => glyphs(&s, &mut run),
    })?;
    run.finish(common, &s)
}

fn ppca(s: &GenDataSettings, run: &mut Run) -> Result<()> {
    let source = PpcaSource {
        data: None,
        params: None,
        dim: s.dim,
        latent: s.latent,
        n: s.n,
        w_scale: s.w_scale,
        mu_scale: s.mu_scale,
        log_sigma2: s.log_sigma2,
    };
    let params = source.generated_params(s.seed)?;
    let data = sample_dataset(&params, s.n, s.seed)?;
    let joint = params.marginal_covariance()?;
    let per_row = par::map_indexed(data.len(), |i| joint.log_density(&data.row(i)))
        .into_iter()
        .collect::<mpt_core::Result<Vec<_>>>()?;
    let (mean, se) = mean_and_stderr(&per_row);
    // E[log p(x)] = -(log det(2 pi S) + D) / 2
    let d = params.dim() as f64;
    let expected = -0.5 * (d * LN_2PI + joint.log_det() + d);
    run.write("data.csv", &write_dataset_csv(&data))?;
    run.write("params.json", &Checkpoint::from_ppca(&params).to_json())?;
    run.write_json(
        "summary.json",
        &json!({
            "kind": "ppca",
            "n": s.n,
            "dim": s.dim,
            "latent": s.latent,
            "lml": par::sum(&per_row),
            "lml_per_obs": mean,
            "lml_per_obs_std_err": se,
            "expected_log_density": expected,
            "z_score": (se > 0.0).then(|| (mean - expected) / se),
        }),
    )
}

fn bernoulli(s: &GenDataSettings, run: &mut Run) -> Result<()> {
    let params = BernoulliLinearParams::random(s.dim, s.w_scale, s.mu_scale, RngKey::new(s.seed).child(tag::PARAMS))?;
    let data = params.sample(s.n, s.seed);
    let lml = dataset_lml(&params, &data, &QuadratureGrid::default())?;
    run.write("data.txt", &write_binary_dataset(&data))?;
    run.write("params.json", &Checkpoint::from_parts(&params.w, &params.mu, None).to_json())?;
    run.write_json(
        "summary.json",
        &json!({ "kind": "bernoulli", "n": s.n, "dim": s.dim, "lml": lml, "lml_per_obs": lml / s.n as f64 }),
    )
}

fn glyphs(s: &GenDataSettings, run: &mut Run) -> Result<()> {
    if s.side < 2 {
        bail!(mpt_core::Error::InvalidConfig("side must be at least 2".into()));
    }
    let pixels = synthetic_glyphs(s.n, s.side, s.seed);
    let on = pixels.iter().filter(|v| **v > 0.5).count() as f64 / pixels.len() as f64;
    run.write("images.csv", &write_image_csv(&pixels))?;
    run.write_json(
        "summary.json",
        &json!({ "kind": "glyphs", "n": s.n, "dim": s.side * s.side, "side": s.side, "fraction_on": on }),
    )
}
