use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use mpt_core::io::{parse_dataset_csv, Checkpoint};
use mpt_core::masking::percent_grid;
use mpt_core::ppca::lml;
use mpt_core::rng::{tag, RngKey};
use mpt_core::scoring::{curve_area, mpt_curve, parse_curve_csv, write_curve_csv, MaskBudget};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{self, read_text};
use crate::run::{with_workers, Run};
use crate::Common;

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSettings {
    pub seed: u64,
    /// Dataset CSV the curves are averaged over.
    pub data: Option<PathBuf>,
    /// Parameter checkpoints, one curve each (`curve_<i>.csv`).
    pub params: Vec<PathBuf>,
    /// Masks per observation and size (0 means 100).
    pub masks: usize,
    /// Mask sizes; the 1..99% rate grid when absent.
    pub sizes: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct CurveSummary {
    label: String,
    area: f64,
    lml_per_obs: f64,
    /// `|area - lml_per_obs| / |lml_per_obs|`
    rel_error: f64,
    pooled_std_err: f64,
    /// Largest distance of a point from the mean of all points.
    max_deviation: f64,
}

fn label(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn run(common: &Common) -> Result<()> {
    let s: CurveSettings = config::load(common, |s: &mut CurveSettings, seed| s.seed = seed)?;
    let Some(data_path) = &s.data else {
        bail!(mpt_core::Error::InvalidConfig("curve needs a data file".into()));
    };
    if s.params.is_empty() {
        bail!(mpt_core::Error::InvalidConfig("curve needs at least one params file".into()));
    }
    let masks = if s.masks == 0 { 100 } else { s.masks };
    let mut run = Run::start(common, "curve")?;
    with_workers(common, || -> Result<()> {
        let data = parse_dataset_csv(&read_text(data_path)?)?;
        let sizes = s.sizes.clone().unwrap_or_else(|| percent_grid(data.dim()));
        let key = RngKey::new(s.seed).child(tag::MASK);
        let mut curves = Vec::new();
        for (i, path) in s.params.iter().enumerate() {
            let params = Checkpoint::from_json(&read_text(path)?)?.to_ppca()?;
            let curve = mpt_curve(&params, &data, &sizes, MaskBudget::Sampled(masks), key)?;
            run.write(&format!("curve_{i}.csv"), &write_curve_csv(&curve))?;
            let area = curve_area(&curve)?;
            let lml_per_obs = lml(&params, &data)? / data.len() as f64;
            let mean = curve.points.iter().map(|p| p.score_mean).sum::<f64>() / curve.points.len() as f64;
            curves.push(CurveSummary {
                label: label(path),
                area,
                lml_per_obs,
                rel_error: (area - lml_per_obs).abs() / lml_per_obs.abs(),
                pooled_std_err: curve.pooled_std_err(),
                max_deviation: curve.points.iter().map(|p| (p.score_mean - mean).abs()).fold(0.0, f64::max),
            });
        }
        run.write_json("summary.json", &json!({ "masks": masks, "sizes": sizes, "curves": curves }))
    })?;
    run.finish(common, &s)
}

pub fn run_import(common: &Common, file: &Path, dim: Option<usize>) -> Result<()> {
    let settings = json!({ "file": file.display().to_string(), "dim": dim });
    let curve = parse_curve_csv(&read_text(file)?, dim)?;
    let area = curve_area(&curve)?;
    let mut run = Run::start(common, "area-import")?;
    run.write_json(
        "area.json",
        &json!({
            "dim": curve.dim,
            "points": curve.points.len(),
            "full_grid": curve.is_full_grid(),
            "area": area,
            "area_per_token": area / curve.dim as f64,
        }),
    )?;
    run.finish(common, &settings)
}
