use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::Common;

/// Loads settings from `--config` (or defaults) and applies `--seed`.
pub fn load<T>(common: &Common, set_seed: impl FnOnce(&mut T, u64)) -> Result<T>
where
    T: DeserializeOwned + Default,
{
    let mut settings = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => T::default(),
    };
    if let Some(seed) = common.seed {
        set_seed(&mut settings, seed);
    }
    Ok(settings)
}

/// The full effective configuration of a run.
#[derive(Serialize)]
pub struct Resolved<'a, T: Serialize> {
    pub command: &'a str,
    pub out: String,
    pub workers: Option<usize>,
    pub settings: &'a T,
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// 2 for configuration and input errors, 3 for I/O, 4 for numeric failure.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<std::io::Error>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<mpt_core::Error>() {
            return match e {
                mpt_core::Error::Io(_) => 3,
                mpt_core::Error::NonFiniteLoss { .. } | mpt_core::Error::NotPositiveDefinite => 4,
                _ => 2,
            };
        }
    }
    2
}
