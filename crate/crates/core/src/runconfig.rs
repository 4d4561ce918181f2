//! Run configuration from human-readable files and the environment.
//!
//! Files are UTF-8 `key = value` lines; `#` starts a comment anywhere on a
//! line. Parsing is strict: unknown keys, malformed values and bare lines are
//! errors, so typos never pass silently. Command-line flags are applied after
//! the file and win.

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, SeedPolicy};
use crate::scalar::Precision;
use std::path::Path;

/// Environment variable selecting the default numeric precision.
pub const PRECISION_ENV: &str = "CLUSTERSCAN_PRECISION";

/// Process-wide default precision: 64-bit unless the environment overrides.
pub fn precision_from_env() -> Result<Precision> {
    match std::env::var(PRECISION_ENV) {
        Ok(v) => Precision::parse(&v),
        Err(_) => Ok(Precision::Double),
    }
}

fn bad_value(key: &str, value: &str) -> Error {
    Error::config(format!("cannot parse {value:?} for key {key:?}"))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| bad_value(key, value))
}

/// Apply one key/value pair onto a configuration.
pub fn apply_kv(cfg: &mut NetworkConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "levels" => cfg.levels = parse_usize(key, value)?,
        "blocks_per_level" => {
            cfg.blocks_per_level = value
                .split(',')
                .map(|p| parse_usize(key, p.trim()))
                .collect::<Result<Vec<usize>>>()?;
        }
        "bottleneck_blocks" => cfg.bottleneck_blocks = parse_usize(key, value)?,
        "refine_blocks" => cfg.refine_blocks = parse_usize(key, value)?,
        "embed_dim" => cfg.embed_dim = parse_usize(key, value)?,
        "centroids" => cfg.centroids = parse_usize(key, value)?,
        "state_dim" => cfg.state_dim = parse_usize(key, value)?,
        "ffn_expansion" => cfg.ffn_expansion = parse_usize(key, value)?,
        "fft_loss_weight" => {
            cfg.fft_loss_weight = value.parse().map_err(|_| bad_value(key, value))?;
        }
        "crop_size" => cfg.crop_size = parse_usize(key, value)?,
        "seed_policy" => {
            cfg.seed_policy = match value {
                "fixed" => SeedPolicy::FixedByShape,
                "fresh" => SeedPolicy::FreshPerStep,
                other => return Err(bad_value(key, other)),
            };
        }
        other => return Err(Error::config(format!("unknown configuration key {other:?}"))),
    }
    Ok(())
}

/// Apply a whole configuration file body.
pub fn apply_text(cfg: &mut NetworkConfig, text: &str) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        apply_kv(cfg, key.trim(), value.trim())?;
    }
    Ok(())
}

pub fn apply_file(cfg: &mut NetworkConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    apply_text(cfg, &text)
}

/// Write every field back out in the same format `apply_text` reads.
pub fn render(cfg: &NetworkConfig) -> String {
    let blocks: Vec<String> = cfg.blocks_per_level.iter().map(|b| b.to_string()).collect();
    format!(
        "levels = {}\n\
         blocks_per_level = {}\n\
         bottleneck_blocks = {}\n\
         refine_blocks = {}\n\
         embed_dim = {}\n\
         centroids = {}\n\
         state_dim = {}\n\
         ffn_expansion = {}\n\
         fft_loss_weight = {}\n\
         crop_size = {}\n\
         seed_policy = {}\n",
        cfg.levels,
        blocks.join(","),
        cfg.bottleneck_blocks,
        cfg.refine_blocks,
        cfg.embed_dim,
        cfg.centroids,
        cfg.state_dim,
        cfg.ffn_expansion,
        cfg.fft_loss_weight,
        cfg.crop_size,
        match cfg.seed_policy {
            SeedPolicy::FixedByShape => "fixed",
            SeedPolicy::FreshPerStep => "fresh",
        }
    )
}
