//! Line-oriented `key = value` configuration covering the network and the
//! training loop. Command-line flags override file values, which override
//! the built-in defaults; unknown keys are rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone)]
pub struct GlobalConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig { net: NetConfig::default(), train: TrainConfig::default() }
    }
}

fn parse_value<V: std::str::FromStr>(value: &str, line: usize, what: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::ParseFailure {
        line,
        reason: format!("cannot parse `{}` as {what}", value.trim()),
    })
}

fn parse_list(value: &str, n: usize, line: usize) -> Result<Vec<usize>> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != n {
        return Err(Error::ParseFailure {
            line,
            reason: format!("expected {n} comma-separated values, got {}", parts.len()),
        });
    }
    parts.iter().map(|p| parse_value(p, line, "an integer")).collect()
}

fn parse_bool(value: &str, line: usize) -> Result<bool> {
    match value.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::ParseFailure {
            line,
            reason: format!("cannot parse `{other}` as a boolean"),
        }),
    }
}

pub fn parse_config_text(text: &str) -> Result<GlobalConfig> {
    let mut cfg = GlobalConfig::default();
    let mut stem_set = false;
    let mut growth_set = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::ParseFailure {
            line,
            reason: "expected `key = value`".into(),
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "growth_rate" => {
                cfg.net.growth_rate = parse_value(value, line, "an integer")?;
                growth_set = true;
            }
            "layers_per_block" => {
                let l = parse_list(value, 3, line)?;
                cfg.net.layers_per_block = [l[0], l[1], l[2]];
            }
            "stem_channels" => {
                cfg.net.stem_channels = parse_value(value, line, "an integer")?;
                stem_set = true;
            }
            "input_size" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                cfg.net.input_size = match parts.len() {
                    1 => {
            let s: usize = parse_value(parts[0], line, "an integer")?;
                        (s, s)
                    }
                    2 => (
                        parse_value(parts[0], line, "an integer")?,
                        parse_value(parts[1], line, "an integer")?,
                    ),
                    n => {
                        return Err(Error::ParseFailure {
                            line,
                            reason: format!("input_size takes 1 or 2 values, got {n}"),
                        })
                    }
                };
            }
            "level_fc_dim" => cfg.net.level_fc_dim = parse_value(value, line, "an integer")?,
            "epochs" => cfg.train.epochs = parse_value(value, line, "an integer")?,
            "batch_size" => cfg.train.batch_size = parse_value(value, line, "an integer")?,
            "momentum" => cfg.train.momentum = parse_value(value, line, "a float")?,
            "base_lr" => cfg.train.base_lr = parse_value(value, line, "a float")?,
            "lr_gamma" => cfg.train.lr_gamma = parse_value(value, line, "a float")?,
            "lr_step_epochs" => {
                cfg.train.lr_step_epochs = parse_value(value, line, "an integer")?
            }
            "weight_decay" => cfg.train.weight_decay = parse_value(value, line, "a float")?,
            "seed" => cfg.train.seed = parse_value(value, line, "an integer")?,
            "coherent" => cfg.train.coherent = parse_bool(value, line)?,
            "checkpoint_every" => {
                cfg.train.checkpoint_every = parse_value(value, line, "an integer")?
            }
            "cache_images" => cfg.train.cache_images = parse_bool(value, line)?,
            other => {
                return Err(Error::UnknownKey { line, key: other.to_string() });
            }
        }
    }

    // Stem width follows the growth rate (2k) unless pinned explicitly.
    if growth_set && !stem_set {
        cfg.net.stem_channels = 2 * cfg.net.growth_rate;
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<GlobalConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config_text(&text)
}
