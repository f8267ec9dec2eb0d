//! Flat `key=value` run configuration files.
//!
//! One key per line, `#` starts a comment line, blank lines are skipped.
//! Keys are exactly the [`TrainConfig`] fields; unknown or repeated keys are
//! errors and missing keys keep their default values.

use std::path::Path;

use crate::adapter::GrowthInit;
use crate::error::{Error, Result};
use crate::train::{TrainConfig, TrainMode};

pub const KEYS: [&str; 27] = [
    "q",
    "r_init",
    "r_target",
    "r_max",
    "lambda_r",
    "lambda_e",
    "lambda_w",
    "learning_rate",
    "nu_learning_rate",
    "steps",
    "batch_size",
    "rank_refresh_interval",
    "mode",
    "growth",
    "seed",
    "sigma_theta",
    "mu_lambda",
    "sigma_lambda",
    "d_model",
    "k_tokens",
    "d_cond",
    "planted_ranks",
    "teacher_scale",
    "n_train",
    "n_eval",
    "sigma_obs",
    "base",
];

fn value_of(c: &TrainConfig, key: &str) -> String {
    match key {
        "q" => format!("{:?}", c.q),
        "r_init" => c.r_init.to_string(),
        "r_target" => c.r_target.to_string(),
        "r_max" => c.r_max.to_string(),
        "lambda_r" => format!("{:?}", c.lambda_r),
        "lambda_e" => format!("{:?}", c.lambda_e),
        "lambda_w" => format!("{:?}", c.lambda_w),
        "learning_rate" => format!("{:?}", c.learning_rate),
        "nu_learning_rate" => c.nu_learning_rate.map_or_else(|| "shared".to_string(), |v| format!("{v:?}")),
        "steps" => c.steps.to_string(),
        "batch_size" => c.batch_size.to_string(),
        "rank_refresh_interval" => c.rank_refresh_interval.to_string(),
        "mode" => c.mode.to_string(),
        "growth" => match c.growth {
            GrowthInit::ZeroB => "zero_b".into(),
            GrowthInit::RandomB => "random_b".into(),
        },
        "seed" => c.seed.to_string(),
        "sigma_theta" => format!("{:?}", c.sigma_theta),
        "mu_lambda" => format!("{:?}", c.mu_lambda),
        "sigma_lambda" => format!("{:?}", c.sigma_lambda),
        "d_model" => c.d_model.to_string(),
        "k_tokens" => c.k_tokens.to_string(),
        "d_cond" => c.d_cond.to_string(),
        "planted_ranks" => c.planted_ranks.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        "teacher_scale" => format!("{:?}", c.teacher_scale),
        "n_train" => c.n_train.to_string(),
        "n_eval" => c.n_eval.to_string(),
        "sigma_obs" => format!("{:?}", c.sigma_obs),
        _ => unreachable!("unknown key {key}"),
    }
}

/// Renders every key, one per line, in [`KEYS`] order (without `base`).
pub fn serialize(config: &TrainConfig) -> String {
    KEYS.iter()
        .filter(|&&k| k != "base")
        .map(|k| format!("{k}={}\n", value_of(config, k)))
        .collect()
}

fn parse_mode(v: &str) -> std::result::Result<TrainMode, String> {
    if v == "adaptive" {
        return Ok(TrainMode::Adaptive);
    }
    match v.strip_prefix("fixed_rank:") {
        Some(r) => r.parse().map(TrainMode::FixedRank).map_err(|e| format!("bad fixed rank {r:?}: {e}")),
        None => Err(format!("mode must be `adaptive` or `fixed_rank:<r>`, got {v:?}")),
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse {v:?}: {e}"))
}

/// Parses a config. The optional `base=default|desk` key, when present,
/// must come first and selects the preset that missing keys fall back to.
pub fn parse(text: &str) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    let mut seen: Vec<&str> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let err = |msg: String| Error::Config { line: lineno, msg };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let key = *KEYS.iter().find(|&&k| k == key).ok_or_else(|| err(format!("unknown key {key:?}")))?;
        if seen.contains(&key) {
            return Err(err(format!("duplicate key {key:?}")));
        }
        seen.push(key);
        let r: std::result::Result<(), String> = (|| {
            match key {
                "base" => {
                    if seen.len() != 1 {
                        return Err("`base` must be the first key".into());
                    }
                    c = match value {
                        "default" => TrainConfig::default(),
                        "desk" => TrainConfig::desk(),
                        other => return Err(format!("unknown base preset {other:?}")),
                    };
                }
                "q" => c.q = num(value)?,
                "r_init" => c.r_init = num(value)?,
                "r_target" => c.r_target = num(value)?,
                "r_max" => c.r_max = num(value)?,
                "lambda_r" => c.lambda_r = num(value)?,
                "lambda_e" => c.lambda_e = num(value)?,
                "lambda_w" => c.lambda_w = num(value)?,
                "learning_rate" => c.learning_rate = num(value)?,
                "nu_learning_rate" => {
                    c.nu_learning_rate = if value == "shared" { None } else { Some(num(value)?) }
                }
                "steps" => c.steps = num(value)?,
                "batch_size" => c.batch_size = num(value)?,
                "rank_refresh_interval" => c.rank_refresh_interval = num(value)?,
                "mode" => c.mode = parse_mode(value)?,
                "growth" => {
                    c.growth = match value {
                        "zero_b" => GrowthInit::ZeroB,
                        "random_b" => GrowthInit::RandomB,
                        other => return Err(format!("growth must be zero_b or random_b, got {other:?}")),
                    }
                }
                "seed" => c.seed = num(value)?,
                "sigma_theta" => c.sigma_theta = num(value)?,
                "mu_lambda" => c.mu_lambda = num(value)?,
                "sigma_lambda" => c.sigma_lambda = num(value)?,
                "d_model" => c.d_model = num(value)?,
                "k_tokens" => c.k_tokens = num(value)?,
                "d_cond" => c.d_cond = num(value)?,
                "planted_ranks" => {
                    c.planted_ranks = if value.is_empty() {
                        Vec::new()
                    } else {
                        value.split(',').map(|s| num(s.trim())).collect::<std::result::Result<_, _>>()?
                    }
                }
                "teacher_scale" => c.teacher_scale = num(value)?,
                "n_train" => c.n_train = num(value)?,
                "n_eval" => c.n_eval = num(value)?,
                "sigma_obs" => c.sigma_obs = num(value)?,
                _ => unreachable!(),
            }
            Ok(())
        })();
        r.map_err(err)?;
    }
    Ok(c)
}

pub fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

pub fn write_config(config: &TrainConfig, path: &Path) -> Result<()> {
    std::fs::write(path, serialize(config)).map_err(|e| Error::io(path, e))
}
