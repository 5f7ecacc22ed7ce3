//! Flat `key = value` run configuration files.
//!
//! Lines are `key = value`; `#` starts a comment and blank lines are
//! skipped. Unknown or repeated keys are rejected outright so typos cannot
//! silently fall back to defaults. Command-line flags override file values.

use coattn::cascade::Variant;
use coattn::error::{Error, Result};
use coattn::model::Direction;
use coattn::objective::DenominatorMode;
use coattn::trainer::Optimizer;
use std::path::PathBuf;

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub bundle: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub joint_dim: Option<usize>,
    pub no_residual: Option<bool>,
    pub temperature: Option<f64>,
    pub lambda: Option<f64>,
    pub denominator_mode: Option<DenominatorMode>,
    pub optimizer: Option<Optimizer>,
    pub direction: Option<Direction>,
    pub binary_recall: Option<bool>,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

impl RunConfig {
    pub fn parse(content: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in content.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "config line {} is not `key = value`: {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate config key `{key}`")));
            }
            match key {
                "bundle" => cfg.bundle = Some(PathBuf::from(value)),
                "out" => cfg.out = Some(PathBuf::from(value)),
                "loss_log" => cfg.loss_log = Some(PathBuf::from(value)),
                "pairs" => cfg.pairs = Some(PathBuf::from(value)),
                "batch_size" => cfg.batch_size = Some(parse_value(key, value)?),
                "epochs" => cfg.epochs = Some(parse_value(key, value)?),
                "learning_rate" => cfg.learning_rate = Some(parse_value(key, value)?),
                "seed" => cfg.seed = Some(parse_value(key, value)?),
                "variant" => cfg.variant = Some(Variant::parse(value)?),
                "depth" => cfg.depth = Some(parse_value(key, value)?),
                "heads" => cfg.heads = Some(parse_value(key, value)?),
                "joint_dim" => cfg.joint_dim = Some(parse_value(key, value)?),
                "no_residual" => cfg.no_residual = Some(parse_value(key, value)?),
                "temperature" => cfg.temperature = Some(parse_value(key, value)?),
                "lambda" => cfg.lambda = Some(parse_value(key, value)?),
                "denominator_mode" => {
                    cfg.denominator_mode = Some(DenominatorMode::parse(value)?)
                }
                "optimizer" => cfg.optimizer = Some(Optimizer::parse(value)?),
                "direction" => cfg.direction = Some(Direction::parse(value)?),
                "binary_recall" => cfg.binary_recall = Some(parse_value(key, value)?),
                other => {
                    return Err(Error::Config(format!("unknown config key `{other}`")));
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&content)
    }
}
