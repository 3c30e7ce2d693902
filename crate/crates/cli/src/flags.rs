use std::path::PathBuf;

use clap::{Args, ValueEnum};
use patchprune::io::{load_weights, random_weights};
use patchprune::model::{Model, ModelConfig};
use patchprune::IndicatorKind;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    pub fn is_on(self) -> bool {
        self == OnOff::On
    }
}

impl From<bool> for OnOff {
    fn from(b: bool) -> Self {
        if b {
            OnOff::On
        } else {
            OnOff::Off
        }
    }
}

fn parse_indicator(s: &str) -> Result<IndicatorKind, String> {
    s.parse()
}

fn parse_block_list(s: &str) -> Result<Vec<usize>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

/// Flags that change what gets pruned. Unset flags keep the value from
/// the weights manifest (or the DeiT-S defaults for random weights).
#[derive(Args, Clone, Debug, Default)]
pub struct PruningArgs {
    /// Fraction of candidate tokens kept at each pruning stage, in (0, 1].
    #[arg(long)]
    pub keep_rate: Option<f64>,

    /// Importance indicator: none, mean, variance or medad.
    #[arg(long, value_parser = parse_indicator)]
    pub indicator: Option<IndicatorKind>,

    /// Fold pruned tokens into one fusion token.
    #[arg(long, value_enum)]
    pub fusion: Option<OnOff>,

    /// Softmax temperature of the fusion weights, in (0, 1].
    #[arg(long)]
    pub temperature: Option<f64>,

    /// Overlapping patches: stride = 3/4 of the patch size.
    #[arg(long, value_enum)]
    pub overlap: Option<OnOff>,

    /// Comma-separated 1-indexed pruning block positions.
    #[arg(long, value_parser = parse_block_list)]
    pub prune_blocks: Option<Vec<usize>>,

    /// Seed for random weights and random inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl PruningArgs {
    pub fn apply(&self, mut cfg: ModelConfig) -> Result<ModelConfig, CliError> {
        if let Some(k) = self.indicator {
            cfg.indicator = k;
        }
        if let Some(r) = self.keep_rate {
            cfg.keep_rate = r;
        }
        if let Some(f) = self.fusion {
            cfg.fusion_enabled = f.is_on();
        }
        if let Some(t) = self.temperature {
            cfg.temperature = t;
        }
        if let Some(o) = self.overlap {
            cfg = cfg.with_overlap(o.is_on());
        }
        if let Some(b) = &self.prune_blocks {
            cfg.prune_block_indices = b.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where the weights come from.
#[derive(Args, Clone, Debug, Default)]
pub struct ModelArgs {
    /// Weights file (VPW1). Random DeiT-S weights seeded by --seed when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub model: Model,
    pub source: String,
}

impl ModelArgs {
    /// Resolves the weights and applies the pruning flags on top of the
    /// stored configuration.
    pub fn load(&self, pruning: &PruningArgs) -> Result<LoadedModel, CliError> {
        match &self.model {
            Some(path) => {
                let (stored, weights) = load_weights(path)?;
                let cfg = pruning.apply(stored)?;
                weights.validate(&cfg).map_err(|e| {
                    CliError::Usage(format!(
                        "{}: weights do not fit the requested config ({e})",
                        path.display()
                    ))
                })?;
                Ok(LoadedModel {
                    model: Model::new(cfg, weights)?,
                    source: path.display().to_string(),
                })
            }
            None => {
                let cfg = pruning.apply(ModelConfig::deit_small())?;
                let weights = random_weights(&cfg, pruning.seed);
                Ok(LoadedModel {
                    model: Model::new(cfg, weights)?,
                    source: format!("random(seed={})", pruning.seed),
                })
            }
        }
    }
}

/// One-line JSON echo of everything that determines a run.
pub fn echo_config(cfg: &ModelConfig, extra: &[(&str, serde_json::Value)]) -> String {
    let mut v = serde_json::to_value(cfg).expect("config serialises");
    if let serde_json::Value::Object(map) = &mut v {
        for (k, val) in extra {
            map.insert((*k).to_string(), val.clone());
        }
    }
    format!("config: {v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_defaults() {
        let args = PruningArgs {
            keep_rate: Some(0.5),
            indicator: Some(IndicatorKind::Medad),
            fusion: Some(OnOff::On),
            temperature: Some(0.1),
            overlap: Some(OnOff::On),
            prune_blocks: Some(vec![3, 6, 9]),
            seed: 1,
        };
        let cfg = args.apply(ModelConfig::deit_small()).unwrap();
        assert_eq!(cfg.keep_rate, 0.5);
        assert_eq!(cfg.indicator, IndicatorKind::Medad);
        assert!(cfg.fusion_enabled);
        assert_eq!(cfg.stride, 12);
        assert_eq!(cfg.prune_block_indices, vec![3, 6, 9]);
    }

    #[test]
    fn invalid_flags_rejected() {
        let args = PruningArgs {
            keep_rate: Some(1.5),
            ..Default::default()
        };
        assert!(args.apply(ModelConfig::deit_small()).is_err());
    }

    #[test]
    fn block_list_parsing() {
        assert_eq!(parse_block_list("4,7, 10").unwrap(), vec![4, 7, 10]);
        assert!(parse_block_list("4,x").is_err());
        assert_eq!(parse_block_list("").unwrap(), Vec::<usize>::new());
    }
}
