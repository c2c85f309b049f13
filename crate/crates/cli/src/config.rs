use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use clipit_core::pipeline::{PairingConfig, PipelineConfig, TextConfig};
use clipit_core::synth::SynthConfig;
use clipit_core::train::TrainConfig;
use serde::Deserialize;

/// Everything a TOML config may set. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: SynthConfig,
    pub pairing: PairingConfig,
    pub text: TextConfig,
    pub train: TrainConfig,
    pub baseline: bool,
    #[serde(skip)]
    pub lambda_set: bool,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: FileConfig = toml::from_str(text)?;
        let raw: toml::Table = toml::from_str(text)?;
        cfg.lambda_set = raw
            .get("train")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("lambda"));
        Ok(cfg)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            pairing: self.pairing.clone(),
            text: self.text.clone(),
            train: self.train.clone(),
            baseline: self.baseline,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse_and_unknown_keys_fail() {
        let cfg = FileConfig::parse("baseline = true\n[train]\nlambda = 0.5\nvariant = \"arch_only\"\n[synth]\nsamples = 10\n").unwrap();
        assert!(cfg.baseline && cfg.lambda_set);
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg.synth.samples, 10);
        assert_eq!(cfg.synth.classes, 2);
        assert!(FileConfig::parse("[train]\nlearning_rate = 1.0\n").is_err());
        assert!(!FileConfig::parse("").unwrap().lambda_set);
    }
}
