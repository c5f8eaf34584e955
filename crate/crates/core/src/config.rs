//! Experiment configuration: one TOML document with a table per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::heatmap::HeatmapConfig;
use crate::matcher::{MatchConfig, TrainConfig};
use crate::synth::{SynthConfig, FEATURE_CHANNELS};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub heatmap: HeatmapConfig,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl PipelineConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            reason: e.message().to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Overrides one value by dotted key, e.g. `match.k` with `"40"`.
    ///
    /// The value is read as a TOML literal; bare words fall back to strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::invalid("config key", format!("`{key}` is not section.field")))?;
        let mut doc = toml::Table::try_from(&*self).expect("config serializes");
        let table = doc
            .get_mut(section)
            .and_then(|t| t.as_table_mut())
            .ok_or_else(|| Error::invalid("config key", format!("unknown section `{section}`")))?;
        if !table.contains_key(field) {
            return Err(Error::invalid("config key", format!("unknown key `{key}`")));
        }
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(field.to_string(), parsed);
        *self = doc.try_into().map_err(|e: toml::de::Error| {
            Error::invalid("config key", format!("`{key}`: {}", e.message()))
        })?;
        Ok(())
    }

    /// Checks every section and the cross-section constraints.
    pub fn validate(&self) -> Result<()> {
        self.heatmap.validate()?;
        self.matching.validate()?;
        self.train.validate(self.matching.crop_size)?;
        self.eval.validate()?;
        self.synth.validate()?;
        if self.matching.c_feat != FEATURE_CHANNELS {
            return Err(Error::invalid(
                "match.c_feat",
                format!(
                    "{} does not match the {FEATURE_CHANNELS} feature channels of synthetic scenes",
                    self.matching.c_feat
                ),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<PipelineConfig> {
        PipelineConfig::parse(text, Path::new("test.toml"))
    }

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(parse("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = parse("[match]\nk = 40\n[heatmap]\nmode = \"shared_channel\"\n").unwrap();
        assert_eq!(cfg.matching.k, 40);
        assert_eq!(cfg.heatmap.mode, crate::heatmap::HeatmapMode::SharedChannel);
        assert_eq!(cfg.eval, EvalConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse("[match]\nkk = 3\n").unwrap_err().to_string();
        assert!(err.contains("kk"), "{err}");
        let err = parse("[matcher]\nk = 3\n").unwrap_err().to_string();
        assert!(err.contains("matcher"), "{err}");
    }

    #[test]
    fn round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.synth.seed = 99;
        cfg.eval.thresholds = vec![1.0, 3.0];
        assert_eq!(parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = PipelineConfig::default();
        cfg.set("match.k", "5").unwrap();
        cfg.set("train.optimizer", "sgd").unwrap();
        cfg.set("eval.thresholds", "[1.0, 2.0]").unwrap();
        assert_eq!(cfg.matching.k, 5);
        assert_eq!(cfg.train.optimizer, crate::matcher::Optimizer::Sgd);
        assert_eq!(cfg.eval.thresholds, vec![1.0, 2.0]);
        let err = cfg.set("match.q", "1").unwrap_err().to_string();
        assert!(err.contains("match.q"), "{err}");
        assert!(cfg.set("match.k", "\"x\"").is_err());
        assert!(cfg.set("k", "1").is_err());
    }

    #[test]
    fn validation_catches_cross_section_mismatch() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.matching.c_feat = 16;
        assert!(cfg.validate().is_err());
    }
}
