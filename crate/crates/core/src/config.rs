//! Flat JSON run configuration.

use serde::{Deserialize, Serialize};

use crate::cfe::Activation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopdownSource {
    /// Level-above stage-I map feeds the top-down node.
    #[default]
    Input,
    /// Level-above stage-O map. Accepted by the parser, rejected by
    /// validation: P5O depends on P4O, which depends on P4F.
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub regions_s: usize,
    pub topk_k: usize,
    pub heads: usize,
    pub fusion_width: usize,
    pub epsilon: f64,
    pub dilation: usize,
    pub lce_kernel: usize,
    pub activation: Activation,
    pub cfe_enabled: bool,
    pub attention_fusion_enabled: bool,
    pub topdown_source: TopdownSource,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            regions_s: 2,
            topk_k: 2,
            heads: 1,
            fusion_width: 48,
            epsilon: 1e-4,
            dilation: 2,
            lce_kernel: 5,
            activation: Activation::Relu,
            cfe_enabled: true,
            attention_fusion_enabled: true,
            topdown_source: TopdownSource::Input,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses a flat JSON object; missing keys take their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s2 = self.regions_s * self.regions_s;
        if self.fusion_width == 0 || !self.fusion_width.is_multiple_of(3) {
            return Err(Error::config(format!(
                "fusion_width % 3 must be 0 (got fusion_width = {})",
                self.fusion_width
            )));
        }
        if self.regions_s == 0 {
            return Err(Error::config("regions_s must be positive"));
        }
        if self.topk_k == 0 || self.topk_k > s2 {
            return Err(Error::config(format!(
                "topk_k ≤ S² violated (topk_k = {}, S² = {s2}); topk_k must also be ≥ 1",
                self.topk_k
            )));
        }
        if self.heads == 0 || !self.fusion_width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "heads must divide fusion_width (heads = {}, fusion_width = {})",
                self.heads, self.fusion_width
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be finite and ≥ 0 (got {})", self.epsilon)));
        }
        if self.dilation == 0 {
            return Err(Error::config("dilation must be positive"));
        }
        if self.lce_kernel.is_multiple_of(2) {
            return Err(Error::config(format!("lce_kernel must be odd (got {})", self.lce_kernel)));
        }
        if self.topdown_source == TopdownSource::Output {
            return Err(Error::config(
                "topdown_source = output is cyclic: P5O needs P4O, which needs P4F",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_err(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(Error::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_object_is_defaults() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn invariant_violations_name_the_rule() {
        assert!(config_err(r#"{"fusion_width": 50}"#).contains("fusion_width % 3"));
        assert!(config_err(r#"{"topk_k": 5, "regions_s": 2}"#).contains("topk_k ≤ S²"));
        assert!(config_err(r#"{"heads": 5, "fusion_width": 48}"#).contains("heads"));
        assert!(config_err(r#"{"topdown_source": "output"}"#).contains("cyclic"));
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(config_err(r#"{"fusion_widht": 48}"#).contains("fusion_widht"));
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig {
            activation: Activation::None,
            seed: 7,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&cfg.to_json()).unwrap(), cfg);
    }
}
