//! Project configuration, read from `causal-themes.toml`.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context};
use causal_themes::inference::IntervalKind;
use causal_themes::llm::LlmConfig;
use causal_themes::themes::AnnotatorPolicy;
use causal_themes::{canonical, GroupLabel, Metric};
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "causal-themes.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed; every stochastic step derives its own seed from it.
    pub seed: u64,
    pub split: SplitConfig,
    pub test: TestConfig,
    pub estimate: EstimateConfig,
    pub completeness: CompletenessConfig,
    pub tradeoff: TradeoffConfig,
    pub annotation: AnnotationConfig,
    pub llm: LlmConfig,
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub h1: usize,
    pub h0: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestConfig {
    pub permutations: usize,
    pub metric: Metric,
    /// Positive class for F1; defaults to the training majority.
    pub positive_class: Option<GroupLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub bootstrap_draws: usize,
    pub level: f64,
    pub interval: IntervalKind,
    /// Use only the first this-many human-scored documents as the labeled
    /// subset, in scoring order.
    pub labeled_budget: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    #[default]
    Machine,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletenessConfig {
    pub ridge: f64,
    /// Which hold-out scores feed the theme classifier.
    pub scores: ScoreSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TradeoffConfig {
    pub ells: Vec<usize>,
    pub outer: usize,
    pub inner: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub bind: String,
    pub policy: AnnotatorPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Where the escrow key is written, relative to the project.
    pub escrow_dir: PathBuf,
    pub transcripts_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 20240901,
            split: SplitConfig::default(),
            test: TestConfig::default(),
            estimate: EstimateConfig::default(),
            completeness: CompletenessConfig::default(),
            tradeoff: TradeoffConfig::default(),
            annotation: AnnotationConfig::default(),
            llm: LlmConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { h1: 50, h0: 50 }
    }
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            permutations: 10_000,
            metric: Metric::Accuracy,
            positive_class: None,
        }
    }
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            bootstrap_draws: 10_000,
            level: 0.95,
            interval: IntervalKind::Normal,
            labeled_budget: None,
        }
    }
}

impl Default for CompletenessConfig {
    fn default() -> Self {
        CompletenessConfig {
            ridge: causal_themes::completeness::DEFAULT_RIDGE,
            scores: ScoreSource::Machine,
        }
    }
}

impl Default for TradeoffConfig {
    fn default() -> Self {
        TradeoffConfig {
            ells: vec![20, 40, 60, 80, 100],
            outer: 200,
            inner: 50,
        }
    }
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            bind: "127.0.0.1:8765".into(),
            policy: AnnotatorPolicy::FirstRegistered,
        }
    }
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            escrow_dir: "escrow".into(),
            transcripts_dir: "transcripts".into(),
        }
    }
}

impl Config {
    /// Reads `dir/causal-themes.toml`, or defaults when it is absent.
    pub fn load(dir: &Path) -> anyhow::Result<Config> {
        let path = dir.join(CONFIG_FILE);
        if !path.exists() {
            return Ok(Config::default());
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let config: Config = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(self.test.permutations > 0, "test.permutations must be positive");
        ensure!(
            self.estimate.level > 0.0 && self.estimate.level < 1.0,
            "estimate.level must lie in (0, 1)"
        );
        ensure!(self.completeness.ridge >= 0.0, "completeness.ridge must be non-negative");
        ensure!(!self.tradeoff.ells.is_empty(), "tradeoff.ells is empty");
        self.llm.validate()?;
        Ok(())
    }

    /// Digest of the effective configuration, embedded in every report.
    pub fn hash(&self) -> String {
        canonical::digest(self).expect("configs serialize")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configs serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        let back: Config = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: Config = toml::from_str("seed = 3\n[test]\nmetric = \"f1\"\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.test.metric, Metric::F1);
        assert_eq!(c.test.permutations, 10_000);
        assert_ne!(c.hash(), Config::default().hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("sed = 3\n").is_err());
    }
}
