//! Experiment configuration: one TOML file drives every pipeline stage.

use selexp::attribution::MethodSpec;
use selexp::uncertainty::MetricKind;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    #[serde(default)]
    pub model: NetConfig,
    #[serde(default)]
    pub amortizer: AmortizerConfig,
    #[serde(default)]
    pub metric: MetricConfig,
    pub selective: SelectiveSection,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub label_column: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    pub seed: u64,
}

fn default_fractions() -> [f64; 3] {
    [0.5, 0.25, 0.25]
}

/// Training hyperparameters for one network. `hidden` empty means one hidden
/// layer of width 3d.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.05
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: Vec::new(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmortizerConfig {
    /// Monte Carlo method whose cached explanations are the regression
    /// targets.
    #[serde(default = "default_train_method")]
    pub train_method: String,
    #[serde(flatten)]
    pub net: NetConfig,
}

fn default_train_method() -> String {
    "svs-12".into()
}

impl Default for AmortizerConfig {
    fn default() -> Self {
        Self {
            train_method: default_train_method(),
            net: NetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    #[serde(default = "default_metric_kind")]
    pub kind: String,
    /// Cache used as metric targets; empty means the amortizer's training
    /// method.
    #[serde(default)]
    pub target_method: String,
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    #[serde(flatten)]
    pub net: NetConfig,
}

fn default_metric_kind() -> String {
    "learned".into()
}
fn default_ensemble() -> usize {
    20
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            kind: default_metric_kind(),
            target_method: String::new(),
            ensemble_size: default_ensemble(),
            net: NetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectiveSection {
    /// Coverage level. Exactly one of `alpha` and `n_budget` must be set.
    pub alpha: Option<f64>,
    /// Per-explanation inference budget; coverage is derived from it.
    pub n_budget: Option<f64>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_mc_method")]
    pub mc_method: String,
    #[serde(default = "default_reference_method")]
    pub reference_method: String,
    #[serde(default = "default_min_bin_count")]
    pub min_bin_count: usize,
}

fn default_bins() -> usize {
    10
}
fn default_mc_method() -> String {
    "svs-3".into()
}
fn default_reference_method() -> String {
    "svs-12".into()
}
fn default_min_bin_count() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    /// High-quality reference explainer for every protocol.
    #[serde(default = "default_eval_reference")]
    pub reference_method: String,
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_recourse_grid")]
    pub recourse_grid: Vec<f64>,
    #[serde(default = "default_quantile_grid")]
    pub quantile_grid: Vec<f64>,
    #[serde(default = "default_removal_grid")]
    pub removal_grid: Vec<f64>,
    /// Recourse fractions compared in the worst-case-quantile protocol.
    #[serde(default = "default_quantile_fractions")]
    pub quantile_recourse_fractions: Vec<f64>,
    /// Permutation counts of the cached ladder for time sharing.
    #[serde(default = "default_ladder")]
    pub svs_ladder: Vec<usize>,
    #[serde(default = "default_ablation")]
    pub ablation_methods: Vec<String>,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    /// Score the perturbation curve against gold labels instead of the
    /// model's own predictions.
    #[serde(default)]
    pub perturbation_gold_labels: bool,
}

fn default_eval_reference() -> String {
    "exact".into()
}
fn default_alpha_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}
fn default_recourse_grid() -> Vec<f64> {
    vec![0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0]
}
fn default_quantile_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}
fn default_removal_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}
fn default_quantile_fractions() -> Vec<f64> {
    vec![0.2, 0.5, 0.7, 1.0]
}
fn default_ladder() -> Vec<usize> {
    vec![1, 2, 3]
}
fn default_ablation() -> Vec<String> {
    vec!["svs-2".into(), "svs-8".into(), "ks-32".into()]
}
fn default_resamples() -> usize {
    1000
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            reference_method: default_eval_reference(),
            alpha_grid: default_alpha_grid(),
            recourse_grid: default_recourse_grid(),
            quantile_grid: default_quantile_grid(),
            removal_grid: default_removal_grid(),
            quantile_recourse_fractions: default_quantile_fractions(),
            svs_ladder: default_ladder(),
            ablation_methods: default_ablation(),
            bootstrap_resamples: default_resamples(),
            perturbation_gold_labels: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: Self = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fr = &self.split.fractions;
        if fr.iter().any(|f| *f < 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::config(format!(
                "split.fractions must be nonnegative and sum to 1, got {fr:?}"
            )));
        }
        match (self.selective.alpha, self.selective.n_budget) {
            (Some(_), Some(_)) => {
                return Err(CliError::config(
                    "set exactly one of selective.alpha and selective.n_budget, not both".into(),
                ))
            }
            (None, None) => {
                return Err(CliError::config(
                    "set exactly one of selective.alpha and selective.n_budget".into(),
                ))
            }
            (Some(a), None) if !(0.0..=1.0).contains(&a) => {
                return Err(CliError::config(format!(
                    "selective.alpha must lie in [0, 1], got {a}"
                )))
            }
            _ => {}
        }
        if self.selective.bins == 0 {
            return Err(CliError::config("selective.bins must be >= 1".into()));
        }
        self.mc_method()?;
        self.reference_method()?;
        self.train_method()?;
        self.metric_target_method()?;
        self.eval_reference_method()?;
        for m in &self.evaluate.ablation_methods {
            parse_method(m)?;
        }
        if self.selective.mc_method == self.selective.reference_method {
            return Err(CliError::config(format!(
                "selective.mc_method and selective.reference_method are both `{}`; the reference \
                 draws must be independent of the recourse draws, so use distinct methods",
                self.selective.mc_method
            )));
        }
        self.metric_kind()?;
        if self.metric.ensemble_size < 2 {
            return Err(CliError::config(
                "metric.ensemble_size must be >= 2".into(),
            ));
        }
        Ok(())
    }

    pub fn metric_kind(&self) -> Result<MetricKind, CliError> {
        self.metric
            .kind
            .parse()
            .map_err(|e| CliError::config(format!("metric.kind: {e}")))
    }

    pub fn mc_method(&self) -> Result<MethodSpec, CliError> {
        parse_method(&self.selective.mc_method)
    }

    pub fn reference_method(&self) -> Result<MethodSpec, CliError> {
        parse_method(&self.selective.reference_method)
    }

    pub fn train_method(&self) -> Result<MethodSpec, CliError> {
        parse_method(&self.amortizer.train_method)
    }

    /// Metric targets default to the amortizer's training cache.
    pub fn metric_target_method(&self) -> Result<MethodSpec, CliError> {
        if self.metric.target_method.is_empty() {
            self.train_method()
        } else {
            parse_method(&self.metric.target_method)
        }
    }

    pub fn eval_reference_method(&self) -> Result<MethodSpec, CliError> {
        parse_method(&self.evaluate.reference_method)
    }
}

pub fn parse_method(name: &str) -> Result<MethodSpec, CliError> {
    MethodSpec::parse(name).map_err(|e| CliError::config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset]
        path = "data.csv"
        label_column = "label"

        [split]
        seed = 7

        [selective]
        alpha = 0.5
    "#;

    #[test]
    fn minimal_config_gets_defaults() {
        let config: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        config.validate().unwrap();
        assert_eq!(config.split.fractions, [0.5, 0.25, 0.25]);
        assert_eq!(config.amortizer.train_method, "svs-12");
        assert_eq!(config.selective.bins, 10);
        assert_eq!(config.metric.ensemble_size, 20);
        assert_eq!(config.evaluate.reference_method, "exact");
        assert_eq!(config.metric_target_method().unwrap().name(), "svs-12");
    }

    #[test]
    fn alpha_and_budget_are_mutually_exclusive() {
        let both = MINIMAL.replace("alpha = 0.5", "alpha = 0.5\nn_budget = 4.0");
        let config: ExperimentConfig = toml::from_str(&both).unwrap();
        assert!(config.validate().is_err());
        let neither = MINIMAL.replace("alpha = 0.5", "bins = 10");
        let config: ExperimentConfig = toml::from_str(&neither).unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn equal_mc_and_reference_methods_are_rejected() {
        let bad = MINIMAL.replace(
            "alpha = 0.5",
            "alpha = 0.5\nmc_method = \"svs-12\"\nreference_method = \"svs-12\"",
        );
        let config: ExperimentConfig = toml::from_str(&bad).unwrap();
        let err = config.validate().unwrap_err();
        assert!(err.message.contains("independent"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\n[unknown]\nkey = 1\n");
        assert!(toml::from_str::<ExperimentConfig>(&bad).is_err());
    }
}
