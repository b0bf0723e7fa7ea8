//! Experiment configuration and the TOML config file.
//!
//! Keys in the `[experiment]` section use the short symbols from the method
//! description (`T`, `b`, `B`, `K`, `M`, ...), so a config file reads the same
//! as the hyper-parameter table it was tuned from.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::TrainHyper;
use crate::clustering::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::error::{ActuneError, Result};
use crate::membank::BankMode;
use crate::synthetic::SyntheticConfig;
use crate::uncertainty::{UncertaintyMeasure, DEFAULT_K_NN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of active self-training rounds.
    #[serde(rename = "T")]
    pub rounds: usize,
    /// Total labeling budget.
    #[serde(rename = "b")]
    pub budget: usize,
    /// Per-round budget; derived as `b / T` when absent.
    #[serde(rename = "B", skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub init_labeled: usize,
    /// Cluster count.
    #[serde(rename = "K")]
    pub clusters: usize,
    /// Regions selected for querying and, separately, for self-training.
    #[serde(rename = "M")]
    pub regions: usize,
    pub beta: f64,
    /// Growth of the self-training set per round.
    pub k_st: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub m_low: f64,
    pub m_high: f64,
    pub uncertainty_measure: UncertaintyMeasure,
    /// Defaults to `prediction` for entropy and `value` for the contrastive
    /// measure.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank_mode: Option<BankMode>,
    /// When false, self-training samples are ranked by the current round's
    /// uncertainty alone.
    pub memory_bank: bool,
    /// Lets the Random and top-uncertainty baselines self-train on the
    /// globally least uncertain samples.
    pub baseline_self_training: bool,
    pub k_nn: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            rounds: 10,
            budget: 1000,
            batch_size: None,
            init_labeled: 100,
            clusters: 30,
            regions: 10,
            beta: 0.5,
            k_st: 500,
            lambda: 1.0,
            gamma: 0.6,
            m_low: 0.8,
            m_high: 0.9,
            uncertainty_measure: UncertaintyMeasure::Entropy,
            bank_mode: None,
            memory_bank: true,
            baseline_self_training: false,
            k_nn: DEFAULT_K_NN,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Per-round query budget `B = b / T` (0 when `T = 0`).
    pub fn batch_size(&self) -> usize {
        match self.batch_size {
            Some(b) => b,
            None if self.rounds == 0 => 0,
            None => self.budget / self.rounds,
        }
    }

    pub fn effective_bank_mode(&self) -> BankMode {
        self.bank_mode.unwrap_or(match self.uncertainty_measure {
            UncertaintyMeasure::Entropy => BankMode::Prediction,
            UncertaintyMeasure::Cal => BankMode::Value,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ActuneError::Config(msg));
        if self.rounds == 0 && self.budget != 0 {
            return fail("T = 0 requires b = 0".into());
        }
        if self.rounds > 0 && self.batch_size() * self.rounds != self.budget {
            return fail(format!(
                "B * T must equal b (B = {}, T = {}, b = {})",
                self.batch_size(),
                self.rounds,
                self.budget
            ));
        }
        if self.rounds > 0 && self.batch_size() == 0 {
            return fail("per-round budget B must be positive".into());
        }
        if self.clusters == 0 || self.regions == 0 {
            return fail("K and M must be positive".into());
        }
        if self.regions > self.clusters {
            return fail(format!(
                "M = {} exceeds K = {}",
                self.regions, self.clusters
            ));
        }
        if !(self.m_low > 0.0 && self.m_low <= self.m_high && self.m_high <= 1.0) {
            return fail(format!(
                "momentum endpoints must satisfy 0 < m_low <= m_high <= 1 (got {}, {})",
                self.m_low, self.m_high
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(format!("gamma = {} must lie in (0, 1)", self.gamma));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta = {} must be nonnegative", self.beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda = {} must be nonnegative", self.lambda));
        }
        if self.k_st == 0 {
            return fail("k_st must be positive".into());
        }
        if self.k_nn == 0 {
            return fail("k_nn must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub class_count: Option<usize>,
    pub class_names: Vec<String>,
    /// `AFV1` embedding file for the pool.
    pub embeddings: Option<PathBuf>,
    /// `index,label` CSV.
    pub labels: Option<PathBuf>,
    /// Marks `labels` as ground truth for simulation. Otherwise the labels
    /// become the initial labeled set.
    pub oracle: bool,
    /// Initial labels applied on top of an oracle file (weak-label mode).
    pub initial_labels: Option<PathBuf>,
    pub test_embeddings: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// `index,text` CSV shown to annotators.
    pub payloads: Option<PathBuf>,
    /// Generate the pool in memory instead of reading files.
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Static bearer token; no authentication when absent.
    pub token: Option<String>,
    /// Persist a snapshot after this many accepted labels.
    pub snapshot_every: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            token: None,
            snapshot_every: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub experiment: ExperimentConfig,
    pub classifier: TrainHyper,
    pub clustering: ClusteringConfig,
    pub data: DataConfig,
    pub service: ServiceConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| ActuneError::Config(e.to_string()))?;
        cfg.experiment.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ActuneError::io(path, e))?;
        let mut cfg = Config::from_toml_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.data.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| ActuneError::Config(e.to_string()))
    }
}

impl DataConfig {
    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.embeddings,
            &mut self.labels,
            &mut self.initial_labels,
            &mut self.test_embeddings,
            &mut self.test_labels,
            &mut self.payloads,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Display names for classes, falling back to `class_<j>`.
    pub fn class_names(&self, class_count: usize) -> Vec<String> {
        (0..class_count)
            .map(|j| {
                self.class_names
                    .get(j)
                    .cloned()
                    .unwrap_or_else(|| format!("class_{j}"))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_hyperparameter_table() {
        let c = ExperimentConfig::default();
        assert_eq!(c.beta, 0.5);
        assert_eq!(c.lambda, 1.0);
        assert_eq!(c.gamma, 0.6);
        assert_eq!((c.m_low, c.m_high), (0.8, 0.9));
        assert_eq!(c.rounds, 10);
        assert_eq!(c.batch_size(), 100);
        assert_eq!(c.init_labeled, 100);
        c.validate().unwrap();
    }

    #[test]
    fn parses_symbol_keys() {
        let cfg = Config::from_toml_str(
            r#"
            [experiment]
            T = 5
            b = 50
            K = 8
            M = 4
            uncertainty_measure = "cal"
            seed = 3

            [classifier]
            epochs = 10
            "#,
        )
        .unwrap();
        assert_eq!(cfg.experiment.batch_size(), 10);
        assert_eq!(cfg.experiment.effective_bank_mode(), BankMode::Value);
        assert_eq!(cfg.classifier.epochs, 10);
        assert_eq!(cfg.classifier.lr, 0.1);
    }

    #[test]
    fn rejects_invalid() {
        assert!(Config::from_toml_str("[experiment]\nT = 3\nb = 10\n").is_err());
        assert!(Config::from_toml_str("[experiment]\nK = 3\nM = 4\n").is_err());
        assert!(Config::from_toml_str("[experiment]\ngamma = 1.0\n").is_err());
        assert!(Config::from_toml_str("[experiment]\nm_low = 0.95\n").is_err());
        assert!(Config::from_toml_str("[experiment]\nunknown = 1\n").is_err());
        assert!(Config::from_toml_str("[experiment]\nT = 10\nb = 100\nB = 20\n").is_err());
    }

    #[test]
    fn zero_rounds_allowed_with_zero_budget() {
        let cfg = Config::from_toml_str("[experiment]\nT = 0\nb = 0\n").unwrap();
        assert_eq!(cfg.experiment.batch_size(), 0);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = Config::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);
    }
}
