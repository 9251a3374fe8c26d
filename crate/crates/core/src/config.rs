//! Versioned TOML configuration with dotted-key overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ExtractorConfig;
use crate::hmc::LeapfrogConfig;
use crate::losses::{ElboOptions, EntropyTerm, ImageLikelihood, LossWeights};
use crate::networks::ModelConfig;
use crate::optim::AdamConfig;
use crate::segmentation::{SegConfig, SelectorPolicy};
use crate::util::sha256_hex;

pub const SPEC_VERSION: i64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsConfig {
    /// Weight of the regularizers; the ELBO gets `1 − beta`.
    pub beta: f64,
    pub warmup_iters: u64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        WeightsConfig { beta: 0.01, warmup_iters: 1000 }
    }
}

impl WeightsConfig {
    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::from_beta(self.beta, self.warmup_iters)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElboConfig {
    pub likelihood: ImageLikelihood,
    pub entropy: EntropyTerm,
}

impl Default for ElboConfig {
    fn default() -> Self {
        let d = ElboOptions::default();
        ElboConfig { likelihood: d.likelihood, entropy: d.entropy }
    }
}

impl ElboConfig {
    pub fn options(&self) -> ElboOptions {
        ElboOptions { likelihood: self.likelihood, entropy: self.entropy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: u64,
    pub batch_size: usize,
    /// Checkpoint after every this many iterations (and at the end).
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    pub leapfrog: LeapfrogConfig,
    pub weights: WeightsConfig,
    pub optimizer: AdamConfig,
    pub features: ExtractorConfig,
    pub elbo: ElboConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            iterations: 2000,
            batch_size: 16,
            checkpoint_every: 500,
            model: ModelConfig::default(),
            leapfrog: LeapfrogConfig::default(),
            weights: WeightsConfig::default(),
            optimizer: AdamConfig::default(),
            features: ExtractorConfig::default(),
            elbo: ElboConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size and checkpoint_every must be positive".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.weights.weights()?;
        if !(self.leapfrog.eps_init > 0.0) {
            return Err(Error::Config(format!("leapfrog eps_init must be positive, got {}", self.leapfrog.eps_init)));
        }
        if let ImageLikelihood::Gaussian { sigma } = self.elbo.likelihood {
            if !(sigma > 0.0) {
                return Err(Error::Config(format!("gaussian sigma must be positive, got {sigma}")));
            }
        }
        Ok(())
    }

    /// Hash of the canonical serialization, ignoring the iteration budget
    /// so a run can be extended from its checkpoint.
    pub fn resume_key(&self) -> String {
        let mut c = self.clone();
        c.iterations = 0;
        hash_of(&c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub blob_subjects: usize,
    pub volume_shape: [usize; 3],
    pub blob_seed: u64,
    pub min_fg_pixels: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { blob_subjects: 24, volume_shape: [32, 32, 16], blob_seed: 0, min_fg_pixels: crate::data_io::DEFAULT_MIN_FG_PIXELS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub count: usize,
    /// Draws allowed per requested pair before giving up.
    pub attempts_per_pair: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { count: 200, attempts_per_pair: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub divergence_eps: f64,
    pub max_val: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { divergence_eps: crate::metrics::DEFAULT_DIVERGENCE_EPS, max_val: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    /// Training-subject counts to sweep.
    pub real_counts: Vec<usize>,
    pub synthetic_counts: Vec<usize>,
    pub folds: usize,
    pub seeds: Vec<u64>,
    pub betas: Vec<f64>,
    /// Size of the held-out pool shared by every fold.
    pub test_subjects: usize,
    pub split_seed: u64,
    pub selector: SelectorPolicy,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            real_counts: vec![6],
            synthetic_counts: vec![0, 500, 1000],
            folds: 1,
            seeds: vec![0],
            betas: vec![0.01],
            test_subjects: 6,
            split_seed: 0,
            selector: SelectorPolicy::OracleExtent,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.real_counts.is_empty() || self.synthetic_counts.is_empty() || self.seeds.is_empty() || self.betas.is_empty() {
            return Err(Error::Config("experiment sweeps must be nonempty".into()));
        }
        if self.folds == 0 || self.test_subjects == 0 || self.real_counts.contains(&0) {
            return Err(Error::Config("folds, test_subjects and real counts must be positive".into()));
        }
        if let Some(b) = self.betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::Config(format!("beta {b} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Everything the command-line tool reads from one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub spec_version: i64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub segmenter: SegConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentPlan,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            spec_version: SPEC_VERSION,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            segmenter: SegConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            experiment: ExperimentPlan::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `key` (dotted path) in `table`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Config {
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        match table.get("spec_version").and_then(|v| v.as_integer()) {
            Some(SPEC_VERSION) => {}
            Some(v) => return Err(Error::Config(format!("unsupported spec_version {v}"))),
            None => return Err(Error::Config("config lacks spec_version".into())),
        }
        for (k, v) in overrides {
            set_dotted(&mut table, k, v)?;
        }
        let cfg: Config = toml::Value::Table(table).try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Defaults plus overrides.
    pub fn with_overrides(overrides: &[(String, String)]) -> Result<Self> {
        Self::from_toml_str(&format!("spec_version = {SPEC_VERSION}"), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spec_version != SPEC_VERSION {
            return Err(Error::Config(format!("unsupported spec_version {}", self.spec_version)));
        }
        self.train.validate()?;
        self.segmenter.validate((self.train.model.slice_shape[0], self.train.model.slice_shape[1]))?;
        self.experiment.validate()?;
        let [h, w, d] = self.data.volume_shape;
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::Config("volume shape must be positive".into()));
        }
        if self.sample.attempts_per_pair == 0 {
            return Err(Error::Config("attempts_per_pair must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hash_of(self)
    }
}

/// First 16 hex digits of the SHA-256 of the TOML serialization.
pub fn hash_of<T: Serialize>(v: &T) -> String {
    let text = toml::to_string(v).expect("value serializes");
    sha256_hex(text.as_bytes())[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let c = Config::default();
        c.validate().unwrap();
        let back = Config::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn version_and_unknown_keys_are_errors() {
        assert!(Config::from_toml_str("", &[]).is_err());
        assert!(Config::from_toml_str("spec_version = 2", &[]).is_err());
        assert!(Config::from_toml_str("spec_version = 1\n[train]\nbogus = 1", &[]).is_err());
        assert!(Config::with_overrides(&[("train.model.nope".into(), "3".into())]).is_err());
    }

    #[test]
    fn dotted_overrides_reach_nested_fields() {
        let o = |k: &str, v: &str| (k.to_string(), v.to_string());
        let c = Config::with_overrides(&[
            o("train.iterations", "7"),
            o("train.weights.beta", "0.1"),
            o("train.model.slice_shape", "[32, 32]"),
            o("experiment.selector", "full-range"),
            o("train.elbo.entropy", "literal"),
        ])
        .unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.train.weights.beta, 0.1);
        assert_eq!(c.train.model.slice_shape, [32, 32]);
        assert_eq!(c.experiment.selector, SelectorPolicy::FullRange);
        assert_eq!(c.train.elbo.entropy, EntropyTerm::Literal);
        assert_ne!(c.hash(), Config::default().hash());
        assert_eq!(parse_override("a.b = 3").unwrap(), ("a.b".into(), "3".into()));
        assert!(parse_override("nokey").is_err());
    }

    #[test]
    fn resume_key_ignores_iterations() {
        let a = TrainConfig::default();
        let b = TrainConfig { iterations: 5, ..a.clone() };
        assert_eq!(a.resume_key(), b.resume_key());
        let c = TrainConfig { seed: 1, ..a.clone() };
        assert_ne!(a.resume_key(), c.resume_key());
    }
}
