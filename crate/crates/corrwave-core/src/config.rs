//! Run configuration: TOML parsing, strict key validation, constraint
//! checks, and the canonical config hash used for checkpoint/replay
//! verification.
//!
//! An empty file yields the full default profile. Unknown keys are
//! rejected with a nearest-match suggestion, and every cross-field
//! constraint is checked before any compute starts.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ModelDims;
use crate::ssl::{PretrainConfig, SslHyper};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory holding one dataset bundle per subject.
    pub root: String,
    pub subject: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: "data".into(),
            subject: "subject0".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub d_ar: usize,
    pub sigma_hidden: usize,
    pub delay_hidden: usize,
    pub replace_hidden: usize,
    pub detect_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_ar: 32,
            sigma_hidden: 64,
            delay_hidden: 64,
            replace_hidden: 64,
            detect_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub theta1: f64,
    pub theta2: f64,
    pub k2: usize,
    pub k1_max: usize,
    pub n_negatives: usize,
    pub r_percent: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: usize,
    pub batch_clips: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            theta1: 0.5,
            theta2: 0.5,
            k2: 7,
            k1_max: 8,
            n_negatives: 64,
            r_percent: 15.0,
            lambda1: 0.5,
            lambda2: 0.3,
            epochs: 3,
            batch_clips: 4,
            learning_rate: 2e-4,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DownstreamConfig {
    pub epochs: usize,
    pub batch_clips: usize,
    pub trunk_lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub threshold: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_clips: 8,
            trunk_lr: 1e-6,
            head_lr: 5e-4,
            weight_decay: 1e-6,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub channels: usize,
    pub clip_len: usize,
    pub window_len: usize,
    pub sample_rate_hz: f64,
    pub event_count: usize,
    pub event_len_min: usize,
    pub event_len_max: usize,
    pub propagation_delay_per_hop: usize,
    pub amplitude_boost: f64,
    pub frequency_shift_hz: f64,
    pub ssl_clips: usize,
    pub labeled_clips: usize,
    pub train_fraction: f64,
    pub labeled_positive_fraction: f64,
    pub test_clips: usize,
    pub test_pos: usize,
    pub test_neg: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            channels: 8,
            clip_len: 2000,
            window_len: 200,
            sample_rate_hz: 250.0,
            event_count: 1,
            event_len_min: 300,
            event_len_max: 600,
            propagation_delay_per_hop: 40,
            amplitude_boost: 3.0,
            frequency_shift_hz: 12.0,
            ssl_clips: 64,
            labeled_clips: 160,
            train_fraction: 0.8,
            labeled_positive_fraction: 0.3,
            test_clips: 255,
            test_pos: 1,
            test_neg: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub ssl: SslConfig,
    pub downstream: DownstreamConfig,
    pub synth: SynthSection,
}

const TOP_KEYS: &[&str] = &["seed", "data", "model", "ssl", "downstream", "synth"];
const DATA_KEYS: &[&str] = &["root", "subject"];
const MODEL_KEYS: &[&str] = &[
    "d",
    "d_ar",
    "sigma_hidden",
    "delay_hidden",
    "replace_hidden",
    "detect_hidden",
];
const SSL_KEYS: &[&str] = &[
    "theta1",
    "theta2",
    "k2",
    "k1_max",
    "n_negatives",
    "r_percent",
    "lambda1",
    "lambda2",
    "epochs",
    "batch_clips",
    "learning_rate",
    "weight_decay",
];
const DOWNSTREAM_KEYS: &[&str] = &[
    "epochs",
    "batch_clips",
    "trunk_lr",
    "head_lr",
    "weight_decay",
    "threshold",
];
const SYNTH_KEYS: &[&str] = &[
    "channels",
    "clip_len",
    "window_len",
    "sample_rate_hz",
    "event_count",
    "event_len_min",
    "event_len_max",
    "propagation_delay_per_hop",
    "amplitude_boost",
    "frequency_shift_hz",
    "ssl_clips",
    "labeled_clips",
    "train_fraction",
    "labeled_positive_fraction",
    "test_clips",
    "test_pos",
    "test_neg",
];

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut row = vec![i + 1];
        for (j, &cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            row.push((prev[j] + cost).min(prev[j + 1] + 1).min(row[j] + 1));
        }
        prev = row;
    }
    prev[b.len()]
}

fn check_keys(table: &toml::Table, allowed: &[&str], section: &str) -> Result<()> {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            let suggestion = allowed
                .iter()
                .min_by_key(|cand| levenshtein(key, cand))
                .filter(|cand| levenshtein(key, cand) <= 3);
            let mut message = format!("unknown key in {section}");
            if let Some(s) = suggestion {
                message.push_str(&format!("; did you mean `{s}`?"));
            }
            return Err(Error::Config {
                key: key.clone(),
                message,
            });
        }
    }
    Ok(())
}

/// Parse and fully validate a config file. Missing keys take the default
/// profile; unknown keys are rejected with a suggestion.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
        key: "<file>".into(),
        message: e.to_string(),
    })?;
    check_keys(&value, TOP_KEYS, "the top level")?;
    let section_schemas: &[(&str, &[&str])] = &[
        ("data", DATA_KEYS),
        ("model", MODEL_KEYS),
        ("ssl", SSL_KEYS),
        ("downstream", DOWNSTREAM_KEYS),
        ("synth", SYNTH_KEYS),
    ];
    for (name, keys) in section_schemas {
        if let Some(section) = value.get(*name) {
            let table = section.as_table().ok_or_else(|| Error::Config {
                key: (*name).into(),
                message: "expected a table".into(),
            })?;
            check_keys(table, keys, &format!("[{name}]"))?;
        }
    }
    let config: RunConfig =
        toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config {
                key: "<file>".into(),
                message: e.to_string(),
            })?;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    /// Encoded positions per window under the fixed downsample factor.
    pub fn encoded_len(&self) -> usize {
        self.synth.window_len / 10
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, message: String| -> Result<()> {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        let ssl = &self.ssl;
        if ssl.lambda1 < 0.0 || ssl.lambda2 < 0.0 || ssl.lambda1 + ssl.lambda2 >= 1.0 {
            return fail(
                "ssl.lambda1",
                format!(
                    "constraint lambda1 + lambda2 < 1 violated: {} + {}",
                    ssl.lambda1, ssl.lambda2
                ),
            );
        }
        if !(0.0..=1.0).contains(&ssl.theta1) {
            return fail("ssl.theta1", format!("must lie in [0, 1], got {}", ssl.theta1));
        }
        if !(-1.0..=1.0).contains(&ssl.theta2) {
            return fail("ssl.theta2", format!("must lie in [-1, 1], got {}", ssl.theta2));
        }
        if ssl.n_negatives < 2 {
            return fail(
                "ssl.n_negatives",
                format!("training needs N >= 2, got {}", ssl.n_negatives),
            );
        }
        if !(0.0..100.0).contains(&ssl.r_percent) || ssl.r_percent == 0.0 {
            return fail(
                "ssl.r_percent",
                format!("must lie in (0, 100), got {}", ssl.r_percent),
            );
        }
        if ssl.k1_max == 0 || ssl.k2 == 0 {
            return fail("ssl.k1_max", "prediction steps must be positive".into());
        }
        let t_len = self.encoded_len();
        if t_len < ssl.k2 + ssl.k1_max + 1 {
            return fail(
                "synth.window_len",
                format!(
                    "encoded length floor(W / 10) = {t_len} must be at least \
                     K2 + k1_max + 1 = {}",
                    ssl.k2 + ssl.k1_max + 1
                ),
            );
        }
        if self.synth.window_len > self.synth.clip_len {
            return fail(
                "synth.window_len",
                format!(
                    "window {} exceeds clip length {}",
                    self.synth.window_len, self.synth.clip_len
                ),
            );
        }
        let segments_per_clip = self.synth.clip_len / self.synth.window_len;
        if segments_per_clip <= ssl.k2 {
            return fail(
                "synth.clip_len",
                format!(
                    "clips hold {segments_per_clip} segments; the delayed task needs \
                     at least K2 + 1 = {}",
                    ssl.k2 + 1
                ),
            );
        }
        if self.synth.event_len_min == 0 || self.synth.event_len_min > self.synth.event_len_max {
            return fail(
                "synth.event_len_min",
                format!(
                    "bad event length range [{}, {}]",
                    self.synth.event_len_min, self.synth.event_len_max
                ),
            );
        }
        if self.synth.amplitude_boost <= 1.0 {
            return fail(
                "synth.amplitude_boost",
                format!("must exceed 1, got {}", self.synth.amplitude_boost),
            );
        }
        if self.downstream.threshold <= 0.0 || self.downstream.threshold >= 1.0 {
            return fail(
                "downstream.threshold",
                format!("must lie in (0, 1), got {}", self.downstream.threshold),
            );
        }
        for (key, lr) in [
            ("ssl.learning_rate", ssl.learning_rate),
            ("downstream.trunk_lr", self.downstream.trunk_lr),
            ("downstream.head_lr", self.downstream.head_lr),
        ] {
            if lr <= 0.0 {
                return fail(key, format!("learning rate must be positive, got {lr}"));
            }
        }
        self.split_spec().validate()?;
        Ok(())
    }

    /// Canonical hash of the full configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            d: self.model.d,
            d_ar: self.model.d_ar,
            sigma_hidden: self.model.sigma_hidden,
            delay_hidden: self.model.delay_hidden,
            replace_hidden: self.model.replace_hidden,
            detect_hidden: self.model.detect_hidden,
            k1_max: self.ssl.k1_max,
        }
    }

    pub fn ssl_hyper(&self) -> SslHyper {
        SslHyper {
            theta1: self.ssl.theta1,
            theta2: self.ssl.theta2,
            k2: self.ssl.k2,
            n_negatives: self.ssl.n_negatives,
            r_percent: self.ssl.r_percent,
            lambda1: self.ssl.lambda1,
            lambda2: self.ssl.lambda2,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.ssl.epochs,
            batch_clips: self.ssl.batch_clips,
            hyper: self.ssl_hyper(),
            learning_rate: self.ssl.learning_rate,
            weight_decay: self.ssl.weight_decay,
            seed: self.seed,
        }
    }

    pub fn synth_config(&self, seed: u64) -> crate::synth::SynthConfig {
        crate::synth::SynthConfig {
            channels: self.synth.channels,
            length: self.synth.clip_len,
            sample_rate_hz: self.synth.sample_rate_hz,
            event_count: self.synth.event_count,
            event_len_range: (self.synth.event_len_min, self.synth.event_len_max),
            propagation_delay_per_hop: self.synth.propagation_delay_per_hop,
            propagation_graph: crate::synth::SynthConfig::default_graph(self.synth.channels),
            amplitude_boost: self.synth.amplitude_boost,
            frequency_shift_hz: self.synth.frequency_shift_hz,
            seed,
        }
    }

    pub fn split_spec(&self) -> crate::synth::dataset::SplitSpec {
        crate::synth::dataset::SplitSpec {
            ssl_clips: self.synth.ssl_clips,
            labeled_clips: self.synth.labeled_clips,
            train_fraction: self.synth.train_fraction,
            test_clips: self.synth.test_clips,
            test_pos_neg: (self.synth.test_pos, self.synth.test_neg),
            labeled_positive_fraction: self.synth.labeled_positive_fraction,
        }
    }
}

/// Sorted `(key, value)` flattening, handy for diagnostics and reports.
pub fn flatten_for_report(config: &RunConfig) -> BTreeMap<String, String> {
    let json = serde_json::to_value(config).expect("config serializes");
    let mut out = BTreeMap::new();
    fn walk(prefix: &str, value: &serde_json::Value, out: &mut BTreeMap<String, String>) {
        match value {
            serde_json::Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    walk("", &json, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_default_profile() {
        let config = parse_config_str("").unwrap();
        assert_eq!(config.ssl.theta1, 0.5);
        assert_eq!(config.ssl.theta2, 0.5);
        assert_eq!(config.ssl.k2, 7);
        assert_eq!(config.ssl.k1_max, 8);
        assert_eq!(config.ssl.lambda1, 0.5);
        assert_eq!(config.ssl.lambda2, 0.3);
        assert_eq!(config.ssl.learning_rate, 2e-4);
        assert_eq!(config.downstream.head_lr, 5e-4);
        assert_eq!(config.downstream.trunk_lr, 1e-6);
    }

    #[test]
    fn lambda_constraint_rejected_with_key() {
        let err = parse_config_str("[ssl]\nlambda1 = 0.6\nlambda2 = 0.5\n").unwrap_err();
        match err {
            Error::Config { key, message } => {
                assert_eq!(key, "ssl.lambda1");
                assert!(message.contains("lambda1 + lambda2 < 1"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn misspelled_key_gets_suggestion() {
        let err = parse_config_str("[ssl]\ntheta_one = 0.5\n").unwrap_err();
        match err {
            Error::Config { key, message } => {
                assert_eq!(key, "theta_one");
                assert!(message.contains("theta1"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn window_constraint_enforced() {
        let err = parse_config_str("[synth]\nwindow_len = 100\n").unwrap_err();
        // floor(100/10) = 10 < K2 + k1_max + 1 = 16.
        assert!(err.to_string().contains("K2 + k1_max + 1"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = parse_config_str("").unwrap();
        let b = parse_config_str("").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = parse_config_str("[ssl]\nlambda1 = 0.4\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn flattening_contains_nested_keys() {
        let config = RunConfig::default();
        let flat = flatten_for_report(&config);
        assert!(flat.contains_key("ssl.theta1"));
        assert!(flat.contains_key("synth.channels"));
    }
}
