//! Experiment configuration: a flat key/value TOML document with a schema
//! version. Unknown keys are rejected so a misspelled hyperparameter cannot
//! silently fall back to a default. Command-line `key=value` overrides are
//! applied onto the parsed document before validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{NormSettings, StageSpec};
use crate::td::{LearnerConfig, OptimizerKind};
use crate::trace_env::TraceConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Columnar,
    Constructive,
    Ccn,
    Tbptt,
}

impl Topology {
    pub fn is_staged(&self) -> bool {
        !matches!(self, Topology::Tbptt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    #[default]
    Trace,
    Replay,
}

fn d_total_steps() -> u64 {
    1_000_000
}
fn d_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn d_metric_window() -> usize {
    10_000
}
fn d_curve_cadence() -> u64 {
    10_000
}
fn d_features() -> usize {
    10
}
fn d_features_per_stage() -> usize {
    4
}
fn d_steps_per_stage() -> u64 {
    250_000
}
fn d_truncation() -> usize {
    15
}
fn d_norm_beta() -> f64 {
    0.99999
}
fn d_norm_eps() -> f64 {
    0.001
}
fn d_alpha() -> f64 {
    1e-4
}
fn d_gamma() -> f64 {
    0.90
}
fn d_lambda() -> f64 {
    0.99
}
fn d_optimizer() -> String {
    "adaptive".into()
}
fn d_beta2() -> f64 {
    0.9999
}
fn d_eps_opt() -> f64 {
    1e-8
}
fn d_isi() -> (u32, u32) {
    (24, 36)
}
fn d_iti() -> (u32, u32) {
    (80, 120)
}
fn d_noise() -> usize {
    5
}

/// One experiment: a topology, its module settings, and the run plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub topology: Topology,

    #[serde(default = "d_total_steps")]
    pub total_steps: u64,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_metric_window")]
    pub metric_window: usize,
    #[serde(default = "d_curve_cadence")]
    pub curve_cadence: u64,
    /// 0 resolves to the number of available cores (or the
    /// `CCNET_WORKERS` environment variable).
    #[serde(default)]
    pub workers: usize,

    #[serde(default)]
    pub env: EnvKind,
    #[serde(default)]
    pub stream_path: String,
    #[serde(default)]
    pub clip_rewards: bool,
    /// Cumulant channel for replay streams; defaults to the file's header.
    #[serde(default)]
    pub cumulant_index: Option<usize>,

    #[serde(default = "d_isi")]
    pub isi: (u32, u32),
    #[serde(default = "d_iti")]
    pub iti: (u32, u32),
    #[serde(default = "d_noise")]
    pub noise_features: usize,

    /// Hidden features for columnar and tbptt topologies.
    #[serde(default = "d_features")]
    pub features: usize,
    #[serde(default = "d_features_per_stage")]
    pub features_per_stage: usize,
    #[serde(default = "d_steps_per_stage")]
    pub steps_per_stage: u64,
    /// Staged topologies only; derived from total steps when absent.
    #[serde(default)]
    pub total_stages: Option<usize>,
    #[serde(default = "d_truncation")]
    pub truncation: usize,
    /// Defaults per topology: on for staged networks, unsupported for tbptt.
    #[serde(default)]
    pub normalize: Option<bool>,
    #[serde(default = "d_norm_beta")]
    pub norm_beta: f64,
    #[serde(default = "d_norm_eps")]
    pub norm_eps: f64,

    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_optimizer")]
    pub optimizer: String,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps_opt")]
    pub eps_opt: f64,
}

impl ExperimentConfig {
    pub fn template(topology: Topology) -> Self {
        let doc = format!(
            "schema_version = {SCHEMA_VERSION}\ntopology = \"{}\"\n",
            match topology {
                Topology::Columnar => "columnar",
                Topology::Constructive => "constructive",
                Topology::Ccn => "ccn",
                Topology::Tbptt => "tbptt",
            }
        );
        parse_config(&doc, &[]).expect("template config")
    }

    /// Stage count for staged topologies: explicit, or one stage per
    /// `steps_per_stage` slice of the run (at least one).
    pub fn resolved_stages(&self) -> usize {
        match self.topology {
            Topology::Columnar | Topology::Tbptt => 1,
            _ => self.total_stages.unwrap_or_else(|| {
                (self.total_steps.div_ceil(self.steps_per_stage)).max(1) as usize
            }),
        }
    }

    pub fn normalize_enabled(&self) -> bool {
        self.normalize.unwrap_or(self.topology.is_staged())
    }

    pub fn stage_spec(&self) -> StageSpec {
        match self.topology {
            Topology::Columnar => StageSpec {
                features_per_stage: self.features,
                steps_per_stage: 0,
                total_stages: 1,
            },
            Topology::Constructive => StageSpec {
                features_per_stage: 1,
                steps_per_stage: self.steps_per_stage,
                total_stages: self.resolved_stages(),
            },
            Topology::Ccn => StageSpec {
                features_per_stage: self.features_per_stage,
                steps_per_stage: self.steps_per_stage,
                total_stages: self.resolved_stages(),
            },
            Topology::Tbptt => StageSpec {
                features_per_stage: self.features,
                steps_per_stage: 0,
                total_stages: 1,
            },
        }
    }

    pub fn norm_settings(&self) -> NormSettings {
        NormSettings {
            enabled: self.normalize_enabled(),
            beta: self.norm_beta,
            eps: self.norm_eps,
        }
    }

    pub fn learner_config(&self) -> Result<LearnerConfig> {
        let optimizer = match self.optimizer.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adaptive" => OptimizerKind::Adaptive,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown optimizer '{other}' (expected 'sgd' or 'adaptive')"
                )))
            }
        };
        let cfg = LearnerConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            lambda: self.lambda,
            optimizer,
            beta2: self.beta2,
            eps_opt: self.eps_opt,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn trace_config(&self, seed: u64) -> TraceConfig {
        TraceConfig {
            isi: self.isi,
            iti: self.iti,
            n_noise: self.noise_features,
            seed,
            ..TraceConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("total_steps must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        if self.metric_window == 0 || self.curve_cadence == 0 {
            return Err(Error::InvalidConfig(
                "metric_window and curve_cadence must be positive".into(),
            ));
        }
        self.learner_config()?;
        match self.topology {
            Topology::Columnar | Topology::Tbptt => {
                if self.features == 0 {
                    return Err(Error::InvalidConfig("features must be >= 1".into()));
                }
            }
            Topology::Ccn | Topology::Constructive => {
                if self.features_per_stage == 0 {
                    return Err(Error::InvalidConfig(
                        "features_per_stage must be >= 1".into(),
                    ));
                }
                if self.steps_per_stage == 0 && self.total_stages.is_none() {
                    return Err(Error::InvalidConfig(
                        "steps_per_stage must be positive for staged topologies".into(),
                    ));
                }
            }
        }
        if self.topology == Topology::Tbptt {
            if self.truncation < 1 {
                return Err(Error::InvalidConfig("truncation must be >= 1".into()));
            }
            if self.normalize == Some(true) {
                return Err(Error::InvalidConfig(
                    "the dense baseline does not support feature normalization".into(),
                ));
            }
        }
        if self.env == EnvKind::Replay && self.stream_path.is_empty() {
            return Err(Error::InvalidConfig(
                "replay runs need a stream_path".into(),
            ));
        }
        if self.env == EnvKind::Trace {
            self.trace_config(0).validate()?;
        }
        Ok(())
    }
}

/// Parse a TOML document and apply `key=value` overrides before validation.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
    for ov in overrides {
        let (key, value) = ov
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override '{ov}' is not key=value")))?;
        let key = key.trim();
        let value = value.trim();
        // Parse the value with TOML's own grammar; bare words fall back to
        // strings so `topology=ccn` works without quoting.
        let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").unwrap(),
            Err(_) => toml::Value::String(value.to_string()),
        };
        table.insert(key.to_string(), parsed);
    }
    let cfg: ExperimentConfig = table
        .try_into()
        .map_err(|e| Error::InvalidConfig(format!("config error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<std::path::Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_the_trace_task() {
        let cfg = parse_config("schema_version = 1\ntopology = \"ccn\"\n", &[]).unwrap();
        assert_eq!(cfg.gamma, 0.90);
        assert_eq!(cfg.lambda, 0.99);
        assert_eq!(cfg.alpha, 1e-4);
        assert_eq!(cfg.beta2, 0.9999);
        assert_eq!(cfg.eps_opt, 1e-8);
        assert_eq!(cfg.norm_beta, 0.99999);
        assert_eq!(cfg.norm_eps, 0.001);
        assert_eq!(cfg.features_per_stage, 4);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
        assert!(cfg.normalize_enabled());
        assert_eq!(cfg.resolved_stages(), 4);
        assert!(cfg.learner_config().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config(
            "schema_version = 1\ntopology = \"ccn\"\nstep_sizee = 0.1\n",
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{err}");
    }

    #[test]
    fn schema_version_is_checked() {
        let err = parse_config("schema_version = 9\ntopology = \"ccn\"\n", &[]).unwrap_err();
        assert!(format!("{err}").contains("schema_version"));
    }

    #[test]
    fn overrides_take_effect_and_are_type_checked() {
        let cfg = parse_config(
            "schema_version = 1\ntopology = \"ccn\"\n",
            &[
                "alpha=0.001".to_string(),
                "topology=columnar".to_string(),
                "seeds=[7, 8]".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.alpha, 0.001);
        assert_eq!(cfg.topology, Topology::Columnar);
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert!(parse_config(
            "schema_version = 1\ntopology = \"ccn\"\n",
            &["alpha=fast".to_string()]
        )
        .is_err());
    }

    #[test]
    fn tbptt_rejects_normalization_and_zero_truncation() {
        let err = parse_config(
            "schema_version = 1\ntopology = \"tbptt\"\nnormalize = true\n",
            &[],
        )
        .unwrap_err();
        assert!(format!("{err}").contains("normalization"));
        let err = parse_config(
            "schema_version = 1\ntopology = \"tbptt\"\ntruncation = 0\n",
            &[],
        )
        .unwrap_err();
        assert!(format!("{err}").contains("truncation"));
        let cfg =
            parse_config("schema_version = 1\ntopology = \"tbptt\"\n", &[]).unwrap();
        assert!(!cfg.normalize_enabled());
    }

    #[test]
    fn paper_scale_stage_arithmetic() {
        let cfg = parse_config(
            "schema_version = 1\ntopology = \"ccn\"\ntotal_steps = 10000000\nsteps_per_stage = 2500000\n",
            &[],
        )
        .unwrap();
        assert_eq!(cfg.resolved_stages(), 4);
        assert_eq!(cfg.stage_spec().features_per_stage * cfg.resolved_stages(), 16);
    }
}
