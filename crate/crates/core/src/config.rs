//! Run configuration: TOML merged over the shipped defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{Catalog, RankAssignment, SizeTable};
use crate::engine::{AllocatorConfig, CostModel, EngineConfig, PolicyConfig, RunOptions};
use crate::predictor::PredictorConfig;
use crate::workload::{self, FunctionMapping, Request, SyntheticProfile, TraceOptions};

pub const DEFAULTS_TOML: &str = include_str!("../../../config/defaults.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("config key `{key}`: {message}")]
    Key { key: String, message: String },
}

fn key_err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Key {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadSource {
    Synthetic,
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub source: WorkloadSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
    pub duration_s: f64,
    pub rate_scale: f64,
    pub mapping: FunctionMapping,
    pub synthetic: SyntheticProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogSource {
    Generate,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogConfig {
    pub source: CatalogSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    pub ranks: Vec<u32>,
    pub weights: Vec<f64>,
    pub assignment: RankAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workload: WorkloadConfig,
    pub catalog: CatalogConfig,
    pub policy: PolicyConfig,
    pub predictor: PredictorConfig,
    pub allocator: AllocatorConfig,
    pub cost: CostModel,
    pub output: RunOptions,
}

/// Keys holding a tagged enum; an override replaces these wholesale since
/// the variants have different fields.
const TAGGED: [&str; 3] = ["input_tokens", "output_tokens", "mapping"];

/// Overlays `over` onto `base`, merging tables key by key.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o))
                if !TAGGED.contains(&k.as_str()) =>
            {
                merge(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_toml_str("", Path::new(".")).expect("shipped defaults are valid")
    }
}

impl RunConfig {
    /// Parses `text` over the defaults. Relative paths resolve against
    /// `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut table: toml::Table = DEFAULTS_TOML
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(format!("defaults: {e}")))?;
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        merge(&mut table, user);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| {
                let key = e.path().to_string();
                key_err(&key, e.into_inner().to_string())
            })?;
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base_dir.join(&*path);
                }
            }
        };
        resolve(&mut cfg.workload.trace_path);
        resolve(&mut cfg.catalog.path);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let w = &self.workload;
        match (w.source, &w.trace_path) {
            (WorkloadSource::Trace, None) => {
                return Err(key_err(
                    "workload.trace_path",
                    "required when workload.source = \"trace\"",
                ))
            }
            (WorkloadSource::Synthetic, Some(_)) => {
                return Err(key_err(
                    "workload.trace_path",
                    "set only when workload.source = \"trace\" (exactly one workload source)",
                ))
            }
            _ => {}
        }
        if !(w.duration_s > 0.0) {
            return Err(key_err("workload.duration_s", "must be positive"));
        }
        if !(w.rate_scale > 0.0) {
            return Err(key_err("workload.rate_scale", "must be positive"));
        }
        w.synthetic
            .validate()
            .map_err(|e| key_err("workload.synthetic", e.to_string()))?;
        let c = &self.catalog;
        if c.source == CatalogSource::File && c.path.is_none() {
            return Err(key_err(
                "catalog.path",
                "required when catalog.source = \"file\"",
            ));
        }
        if c.ranks.is_empty() {
            return Err(key_err("catalog.ranks", "must not be empty"));
        }
        if c.count == Some(0) {
            return Err(key_err("catalog.count", "must be positive"));
        }
        self.predictor
            .validate()
            .map_err(|e| key_err("predictor", e.to_string()))?;
        self.cost
            .validate()
            .map_err(|e| key_err("cost", e.to_string()))?;
        let p = &self.policy;
        for (k, v) in [("theta", p.theta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(key_err(&format!("policy.{k}"), "must lie in (0, 1)"));
            }
        }
        for (k, v) in [("alpha", p.alpha), ("beta", p.beta), ("gamma", p.gamma)] {
            if !(v >= 0.0) {
                return Err(key_err(&format!("policy.{k}"), "must be nonnegative"));
            }
        }
        if !(p.alpha + p.beta + p.gamma > 0.0) {
            return Err(key_err(
                "policy.alpha",
                "alpha + beta + gamma must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&p.staging_fraction) {
            return Err(key_err("policy.staging_fraction", "must lie in [0, 1]"));
        }
        if self.allocator.page_size_bytes == 0 {
            return Err(key_err("allocator.page_size_bytes", "must be positive"));
        }
        if self.allocator.pool_bytes == 0 {
            return Err(key_err("allocator.pool_bytes", "must be positive"));
        }
        if let Some(h) = self.output.horizon_s {
            if !(h > 0.0) {
                return Err(key_err("output.horizon_s", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            seed: self.seed,
            policy: self.policy.clone(),
            predictor: self.predictor.clone(),
            allocator: self.allocator.clone(),
            cost: self.cost.clone(),
            options: self.output.clone(),
        }
    }

    pub fn build_workload(&self) -> crate::Result<Vec<Request>> {
        let w = &self.workload;
        Ok(match w.source {
            WorkloadSource::Synthetic => {
                workload::generate_synthetic(&w.synthetic, w.duration_s, self.seed)?
            }
            WorkloadSource::Trace => {
                let opts = TraceOptions {
                    mapping: w.mapping,
                    rate_scale: w.rate_scale,
                    input_tokens: w.synthetic.input_tokens,
                    output_tokens: w.synthetic.output_tokens,
                    seed: self.seed,
                };
                let path = w.trace_path.as_deref().expect("validated");
                workload::ingest_trace(path, &opts)?
            }
        })
    }

    pub fn build_catalog(&self, requests: &[Request]) -> crate::Result<Catalog> {
        let c = &self.catalog;
        let table = SizeTable::default();
        Ok(match c.source {
            CatalogSource::File => Catalog::load(c.path.as_deref().expect("validated"), &table)?,
            CatalogSource::Generate => {
                let span = workload::adapter_span(requests);
                let fallback = match self.workload.source {
                    WorkloadSource::Synthetic => self.workload.synthetic.num_adapters as usize,
                    WorkloadSource::Trace => 0,
                };
                let count = c.count.unwrap_or(span.max(fallback));
                Catalog::generate(count, &c.ranks, &c.weights, c.assignment, self.seed, &table)?
            }
        })
    }
}
