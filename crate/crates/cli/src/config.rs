//! Effective configuration: file values, then flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stepprune_core::backend::BackendConfig;
use stepprune_core::experiment::dataset::DEFAULT_MAX_TOKENS;
use stepprune_core::experiment::mi::MiParams;
use stepprune_core::experiment::sweep::{parse_ratios, EvalMode, SweepSpec};
use stepprune_core::experiment::tasks::FamilyParams;
use stepprune_core::prune::{PruneConfig, Strategy};
use stepprune_core::reward::RewardConfig;

use crate::{CliError, Common};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub max_tokens: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { max_tokens: DEFAULT_MAX_TOKENS }
    }
}

/// Execution settings. Not part of the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; `None` uses the available parallelism.
    pub jobs: Option<usize>,
    /// Sweep checkpoint; defaults to `<out>.ckpt.jsonl` when `--out` is given.
    pub checkpoint: Option<PathBuf>,
    /// Traces per checkpoint flush.
    pub chunk: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { jobs: None, checkpoint: None, chunk: 64 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub prune: PruneConfig,
    pub reward: RewardConfig,
    pub backend: BackendConfig,
    pub sweep: SweepSpec,
    /// Synthetic task family, used for `--eval synthetic` and when `--in` is omitted.
    pub family: FamilyParams,
    pub dataset: DatasetConfig,
    pub mi: MiParams,
    pub run: RunConfig,
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    /// Applies flags. `--max-tokens` is the dataset filter under
    /// `build-dataset` and the generation limit everywhere else.
    pub fn apply(&mut self, flags: &Common, dataset_command: bool) -> Result<(), CliError> {
        if let Some(k) = flags.kappa {
            self.prune.kappa = k;
        }
        if let Some(s) = &flags.strategy {
            self.prune.strategy = s.parse().map_err(invalid)?;
        }
        if let Some(seed) = flags.seed {
            self.prune.seed = seed;
            self.sweep.seed = seed;
            self.mi.seed = seed;
        }
        if let Some(t) = &flags.skip_token {
            self.prune.skip_token = t.clone();
            self.reward.skip_token = t.clone();
            self.sweep.skip_token = t.clone();
        }
        if let Some(r) = &flags.ratios {
            self.sweep.ratios = parse_ratios(r).map_err(invalid)?;
        }
        if let Some(list) = &flags.strategies {
            self.sweep.strategies = list
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.parse::<Strategy>())
                .collect::<Result<_, _>>()
                .map_err(invalid)?;
        }
        if let Some(e) = &flags.eval {
            self.sweep.eval = match e.as_str() {
                "backend" => EvalMode::Backend,
                "synthetic" => EvalMode::Synthetic,
                other => return Err(invalid(format!("unknown eval mode {other:?}"))),
            };
        }
        if let Some(u) = &flags.endpoint {
            self.backend.endpoint_url = u.clone();
        }
        if let Some(m) = &flags.model {
            self.backend.model = m.clone();
        }
        if let Some(v) = &flags.api_key_env {
            self.backend.api_key_env = v.clone();
        }
        if let Some(j) = flags.jobs {
            self.run.jobs = Some(j);
        }
        if let Some(m) = flags.max_tokens {
            if dataset_command {
                self.dataset.max_tokens = m;
            } else {
                self.backend.max_tokens =
                    u32::try_from(m).map_err(|_| invalid(format!("--max-tokens {m} is too large")))?;
            }
        }
        if let Some(t) = flags.tau_skip {
            self.reward.tau_skip_num = t;
        }
        if let Some(t) = flags.tau_length {
            self.reward.tau_length = t;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.prune.validate().map_err(invalid)?;
        self.reward.validate().map_err(invalid)?;
        self.backend.validate().map_err(|e| invalid(format!("backend: {e}")))?;
        self.sweep.validate().map_err(invalid)?;
        self.family.validate().map_err(|e| invalid(format!("family: {e}")))?;
        self.mi.validate().map_err(|e| invalid(format!("mi: {e}")))?;
        if self.run.jobs == Some(0) {
            return Err(invalid("--jobs must be at least 1"));
        }
        if self.run.chunk == 0 {
            return Err(invalid("run.chunk must be at least 1"));
        }
        Ok(())
    }

    /// Backend settings with `--jobs` applied as the in-flight limit.
    pub fn effective_backend(&self) -> BackendConfig {
        let mut b = self.backend.clone();
        if let Some(j) = self.run.jobs {
            b.max_in_flight = j;
        }
        b
    }

    /// SHA-256 of the canonical JSON of the config. Execution settings that
    /// cannot change results are left out: `run` and the backend's
    /// concurrency, retry and timeout.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let root = value.as_object_mut().expect("struct");
        root.remove("run");
        if let Some(backend) = root.get_mut("backend").and_then(|b| b.as_object_mut()) {
            for key in ["max_in_flight", "retry", "timeout_ms"] {
                backend.remove(key);
            }
        }
        hex::encode(Sha256::digest(canonical_json(&value).as_bytes()))
    }
}

/// JSON with object keys sorted at every level.
pub fn canonical_json(value: &serde_json::Value) -> String {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}
