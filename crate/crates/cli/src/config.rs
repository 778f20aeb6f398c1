//! Layered run configuration: built-in defaults, overridden by an optional
//! TOML config file, overridden by command-line flags. Unknown keys in the
//! file are rejected.

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use std::path::Path;
use unihash_core::centers::CenterMethod;
use unihash_core::network::{GateMode, ModelConfig};
use unihash_core::objectives::LossWeights;
use unihash_core::training::{DetachSchedule, SplitConfig, TrainConfig};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub seen_ratio: f64,
    pub query_frac: f64,
    pub train_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            classes: 8,
            dim: 32,
            per_class: 250,
            spread: 0.3,
            seen_ratio: 0.75,
            query_frac: 0.2,
            train_frac: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub feature_dim: usize,
    pub code_len: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub backbone_depth: usize,
    pub gate_mode: String,
    pub shared_experts: bool,
    pub tanh_output: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            feature_dim: 64,
            code_len: 16,
            num_experts: 8,
            top_k: 2,
            backbone_depth: 1,
            gate_mode: "sigmoid_norm".into(),
            shared_experts: true,
            tanh_output: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CentersSection {
    pub method: Option<String>,
    pub d_floor: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub detach_schedule: String,
    pub include_diagonal_pairs: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-4,
            decay: 0.99,
            epsilon: 1e-8,
            lambda1: 4.0,
            lambda2: 1.0,
            lambda3: 1.0,
            detach_schedule: "per_epoch".into(),
            include_diagonal_pairs: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k: usize,
    pub pr_points: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: 100,
            pr_points: None,
        }
    }
}

/// Everything a run can configure, with a valid zero-config default.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataSection,
    pub model: ModelSection,
    pub centers: CentersSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                let cfg: RunConfig = toml::from_str(&text)
                    .with_context(|| format!("parsing config file {}", p.display()))?;
                Ok(cfg)
            }
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    /// Assemble the core training config for a dataset of dimension
    /// `input_dim`.
    pub fn train_config(&self, input_dim: usize) -> Result<TrainConfig> {
        let gate_mode = GateMode::parse(&self.model.gate_mode)?;
        let detach_schedule = DetachSchedule::parse(&self.train.detach_schedule)?;
        let center_method = match &self.centers.method {
            None => CenterMethod::Auto,
            Some(m) => CenterMethod::parse(m)?,
        };
        let weights = LossWeights::new(
            self.train.lambda1,
            self.train.lambda2,
            self.train.lambda3,
        )?;
        let config = TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            weights,
            detach_schedule,
            learning_rate: self.train.learning_rate,
            decay: self.train.decay,
            epsilon: self.train.epsilon,
            include_diagonal_pairs: self.train.include_diagonal_pairs,
            seed: self.seed(),
            model: ModelConfig {
                input_dim,
                feature_dim: self.model.feature_dim,
                code_len: self.model.code_len,
                num_experts: self.model.num_experts,
                top_k: self.model.top_k,
                backbone_depth: self.model.backbone_depth,
                gate_mode,
                shared_experts: self.model.shared_experts,
                tanh_output: self.model.tanh_output,
            },
            center_method,
            center_d_floor: self.centers.d_floor,
            split: SplitConfig {
                seen_ratio: self.data.seen_ratio,
                query_frac: self.data.query_frac,
                train_frac: self.data.train_frac,
            },
        };
        config.validate()?;
        Ok(config)
    }
}

/// Parse a comma-separated grid list; an empty string is an empty grid.
pub fn parse_grid<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    let items: Vec<&str> = raw
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .collect();
    if items.is_empty() {
        bail!("empty grid for {what}");
    }
    items
        .into_iter()
        .map(|t| {
            t.parse::<T>()
                .map_err(|_| anyhow::anyhow!("cannot parse '{t}' in {what} grid"))
        })
        .collect()
}
