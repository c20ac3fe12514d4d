//! Run configuration: a flat `[section] key = value` file.
//!
//! Every knob of the simulator appears as a documented key; unknown keys
//! are rejected so typos fail loudly, and `fl.seed` is the one required
//! key (everything else has a default). A parsed config serializes back
//! to a canonical snapshot whose hash names the run directory.

use crate::data::WorldSpec;
use crate::error::{Error, Result};
use crate::fl::{FLConfig, FederationSetup, OptimizerSettings};
use crate::moe::{HeadConfig, RoutingMode};
use crate::ssl::SSLConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlSection {
    pub seed: u64,
    #[serde(default = "d_num_clients")]
    pub num_clients: u32,
    #[serde(default = "d_sample_ratio")]
    pub sample_ratio: f64,
    #[serde(default = "d_rounds")]
    pub rounds: u32,
    #[serde(default = "d_warmup_epochs")]
    pub warmup_epochs: u32,
    #[serde(default = "d_one")]
    pub server_epochs_per_round: u32,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_aggregator")]
    pub aggregator: String,
    #[serde(default)]
    pub literal_global_weighting: bool,
    #[serde(default)]
    pub server_low_res: bool,
}

fn d_num_clients() -> u32 {
    3
}
fn d_sample_ratio() -> f64 {
    0.33
}
fn d_rounds() -> u32 {
    50
}
fn d_warmup_epochs() -> u32 {
    50
}
fn d_one() -> u32 {
    1
}
fn d_alpha() -> f64 {
    0.1
}
fn d_aggregator() -> String {
    "fedavg".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "d_data_seed")]
    pub seed: u64,
    #[serde(default = "d_num_domains")]
    pub num_domains: u32,
    #[serde(default = "d_server_samples")]
    pub server_samples: usize,
    #[serde(default = "d_client_samples")]
    pub client_samples: usize,
    #[serde(default = "d_test_per_domain")]
    pub test_samples_per_domain: usize,
    #[serde(default = "d_num_classes")]
    pub num_classes: usize,
    #[serde(default = "d_image_channels")]
    pub image_channels: usize,
    #[serde(default = "d_high_dim")]
    pub high_height: usize,
    #[serde(default = "d_high_dim")]
    pub high_width: usize,
    #[serde(default = "d_feature_channels")]
    pub feature_channels: usize,
    #[serde(default = "d_shift")]
    pub shift_scale: f64,
    #[serde(default = "d_shift")]
    pub shift_bias: f64,
    #[serde(default = "d_noise")]
    pub noise: f64,
}

fn d_data_seed() -> u64 {
    20240
}
fn d_num_domains() -> u32 {
    4
}
fn d_server_samples() -> usize {
    48
}
fn d_client_samples() -> usize {
    40
}
fn d_test_per_domain() -> usize {
    16
}
fn d_num_classes() -> usize {
    4
}
fn d_image_channels() -> usize {
    3
}
fn d_high_dim() -> usize {
    16
}
fn d_feature_channels() -> usize {
    6
}
fn d_shift() -> f64 {
    0.35
}
fn d_noise() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslSection {
    #[serde(default = "d_threshold")]
    pub confidence_threshold: f64,
    #[serde(default = "d_unsup_weight")]
    pub unsup_weight: f64,
    #[serde(default)]
    pub prox_mu: f64,
    #[serde(default = "d_one")]
    pub local_epochs: u32,
}

fn d_threshold() -> f64 {
    0.9
}
fn d_unsup_weight() -> f64 {
    4.0
}

impl Default for SslSection {
    fn default() -> Self {
        SslSection {
            confidence_threshold: d_threshold(),
            unsup_weight: d_unsup_weight(),
            prox_mu: 0.0,
            local_epochs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeSection {
    #[serde(default = "d_num_experts")]
    pub num_experts: usize,
    #[serde(default = "d_feature_channels")]
    pub expert_out_channels: usize,
    #[serde(default = "d_routing_mode")]
    pub routing_mode: String,
    #[serde(default = "d_true")]
    pub gate_scaling: bool,
    /// Which feature size the fixed-dimension global router is built for:
    /// `"low"` or `"high"`.
    #[serde(default = "d_global_res")]
    pub global_router_resolution: String,
}

fn d_num_experts() -> usize {
    3
}
fn d_routing_mode() -> String {
    "top1".into()
}
fn d_true() -> bool {
    true
}
fn d_global_res() -> String {
    "low".into()
}

impl Default for MoeSection {
    fn default() -> Self {
        MoeSection {
            num_experts: d_num_experts(),
            expert_out_channels: d_feature_channels(),
            routing_mode: d_routing_mode(),
            gate_scaling: true,
            global_router_resolution: d_global_res(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub kind: String,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let s = OptimizerSettings::default();
        OptimSection {
            kind: s.kind,
            learning_rate: s.learning_rate,
            momentum: s.momentum,
            beta1: s.beta1,
            beta2: s.beta2,
            epsilon: s.epsilon,
            weight_decay: s.weight_decay,
        }
    }
}

/// The whole run configuration, one section per subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub fl: FlSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub ssl: SslSection,
    #[serde(default)]
    pub moe: MoeSection,
    #[serde(default)]
    pub optim: OptimSection,
}

impl Default for DataSection {
    fn default() -> Self {
        toml::from_str("").expect("all data keys have defaults")
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fl: FlSection {
                seed: 1,
                num_clients: d_num_clients(),
                sample_ratio: d_sample_ratio(),
                rounds: d_rounds(),
                warmup_epochs: d_warmup_epochs(),
                server_epochs_per_round: 1,
                alpha: d_alpha(),
                aggregator: d_aggregator(),
                literal_global_weighting: false,
                server_low_res: false,
            },
            data: DataSection::default(),
            ssl: SslSection::default(),
            moe: MoeSection::default(),
            optim: OptimSection::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate a config file.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical snapshot: sections and keys in declaration order. Parsing
    /// the snapshot yields a value equal to `self`.
    pub fn snapshot(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// First 12 hex chars of the snapshot hash; names the run directory.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.snapshot().as_bytes());
        let digest = hasher.finalize();
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Apply `section.key=value` overrides, then re-validate. Values are
    /// parsed as TOML scalars, falling back to strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree: toml::Value =
            toml::from_str(&self.snapshot()).map_err(|e| Error::Config(e.to_string()))?;
        for entry in overrides {
            let (path, raw) = entry.split_once('=').ok_or_else(|| {
                Error::Config(format!("override `{entry}` must look like section.key=value"))
            })?;
            let (section, key) = path.trim().split_once('.').ok_or_else(|| {
                Error::Config(format!("override key `{path}` must look like section.key"))
            })?;
            let value = parse_scalar(raw.trim());
            let table = tree
                .get_mut(section)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| Error::Config(format!("unknown config section `{section}`")))?;
            table.insert(key.to_string(), value);
        }
        let text = toml::to_string_pretty(&tree).map_err(|e| Error::Config(e.to_string()))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let (world, setup) = self.lower()?;
        world.validate()?;
        setup.fl.validate()?;
        setup.ssl.validate()?;
        setup.head.validate()?;
        setup.optim.validate()?;
        if self.fl.num_clients == 0 {
            return Err(Error::Config("fl.num_clients must be positive".into()));
        }
        Ok(())
    }

    /// Lower the file representation into the world spec and federation
    /// setup the engine runs on.
    pub fn lower(&self) -> Result<(WorldSpec, FederationSetup)> {
        let world = WorldSpec {
            seed: self.data.seed,
            num_domains: self.data.num_domains,
            num_clients: self.fl.num_clients,
            server_samples: self.data.server_samples,
            client_samples: self.data.client_samples,
            test_samples_per_domain: self.data.test_samples_per_domain,
            num_classes: self.data.num_classes,
            image_channels: self.data.image_channels,
            high_height: self.data.high_height,
            high_width: self.data.high_width,
            feature_channels: self.data.feature_channels,
            shift_scale: self.data.shift_scale,
            shift_bias: self.data.shift_bias,
            noise: self.data.noise,
        };
        let routing_mode: RoutingMode = self.moe.routing_mode.parse()?;
        let (gh, gw) = match self.moe.global_router_resolution.as_str() {
            "low" => (world.low_height(), world.low_width()),
            "high" => (world.high_height, world.high_width),
            other => {
                return Err(Error::Config(format!(
                    "moe.global_router_resolution must be `low` or `high`, got `{other}`"
                )))
            }
        };
        // Every domain gets an expert assignment so the domain_assigned
        // mode is total over the world.
        let domain_assignment: BTreeMap<u32, usize> = (0..world.num_domains)
            .map(|d| (d, d as usize % self.moe.num_experts.max(1)))
            .collect();
        let head = HeadConfig {
            feature_channels: world.feature_channels,
            num_experts: self.moe.num_experts,
            expert_out_channels: self.moe.expert_out_channels,
            num_classes: world.num_classes,
            routing_mode,
            gate_scaling: self.moe.gate_scaling,
            global_router_dims: (world.feature_channels, gh, gw),
            domain_assignment,
        };
        let setup = FederationSetup {
            fl: FLConfig {
                seed: self.fl.seed,
                sample_ratio: self.fl.sample_ratio,
                rounds: self.fl.rounds,
                warmup_epochs: self.fl.warmup_epochs,
                server_epochs_per_round: self.fl.server_epochs_per_round,
                alpha: self.fl.alpha,
                aggregator: self.fl.aggregator.clone(),
                literal_global_weighting: self.fl.literal_global_weighting,
                server_low_res: self.fl.server_low_res,
            },
            ssl: SSLConfig {
                confidence_threshold: self.ssl.confidence_threshold,
                unsup_weight: self.ssl.unsup_weight,
                prox_mu: self.ssl.prox_mu,
                local_epochs: self.ssl.local_epochs,
            },
            head,
            optim: OptimizerSettings {
                kind: self.optim.kind.clone(),
                learning_rate: self.optim.learning_rate,
                momentum: self.optim.momentum,
                beta1: self.optim.beta1,
                beta2: self.optim.beta2,
                epsilon: self.optim.epsilon,
                weight_decay: self.optim.weight_decay,
            },
        };
        Ok((world, setup))
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    if let Ok(v) = raw.parse::<bool>() {
        return toml::Value::Boolean(v);
    }
    toml::Value::String(raw.trim_matches('"').to_string())
}
