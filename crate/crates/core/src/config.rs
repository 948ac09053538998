//! Run configuration file.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deformation::{DeformMode, DeformationSpec};
use crate::env::EnvParams;
use crate::error::{Error, Result};
use crate::fields::FieldParams;
use crate::graph::{GraphParams, Topology, DEFAULT_SEED_COUNT};
use crate::rsd::{FieldReset, RngMode, RsdConfig};
use crate::trainer::TrainConfig;

/// Environment variable overriding the master seed.
pub const SEED_ENV: &str = "REPLAYLAB_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub nodes: usize,
    #[serde(default = "default_branching")]
    pub branching_target: f64,
    #[serde(default = "default_sens_frac")]
    pub sens_frac: f64,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default = "default_seed_count")]
    pub seeds_per_stimulus: usize,
    /// One graph is generated per seed.
    pub seeds: Vec<u64>,
}

fn default_branching() -> f64 {
    GraphParams::default().branching_target
}

fn default_sens_frac() -> f64 {
    0.2
}

fn default_seed_count() -> usize {
    DEFAULT_SEED_COUNT
}

impl GraphSection {
    pub fn params(&self) -> GraphParams {
        GraphParams {
            nodes: self.nodes,
            branching_target: self.branching_target,
            sens_frac: self.sens_frac,
            topology: self.topology,
            seeds_per_stimulus: self.seeds_per_stimulus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsdSection {
    #[serde(default = "default_t_exp")]
    pub t_exp: usize,
    #[serde(default = "default_t_decay")]
    pub t_decay: usize,
    #[serde(default = "default_t_rep")]
    pub t_rep: usize,
    /// Evaluation episodes per method and graph.
    pub episodes: usize,
    #[serde(default = "default_rng_mode")]
    pub rng_mode: RngMode,
    #[serde(default = "default_field_reset")]
    pub field_reset: FieldReset,
    #[serde(default)]
    pub truncate_delay_buffer: bool,
}

fn default_t_exp() -> usize {
    500
}
fn default_t_decay() -> usize {
    200
}
fn default_t_rep() -> usize {
    500
}
fn default_rng_mode() -> RngMode {
    RngMode::Independent
}
fn default_field_reset() -> FieldReset {
    FieldReset::Persist
}

impl RsdSection {
    /// Protocol settings; the replay deformation flag is set per method.
    pub fn protocol(&self) -> RsdConfig {
        RsdConfig {
            t_exp: self.t_exp,
            t_decay: self.t_decay,
            t_rep: self.t_rep,
            rng_mode: self.rng_mode,
            field_reset: self.field_reset,
            truncate_delay_buffer: self.truncate_delay_buffer,
            ..RsdConfig::default()
        }
    }
}

/// Conductance weights; the deployment mode comes from each method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationSection {
    #[serde(default = "default_w_g")]
    pub w_g: f64,
    #[serde(default = "default_w_h")]
    pub w_h: f64,
    #[serde(default = "default_psi_min")]
    pub psi_min: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Regions for the local ablation; empty means sensitive nodes and their neighbours.
    #[serde(default)]
    pub local_regions: Vec<usize>,
}

fn default_w_g() -> f64 {
    DeformationSpec::default().w_g
}
fn default_w_h() -> f64 {
    DeformationSpec::default().w_h
}
fn default_psi_min() -> f64 {
    DeformationSpec::default().psi_min
}
fn default_top_k() -> usize {
    3
}

impl Default for DeformationSection {
    fn default() -> Self {
        DeformationSection {
            w_g: default_w_g(),
            w_h: default_w_h(),
            psi_min: default_psi_min(),
            top_k: default_top_k(),
            local_regions: Vec::new(),
        }
    }
}

impl DeformationSection {
    pub fn spec(&self, mode: DeformMode) -> DeformationSpec {
        DeformationSpec {
            w_g: self.w_g,
            w_h: self.w_h,
            psi_min: self.psi_min,
            mode,
        }
    }
}

/// Per-method parameter overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scar_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shield_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub id: String,
    #[serde(default)]
    pub overrides: MethodOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShieldSection {
    /// Blocking threshold on expected cumulative sensitive mass.
    pub threshold: f64,
    pub n_mc: usize,
    pub horizon: usize,
    pub tolerance: f64,
    pub iterations: usize,
    /// Held-out episodes per graph used to tune the utility-matched threshold.
    pub tuning_episodes: usize,
}

impl Default for ShieldSection {
    fn default() -> Self {
        ShieldSection {
            threshold: 200.0,
            n_mc: 20,
            horizon: 100,
            tolerance: 0.05,
            iterations: 12,
            tuning_episodes: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSection {
    pub master: u64,
}

/// Whether learning methods are trained or replaced by a fixed action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySource {
    #[default]
    Trained,
    ScriptedModerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub graph: GraphSection,
    pub rsd: RsdSection,
    #[serde(default)]
    pub fields: FieldParams,
    #[serde(default)]
    pub deformation: DeformationSection,
    #[serde(default)]
    pub env: EnvParams,
    pub methods: Vec<MethodEntry>,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub policy_source: PolicySource,
    #[serde(default)]
    pub shield: ShieldSection,
    pub seeds: SeedSection,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the canonical serialization, with the worker count
    /// normalized since it cannot change results.
    pub fn hash(&self) -> Result<String> {
        let canonical = RunConfig {
            workers: default_workers(),
            ..self.clone()
        };
        Ok(hex::encode(Sha256::digest(canonical.to_json()?.as_bytes())))
    }

    /// Apply the seed override from the environment, if set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(text) = std::env::var(SEED_ENV) {
            self.seeds.master = text
                .trim()
                .parse()
                .map_err(|_| Error::config("seeds.master", format!("{SEED_ENV}={text} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::config("run_id", "must be a nonempty name without path separators"));
        }
        if self.graph.nodes < crate::graph::MIN_NODES {
            return Err(Error::config("graph.nodes", "must be at least 10"));
        }
        if !(self.graph.branching_target > 0.0 && self.graph.branching_target.is_finite()) {
            return Err(Error::config("graph.branching_target", "must be positive"));
        }
        if !(0.15..=0.25).contains(&self.graph.sens_frac) {
            return Err(Error::config("graph.sens_frac", "must lie in [0.15, 0.25]"));
        }
        if self.graph.seeds.is_empty() {
            return Err(Error::config("graph.seeds", "must list at least one seed"));
        }
        if self.graph.seeds_per_stimulus == 0 {
            return Err(Error::config("graph.seeds_per_stimulus", "must be at least 1"));
        }
        if self.rsd.episodes == 0 {
            return Err(Error::config("rsd.episodes", "must be at least 1"));
        }
        self.rsd.protocol().validate()?;
        self.fields.validate()?;
        self.deformation.spec(DeformMode::Full).validate()?;
        if self.deformation.top_k == 0 {
            return Err(Error::config("deformation.top_k", "must be at least 1"));
        }
        self.training.validate()?;
        if self.methods.is_empty() {
            return Err(Error::config("methods", "must list at least one method"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            crate::baselines::MethodId::parse(&m.id)
                .map_err(|_| Error::config(format!("methods[{i}].id"), format!("unknown method id `{}`", m.id)))?;
            if self.methods[..i].iter().any(|o| o.id == m.id) {
                return Err(Error::config(format!("methods[{i}].id"), format!("duplicate method id `{}`", m.id)));
            }
            if let Some(r) = m.overrides.retention {
                if !(0.95..=1.0).contains(&r) {
                    return Err(Error::config(format!("methods[{i}].overrides.retention"), "must lie in [0.95, 1]"));
                }
            }
            if m.overrides.top_k == Some(0) {
                return Err(Error::config(format!("methods[{i}].overrides.top_k"), "must be at least 1"));
            }
        }
        if self.shield.n_mc == 0 || self.shield.horizon == 0 {
            return Err(Error::config("shield", "n_mc and horizon must be at least 1"));
        }
        if self.shield.iterations == 0 || self.shield.tuning_episodes == 0 {
            return Err(Error::config("shield", "iterations and tuning_episodes must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        Ok(())
    }
}
