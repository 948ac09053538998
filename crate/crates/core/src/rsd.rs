//! Exposure, decay and replay phases with frozen-policy evaluation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deformation::DeformationSpec;
use crate::env::{Action, EnvParams, OddsSample, Stimulus, ACTION_COUNT};
use crate::error::{Error, Result};
use crate::fields::{FieldParams, FieldSnapshot};
use crate::graph::DiffusionGraph;
use crate::policy::Policy;
use crate::rng::{self, Stream};
use crate::world::{StepRecord, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RngMode {
    Independent,
    /// Exposure and replay draw from the same streams.
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayDeformation {
    Inherit,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldReset {
    Persist,
    /// Clear fields and the delay buffer before replay. Ablation only.
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RsdConfig {
    pub t_exp: usize,
    pub t_decay: usize,
    pub t_rep: usize,
    pub rng_mode: RngMode,
    pub replay_deformation: ReplayDeformation,
    pub field_reset: FieldReset,
    /// Drop delayed harm history at every phase boundary.
    pub truncate_delay_buffer: bool,
}

impl Default for RsdConfig {
    fn default() -> Self {
        RsdConfig {
            t_exp: 500,
            t_decay: 200,
            t_rep: 500,
            rng_mode: RngMode::Independent,
            replay_deformation: ReplayDeformation::Inherit,
            field_reset: FieldReset::Persist,
            truncate_delay_buffer: false,
        }
    }
}

impl RsdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t_exp", self.t_exp), ("t_decay", self.t_decay), ("t_rep", self.t_rep)] {
            if v == 0 {
                return Err(Error::config(format!("rsd.{name}"), "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Exposure,
    Decay,
    Replay,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Exposure => "exposure",
            Phase::Decay => "decay",
            Phase::Replay => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub distribution: [f64; ACTION_COUNT],
    pub features: Vec<f64>,
}

/// Anything that picks actions during an episode.
pub trait Controller {
    fn reset_memory(&mut self);
    fn is_frozen(&self) -> bool;
    fn decide(&mut self, world: &World<'_>, rng: &mut Stream) -> Result<Decision>;
    /// Simulated transitions spent per real step (nonzero for lookahead filters).
    fn transitions_per_step(&self) -> u64 {
        0
    }
}

impl Controller for Policy {
    fn reset_memory(&mut self) {
        Policy::reset_memory(self);
    }

    fn is_frozen(&self) -> bool {
        Policy::is_frozen(self)
    }

    fn decide(&mut self, world: &World<'_>, rng: &mut Stream) -> Result<Decision> {
        let obs = world.observation();
        let summary = self.wants_fields().then(|| world.field_summary());
        let s = self.sample_action(&obs, summary.as_ref(), rng)?;
        Ok(Decision {
            action: s.action,
            distribution: s.distribution,
            features: s.features,
        })
    }
}

/// Static inputs of an episode.
#[derive(Debug, Clone)]
pub struct EpisodeSpec<'a> {
    pub graph: &'a DiffusionGraph,
    pub env: EnvParams,
    pub fields: FieldParams,
    pub deform: DeformationSpec,
    pub seed_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSeeds {
    pub episode_seed: u64,
    pub z: u32,
}

/// Per-step series of one phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseSeries {
    pub reach: Vec<u32>,
    pub sensitive: Vec<u32>,
    pub reward: Vec<f64>,
    pub harm: Vec<f64>,
    pub actions: Vec<u8>,
    pub distributions: Vec<[f64; ACTION_COUNT]>,
    pub odds: Vec<OddsSample>,
    pub trace_sum: Vec<f64>,
    /// Nodes active at the end of the phase.
    pub activated: Vec<usize>,
    /// Hex SHA-256 over actions and active sets.
    pub hash: String,
}

impl PhaseSeries {
    pub fn len(&self) -> usize {
        self.reach.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reach.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsdEpisodeRecord {
    pub method: String,
    pub graph_seed: u64,
    pub episode_seed: u64,
    pub z: u32,
    pub stimulus_seeds: Vec<usize>,
    pub config_hash: String,
    pub checkpoint_hash: String,
    /// Replay ran with deformation switched off.
    pub counterfactual: bool,
    pub fields_reset: bool,
    pub exposure: PhaseSeries,
    pub decay: PhaseSeries,
    pub replay: PhaseSeries,
    /// Field snapshots at episode start and at the end of each phase.
    pub boundaries: Vec<FieldSnapshot>,
    /// Field hash at the first replay step, after any reset.
    pub replay_start_fields: String,
    pub shield_transitions_per_step: u64,
}

/// Run one episode with a frozen controller.
pub fn run_rsd_episode<C: Controller + ?Sized>(
    cfg: &RsdConfig,
    controller: &mut C,
    spec: &EpisodeSpec<'_>,
    seeds: EpisodeSeeds,
) -> Result<RsdEpisodeRecord> {
    if !controller.is_frozen() {
        return Err(Error::protocol("replay diagnostics need a frozen policy"));
    }
    drive_episode(cfg, controller, spec, seeds, |_, _, _| {})
}

/// Episode driver shared by evaluation and training collection.
pub(crate) fn drive_episode<C, F>(
    cfg: &RsdConfig,
    controller: &mut C,
    spec: &EpisodeSpec<'_>,
    seeds: EpisodeSeeds,
    mut hook: F,
) -> Result<RsdEpisodeRecord>
where
    C: Controller + ?Sized,
    F: FnMut(Phase, &Decision, &StepRecord),
{
    cfg.validate()?;
    let stimulus = Stimulus::new(seeds.z, spec.graph, spec.seed_count)?;
    let stimulus_seeds = stimulus.seeds.clone();
    let mut world = World::new(spec.graph, stimulus, spec.env.clone(), spec.fields, spec.deform.clone());
    let mut boundaries = vec![world.fields.snapshot(0)];
    let streams = |phase: Phase| {
        let label = match (phase, cfg.rng_mode) {
            (Phase::Replay, RngMode::Paired) => Phase::Exposure.label(),
            _ => phase.label(),
        };
        let base = rng::derive(seeds.episode_seed, label);
        (rng::stream(rng::derive(base, "env")), rng::stream(rng::derive(base, "policy")))
    };

    // exposure
    world.state.reset_observable();
    world.state.stimulus_on = true;
    world.set_horizon(cfg.t_exp);
    controller.reset_memory();
    let exposure = run_phase(&mut world, controller, Phase::Exposure, cfg.t_exp, streams(Phase::Exposure), &mut hook)?;
    boundaries.push(world.fields.snapshot(cfg.t_exp));

    // decay: stimulus off, nothing reset
    if cfg.truncate_delay_buffer {
        world.state.delay.clear();
    }
    world.state.stimulus_on = false;
    world.state.time = 0;
    world.set_horizon(cfg.t_decay);
    let decay = run_phase(&mut world, controller, Phase::Decay, cfg.t_decay, streams(Phase::Decay), &mut hook)?;
    boundaries.push(world.fields.snapshot(cfg.t_exp + cfg.t_decay));

    // replay: observable and memory reset, fields kept
    if cfg.truncate_delay_buffer {
        world.state.delay.clear();
    }
    if cfg.field_reset == FieldReset::Reset {
        world.fields.reset();
        world.state.delay.clear();
    }
    world.state.reset_observable();
    world.state.stimulus_on = true;
    world.set_horizon(cfg.t_rep);
    world.set_deformation_enabled(cfg.replay_deformation == ReplayDeformation::Inherit);
    controller.reset_memory();
    let replay_start_fields = world.fields.hash();
    let replay = run_phase(&mut world, controller, Phase::Replay, cfg.t_rep, streams(Phase::Replay), &mut hook)?;
    boundaries.push(world.fields.snapshot(cfg.t_exp + cfg.t_decay + cfg.t_rep));

    Ok(RsdEpisodeRecord {
        method: String::new(),
        graph_seed: spec.graph.seed(),
        episode_seed: seeds.episode_seed,
        z: seeds.z,
        stimulus_seeds,
        config_hash: String::new(),
        checkpoint_hash: String::new(),
        counterfactual: cfg.replay_deformation == ReplayDeformation::Off,
        fields_reset: cfg.field_reset == FieldReset::Reset,
        exposure,
        decay,
        replay,
        boundaries,
        replay_start_fields,
        shield_transitions_per_step: controller.transitions_per_step(),
    })
}

fn run_phase<C, F>(
    world: &mut World<'_>,
    controller: &mut C,
    phase: Phase,
    steps: usize,
    (mut env_rng, mut policy_rng): (Stream, Stream),
    hook: &mut F,
) -> Result<PhaseSeries>
where
    C: Controller + ?Sized,
    F: FnMut(Phase, &Decision, &StepRecord),
{
    let mut series = PhaseSeries::default();
    let mut hasher = Sha256::new();
    for _ in 0..steps {
        let decision = controller.decide(world, &mut policy_rng)?;
        let rec = world.step(decision.action, &mut env_rng)?;
        hook(phase, &decision, &rec);

        hasher.update([decision.action.index() as u8]);
        hasher.update(rec.reward.to_bits().to_le_bytes());
        let bits: Vec<u8> = world.state.active().iter().map(|&a| u8::from(a)).collect();
        hasher.update(&bits);

        series.reach.push(rec.reach as u32);
        series.sensitive.push(rec.sensitive_reach as u32);
        series.reward.push(rec.reward);
        series.harm.push(rec.harm);
        series.actions.push(decision.action.index() as u8);
        series.distributions.push(decision.distribution);
        series.odds.push(rec.odds);
        series.trace_sum.push(rec.trace_sum);
    }
    series.activated = world.state.active_nodes();
    series.hash = hex::encode(hasher.finalize());
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphParams};
    use crate::policy::FeatureMode;

    fn short() -> RsdConfig {
        RsdConfig {
            t_exp: 60,
            t_decay: 20,
            t_rep: 60,
            ..RsdConfig::default()
        }
    }

    #[test]
    fn unfrozen_policy_is_refused() {
        let (g, _) = build_graph(&GraphParams::default(), 1).unwrap();
        let spec = EpisodeSpec {
            graph: &g,
            env: EnvParams::default(),
            fields: FieldParams::default(),
            deform: DeformationSpec::off(),
            seed_count: 3,
        };
        let mut p = Policy::softmax(FeatureMode::Observation, None, 1);
        let seeds = EpisodeSeeds { episode_seed: 1, z: 1 };
        assert!(matches!(run_rsd_episode(&short(), &mut p, &spec, seeds), Err(Error::Protocol(_))));
        p.freeze();
        let rec = run_rsd_episode(&short(), &mut p, &spec, seeds).unwrap();
        assert_eq!(rec.exposure.len(), 60);
        assert_eq!(rec.decay.len(), 20);
        assert_eq!(rec.replay.len(), 60);
        assert_eq!(rec.boundaries.len(), 4);
    }

    #[test]
    fn paired_stationary_phases_coincide() {
        let (g, _) = build_graph(&GraphParams::default(), 2).unwrap();
        let spec = EpisodeSpec {
            graph: &g,
            env: EnvParams::default(),
            fields: FieldParams::default(),
            deform: DeformationSpec::off(),
            seed_count: 3,
        };
        let cfg = RsdConfig {
            rng_mode: RngMode::Paired,
            ..short()
        };
        let mut p = Policy::softmax(FeatureMode::Observation, None, 1);
        p.freeze();
        let rec = run_rsd_episode(&cfg, &mut p, &spec, EpisodeSeeds { episode_seed: 9, z: 4 }).unwrap();
        assert_eq!(rec.exposure.hash, rec.replay.hash);
        assert_eq!(rec.exposure.reach, rec.replay.reach);
    }

    #[test]
    fn replay_reset_clears_observable_but_not_fields() {
        let (g, _) = build_graph(&GraphParams::default(), 3).unwrap();
        let spec = EpisodeSpec {
            graph: &g,
            env: EnvParams::default(),
            fields: FieldParams::default(),
            deform: DeformationSpec::default(),
            seed_count: 3,
        };
        let mut p = Policy::scripted(Action::Aggressive);
        p.freeze();
        let rec = run_rsd_episode(&RsdConfig::default(), &mut p, &spec, EpisodeSeeds { episode_seed: 5, z: 2 }).unwrap();
        assert_eq!(rec.replay_start_fields, rec.boundaries[2].hash);
        // the first replay step starts from an empty set: at most seeds, extras and one diffusion hop
        assert!(rec.replay.reach[0] as usize <= g.node_count());
        assert!(rec.boundaries[2].trace_sum > 0.0);
    }
}
