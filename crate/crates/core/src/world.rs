//! One episode's environment: observable state plus persistent fields.

use serde::{Deserialize, Serialize};

use crate::deformation::DeformationSpec;
use crate::env::{env_step, observe, Action, EnvParams, EnvState, FieldSummary, Observation, OddsSample, Stimulus};
use crate::error::Result;
use crate::fields::{FieldParams, HarmFields};
use crate::graph::DiffusionGraph;
use crate::rng::Stream;

/// Everything observed about one environment step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub reward: f64,
    pub harm: f64,
    pub reach: usize,
    pub sensitive_reach: usize,
    pub newly_active: usize,
    pub odds: OddsSample,
    /// Total trace before this step's update.
    pub trace_sum: f64,
    /// Scar mass injected by this step's threshold exceedance.
    pub scar_injection: f64,
    /// Net change of total scar over this step.
    pub scar_delta: f64,
}

#[derive(Debug, Clone)]
pub struct World<'g> {
    graph: &'g DiffusionGraph,
    stimulus: Stimulus,
    env: EnvParams,
    deform: DeformationSpec,
    off: DeformationSpec,
    deform_enabled: bool,
    horizon: usize,
    pub state: EnvState,
    pub fields: HarmFields,
}

impl<'g> World<'g> {
    pub fn new(
        graph: &'g DiffusionGraph,
        stimulus: Stimulus,
        env: EnvParams,
        field_params: FieldParams,
        deform: DeformationSpec,
    ) -> Self {
        World {
            graph,
            stimulus,
            env,
            off: DeformationSpec {
                mode: crate::deformation::DeformMode::Off,
                ..deform.clone()
            },
            deform,
            deform_enabled: true,
            horizon: 1,
            state: EnvState::new(graph.node_count(), field_params.delay),
            fields: HarmFields::new(graph.region_count(), field_params),
        }
    }

    pub fn graph(&self) -> &'g DiffusionGraph {
        self.graph
    }

    pub fn stimulus(&self) -> &Stimulus {
        &self.stimulus
    }

    pub fn env_params(&self) -> &EnvParams {
        &self.env
    }

    /// The deformation in force this step.
    pub fn active_deformation(&self) -> &DeformationSpec {
        if self.deform_enabled {
            &self.deform
        } else {
            &self.off
        }
    }

    pub fn set_deformation_enabled(&mut self, enabled: bool) {
        self.deform_enabled = enabled;
    }

    pub fn set_horizon(&mut self, horizon: usize) {
        self.horizon = horizon;
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn observation(&self) -> Observation {
        observe(&self.state, self.graph, &self.stimulus, self.horizon)
    }

    pub fn field_summary(&self) -> FieldSummary {
        FieldSummary::compute(&self.state, self.graph, &self.fields, &self.deform)
    }

    /// Step the environment and then update the fields from the emitted harm.
    pub fn step(&mut self, action: Action, rng: &mut Stream) -> Result<StepRecord> {
        let trace_sum = self.fields.trace_sum();
        let scar_before = self.fields.scar_sum();
        let deform = if self.deform_enabled { &self.deform } else { &self.off };
        let out = env_step(
            &mut self.state,
            action,
            self.graph,
            &self.stimulus,
            &self.fields,
            deform,
            &self.env,
            rng,
        )?;
        let regions: Vec<usize> = out.causal.iter().map(|&v| self.graph.region_of(v)).collect();
        self.fields.attribute_harm(out.harm, &regions)?;
        let scar_injection = self.fields.update_scar();
        Ok(StepRecord {
            reward: out.reward,
            harm: out.harm,
            reach: self.state.reach(),
            sensitive_reach: self.state.sensitive_reach(),
            newly_active: out.newly_active,
            odds: out.odds,
            trace_sum,
            scar_injection,
            scar_delta: self.fields.scar_sum() - scar_before,
        })
    }
}
