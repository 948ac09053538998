//! Diffusion environment: observation, seed injection, gated cascade step.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deformation::{apply_mode, gate_edge_prob, top_k_indices, DeformMode, DeformationSpec};
use crate::error::{Error, Result};
use crate::fields::HarmFields;
use crate::graph::{stimulus_seed_set, DiffusionGraph};
use crate::rng::Stream;

pub const ACTION_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Aggressive,
    Moderate,
    Conservative,
}

impl Action {
    pub const ALL: [Action; ACTION_COUNT] = [Action::Aggressive, Action::Moderate, Action::Conservative];

    pub fn index(self) -> usize {
        match self {
            Action::Aggressive => 0,
            Action::Moderate => 1,
            Action::Conservative => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("action index {i} out of range")))
    }
}

/// Reward and injection constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvParams {
    /// Cost per step of each action while the stimulus is on, in action order.
    pub action_costs: [f64; ACTION_COUNT],
    /// Extra out-neighbour candidates injected by the aggressive action.
    pub aggressive_extra: usize,
    /// Harm per delayed sensitive active node, capped at 1.
    pub harm_per_node: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            action_costs: [0.002, 0.001, 0.0],
            aggressive_extra: 2,
            harm_per_node: 0.1,
        }
    }
}

/// A stimulus: its fixed seed set and hop distances from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Stimulus {
    pub z: u32,
    pub seeds: Vec<usize>,
    hops: Vec<Option<u32>>,
    max_hop: u32,
}

impl Stimulus {
    pub fn new(z: u32, graph: &DiffusionGraph, seed_count: usize) -> Result<Self> {
        let seeds = stimulus_seed_set(z, graph, seed_count)?;
        Ok(Self::from_seeds(z, seeds, graph))
    }

    pub fn from_seeds(z: u32, seeds: Vec<usize>, graph: &DiffusionGraph) -> Self {
        let hops = graph.hop_distances_from(&seeds);
        let max_hop = hops.iter().flatten().copied().max().unwrap_or(0);
        Stimulus {
            z,
            seeds,
            hops,
            max_hop,
        }
    }

    /// Hop distance of `v` from the seed set; unreachable nodes count as one past the farthest.
    pub fn hop(&self, v: usize) -> u32 {
        self.hops[v].unwrap_or(self.max_hop + 1)
    }

    pub fn max_hop(&self) -> u32 {
        self.max_hop
    }
}

/// Ring of the sensitive active nodes seen at the start of each of the last `D + 1` steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DelayBuffer {
    capacity: usize,
    entries: VecDeque<Vec<usize>>,
}

impl DelayBuffer {
    pub fn new(delay: usize) -> Self {
        DelayBuffer {
            capacity: delay + 1,
            entries: VecDeque::with_capacity(delay + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_warm(&self) -> bool {
        self.entries.len() == self.capacity
    }

    /// Push the current set and return the one from `D` steps ago once warm.
    fn push(&mut self, sensitive_active: Vec<usize>) -> Option<&[usize]> {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(sensitive_active);
        if self.is_warm() {
            self.entries.front().map(Vec::as_slice)
        } else {
            None
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    active: Vec<bool>,
    active_count: usize,
    sensitive_count: usize,
    /// Phase-local step index.
    pub time: usize,
    pub stimulus_on: bool,
    pub delay: DelayBuffer,
}

impl EnvState {
    pub fn new(nodes: usize, delay: usize) -> Self {
        EnvState {
            active: vec![false; nodes],
            active_count: 0,
            sensitive_count: 0,
            time: 0,
            stimulus_on: false,
            delay: DelayBuffer::new(delay),
        }
    }

    /// Reset the observable state: empty active set and phase clock at zero.
    pub fn reset_observable(&mut self) {
        self.active.iter_mut().for_each(|a| *a = false);
        self.active_count = 0;
        self.sensitive_count = 0;
        self.time = 0;
    }

    /// Copy of the active set and clocks with an empty delay buffer.
    pub fn observable_copy(&self) -> Self {
        EnvState {
            active: self.active.clone(),
            active_count: self.active_count,
            sensitive_count: self.sensitive_count,
            time: self.time,
            stimulus_on: self.stimulus_on,
            delay: DelayBuffer::new(self.delay.capacity.saturating_sub(1)),
        }
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn is_active(&self, v: usize) -> bool {
        self.active[v]
    }

    pub fn reach(&self) -> usize {
        self.active_count
    }

    pub fn sensitive_reach(&self) -> usize {
        self.sensitive_count
    }

    pub fn active_nodes(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&v| self.active[v]).collect()
    }

    /// Activate `v`; returns true if it was inactive.
    pub fn activate(&mut self, v: usize, graph: &DiffusionGraph) -> bool {
        if self.active[v] {
            return false;
        }
        self.active[v] = true;
        self.active_count += 1;
        if graph.is_sensitive(v) {
            self.sensitive_count += 1;
        }
        true
    }

    fn sensitive_active(&self, graph: &DiffusionGraph) -> Vec<usize> {
        graph
            .sensitive_nodes()
            .iter()
            .copied()
            .filter(|&v| self.active[v])
            .collect()
    }
}

/// Observable features of the active set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub reach: f64,
    /// Mean hop distance of active nodes from the seeds, normalized by the farthest hop.
    pub centroid: f64,
    pub spread: f64,
    pub time: f64,
}

impl Observation {
    pub const LEN: usize = 4;

    pub fn to_array(&self) -> [f64; Self::LEN] {
        [self.reach, self.centroid, self.spread, self.time]
    }
}

pub fn observe(state: &EnvState, graph: &DiffusionGraph, stimulus: &Stimulus, horizon: usize) -> Observation {
    let n = graph.node_count() as f64;
    let scale = f64::from(stimulus.max_hop().max(1));
    let (mut sum, mut sq, mut count) = (0.0, 0.0, 0usize);
    for (v, &on) in state.active.iter().enumerate() {
        if on {
            let h = f64::from(stimulus.hop(v)) / scale;
            sum += h;
            sq += h * h;
            count += 1;
        }
    }
    let (centroid, spread) = if count == 0 {
        (0.0, 0.0)
    } else {
        let mean = sum / count as f64;
        (mean, (sq / count as f64 - mean * mean).max(0.0).sqrt())
    };
    Observation {
        reach: count as f64 / n,
        centroid,
        spread,
        time: state.time as f64 / horizon.max(1) as f64,
    }
}

/// Harmful-entry probability under gated (`p`, `q`) and nominal (`p0`, `q0`) edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OddsSample {
    pub p: f64,
    pub q: f64,
    pub p0: f64,
    pub q0: f64,
}

/// Probability that at least one inactive sensitive node activates this step.
///
/// `edge_prob(i)` gives the firing probability of edge `i` of the graph.
pub fn harmful_entry_prob(active: &[bool], graph: &DiffusionGraph, edge_prob: impl Fn(usize) -> f64) -> (f64, f64) {
    let mut none = 1.0;
    for &v in graph.sensitive_nodes() {
        if active[v] {
            continue;
        }
        for &i in graph.in_edge_indices(v) {
            if active[graph.edges()[i].u] {
                none *= 1.0 - edge_prob(i);
            }
        }
    }
    (1.0 - none, none)
}

/// Per-node conductances used to gate edges into each node, honouring the mode.
pub fn edge_conductances(
    active: &[bool],
    graph: &DiffusionGraph,
    fields: &HarmFields,
    spec: &DeformationSpec,
) -> Vec<f64> {
    let n = graph.node_count();
    let raw = |v: usize| {
        let r = graph.region_of(v);
        spec.conductance_of(fields.trace()[r], fields.scar()[r])
    };
    match &spec.mode {
        DeformMode::Off => vec![1.0; n],
        DeformMode::Full => (0..n).map(raw).collect(),
        DeformMode::Local { regions } => (0..n)
            .map(|v| if regions.contains(&graph.region_of(v)) { raw(v) } else { 1.0 })
            .collect(),
        DeformMode::TopK { k } => {
            let (frontier, nominal) = frontier_activation(active, graph);
            let mut psi = vec![1.0; n];
            for i in top_k_indices(&nominal, *k) {
                psi[frontier[i]] = raw(frontier[i]);
            }
            psi
        }
    }
}

/// Inactive nodes with an active in-neighbour, and their nominal activation probabilities.
pub fn frontier_activation(active: &[bool], graph: &DiffusionGraph) -> (Vec<usize>, Vec<f64>) {
    let mut nodes = Vec::new();
    let mut probs = Vec::new();
    for v in 0..graph.node_count() {
        if active[v] {
            continue;
        }
        let mut none = 1.0;
        let mut touched = false;
        for &i in graph.in_edge_indices(v) {
            let e = graph.edges()[i];
            if active[e.u] {
                none *= 1.0 - e.p;
                touched = true;
            }
        }
        if touched {
            nodes.push(v);
            probs.push(1.0 - none);
        }
    }
    (nodes, probs)
}

/// Field features exposed to history-aware policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub trace_sum: f64,
    pub scar_sum: f64,
    pub trace_max: f64,
    pub scar_max: f64,
    /// Mean conductance over frontier nodes, 1 when the frontier is empty.
    pub frontier_conductance: f64,
}

impl FieldSummary {
    pub const LEN: usize = 5;

    /// The conductance feature ignores the deployment mode so that policies with
    /// and without deformation see the same inputs.
    pub fn compute(state: &EnvState, graph: &DiffusionGraph, fields: &HarmFields, spec: &DeformationSpec) -> Self {
        let (frontier, _) = frontier_activation(&state.active, graph);
        let frontier_conductance = if frontier.is_empty() {
            1.0
        } else {
            frontier
                .iter()
                .map(|&v| {
                    let r = graph.region_of(v);
                    spec.conductance_of(fields.trace()[r], fields.scar()[r])
                })
                .sum::<f64>()
                / frontier.len() as f64
        };
        FieldSummary {
            trace_sum: fields.trace_sum(),
            scar_sum: fields.scar_sum(),
            trace_max: fields.trace_max(),
            scar_max: fields.scar_max(),
            frontier_conductance,
        }
    }

    /// Log-compressed feature vector.
    pub fn to_array(&self) -> [f64; Self::LEN] {
        [
            self.trace_sum.ln_1p(),
            self.scar_sum.ln_1p(),
            self.trace_max.ln_1p(),
            self.scar_max.ln_1p(),
            self.frontier_conductance,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub harm: f64,
    /// Sensitive nodes active `D` steps ago; the regions harm is attributed to.
    pub causal: Vec<usize>,
    pub newly_active: usize,
    pub odds: OddsSample,
}

/// Advance the environment one step.
///
/// Order: delay buffer push and harm, seed injection, odds sample on the
/// post-injection state, per-edge diffusion, reward. Fields are read, not updated.
#[allow(clippy::too_many_arguments)]
pub fn env_step(
    state: &mut EnvState,
    action: Action,
    graph: &DiffusionGraph,
    stimulus: &Stimulus,
    fields: &HarmFields,
    deform: &DeformationSpec,
    params: &EnvParams,
    rng: &mut Stream,
) -> Result<StepOutcome> {
    if state.active.len() != graph.node_count() || fields.regions() != graph.region_count() {
        return Err(Error::invalid("state, fields and graph sizes disagree"));
    }
    let reach_before = state.active_count;

    let sens_now = state.sensitive_active(graph);
    let causal = state.delay.push(sens_now).map(<[usize]>::to_vec).unwrap_or_default();
    let harm = (params.harm_per_node * causal.len() as f64).min(1.0);

    if state.stimulus_on {
        let psi_of = |v: usize| {
            let r = graph.region_of(v);
            deform.conductance_of(fields.trace()[r], fields.scar()[r])
        };
        inject(state, action, graph, stimulus, &psi_of, deform, params.aggressive_extra, rng)?;
    }

    let psi = edge_conductances(&state.active, graph, fields, deform);
    let edges = graph.edges();
    let gated = |i: usize| gate_edge_prob(edges[i].p, psi[edges[i].v]);
    let (p, q) = harmful_entry_prob(&state.active, graph, gated);
    let (p0, q0) = harmful_entry_prob(&state.active, graph, |i| edges[i].p);

    // one uniform per edge every step keeps streams aligned across states
    let mut fired = Vec::new();
    for (i, e) in edges.iter().enumerate() {
        let draw: f64 = rng.random();
        if state.active[e.u] && !state.active[e.v] && draw < gated(i) {
            fired.push(e.v);
        }
    }
    for v in fired {
        state.activate(v, graph);
    }

    let newly_active = state.active_count - reach_before;
    let cost = if state.stimulus_on {
        params.action_costs[action.index()]
    } else {
        0.0
    };
    state.time += 1;
    Ok(StepOutcome {
        reward: newly_active as f64 / graph.node_count() as f64 - cost,
        harm,
        causal,
        newly_active,
        odds: OddsSample { p, q, p0, q0 },
    })
}

/// Activate the injection nodes chosen by `action`.
///
/// Destination choices use the categorical reweighted by `psi_of` under `deform`'s mode.
#[allow(clippy::too_many_arguments)]
pub fn inject(
    state: &mut EnvState,
    action: Action,
    graph: &DiffusionGraph,
    stimulus: &Stimulus,
    psi_of: &dyn Fn(usize) -> f64,
    deform: &DeformationSpec,
    extra: usize,
    rng: &mut Stream,
) -> Result<()> {
    match action {
        Action::Conservative => {
            let seeds = &stimulus.seeds;
            let nominal = vec![1.0 / seeds.len() as f64; seeds.len()];
            let psi: Vec<f64> = seeds.iter().map(|&v| psi_of(v)).collect();
            let regions: Vec<usize> = seeds.iter().map(|&v| graph.region_of(v)).collect();
            let probs = apply_mode(&nominal, &psi, &regions, deform)?;
            let pick = sample_index(&probs, rng.random());
            state.activate(seeds[pick], graph);
        }
        Action::Moderate => {
            for &v in &stimulus.seeds {
                state.activate(v, graph);
            }
        }
        Action::Aggressive => {
            for &v in &stimulus.seeds {
                state.activate(v, graph);
            }
            let mut candidates: Vec<usize> = Vec::new();
            let mut weights: Vec<f64> = Vec::new();
            for &s in &stimulus.seeds {
                for e in graph.out_edges(s) {
                    if state.active[e.v] {
                        continue;
                    }
                    match candidates.iter().position(|&c| c == e.v) {
                        Some(j) => weights[j] += e.p,
                        None => {
                            candidates.push(e.v);
                            weights.push(e.p);
                        }
                    }
                }
            }
            for _ in 0..extra {
                if candidates.is_empty() {
                    break;
                }
                let total: f64 = weights.iter().sum();
                let nominal: Vec<f64> = weights.iter().map(|w| w / total).collect();
                let nominal = renormalized(nominal);
                let psi: Vec<f64> = candidates.iter().map(|&v| psi_of(v)).collect();
                let regions: Vec<usize> = candidates.iter().map(|&v| graph.region_of(v)).collect();
                let probs = apply_mode(&nominal, &psi, &regions, deform)?;
                let pick = sample_index(&probs, rng.random());
                state.activate(candidates[pick], graph);
                candidates.remove(pick);
                weights.remove(pick);
            }
        }
    }
    Ok(())
}

// Division by the sum can leave a few ulps of error; fold it into the largest entry.
fn renormalized(mut probs: Vec<f64>) -> Vec<f64> {
    let total: f64 = probs.iter().sum();
    if let Some(i) = top_k_indices(&probs, 1).first().copied() {
        probs[i] += 1.0 - total;
    }
    probs
}

/// Inverse-CDF sample from a categorical given a uniform draw.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
