//! Monte-Carlo action shield on the nominal kernel.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deformation::DeformationSpec;
use crate::env::{inject, observe, sample_index, Action, EnvState, ACTION_COUNT};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::rng::{self, Stream};
use crate::rsd::{Controller, Decision};
use crate::world::World;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShieldParams {
    /// Block actions whose expected cumulative sensitive mass exceeds this.
    pub threshold: f64,
    pub n_mc: usize,
    pub horizon: usize,
}

impl ShieldParams {
    /// Simulated transitions spent on one real step.
    pub fn transitions_per_step(&self) -> u64 {
        (self.n_mc * self.horizon * ACTION_COUNT) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShieldVerdict {
    pub allowed: [bool; ACTION_COUNT],
    pub expected_mass: [f64; ACTION_COUNT],
    /// Every action exceeded the threshold and Conservative was forced.
    pub fail_safe: bool,
}

/// Estimate each action's expected cumulative sensitive mass and block the ones above threshold.
///
/// Each rollout takes the candidate action first, then follows `continuation` on the rollout's
/// own observation. Rollouts draw from substreams of `seed`, so the verdict does not depend on
/// how many threads evaluate them.
pub fn shield_filter(
    world: &World<'_>,
    continuation: &(dyn Fn(&EnvState) -> [f64; ACTION_COUNT] + Sync),
    params: &ShieldParams,
    seed: u64,
) -> Result<ShieldVerdict> {
    if params.n_mc == 0 {
        return Err(Error::invalid("shield needs at least one rollout"));
    }
    let jobs: Vec<(Action, usize)> = Action::ALL
        .iter()
        .flat_map(|&a| (0..params.n_mc).map(move |j| (a, j)))
        .collect();
    let masses: Vec<f64> = jobs
        .par_iter()
        .map(|&(a, j)| {
            let mut r = rng::stream(rng::derive_index(rng::derive(seed, action_label(a)), j as u64));
            rollout_mass(world, a, continuation, params.horizon, &mut r)
        })
        .collect::<Result<_>>()?;
    let mut expected_mass = [0.0; ACTION_COUNT];
    for (&(a, _), m) in jobs.iter().zip(&masses) {
        expected_mass[a.index()] += m;
    }
    let mut allowed = [false; ACTION_COUNT];
    for a in Action::ALL {
        expected_mass[a.index()] /= params.n_mc as f64;
        allowed[a.index()] = expected_mass[a.index()] <= params.threshold;
    }
    let fail_safe = !allowed.iter().any(|&x| x);
    if fail_safe {
        allowed[Action::Conservative.index()] = true;
    }
    Ok(ShieldVerdict {
        allowed,
        expected_mass,
        fail_safe,
    })
}

fn action_label(a: Action) -> &'static str {
    match a {
        Action::Aggressive => "aggressive",
        Action::Moderate => "moderate",
        Action::Conservative => "conservative",
    }
}

/// One nominal rollout: sum over steps of the sensitive active count after each step.
fn rollout_mass(
    world: &World<'_>,
    first: Action,
    continuation: &dyn Fn(&EnvState) -> [f64; ACTION_COUNT],
    horizon: usize,
    rng: &mut Stream,
) -> Result<f64> {
    let graph = world.graph();
    let stimulus = world.stimulus();
    let extra = world.env_params().aggressive_extra;
    let nominal = DeformationSpec::off();
    let mut state = world.state.observable_copy();
    let mut fired = Vec::new();
    let mut mass = 0.0;
    let mut action = first;
    for step in 0..horizon {
        if step > 0 {
            action = Action::from_index(sample_index(&continuation(&state), rng.random()))?;
        }
        if state.stimulus_on {
            inject(&mut state, action, graph, stimulus, &|_| 1.0, &nominal, extra, rng)?;
        }
        fired.clear();
        for u in 0..graph.node_count() {
            if !state.is_active(u) {
                continue;
            }
            for e in graph.out_edges(u) {
                if !state.is_active(e.v) && rng.random::<f64>() < e.p {
                    fired.push(e.v);
                }
            }
        }
        for &v in &fired {
            state.activate(v, graph);
        }
        state.time += 1;
        mass += state.sensitive_reach() as f64;
    }
    Ok(mass)
}

/// A frozen base policy restricted to the actions the shield allows.
#[derive(Debug, Clone)]
pub struct ShieldedPolicy {
    base: Policy,
    params: ShieldParams,
}

impl ShieldedPolicy {
    /// The base policy must be memoryless and observation-only.
    pub fn new(base: Policy, params: ShieldParams) -> Result<Self> {
        if base.wants_fields() {
            return Err(Error::invalid("shield base policy must use observation features only"));
        }
        if matches!(base.kind(), crate::policy::PolicyKind::WindowHistory { .. }) {
            return Err(Error::invalid("shield base policy must be memoryless"));
        }
        if params.n_mc == 0 || params.horizon == 0 {
            return Err(Error::invalid("shield rollouts and horizon must be at least 1"));
        }
        Ok(ShieldedPolicy { base, params })
    }

    pub fn base(&self) -> &Policy {
        &self.base
    }

    pub fn params(&self) -> &ShieldParams {
        &self.params
    }
}

impl Controller for ShieldedPolicy {
    fn reset_memory(&mut self) {
        self.base.reset_memory();
    }

    fn is_frozen(&self) -> bool {
        self.base.is_frozen()
    }

    fn decide(&mut self, world: &World<'_>, rng: &mut Stream) -> Result<Decision> {
        let obs = world.observation();
        let features = self.base.features(&obs, None)?;
        let base = self.base.distribution_from_features(&features);
        let rollout_seed: u64 = rng.random();
        // with the stimulus off the action changes nothing, so nothing is blocked
        let distribution = if world.state.stimulus_on {
            let graph = world.graph();
            let stimulus = world.stimulus();
            let horizon = world.horizon();
            let policy = &self.base;
            let continuation = |s: &EnvState| {
                let o = observe(s, graph, stimulus, horizon);
                policy.action_distribution(&o, None).unwrap_or([1.0 / 3.0; ACTION_COUNT])
            };
            let verdict = shield_filter(world, &continuation, &self.params, rollout_seed)?;
            restrict(&base, &verdict.allowed)
        } else {
            base
        };
        let action = Action::from_index(sample_index(&distribution, rng.random()))?;
        self.base.remember(&obs);
        Ok(Decision {
            action,
            distribution,
            features,
        })
    }

    fn transitions_per_step(&self) -> u64 {
        self.params.transitions_per_step()
    }
}

/// Renormalize `dist` over the allowed actions; uniform over them if they carry no mass.
pub fn restrict(dist: &[f64; ACTION_COUNT], allowed: &[bool; ACTION_COUNT]) -> [f64; ACTION_COUNT] {
    let mut out = [0.0; ACTION_COUNT];
    let mass: f64 = (0..ACTION_COUNT).filter(|&i| allowed[i]).map(|i| dist[i]).sum();
    let count = allowed.iter().filter(|&&x| x).count();
    for i in 0..ACTION_COUNT {
        if allowed[i] {
            out[i] = if mass > 0.0 { dist[i] / mass } else { 1.0 / count as f64 };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningStatus {
    Matched,
    /// The target lies outside the returns reachable inside the bracket.
    Boundary,
    /// Iterations ran out before the tolerance was met.
    Unconverged,
}

impl TuningStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TuningStatus::Matched => "matched",
            TuningStatus::Boundary => "boundary",
            TuningStatus::Unconverged => "unconverged",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShieldTuning {
    pub threshold: f64,
    pub achieved: f64,
    pub target: f64,
    pub status: TuningStatus,
    pub evaluations: usize,
}

/// Bisect the shield threshold until the replay return evaluated by `eval` is within
/// `tolerance` of `target`.
///
/// Assumes the return grows with the threshold (less blocking). Both bracket ends are
/// evaluated first; a target outside their range yields the nearer end with
/// [`TuningStatus::Boundary`].
pub fn tune_shield_um(
    target: f64,
    tolerance: f64,
    iterations: usize,
    bracket: (f64, f64),
    mut eval: impl FnMut(f64) -> Result<f64>,
) -> Result<ShieldTuning> {
    let (mut lo, mut hi) = bracket;
    if !(lo < hi) || !target.is_finite() || !(tolerance >= 0.0) {
        return Err(Error::invalid("shield tuning needs lo < hi, a finite target and tolerance >= 0"));
    }
    let best = |t: f64, r: f64, cur: Option<(f64, f64)>| match cur {
        Some((_, br)) if (br - target).abs() <= (r - target).abs() => cur,
        _ => Some((t, r)),
    };
    let r_hi = eval(hi)?;
    let mut evaluations = 1;
    let mut cur = best(hi, r_hi, None);
    if (r_hi - target).abs() <= tolerance {
        return Ok(finish(cur, target, TuningStatus::Matched, evaluations));
    }
    let r_lo = eval(lo)?;
    evaluations += 1;
    cur = best(lo, r_lo, cur);
    if (r_lo - target).abs() <= tolerance {
        return Ok(finish(cur, target, TuningStatus::Matched, evaluations));
    }
    if target > r_hi || target < r_lo {
        return Ok(finish(cur, target, TuningStatus::Boundary, evaluations));
    }
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        let r = eval(mid)?;
        evaluations += 1;
        cur = best(mid, r, cur);
        if (r - target).abs() <= tolerance {
            return Ok(finish(cur, target, TuningStatus::Matched, evaluations));
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(finish(cur, target, TuningStatus::Unconverged, evaluations))
}

fn finish(best: Option<(f64, f64)>, target: f64, status: TuningStatus, evaluations: usize) -> ShieldTuning {
    let (threshold, achieved) = best.unwrap_or((f64::NAN, f64::NAN));
    ShieldTuning {
        threshold,
        achieved,
        target,
        status,
        evaluations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvParams, Stimulus};
    use crate::fields::FieldParams;
    use crate::graph::{build_graph, GraphParams};
    use crate::policy::FeatureMode;

    fn world(g: &crate::graph::DiffusionGraph) -> World<'_> {
        let stim = Stimulus::new(3, g, 3).unwrap();
        let mut w = World::new(g, stim, EnvParams::default(), FieldParams::default(), DeformationSpec::off());
        w.state.stimulus_on = true;
        w
    }

    fn uniform(_: &EnvState) -> [f64; ACTION_COUNT] {
        [1.0 / 3.0; ACTION_COUNT]
    }

    #[test]
    fn unbounded_threshold_allows_everything() {
        let (g, _) = build_graph(&GraphParams::default(), 4).unwrap();
        let p = ShieldParams {
            threshold: f64::INFINITY,
            n_mc: 3,
            horizon: 10,
        };
        let v = shield_filter(&world(&g), &uniform, &p, 1).unwrap();
        assert_eq!(v.allowed, [true; 3]);
        assert!(!v.fail_safe);
    }

    #[test]
    fn negative_threshold_forces_conservative() {
        let (g, _) = build_graph(&GraphParams::default(), 4).unwrap();
        let p = ShieldParams {
            threshold: -1.0,
            n_mc: 2,
            horizon: 5,
        };
        let v = shield_filter(&world(&g), &uniform, &p, 1).unwrap();
        assert_eq!(v.allowed, [false, false, true]);
        assert!(v.fail_safe);
    }

    #[test]
    fn compute_accounting() {
        let p = ShieldParams {
            threshold: 1.0,
            n_mc: 20,
            horizon: 100,
        };
        assert_eq!(p.transitions_per_step(), 6000);
    }

    #[test]
    fn verdict_is_deterministic_in_seed() {
        let (g, _) = build_graph(&GraphParams::default(), 6).unwrap();
        let p = ShieldParams {
            threshold: 50.0,
            n_mc: 4,
            horizon: 20,
        };
        let w = world(&g);
        let a = shield_filter(&w, &uniform, &p, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| shield_filter(&w, &uniform, &p, 9).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn restrict_renormalizes() {
        let d = restrict(&[0.5, 0.3, 0.2], &[false, true, true]);
        assert!((d[1] - 0.6).abs() < 1e-15);
        assert!((d[2] - 0.4).abs() < 1e-15);
        assert_eq!(d[0], 0.0);
        assert_eq!(restrict(&[1.0, 0.0, 0.0], &[false, false, true]), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn shielded_policy_requires_memoryless_observation_base() {
        let p = ShieldParams {
            threshold: 1.0,
            n_mc: 1,
            horizon: 1,
        };
        let aug = Policy::softmax(FeatureMode::Augmented, None, 1);
        assert!(ShieldedPolicy::new(aug, p).is_err());
        let win = Policy::window_history(4, FeatureMode::Observation, None, 1).unwrap();
        assert!(ShieldedPolicy::new(win, p).is_err());
    }

    #[test]
    fn bisection_matches_monotone_target() {
        let t = tune_shield_um(0.5, 0.01, 12, (0.0, 100.0), |th| Ok(th / 100.0)).unwrap();
        assert_eq!(t.status, TuningStatus::Matched);
        assert!((t.achieved - 0.5).abs() <= 0.01);
    }

    #[test]
    fn degenerate_target_picks_upper_bracket() {
        let t = tune_shield_um(1.0, 0.05, 12, (0.0, 10.0), |th| Ok((th / 10.0).min(1.0))).unwrap();
        assert_eq!(t.threshold, 10.0);
        assert_eq!(t.evaluations, 1);
    }

    #[test]
    fn unreachable_target_reports_boundary() {
        let t = tune_shield_um(2.0, 0.05, 12, (0.0, 10.0), |th| Ok(th / 10.0)).unwrap();
        assert_eq!(t.status, TuningStatus::Boundary);
        assert_eq!(t.threshold, 10.0);
    }
}
