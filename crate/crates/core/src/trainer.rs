//! Desk-scale clipped policy-gradient trainer with Lagrangian cost duals.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::ACTION_COUNT;
use crate::error::{Error, Result};
use crate::graph::STIMULUS_COUNT;
use crate::policy::{softmax, Network, Policy};
use crate::rng::{self, Stream};
use crate::rsd::{drive_episode, EpisodeSeeds, EpisodeSpec, Phase, RsdConfig};

/// Which part of the scar change is charged as cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScarCost {
    /// Only the threshold-exceedance injection (never negative).
    Injection,
    /// The net change of total scar, negative while scars recover.
    Delta,
}

/// How harm enters the training signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostWiring {
    None,
    /// Penalty on the harm emitted at each step.
    Instantaneous,
    /// Harm credited back over the delay window through a decaying trace.
    DelayedTrace,
    /// Penalties on total trace and scar growth.
    Fields,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Environment steps per trained policy, decay steps included.
    pub steps: usize,
    pub episodes_per_batch: usize,
    pub lr: f64,
    pub clip: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_lr: f64,
    pub dual_lr: f64,
    pub budget_trace: f64,
    pub budget_scar: f64,
    pub budget_harm: f64,
    /// Hidden tanh units; `None` trains a linear softmax.
    pub hidden: Option<usize>,
    pub window: usize,
    pub trace_decay: f64,
    pub scar_cost: ScarCost,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200_000,
            episodes_per_batch: 2,
            lr: 3e-4,
            clip: 0.2,
            gae_lambda: 0.95,
            gamma: 0.99,
            epochs: 4,
            minibatch: 256,
            entropy_coef: 0.01,
            value_lr: 1e-3,
            dual_lr: 1e-2,
            budget_trace: 0.0,
            budget_scar: 0.0,
            budget_harm: 0.0,
            hidden: Some(32),
            window: 50,
            trace_decay: 0.98,
            scar_cost: ScarCost::Injection,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::config(format!("training.{name}"), "must lie in (0, 1]"))
            }
        };
        unit("gamma", self.gamma)?;
        unit("gae_lambda", self.gae_lambda)?;
        unit("trace_decay", self.trace_decay)?;
        unit("dual_lr", self.dual_lr)?;
        for (name, v) in [("lr", self.lr), ("value_lr", self.value_lr), ("clip", self.clip)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("training.{name}"), "must be positive"));
            }
        }
        if self.entropy_coef < 0.0 {
            return Err(Error::config("training.entropy_coef", "must be nonnegative"));
        }
        for (name, v) in [
            ("episodes_per_batch", self.episodes_per_batch),
            ("epochs", self.epochs),
            ("minibatch", self.minibatch),
            ("window", self.window),
        ] {
            if v == 0 {
                return Err(Error::config(format!("training.{name}"), "must be at least 1"));
            }
        }
        if self.hidden == Some(0) {
            return Err(Error::config("training.hidden", "must be at least 1 when set"));
        }
        Ok(())
    }
}

/// One decision step of a training rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub features: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub harm: f64,
    pub trace_sum: f64,
    pub scar_cost: f64,
    /// Last step of a trajectory segment.
    pub done: bool,
}

/// Lagrange multipliers; all kept nonnegative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Duals {
    pub trace: f64,
    pub scar: f64,
    pub harm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Move `params` along `+grad` (ascent).
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// A sample entering the clipped surrogate.
#[derive(Debug, Clone, Copy)]
pub struct PgSample<'a> {
    pub features: &'a [f64],
    pub action: usize,
    pub log_prob_old: f64,
    pub advantage: f64,
}

fn entropy(p: &[f64; ACTION_COUNT]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Mean clipped surrogate plus entropy bonus.
pub fn surrogate_objective(net: &Network, samples: &[PgSample<'_>], clip: f64, entropy_coef: f64) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let p = softmax(&net.forward(s.features).logits);
            let ratio = (p[s.action].ln() - s.log_prob_old).exp();
            let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
            (ratio * s.advantage).min(clipped * s.advantage) + entropy_coef * entropy(&p)
        })
        .sum();
    total / samples.len() as f64
}

/// Gradient of [`surrogate_objective`] with respect to the network parameters.
pub fn surrogate_gradient(net: &Network, samples: &[PgSample<'_>], clip: f64, entropy_coef: f64) -> Vec<f64> {
    let mut grad = vec![0.0; net.params.len()];
    let scale = 1.0 / samples.len() as f64;
    for s in samples {
        let fwd = net.forward(s.features);
        let p = softmax(&fwd.logits);
        let ratio = (p[s.action].ln() - s.log_prob_old).exp();
        let a = s.advantage;
        // the min picks the clipped branch, whose gradient is zero
        let clipped = (a > 0.0 && ratio > 1.0 + clip) || (a < 0.0 && ratio < 1.0 - clip);
        let h = entropy(&p);
        let mut d = [0.0; ACTION_COUNT];
        for (j, dj) in d.iter_mut().enumerate() {
            let onehot = if j == s.action { 1.0 } else { 0.0 };
            if !clipped {
                *dj += a * ratio * (onehot - p[j]);
            }
            if p[j] > 0.0 {
                *dj -= entropy_coef * p[j] * (p[j].ln() + h);
            }
            *dj *= scale;
        }
        net.accumulate_grad(s.features, &fwd, &d, &mut grad);
    }
    grad
}

/// Generalized advantage estimates over segments ending at `done`.
pub fn gae(rewards: &[f64], values: &[f64], done: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let (next_value, carry) = if done[t] || t + 1 == n {
            (0.0, 0.0)
        } else {
            (values[t + 1], next_adv)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        adv[t] = delta + gamma * lambda * carry;
        next_adv = adv[t];
    }
    adv
}

/// Learner state for one policy.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub policy: Policy,
    pub duals: Duals,
    wiring: CostWiring,
    cfg: TrainConfig,
    policy_adam: Adam,
    reward_critic: Critic,
    cost_critic: Critic,
    shuffle: Stream,
}

/// Linear value baseline whose output is scaled by the spread of its targets.
#[derive(Debug, Clone)]
struct Critic {
    weights: Vec<f64>,
    adam: Adam,
    scale: f64,
}

impl Critic {
    fn new(inputs: usize, lr: f64) -> Self {
        Critic {
            weights: vec![0.0; inputs + 1],
            adam: Adam::new(inputs + 1, lr),
            scale: 1.0,
        }
    }

    fn value(&self, x: &[f64]) -> f64 {
        let n = x.len();
        self.scale * (self.weights[..n].iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + self.weights[n])
    }

    fn rescale(&mut self, targets: &[f64]) {
        let s = crate::stats::std_dev(targets);
        if s > 1e-12 {
            self.scale = s;
        }
    }

    fn fit(&mut self, batch: &[Transition], targets: &[f64], chunk: &[usize]) {
        let mut grad = vec![0.0; self.weights.len()];
        let m = chunk.len() as f64;
        for &i in chunk {
            let x = &batch[i].features;
            let err = (targets[i] - self.value(x)) / self.scale;
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += err * xi / m;
            }
            *grad.last_mut().expect("bias") += err / m;
        }
        self.adam.ascend(&mut self.weights, &grad);
    }
}

/// Zero-mean, unit-spread copy; all zeros when the spread vanishes.
fn standardize(xs: &mut [f64]) {
    let m = crate::stats::mean(xs);
    let s = crate::stats::std_dev(xs);
    if s > 1e-12 {
        xs.iter_mut().for_each(|a| *a = (*a - m) / s);
    } else {
        xs.iter_mut().for_each(|a| *a = 0.0);
    }
}

/// Diagnostics of one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_reward: f64,
    pub mean_shaped: f64,
    pub mean_trace: f64,
    pub mean_scar_cost: f64,
    pub mean_harm: f64,
    pub duals: Duals,
}

impl TrainerState {
    pub fn new(policy: Policy, wiring: CostWiring, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = policy
            .network()
            .ok_or_else(|| Error::invalid("only parametric policies can be trained"))?;
        let params = net.params.len();
        let inputs = net.input;
        Ok(TrainerState {
            policy_adam: Adam::new(params, cfg.lr),
            reward_critic: Critic::new(inputs, cfg.value_lr),
            cost_critic: Critic::new(inputs, cfg.value_lr),
            shuffle: rng::stream(rng::derive(seed, "minibatch")),
            policy,
            duals: Duals::default(),
            wiring,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn wiring(&self) -> CostWiring {
        self.wiring
    }

    /// Dual-weighted cost charged at each step.
    pub fn penalties(&self, batch: &[Transition]) -> Vec<f64> {
        let d = self.duals;
        match self.wiring {
            CostWiring::None => vec![0.0; batch.len()],
            CostWiring::Instantaneous => batch.iter().map(|t| d.harm * t.harm).collect(),
            CostWiring::Fields => batch.iter().map(|t| d.trace * t.trace_sum + d.scar * t.scar_cost).collect(),
            CostWiring::DelayedTrace => delayed_credit(batch, self.cfg.trace_decay)
                .into_iter()
                .map(|c| d.harm * c)
                .collect(),
        }
    }

    /// Total multiplier mass on the active cost terms.
    pub fn penalty_weight(&self) -> f64 {
        let d = self.duals;
        match self.wiring {
            CostWiring::None => 0.0,
            CostWiring::Fields => d.trace + d.scar,
            CostWiring::Instantaneous | CostWiring::DelayedTrace => d.harm,
        }
    }

    /// Per-step training signal after subtracting the weighted costs.
    pub fn shaped_rewards(&self, batch: &[Transition]) -> Vec<f64> {
        batch.iter().zip(self.penalties(batch)).map(|(t, c)| t.reward - c).collect()
    }

    /// Reward and cost advantages, each standardized, mixed as
    /// `(A_r - w A_c) / (1 + w)` with `w` the multiplier mass.
    fn advantages(&mut self, batch: &[Transition], penalties: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let done: Vec<bool> = batch.iter().map(|t| t.done).collect();
        let (gamma, lambda) = (self.cfg.gamma, self.cfg.gae_lambda);
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        let vr: Vec<f64> = batch.iter().map(|t| self.reward_critic.value(&t.features)).collect();
        let vc: Vec<f64> = batch.iter().map(|t| self.cost_critic.value(&t.features)).collect();
        let mut adv_r = gae(&rewards, &vr, &done, gamma, lambda);
        let mut adv_c = gae(penalties, &vc, &done, gamma, lambda);
        let ret_r: Vec<f64> = adv_r.iter().zip(&vr).map(|(a, v)| a + v).collect();
        let ret_c: Vec<f64> = adv_c.iter().zip(&vc).map(|(a, v)| a + v).collect();
        standardize(&mut adv_r);
        standardize(&mut adv_c);
        let w = self.penalty_weight();
        let adv = adv_r.iter().zip(&adv_c).map(|(r, c)| (r - w * c) / (1.0 + w)).collect();
        (adv, ret_r, ret_c)
    }

    /// One clipped-surrogate update (several passes over shuffled minibatches).
    pub fn train_epoch(&mut self, batch: &[Transition]) -> Result<UpdateStats> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        if self.policy.is_frozen() {
            return Err(Error::protocol("cannot train a frozen policy"));
        }
        let penalties = self.penalties(batch);
        let shaped: Vec<f64> = batch.iter().zip(&penalties).map(|(t, c)| t.reward - c).collect();
        let (adv, ret_r, ret_c) = self.advantages(batch, &penalties);
        self.reward_critic.rescale(&ret_r);
        self.cost_critic.rescale(&ret_c);

        let mut order: Vec<usize> = (0..batch.len()).collect();
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut self.shuffle);
            for chunk in order.chunks(self.cfg.minibatch) {
                let samples: Vec<PgSample<'_>> = chunk
                    .iter()
                    .map(|&i| PgSample {
                        features: &batch[i].features,
                        action: batch[i].action,
                        log_prob_old: batch[i].log_prob,
                        advantage: adv[i],
                    })
                    .collect();
                let (clip, ent) = (self.cfg.clip, self.cfg.entropy_coef);
                let net = self.policy.network_mut()?;
                let grad = surrogate_gradient(net, &samples, clip, ent);
                self.policy_adam.ascend(&mut net.params, &grad);

                self.reward_critic.fit(batch, &ret_r, chunk);
                self.cost_critic.fit(batch, &ret_c, chunk);
            }
        }
        Ok(self.stats(batch, &shaped))
    }

    fn stats(&self, batch: &[Transition], shaped: &[f64]) -> UpdateStats {
        let n = batch.len() as f64;
        UpdateStats {
            mean_reward: batch.iter().map(|t| t.reward).sum::<f64>() / n,
            mean_shaped: shaped.iter().sum::<f64>() / n,
            mean_trace: batch.iter().map(|t| t.trace_sum).sum::<f64>() / n,
            mean_scar_cost: batch.iter().map(|t| t.scar_cost).sum::<f64>() / n,
            mean_harm: batch.iter().map(|t| t.harm).sum::<f64>() / n,
            duals: self.duals,
        }
    }

    /// Projected dual ascent on the batch's mean costs.
    pub fn dual_update(&mut self, batch: &[Transition]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let n = batch.len() as f64;
        let lr = self.cfg.dual_lr;
        match self.wiring {
            CostWiring::None => {}
            CostWiring::Fields => {
                let trace = batch.iter().map(|t| t.trace_sum).sum::<f64>() / n;
                let scar = batch.iter().map(|t| t.scar_cost).sum::<f64>() / n;
                self.duals.trace = project_ascent(self.duals.trace, lr, trace - self.cfg.budget_trace);
                self.duals.scar = project_ascent(self.duals.scar, lr, scar - self.cfg.budget_scar);
            }
            CostWiring::Instantaneous | CostWiring::DelayedTrace => {
                let harm = batch.iter().map(|t| t.harm).sum::<f64>() / n;
                self.duals.harm = leaky_ascent(self.duals.harm, lr, harm - self.cfg.budget_harm);
            }
        }
        Ok(())
    }
}

/// `max(0, x + lr * g)`.
pub fn project_ascent(x: f64, lr: f64, g: f64) -> f64 {
    (x + lr * g).max(0.0)
}

/// `max(0, (1 - lr) x + lr * g)`: the multiplier forgets at rate `lr`.
pub fn leaky_ascent(x: f64, lr: f64, g: f64) -> f64 {
    ((1.0 - lr) * x + lr * g).max(0.0)
}

/// Harm credited to each step from the following `delay + 1` steps, with
/// weights proportional to `decay^k` and normalized to sum to one.
fn delayed_credit(batch: &[Transition], decay: f64) -> Vec<f64> {
    const WINDOW: usize = 51;
    let norm: f64 = (0..WINDOW).map(|k| decay.powi(k as i32)).sum();
    let mut out = vec![0.0; batch.len()];
    let mut start = 0;
    while start < batch.len() {
        let end = (start..batch.len()).find(|&i| batch[i].done).map_or(batch.len(), |i| i + 1);
        for s in start..end {
            let mut c = 0.0;
            for k in 0..WINDOW.min(end - s) {
                c += decay.powi(k as i32) * batch[s + k].harm;
            }
            out[s] = c / norm;
        }
        start = end;
    }
    out
}

/// Roll out one training episode; decay-phase steps are not returned.
pub fn collect_episode(
    policy: &Policy,
    spec: &EpisodeSpec<'_>,
    rsd: &RsdConfig,
    seeds: EpisodeSeeds,
    scar_cost: ScarCost,
) -> Result<Vec<Transition>> {
    let mut local = policy.clone();
    let mut out: Vec<(Phase, Transition)> = Vec::new();
    drive_episode(rsd, &mut local, spec, seeds, |phase, d, rec| {
        if phase == Phase::Decay {
            return;
        }
        out.push((
            phase,
            Transition {
                features: d.features.clone(),
                action: d.action.index(),
                log_prob: d.distribution[d.action.index()].ln(),
                reward: rec.reward,
                harm: rec.harm,
                trace_sum: rec.trace_sum,
                scar_cost: match scar_cost {
                    ScarCost::Injection => rec.scar_injection,
                    ScarCost::Delta => rec.scar_delta,
                },
                done: false,
            },
        ));
    })?;
    let n = out.len();
    for i in 0..n {
        if i + 1 == n || out[i + 1].0 != out[i].0 {
            out[i].1.done = true;
        }
    }
    Ok(out.into_iter().map(|(_, t)| t).collect())
}

/// Trained, frozen policy and its training history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub duals: Duals,
    pub history: Vec<UpdateStats>,
}

/// Train `policy` on RSD-shaped episodes until the step budget is spent, then freeze it.
pub fn train_policy(
    policy: Policy,
    wiring: CostWiring,
    spec: &EpisodeSpec<'_>,
    rsd: &RsdConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut trainer = TrainerState::new(policy, wiring, cfg.clone(), seed)?;
    let per_episode = rsd.t_exp + rsd.t_decay + rsd.t_rep;
    let episodes = cfg.steps.div_ceil(per_episode);
    let mut picker = rng::stream(rng::derive(seed, "train-episodes"));
    let plan: Vec<EpisodeSeeds> = (0..episodes)
        .map(|k| EpisodeSeeds {
            episode_seed: rng::derive_index(rng::derive(seed, "train-episode"), k as u64),
            z: picker.random_range(1..=STIMULUS_COUNT),
        })
        .collect();
    let mut history = Vec::new();
    for chunk in plan.chunks(cfg.episodes_per_batch) {
        let snapshot = trainer.policy.clone();
        let parts: Vec<Vec<Transition>> = chunk
            .par_iter()
            .map(|&s| collect_episode(&snapshot, spec, rsd, s, cfg.scar_cost))
            .collect::<Result<_>>()?;
        let batch: Vec<Transition> = parts.into_iter().flatten().collect();
        history.push(trainer.train_epoch(&batch)?);
        trainer.dual_update(&batch)?;
    }
    let mut policy = trainer.policy;
    policy.freeze();
    Ok(TrainOutcome {
        policy,
        duals: trainer.duals,
        history,
    })
}
