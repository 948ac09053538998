//! Action policies over observation features, with optional field features and history.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{sample_index, Action, FieldSummary, Observation, ACTION_COUNT};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Which inputs a policy sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Observation,
    /// Observation plus field summaries.
    Augmented,
}

/// Softmax head over a linear map or one tanh hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input: usize,
    pub hidden: Option<usize>,
    pub params: Vec<f64>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: [f64; ACTION_COUNT],
    hidden: Vec<f64>,
}

impl Network {
    pub fn param_count(input: usize, hidden: Option<usize>) -> usize {
        match hidden {
            None => ACTION_COUNT * (input + 1),
            Some(h) => h * (input + 1) + ACTION_COUNT * (h + 1),
        }
    }

    /// Output layer starts at zero so the initial policy is uniform.
    pub fn new(input: usize, hidden: Option<usize>, seed: u64) -> Self {
        let mut params = vec![0.0; Self::param_count(input, hidden)];
        if let Some(h) = hidden {
            let mut rng = rng::stream(rng::derive(seed, "network-init"));
            let scale = (1.0 / input.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, scale).expect("finite scale");
            for w in &mut params[..h * input] {
                *w = normal.sample(&mut rng);
            }
        }
        Network { input, hidden, params }
    }

    pub fn forward(&self, x: &[f64]) -> Forward {
        debug_assert_eq!(x.len(), self.input);
        let n = self.input;
        match self.hidden {
            None => Forward {
                logits: affine3(&self.params, x),
                hidden: Vec::new(),
            },
            Some(h) => {
                let (w1, rest) = self.params.split_at(h * n);
                let (b1, out) = rest.split_at(h);
                let hidden: Vec<f64> = (0..h)
                    .map(|j| {
                        let row = &w1[j * n..(j + 1) * n];
                        (row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b1[j]).tanh()
                    })
                    .collect();
                Forward {
                    logits: affine3(out, &hidden),
                    hidden,
                }
            }
        }
    }

    /// Add `d loss / d params` for the given logit gradient into `grad`.
    pub fn accumulate_grad(&self, x: &[f64], fwd: &Forward, dlogits: &[f64; ACTION_COUNT], grad: &mut [f64]) {
        let n = self.input;
        match self.hidden {
            None => accumulate_affine3(x, dlogits, grad),
            Some(h) => {
                let (g1, gout) = grad.split_at_mut(h * n + h);
                accumulate_affine3(&fwd.hidden, dlogits, gout);
                let out = &self.params[h * n + h..];
                for j in 0..h {
                    let back: f64 = (0..ACTION_COUNT).map(|a| dlogits[a] * out[a * (h + 1) + j]).sum();
                    let dz = back * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
                    if dz == 0.0 {
                        continue;
                    }
                    for (gw, xi) in g1[j * n..(j + 1) * n].iter_mut().zip(x) {
                        *gw += dz * xi;
                    }
                    g1[h * n + j] += dz;
                }
            }
        }
    }
}

// rows of `params` are [w_1 .. w_n, b] for each action
fn affine3(params: &[f64], x: &[f64]) -> [f64; ACTION_COUNT] {
    let n = x.len();
    let mut out = [0.0; ACTION_COUNT];
    for (a, o) in out.iter_mut().enumerate() {
        let row = &params[a * (n + 1)..(a + 1) * (n + 1)];
        *o = row[..n].iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + row[n];
    }
    out
}

fn accumulate_affine3(x: &[f64], dlogits: &[f64; ACTION_COUNT], grad: &mut [f64]) {
    let n = x.len();
    for (a, &d) in dlogits.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut grad[a * (n + 1)..(a + 1) * (n + 1)];
        for (g, xi) in row[..n].iter_mut().zip(x) {
            *g += d * xi;
        }
        row[n] += d;
    }
}

pub fn softmax(logits: &[f64; ACTION_COUNT]) -> [f64; ACTION_COUNT] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.map(|l| (l - m).exp());
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    Scripted(Action),
    Softmax(Network),
    /// Softmax over the stacked last `window` observations.
    WindowHistory { net: Network, window: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    kind: PolicyKind,
    feature_mode: FeatureMode,
    memory: VecDeque<[f64; Observation::LEN]>,
    frozen: bool,
}

impl Policy {
    pub fn scripted(action: Action) -> Self {
        Policy {
            kind: PolicyKind::Scripted(action),
            feature_mode: FeatureMode::Observation,
            memory: VecDeque::new(),
            frozen: false,
        }
    }

    pub fn softmax(feature_mode: FeatureMode, hidden: Option<usize>, seed: u64) -> Self {
        let input = Observation::LEN + field_len(feature_mode);
        Policy {
            kind: PolicyKind::Softmax(Network::new(input, hidden, seed)),
            feature_mode,
            memory: VecDeque::new(),
            frozen: false,
        }
    }

    pub fn window_history(window: usize, feature_mode: FeatureMode, hidden: Option<usize>, seed: u64) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("history window must be at least 1"));
        }
        let input = window * Observation::LEN + field_len(feature_mode);
        let mut policy = Policy {
            kind: PolicyKind::WindowHistory {
                net: Network::new(input, hidden, seed),
                window,
            },
            feature_mode,
            memory: VecDeque::new(),
            frozen: false,
        };
        policy.reset_memory();
        Ok(policy)
    }

    pub fn kind(&self) -> &PolicyKind {
        &self.kind
    }

    pub fn feature_mode(&self) -> FeatureMode {
        self.feature_mode
    }

    pub fn wants_fields(&self) -> bool {
        self.feature_mode == FeatureMode::Augmented
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn network(&self) -> Option<&Network> {
        match &self.kind {
            PolicyKind::Scripted(_) => None,
            PolicyKind::Softmax(net) | PolicyKind::WindowHistory { net, .. } => Some(net),
        }
    }

    /// Mutable weights; refused once frozen.
    pub fn network_mut(&mut self) -> Result<&mut Network> {
        if self.frozen {
            return Err(Error::protocol("policy weights are frozen"));
        }
        match &mut self.kind {
            PolicyKind::Scripted(_) => Err(Error::invalid("scripted policies have no weights")),
            PolicyKind::Softmax(net) | PolicyKind::WindowHistory { net, .. } => Ok(net),
        }
    }

    /// Restore the initial memory: a window of zero observations.
    pub fn reset_memory(&mut self) {
        self.memory.clear();
        if let PolicyKind::WindowHistory { window, .. } = self.kind {
            self.memory.extend(std::iter::repeat_n([0.0; Observation::LEN], window));
        }
    }

    /// Network input for `obs`, as if `obs` had just been pushed into memory.
    pub fn features(&self, obs: &Observation, fields: Option<&FieldSummary>) -> Result<Vec<f64>> {
        let extra = match (self.feature_mode, fields) {
            (FeatureMode::Augmented, Some(f)) => f.to_array().to_vec(),
            (FeatureMode::Observation, None) => Vec::new(),
            (FeatureMode::Augmented, None) => {
                return Err(Error::invalid("augmented policy needs a field summary"));
            }
            (FeatureMode::Observation, Some(_)) => {
                return Err(Error::invalid("observation-only policy was given a field summary"));
            }
        };
        let mut x = Vec::new();
        match &self.kind {
            PolicyKind::Scripted(_) | PolicyKind::Softmax(_) => x.extend(obs.to_array()),
            PolicyKind::WindowHistory { .. } => {
                for past in self.memory.iter().skip(1) {
                    x.extend(past);
                }
                x.extend(obs.to_array());
            }
        }
        x.extend(extra);
        Ok(x)
    }

    /// Action probabilities for precomputed features.
    pub fn distribution_from_features(&self, x: &[f64]) -> [f64; ACTION_COUNT] {
        match &self.kind {
            PolicyKind::Scripted(a) => {
                let mut d = [0.0; ACTION_COUNT];
                d[a.index()] = 1.0;
                d
            }
            PolicyKind::Softmax(net) | PolicyKind::WindowHistory { net, .. } => softmax(&net.forward(x).logits),
        }
    }

    pub fn action_distribution(&self, obs: &Observation, fields: Option<&FieldSummary>) -> Result<[f64; ACTION_COUNT]> {
        Ok(self.distribution_from_features(&self.features(obs, fields)?))
    }

    /// Push `obs` into the history window; a no-op for memoryless policies.
    pub fn remember(&mut self, obs: &Observation) {
        if let PolicyKind::WindowHistory { .. } = self.kind {
            self.memory.pop_front();
            self.memory.push_back(obs.to_array());
        }
    }

    /// Sample an action and push `obs` into memory. Memory updates even when frozen.
    pub fn sample_action(&mut self, obs: &Observation, fields: Option<&FieldSummary>, rng: &mut Stream) -> Result<Sampled> {
        let features = self.features(obs, fields)?;
        let distribution = self.distribution_from_features(&features);
        let index = sample_index(&distribution, rng.random());
        self.remember(obs);
        Ok(Sampled {
            action: Action::from_index(index)?,
            distribution,
            features,
        })
    }

    /// Hex SHA-256 of the kind and weight bit patterns.
    pub fn weights_hash(&self) -> String {
        let mut hasher = Sha256::new();
        match &self.kind {
            PolicyKind::Scripted(a) => hasher.update([0u8, a.index() as u8]),
            PolicyKind::Softmax(net) | PolicyKind::WindowHistory { net, .. } => {
                hasher.update([1u8]);
                if let PolicyKind::WindowHistory { window, .. } = self.kind {
                    hasher.update((window as u64).to_le_bytes());
                }
                for w in &net.params {
                    hasher.update(w.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let (kind, action, window, network) = match &self.kind {
            PolicyKind::Scripted(a) => (CheckpointKind::Scripted, Some(*a), None, None),
            PolicyKind::Softmax(net) => (CheckpointKind::Softmax, None, None, Some(net.clone())),
            PolicyKind::WindowHistory { net, window } => {
                (CheckpointKind::WindowHistory, None, Some(*window), Some(net.clone()))
            }
        };
        Checkpoint {
            kind,
            feature_mode: self.feature_mode,
            action,
            window,
            network,
            config_hash: config_hash.to_string(),
        }
    }

    /// Rebuild a frozen policy from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let missing = |what: &str| Error::invalid(format!("checkpoint lacks {what}"));
        let kind = match ckpt.kind {
            CheckpointKind::Scripted => PolicyKind::Scripted(ckpt.action.ok_or_else(|| missing("action"))?),
            CheckpointKind::Softmax => PolicyKind::Softmax(ckpt.network.clone().ok_or_else(|| missing("network"))?),
            CheckpointKind::WindowHistory => PolicyKind::WindowHistory {
                net: ckpt.network.clone().ok_or_else(|| missing("network"))?,
                window: ckpt.window.ok_or_else(|| missing("window"))?,
            },
        };
        if let Some(net) = ckpt.network.as_ref() {
            if net.params.len() != Network::param_count(net.input, net.hidden) {
                return Err(Error::invalid("checkpoint weight count does not match its shape"));
            }
        }
        let mut policy = Policy {
            kind,
            feature_mode: ckpt.feature_mode,
            memory: VecDeque::new(),
            frozen: true,
        };
        policy.reset_memory();
        Ok(policy)
    }
}

fn field_len(mode: FeatureMode) -> usize {
    match mode {
        FeatureMode::Observation => 0,
        FeatureMode::Augmented => FieldSummary::LEN,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub action: Action,
    pub distribution: [f64; ACTION_COUNT],
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Scripted,
    Softmax,
    WindowHistory,
}

/// Serialized frozen policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub feature_mode: FeatureMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<Network>,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}
