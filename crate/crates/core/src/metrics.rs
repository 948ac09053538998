//! Replay and mechanism metrics computed from episode records.

use serde::{Deserialize, Serialize};

use crate::env::ACTION_COUNT;
use crate::error::{Error, Result};
use crate::graph::DiffusionGraph;
use crate::rsd::{PhaseSeries, RsdEpisodeRecord};
use crate::stats::{mean, std_dev};

/// Guard added to every ratio denominator.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayRatios {
    pub rag: f64,
    pub auc_r: f64,
    pub sm_r: f64,
}

/// Peak-reach, reach-mass and sensitive-mass ratios of replay to exposure.
pub fn replay_ratios(record: &RsdEpisodeRecord) -> ReplayRatios {
    let (exp, rep) = (&record.exposure, &record.replay);
    let peak = |s: &[u32]| f64::from(s.iter().copied().max().unwrap_or(0));
    let total = |s: &[u32]| s.iter().map(|&x| f64::from(x)).sum::<f64>();
    ReplayRatios {
        rag: peak(&rep.reach) / (peak(&exp.reach) + EPS),
        auc_r: total(&rep.reach) / (total(&exp.reach) + EPS),
        sm_r: total(&rep.sensitive) / (total(&exp.sensitive) + EPS),
    }
}

pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut g = 0.0;
    for &r in rewards.iter().rev() {
        g = r + gamma * g;
    }
    g
}

/// Discounted replay return over the reference.
pub fn replay_return(record: &RsdEpisodeRecord, reference: Option<f64>, gamma: f64) -> Result<f64> {
    let reference = reference.ok_or_else(|| Error::protocol("replay return needs a reference value"))?;
    if !(reference > 0.0 && reference.is_finite()) {
        return Err(Error::protocol(format!("replay return reference must be positive, got {reference}")));
    }
    Ok(discounted_return(&record.replay.reward, gamma) / reference)
}

pub fn total_variation(a: &[f64; ACTION_COUNT], b: &[f64; ACTION_COUNT]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Mean total-variation distance between exposure and replay action
/// distributions, paired by phase-local step index.
pub fn action_shift_distance(record: &RsdEpisodeRecord) -> f64 {
    let pairs = record
        .exposure
        .distributions
        .iter()
        .zip(&record.replay.distributions);
    let n = record.exposure.distributions.len().min(record.replay.distributions.len());
    if n == 0 {
        return 0.0;
    }
    (pairs.map(|(a, b)| total_variation(a, b)).sum::<f64>() / n as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddsSeries {
    pub ratios: Vec<f64>,
    /// Steps with undefined nominal odds.
    pub skipped: usize,
}

impl OddsSeries {
    pub fn mean(&self) -> Option<f64> {
        (!self.ratios.is_empty()).then(|| mean(&self.ratios))
    }
}

/// Gated over nominal harmful-entry odds for each step of a phase.
pub fn odds_ratio_series(phase: &PhaseSeries) -> OddsSeries {
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for o in &phase.odds {
        if o.p0 <= 0.0 || o.q0 <= 0.0 || o.q <= 0.0 {
            skipped += 1;
            continue;
        }
        ratios.push((o.p / o.q) / (o.p0 / o.q0));
    }
    OddsSeries { ratios, skipped }
}

/// Farthest hop from the stimulus seeds among the given active nodes.
pub fn containment_radius(activated: &[usize], seeds: &[usize], graph: &DiffusionGraph) -> u32 {
    let hops = graph.hop_distances_from(seeds);
    activated.iter().filter_map(|&v| hops[v]).max().unwrap_or(0)
}

/// All metrics of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub rag: f64,
    pub auc_r: f64,
    pub sm_r: f64,
    pub replay_ret: f64,
    pub asd: f64,
    /// Mean replay-phase odds ratio; `None` when every step was skipped.
    pub odds_ratio: Option<f64>,
    pub odds_skipped: usize,
    pub rc_exp: u32,
    pub rc_rep: u32,
}

pub fn episode_metrics(
    record: &RsdEpisodeRecord,
    graph: &DiffusionGraph,
    reference: Option<f64>,
    gamma: f64,
) -> Result<EpisodeMetrics> {
    let ratios = replay_ratios(record);
    let odds = odds_ratio_series(&record.replay);
    Ok(EpisodeMetrics {
        rag: ratios.rag,
        auc_r: ratios.auc_r,
        sm_r: ratios.sm_r,
        replay_ret: replay_return(record, reference, gamma)?,
        asd: action_shift_distance(record),
        odds_ratio: odds.mean(),
        odds_skipped: odds.skipped,
        rc_exp: containment_radius(&record.exposure.activated, &record.stimulus_seeds, graph),
        rc_rep: containment_radius(&record.replay.activated, &record.stimulus_seeds, graph),
    })
}

/// Mean and spread over a declared set of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub episodes: usize,
    pub rag_mean: f64,
    pub rag_std: f64,
    pub auc_r_mean: f64,
    pub auc_r_std: f64,
    pub sm_r_mean: f64,
    pub sm_r_std: f64,
    pub replay_ret_mean: f64,
    pub asd_mean: f64,
    /// NaN when no episode had a defined odds ratio.
    pub odds_ratio_mean: f64,
    pub rc_exp_mean: f64,
    pub rc_rep_mean: f64,
}

pub fn summarize(metrics: &[EpisodeMetrics]) -> MetricsSummary {
    let col = |f: fn(&EpisodeMetrics) -> f64| metrics.iter().map(f).collect::<Vec<f64>>();
    let rag = col(|m| m.rag);
    let auc = col(|m| m.auc_r);
    let sm = col(|m| m.sm_r);
    let odds: Vec<f64> = metrics.iter().filter_map(|m| m.odds_ratio).collect();
    MetricsSummary {
        episodes: metrics.len(),
        rag_mean: mean(&rag),
        rag_std: std_dev(&rag),
        auc_r_mean: mean(&auc),
        auc_r_std: std_dev(&auc),
        sm_r_mean: mean(&sm),
        sm_r_std: std_dev(&sm),
        replay_ret_mean: mean(&col(|m| m.replay_ret)),
        asd_mean: mean(&col(|m| m.asd)),
        odds_ratio_mean: if odds.is_empty() { f64::NAN } else { mean(&odds) },
        rc_exp_mean: mean(&col(|m| f64::from(m.rc_exp))),
        rc_rep_mean: mean(&col(|m| f64::from(m.rc_rep))),
    }
}
