//! Exact checks on small explicit instances: the replay no-go result on toy
//! kernels, the odds-contraction and safe-mass bounds, and multi-step compounding.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deformation::{reweight_categorical, DeformMode, DeformationSpec};
use crate::env::sample_index;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::rsd::RngMode;
use crate::stats::ks_two_sample;

/// Row-sum tolerance for kernel tables.
pub const ROW_TOLERANCE: f64 = 1e-12;
/// Slack on the randomized inequality checks, relative to the bound once it exceeds 1.
pub const BOUND_SLACK: f64 = 1e-12;
/// Raise applied to one transition probability by the latent negative control.
pub const LATENT_SHIFT: f64 = 0.2;

/// A transition whose probability rises by [`LATENT_SHIFT`] once the latent counter reaches `onset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentShift {
    pub onset: u64,
    pub state: usize,
    pub action: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMdp {
    /// `kernel[x][a][y]`.
    pub kernel: Vec<Vec<Vec<f64>>>,
    pub harmful: Vec<bool>,
    pub regions: Vec<usize>,
    /// `None` keeps the latent counter inert.
    pub latent: Option<LatentShift>,
}

impl ToyMdp {
    pub fn new(kernel: Vec<Vec<Vec<f64>>>, harmful: Vec<bool>) -> Result<Self> {
        let n = kernel.len();
        if n == 0 || n > 64 {
            return Err(Error::invalid("toy MDPs have 1 to 64 states"));
        }
        if harmful.len() != n {
            return Err(Error::invalid("harmful mask length differs from state count"));
        }
        let actions = kernel[0].len();
        for row in kernel.iter().flatten() {
            if row.len() != n || kernel.iter().any(|k| k.len() != actions) {
                return Err(Error::invalid("ragged kernel table"));
            }
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::invalid("kernel rows must be distributions"));
            }
        }
        Ok(ToyMdp {
            kernel,
            harmful,
            regions: (0..n).collect(),
            latent: None,
        })
    }

    /// Three-state chain with two actions; the last state is harmful.
    pub fn three_state_chain() -> Self {
        let kernel = vec![
            vec![vec![0.6, 0.4, 0.0], vec![0.2, 0.5, 0.3]],
            vec![vec![0.3, 0.4, 0.3], vec![0.1, 0.3, 0.6]],
            vec![vec![0.5, 0.3, 0.2], vec![0.2, 0.2, 0.6]],
        ];
        ToyMdp::new(kernel, vec![false, false, true]).expect("valid chain")
    }

    /// A cycle that ignores the action.
    pub fn deterministic_cycle(states: usize) -> Self {
        let kernel = (0..states)
            .map(|x| {
                let mut row = vec![0.0; states];
                row[(x + 1) % states] = 1.0;
                vec![row.clone(), row]
            })
            .collect();
        let mut harmful = vec![false; states];
        harmful[states - 1] = true;
        ToyMdp::new(kernel, harmful).expect("valid cycle")
    }

    pub fn with_latent(mut self, shift: LatentShift) -> Self {
        self.latent = Some(shift);
        self
    }

    pub fn states(&self) -> usize {
        self.kernel.len()
    }

    pub fn actions(&self) -> usize {
        self.kernel[0].len()
    }

    pub fn is_stationary(&self) -> bool {
        self.latent.is_none()
    }

    /// Transition row at latent counter `xi`.
    pub fn row(&self, x: usize, a: usize, xi: u64) -> Vec<f64> {
        let mut row = self.kernel[x][a].clone();
        if let Some(s) = self.latent {
            if xi >= s.onset && s.state == x && s.action == a {
                let raise = LATENT_SHIFT.min(1.0 - row[s.target]);
                let rest = 1.0 - row[s.target];
                for (y, p) in row.iter_mut().enumerate() {
                    if y != s.target && rest > 0.0 {
                        *p -= raise * *p / rest;
                    }
                }
                row[s.target] += raise;
            }
        }
        row
    }

    /// The kernel with every row reweighted by destination conductance.
    pub fn deformed(&self, trace: &[f64], scar: &[f64], spec: &DeformationSpec) -> Result<ToyMdp> {
        let psi: Vec<f64> = self
            .regions
            .iter()
            .map(|&r| spec.conductance_of(trace[r], scar[r]))
            .collect();
        let kernel = self
            .kernel
            .iter()
            .map(|rows| rows.iter().map(|row| reweight_categorical(row, &psi)).collect())
            .collect::<Result<_>>()?;
        Ok(ToyMdp {
            kernel,
            ..self.clone()
        })
    }
}

/// A frozen table policy `probs[x][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TablePolicy {
    pub probs: Vec<Vec<f64>>,
}

impl TablePolicy {
    pub fn uniform(states: usize, actions: usize) -> Self {
        TablePolicy {
            probs: vec![vec![1.0 / actions as f64; actions]; states],
        }
    }

    pub fn constant(states: usize, actions: usize, action: usize) -> Self {
        let mut row = vec![0.0; actions];
        row[action] = 1.0;
        TablePolicy {
            probs: vec![row; states],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyHorizons {
    pub exposure: usize,
    pub decay: usize,
    pub replay: usize,
}

impl Default for ToyHorizons {
    fn default() -> Self {
        ToyHorizons {
            exposure: 30,
            decay: 10,
            replay: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoGoReport {
    pub episodes: usize,
    /// Episodes whose exposure and replay trajectories hash identically.
    pub identical: usize,
    /// KS test on harmful-visit counts, independent mode only.
    pub ks_p_value: Option<f64>,
    pub passed: bool,
}

/// Check that exposure and replay coincide on a stationary toy MDP.
pub fn check_no_go(
    toy: &ToyMdp,
    policy: &TablePolicy,
    episodes: usize,
    mode: RngMode,
    horizons: ToyHorizons,
    seed: u64,
) -> Result<NoGoReport> {
    if !toy.is_stationary() {
        return Err(Error::HypothesisViolation(
            "the kernel depends on the latent counter, so the observable kernel is not stationary".into(),
        ));
    }
    check_no_go_unchecked(toy, policy, episodes, mode, horizons, seed)
}

/// [`check_no_go`] without the stationarity guard, for negative controls.
pub fn check_no_go_unchecked(
    toy: &ToyMdp,
    policy: &TablePolicy,
    episodes: usize,
    mode: RngMode,
    horizons: ToyHorizons,
    seed: u64,
) -> Result<NoGoReport> {
    if episodes == 0 {
        return Err(Error::invalid("at least one episode"));
    }
    let mut identical = 0;
    let mut exp_visits = Vec::with_capacity(episodes);
    let mut rep_visits = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let ep = rng::derive_index(seed, k as u64);
        let stream_for = |label: &str| rng::stream(rng::derive(ep, label));
        let mut xi = 0u64;
        let exp = toy_phase(toy, policy, 0, horizons.exposure, &mut xi, &mut stream_for("exposure"))?;
        let last = exp.states.last().copied().unwrap_or(0);
        toy_phase(toy, policy, last, horizons.decay, &mut xi, &mut stream_for("decay"))?;
        let replay_label = match mode {
            RngMode::Paired => "exposure",
            RngMode::Independent => "replay",
        };
        let rep = toy_phase(toy, policy, 0, horizons.replay, &mut xi, &mut stream_for(replay_label))?;
        if exp.hash == rep.hash {
            identical += 1;
        }
        exp_visits.push(exp.harmful_visits as f64);
        rep_visits.push(rep.harmful_visits as f64);
    }
    let (ks_p_value, passed) = match mode {
        RngMode::Paired => (None, identical == episodes),
        RngMode::Independent => {
            let p = ks_two_sample(&exp_visits, &rep_visits).map_or(1.0, |t| t.p_value);
            (Some(p), p >= 0.01)
        }
    };
    Ok(NoGoReport {
        episodes,
        identical,
        ks_p_value,
        passed,
    })
}

struct ToyTrajectory {
    states: Vec<usize>,
    harmful_visits: usize,
    hash: String,
}

fn toy_phase(
    toy: &ToyMdp,
    policy: &TablePolicy,
    start: usize,
    steps: usize,
    xi: &mut u64,
    rng: &mut Stream,
) -> Result<ToyTrajectory> {
    let mut x = start;
    let mut hasher = Sha256::new();
    let mut states = Vec::with_capacity(steps);
    let mut harmful_visits = 0;
    for _ in 0..steps {
        let probs = policy
            .probs
            .get(x)
            .ok_or_else(|| Error::invalid("policy table smaller than the state set"))?;
        let a = sample_index(probs, rng.random());
        let y = sample_index(&toy.row(x, a, *xi), rng.random());
        *xi += 1;
        hasher.update((a as u64).to_le_bytes());
        hasher.update((y as u64).to_le_bytes());
        if toy.harmful[y] {
            harmful_visits += 1;
        }
        states.push(y);
        x = y;
    }
    Ok(ToyTrajectory {
        states,
        harmful_visits,
        hash: hex::encode(hasher.finalize()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    /// Largest amount by which the checked side crossed its bound (negative when never).
    pub worst_excess: f64,
    /// Error of the closed-form instance against its exact value.
    pub closed_form_error: f64,
    /// The constructed violation was detected.
    pub negative_control_detected: bool,
    pub passed: bool,
}

/// Scar layout satisfying the gap hypothesis: harmful destinations at or above `h_star`,
/// safe ones at or below `h_zero`.
struct GapInstance {
    nominal: Vec<f64>,
    harmful: Vec<bool>,
    scar: Vec<f64>,
    trace: f64,
    h_zero: f64,
    h_star: f64,
    spec: DeformationSpec,
}

fn random_gap_instance(rng: &mut Stream, min_safe_mass: Option<f64>) -> GapInstance {
    let m = rng.random_range(3..=20);
    // skewed draws push some masses towards 0 or 1
    let skew = if rng.random_bool(0.3) { rng.random_range(2.0..8.0) } else { 1.0 };
    let mut nominal: Vec<f64> = (0..m).map(|_| rng.random_range(1e-6..1.0f64).powf(skew)).collect();
    let mut harmful = vec![false; m];
    let count = rng.random_range(1..m);
    for h in rand::seq::index::sample(rng, m, count) {
        harmful[h] = true;
    }
    if let Some(delta) = min_safe_mass {
        let safe: f64 = nominal.iter().zip(&harmful).filter(|(_, &h)| !h).map(|(p, _)| p).sum();
        let bad: f64 = nominal.iter().sum::<f64>() - safe;
        // rescale so that safe mass is at least delta
        let q_target = rng.random_range(delta..1.0);
        for (p, &h) in nominal.iter_mut().zip(&harmful) {
            *p *= if h { (1.0 - q_target) / bad } else { q_target / safe };
        }
    }
    let total: f64 = nominal.iter().sum();
    nominal.iter_mut().for_each(|p| *p /= total);
    let h_zero = rng.random_range(0.0..1.0);
    let h_star = h_zero + rng.random_range(0.1..3.0);
    // a third of the trials sit exactly on the hypothesis boundary
    let tight = rng.random_bool(1.0 / 3.0);
    let scar = harmful
        .iter()
        .map(|&h| match (h, tight) {
            (true, true) => h_star,
            (false, true) => h_zero,
            (true, false) => h_star + rng.random_range(0.0..1.0),
            (false, false) => rng.random_range(0.0..=h_zero),
        })
        .collect();
    let spec = DeformationSpec {
        w_g: rng.random_range(0.0..2.0),
        w_h: rng.random_range(0.5..4.0),
        psi_min: 1e-300,
        mode: DeformMode::Full,
    };
    GapInstance {
        nominal,
        harmful,
        scar,
        trace: rng.random_range(0.0..1.0),
        h_zero,
        h_star,
        spec,
    }
}

/// Harmful and safe mass under the reweighted and nominal kernels: `(p, q, p0, q0)`.
fn split_masses(inst: &GapInstance) -> Result<(f64, f64, f64, f64)> {
    let psi: Vec<f64> = inst.scar.iter().map(|&h| inst.spec.conductance_of(inst.trace, h)).collect();
    let deformed = reweight_categorical(&inst.nominal, &psi)?;
    let sum = |v: &[f64], want: bool| -> f64 {
        v.iter().zip(&inst.harmful).filter(|(_, &h)| h == want).map(|(p, _)| p).sum()
    };
    Ok((
        sum(&deformed, true),
        sum(&deformed, false),
        sum(&inst.nominal, true),
        sum(&inst.nominal, false),
    ))
}

fn within(value: f64, bound: f64) -> bool {
    value <= bound + BOUND_SLACK * bound.abs().max(1.0)
}

/// Randomized check that reweighting contracts harmful-entry odds by the scar gap.
pub fn check_odds_contraction(trials: usize, seed: u64) -> Result<BoundReport> {
    if trials == 0 {
        return Err(Error::invalid("at least one trial"));
    }
    let mut rng = rng::stream(rng::derive(seed, "odds-contraction"));
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let inst = random_gap_instance(&mut rng, None);
        let (p, q, p0, q0) = split_masses(&inst)?;
        let bound = (-inst.spec.w_h * (inst.h_star - inst.h_zero)).exp() * p0 / q0;
        let odds = p / q;
        worst = worst.max(odds - bound);
        if !within(odds, bound) {
            violations += 1;
        }
    }

    let closed_form_error = (two_destination_odds(2.0, 1.0, 0.0)? - (-2.0f64).exp()).abs();

    // harmful scar below the safe one breaks the hypothesis
    let control = GapInstance {
        nominal: vec![0.5, 0.5],
        harmful: vec![true, false],
        scar: vec![0.0, 1.0],
        trace: 0.0,
        h_zero: 0.0,
        h_star: 1.0,
        spec: DeformationSpec {
            w_g: 0.0,
            psi_min: 1e-300,
            ..DeformationSpec::default()
        },
    };
    let (p, q, p0, q0) = split_masses(&control)?;
    let detected = !within(p / q, (-control.spec.w_h).exp() * p0 / q0);

    Ok(BoundReport {
        name: "odds_contraction".into(),
        trials,
        violations,
        worst_excess: worst,
        closed_form_error,
        negative_control_detected: detected,
        passed: violations == 0 && closed_form_error <= 1e-12 && detected,
    })
}

/// Odds after reweighting two equally likely destinations, harmful at `h_star`, safe at `h_zero`.
pub fn two_destination_odds(w_h: f64, h_star: f64, h_zero: f64) -> Result<f64> {
    let spec = DeformationSpec {
        w_g: 0.0,
        w_h,
        psi_min: 1e-300,
        mode: DeformMode::Full,
    };
    let psi = [spec.conductance_of(0.0, h_star), spec.conductance_of(0.0, h_zero)];
    let d = reweight_categorical(&[0.5, 0.5], &psi)?;
    Ok(d[0] / d[1])
}

/// Lower bound on safe mass given nominal safe mass at least `delta`.
pub fn safe_mass_bound(delta: f64, w_h: f64, h_zero: f64, h_star: f64) -> f64 {
    let safe = delta * (-w_h * h_zero).exp();
    safe / (safe + (1.0 - delta) * (-w_h * h_star).exp())
}

/// Randomized check of the safe-mass lower bound and its growth with the scar gap.
pub fn check_safe_mass(trials: usize, seed: u64) -> Result<BoundReport> {
    if trials == 0 {
        return Err(Error::invalid("at least one trial"));
    }
    let mut rng = rng::stream(rng::derive(seed, "safe-mass"));
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let delta = rng.random_range(0.05..0.95);
        let inst = random_gap_instance(&mut rng, Some(delta));
        let (_, q, _, q0) = split_masses(&inst)?;
        if q0 < delta - 1e-12 {
            return Err(Error::invalid("instance generator broke the safe-mass floor"));
        }
        let bound = safe_mass_bound(delta, inst.spec.w_h, inst.h_zero, inst.h_star);
        let further = safe_mass_bound(delta, inst.spec.w_h, inst.h_zero, inst.h_star + 5.0);
        worst = worst.max(bound - q);
        if !within(bound, q) || !(further > bound && further <= 1.0) {
            violations += 1;
        }
    }

    let closed_form_error = (safe_mass_bound(0.5, 2.0, 0.0, 1.0) - 0.5 / (0.5 + 0.5 * (-2.0f64).exp())).abs();

    // nominal safe mass far below the claimed floor
    let control = GapInstance {
        nominal: vec![0.9, 0.1],
        harmful: vec![true, false],
        scar: vec![0.1, 0.0],
        trace: 0.0,
        h_zero: 0.0,
        h_star: 0.1,
        spec: DeformationSpec {
            w_g: 0.0,
            psi_min: 1e-300,
            ..DeformationSpec::default()
        },
    };
    let (_, q, _, _) = split_masses(&control)?;
    let detected = !within(safe_mass_bound(0.9, 2.0, 0.0, 0.1), q);

    Ok(BoundReport {
        name: "safe_mass".into(),
        trials,
        violations,
        worst_excess: worst,
        closed_form_error,
        negative_control_detected: detected,
        passed: violations == 0 && closed_form_error <= 1e-12 && detected,
    })
}

/// Chain of `k` harmful entries: state `i` moves to `i + 1` with probability `advance[i]`
/// and otherwise falls into an absorbing safe sink. State `k` is harmful and absorbing.
pub fn harmful_chain(advance: &[f64]) -> Result<ToyMdp> {
    let k = advance.len();
    let n = k + 2;
    let sink = k + 1;
    let mut kernel = Vec::with_capacity(n);
    for x in 0..n {
        let mut row = vec![0.0; n];
        if x < k {
            row[x + 1] = advance[x];
            row[sink] = 1.0 - advance[x];
        } else {
            row[x] = 1.0;
        }
        kernel.push(vec![row]);
    }
    let mut harmful = vec![false; n];
    harmful[k] = true;
    ToyMdp::new(kernel, harmful)
}

/// Probability of sitting in a harmful state after `steps` steps from state 0, by kernel products.
pub fn reach_probability(toy: &ToyMdp, steps: usize) -> f64 {
    let n = toy.states();
    let mut dist = vec![0.0; n];
    dist[0] = 1.0;
    for _ in 0..steps {
        let mut next = vec![0.0; n];
        for (x, &mass) in dist.iter().enumerate() {
            for (y, p) in toy.kernel[x][0].iter().enumerate() {
                next[y] += mass * p;
            }
        }
        dist = next;
    }
    dist.iter().zip(&toy.harmful).filter(|(_, &h)| h).map(|(p, _)| p).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundingReport {
    pub chains: usize,
    pub violations: usize,
    pub negative_control_detected: bool,
    pub passed: bool,
}

/// Deformed reach of a `k`-step harmful chain against `beta^k` times the nominal reach,
/// with `beta` the per-step probability bound implied by the odds contraction.
pub fn check_compounding(max_len: usize, per_len: usize, seed: u64) -> Result<CompoundingReport> {
    let mut rng = rng::stream(rng::derive(seed, "compounding"));
    let mut violations = 0;
    let mut chains = 0;
    for k in 1..=max_len {
        for _ in 0..per_len {
            let advance: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..0.95)).collect();
            let w_h = rng.random_range(0.5..4.0);
            let h_zero = rng.random_range(0.0..1.0);
            let h_star = h_zero + rng.random_range(0.1..3.0);
            let (deformed_reach, bound) = chain_reach(&advance, w_h, h_zero, h_star, false)?;
            chains += 1;
            if !within(deformed_reach, bound) {
                violations += 1;
            }
        }
    }
    let (reach, bound) = chain_reach(&[0.5, 0.5, 0.5], 2.0, 0.0, 1.0, true)?;
    let detected = !within(reach, bound);
    Ok(CompoundingReport {
        chains,
        violations,
        negative_control_detected: detected,
        passed: violations == 0 && detected,
    })
}

/// `(deformed reach, beta^k * nominal reach)` for one chain; `swap` puts the low scar on the
/// harmful states, breaking the gap hypothesis.
fn chain_reach(advance: &[f64], w_h: f64, h_zero: f64, h_star: f64, swap: bool) -> Result<(f64, f64)> {
    let k = advance.len();
    let toy = harmful_chain(advance)?;
    let spec = DeformationSpec {
        w_g: 0.0,
        w_h,
        psi_min: 1e-300,
        mode: DeformMode::Full,
    };
    // each advance enters a harmful-labelled region; the sink is safe
    let (hi, lo) = if swap { (h_zero, h_star) } else { (h_star, h_zero) };
    let mut scar = vec![hi; k + 2];
    scar[0] = lo;
    scar[k + 1] = lo;
    let deformed = toy.deformed(&vec![0.0; k + 2], &scar, &spec)?;
    let c = (-w_h * (h_star - h_zero)).exp();
    let beta = advance.iter().map(|&p| c / (c * p + (1.0 - p))).fold(0.0, f64::max);
    let nominal = reach_probability(&toy, k);
    Ok((reach_probability(&deformed, k), beta.powi(k as i32) * nominal))
}

/// Odds ratio and bound for a two-destination instance whose clip is active; reported only.
pub fn clipping_relaxation(psi_min: f64) -> Result<(f64, f64)> {
    let spec = DeformationSpec {
        w_g: 0.0,
        w_h: 2.0,
        psi_min,
        mode: DeformMode::Full,
    };
    let psi = [spec.conductance_of(0.0, 3.0), spec.conductance_of(0.0, 0.0)];
    let d = reweight_categorical(&[0.5, 0.5], &psi)?;
    Ok((d[0] / d[1], (-2.0f64 * 3.0).exp()))
}

/// Every check with its default sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub no_go_paired: NoGoReport,
    pub no_go_independent: NoGoReport,
    pub no_go_negative_control: NoGoReport,
    pub odds: BoundReport,
    pub safe_mass: BoundReport,
    pub compounding: CompoundingReport,
}

impl VerificationSummary {
    pub fn passed(&self) -> bool {
        self.no_go_paired.passed
            && self.no_go_independent.passed
            && !self.no_go_negative_control.passed
            && self.odds.passed
            && self.safe_mass.passed
            && self.compounding.passed
    }
}

pub fn run_all(trials: usize, seed: u64) -> Result<VerificationSummary> {
    let chain = ToyMdp::three_state_chain();
    let uniform = TablePolicy::uniform(3, 2);
    let horizons = ToyHorizons::default();
    let shifted = chain.clone().with_latent(LatentShift {
        onset: horizons.exposure as u64,
        state: 0,
        action: 0,
        target: 2,
    });
    Ok(VerificationSummary {
        no_go_paired: check_no_go(&chain, &uniform, 200, RngMode::Paired, horizons, seed)?,
        no_go_independent: check_no_go(&chain, &uniform, 200, RngMode::Independent, horizons, seed)?,
        no_go_negative_control: check_no_go_unchecked(&shifted, &uniform, 200, RngMode::Paired, horizons, seed)?,
        odds: check_odds_contraction(trials, seed)?,
        safe_mass: check_safe_mass(trials, seed)?,
        compounding: check_compounding(5, 200, seed)?,
    })
}
