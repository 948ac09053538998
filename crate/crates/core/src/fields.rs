//! Persistent environment memory: a decaying harm trace and a scar field.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Update constants of the trace and scar fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldParams {
    /// Per-step trace decay rate.
    pub decay: f64,
    /// Trace injection gain per unit of harm.
    pub gain: f64,
    pub scar_rate: f64,
    pub scar_threshold: f64,
    /// Scar retention per step; 1 makes scars irreversible.
    pub retention: f64,
    /// Harm delay in steps.
    pub delay: usize,
}

impl Default for FieldParams {
    fn default() -> Self {
        FieldParams {
            decay: 0.1,
            gain: 0.5,
            scar_rate: 0.05,
            scar_threshold: 0.3,
            retention: 1.0,
            delay: 50,
        }
    }
}

impl FieldParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("fields.{field}"), reason));
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay", "must lie in (0, 1)");
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return bad("gain", "must be positive");
        }
        if !(self.scar_rate > 0.0 && self.scar_rate.is_finite()) {
            return bad("scar_rate", "must be positive");
        }
        if !(self.scar_threshold > 0.0 && self.scar_threshold.is_finite()) {
            return bad("scar_threshold", "must be positive");
        }
        if !(0.95..=1.0).contains(&self.retention) {
            return bad("retention", "must lie in [0.95, 1]");
        }
        Ok(())
    }
}

/// Trace `G` and scar `H`, one entry per region.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmFields {
    params: FieldParams,
    trace: Vec<f64>,
    scar: Vec<f64>,
}

impl HarmFields {
    pub fn new(regions: usize, params: FieldParams) -> Self {
        HarmFields {
            params,
            trace: vec![0.0; regions],
            scar: vec![0.0; regions],
        }
    }

    /// Fields with explicit contents; entries must be nonnegative and finite.
    pub fn from_values(params: FieldParams, trace: Vec<f64>, scar: Vec<f64>) -> Result<Self> {
        if trace.len() != scar.len() {
            return Err(Error::invalid("trace and scar lengths differ"));
        }
        if trace.iter().chain(&scar).any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid("field entries must be finite and nonnegative"));
        }
        Ok(HarmFields { params, trace, scar })
    }

    pub fn params(&self) -> &FieldParams {
        &self.params
    }

    pub fn regions(&self) -> usize {
        self.trace.len()
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn scar(&self) -> &[f64] {
        &self.scar
    }

    pub fn trace_sum(&self) -> f64 {
        self.trace.iter().sum()
    }

    pub fn scar_sum(&self) -> f64 {
        self.scar.iter().sum()
    }

    pub fn trace_max(&self) -> f64 {
        self.trace.iter().copied().fold(0.0, f64::max)
    }

    pub fn scar_max(&self) -> f64 {
        self.scar.iter().copied().fold(0.0, f64::max)
    }

    pub fn reset(&mut self) {
        self.trace.iter_mut().for_each(|x| *x = 0.0);
        self.scar.iter_mut().for_each(|x| *x = 0.0);
    }

    /// Decay the trace and spread `gain * harm` uniformly over `causal`.
    ///
    /// Returns the injected trace mass. Positive harm needs a nonempty causal set.
    pub fn attribute_harm(&mut self, harm: f64, causal: &[usize]) -> Result<f64> {
        if !(0.0..=1.0).contains(&harm) {
            return Err(Error::invalid(format!("harm must lie in [0, 1], got {harm}")));
        }
        if harm > 0.0 && causal.is_empty() {
            return Err(Error::invalid("positive harm with an empty causal set"));
        }
        if let Some(&r) = causal.iter().find(|&&r| r >= self.trace.len()) {
            return Err(Error::invalid(format!("causal region {r} out of range")));
        }
        let keep = 1.0 - self.params.decay;
        for g in &mut self.trace {
            *g *= keep;
        }
        if causal.is_empty() || harm == 0.0 {
            return Ok(0.0);
        }
        let share = self.params.gain * harm / causal.len() as f64;
        for &r in causal {
            self.trace[r] += share;
        }
        Ok(share * causal.len() as f64)
    }

    /// Apply `H <- retention * H + scar_rate * max(0, G - threshold)`.
    ///
    /// Returns the injected scar mass (the threshold-exceedance part only).
    pub fn update_scar(&mut self) -> f64 {
        let FieldParams {
            scar_rate,
            scar_threshold,
            retention,
            ..
        } = self.params;
        let mut injected = 0.0;
        for (h, &g) in self.scar.iter_mut().zip(&self.trace) {
            let inc = scar_rate * (g - scar_threshold).max(0.0);
            *h = retention * *h + inc;
            injected += inc;
        }
        injected
    }

    /// Hex SHA-256 over the bit patterns of both fields.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for x in self.trace.iter().chain(&self.scar) {
            hasher.update(x.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn snapshot(&self, step: usize) -> FieldSnapshot {
        let mut ranked: Vec<(usize, f64)> = self.scar.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(10);
        FieldSnapshot {
            step,
            trace_sum: self.trace_sum(),
            scar_sum: self.scar_sum(),
            top_scar: ranked,
            hash: self.hash(),
        }
    }
}

/// Summary of the fields at one step, as written to episode records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSnapshot {
    pub step: usize,
    pub trace_sum: f64,
    pub scar_sum: f64,
    /// Up to ten `(region, scar)` pairs, largest scar first.
    pub top_scar: Vec<(usize, f64)>,
    pub hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fields(trace: Vec<f64>, scar: Vec<f64>, retention: f64) -> HarmFields {
        let params = FieldParams {
            retention,
            ..FieldParams::default()
        };
        HarmFields::from_values(params, trace, scar).unwrap()
    }

    #[test]
    fn zero_harm_is_pure_decay() {
        let mut f = fields(vec![0.5, 1.0, 0.0], vec![0.0; 3], 1.0);
        assert_eq!(f.attribute_harm(0.0, &[]).unwrap(), 0.0);
        assert_eq!(f.trace(), &[0.5 * 0.9, 1.0 * 0.9, 0.0]);
    }

    #[test]
    fn single_region_injection() {
        let mut f = fields(vec![0.5, 0.0], vec![0.0; 2], 1.0);
        f.attribute_harm(1.0, &[0]).unwrap();
        assert!((f.trace()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn uniform_split_over_causal_set() {
        let mut f = fields(vec![0.0; 4], vec![0.0; 4], 1.0);
        let mass = f.attribute_harm(1.0, &[1, 3]).unwrap();
        assert_eq!(f.trace(), &[0.0, 0.25, 0.0, 0.25]);
        assert_eq!(mass, 0.5);
    }

    #[test]
    fn positive_harm_needs_causes() {
        let mut f = fields(vec![0.0; 2], vec![0.0; 2], 1.0);
        assert!(f.attribute_harm(0.3, &[]).is_err());
        assert!(f.attribute_harm(1.5, &[0]).is_err());
        assert!(f.attribute_harm(0.3, &[7]).is_err());
    }

    #[test]
    fn scar_examples() {
        let mut f = fields(vec![0.2], vec![0.0], 1.0);
        assert_eq!(f.update_scar(), 0.0);
        assert_eq!(f.scar(), &[0.0]);

        let mut f = fields(vec![0.4], vec![0.0], 1.0);
        f.update_scar();
        assert!((f.scar()[0] - 0.005).abs() < 1e-15);

        let mut f = fields(vec![0.0], vec![1.0], 0.99);
        f.update_scar();
        assert_eq!(f.scar(), &[0.99]);
    }

    #[test]
    fn hash_tracks_contents() {
        let a = fields(vec![0.1, 0.2], vec![0.0, 0.3], 1.0);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.update_scar();
        b.attribute_harm(0.0, &[]).unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn snapshot_ranks_scars() {
        let f = fields(vec![0.0; 3], vec![0.1, 0.5, 0.5], 1.0);
        let s = f.snapshot(12);
        assert_eq!(s.top_scar, vec![(1, 0.5), (2, 0.5), (0, 0.1)]);
        assert_eq!(s.step, 12);
    }
}
