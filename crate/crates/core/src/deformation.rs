//! Conductance-based transition reweighting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::HarmFields;

/// Tolerance on the total mass of an incoming categorical.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Where the reweighting is applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DeformMode {
    Full,
    /// Only the `k` most probable destinations are reweighted.
    TopK { k: usize },
    /// Only destinations whose region is listed are reweighted.
    Local { regions: Vec<usize> },
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationSpec {
    pub w_g: f64,
    pub w_h: f64,
    pub psi_min: f64,
    pub mode: DeformMode,
}

impl Default for DeformationSpec {
    fn default() -> Self {
        DeformationSpec {
            w_g: 1.0,
            w_h: 2.0,
            psi_min: 0.001,
            mode: DeformMode::Full,
        }
    }
}

impl DeformationSpec {
    pub fn off() -> Self {
        DeformationSpec {
            mode: DeformMode::Off,
            ..Self::default()
        }
    }

    pub fn with_mode(&self, mode: DeformMode) -> Self {
        DeformationSpec {
            mode,
            ..self.clone()
        }
    }

    pub fn is_off(&self) -> bool {
        self.mode == DeformMode::Off
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_g >= 0.0 && self.w_g.is_finite()) {
            return Err(Error::config("deformation.w_g", "must be nonnegative"));
        }
        if !(self.w_h >= 0.0 && self.w_h.is_finite()) {
            return Err(Error::config("deformation.w_h", "must be nonnegative"));
        }
        if !(self.psi_min > 0.0 && self.psi_min <= 1.0) {
            return Err(Error::config("deformation.psi_min", "must lie in (0, 1]"));
        }
        match &self.mode {
            DeformMode::TopK { k } if *k == 0 => {
                Err(Error::config("deformation.mode.k", "must be at least 1"))
            }
            DeformMode::Local { regions } if regions.is_empty() => {
                Err(Error::config("deformation.mode.regions", "must be nonempty"))
            }
            _ => Ok(()),
        }
    }

    /// Conductance from raw trace and scar values, ignoring the mode.
    pub fn conductance_of(&self, trace: f64, scar: f64) -> f64 {
        (-self.w_g * trace - self.w_h * scar)
            .exp()
            .clamp(self.psi_min, 1.0)
    }
}

/// Destination conductance of `region`; 1 when the mode is off.
pub fn conductance(region: usize, fields: &HarmFields, spec: &DeformationSpec) -> f64 {
    if spec.is_off() {
        return 1.0;
    }
    spec.conductance_of(fields.trace()[region], fields.scar()[region])
}

/// Exact reweighting `P(y) = nominal(y) psi(y) / Z`.
pub fn reweight_categorical(nominal: &[f64], psi: &[f64]) -> Result<Vec<f64>> {
    check_categorical(nominal)?;
    if psi.len() != nominal.len() {
        return Err(Error::invalid("conductance and nominal lengths differ"));
    }
    if let Some(x) = psi.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Error::invalid(format!("conductance {x} outside (0, 1]")));
    }
    let weights: Vec<f64> = nominal.iter().zip(psi).map(|(p, s)| p * s).collect();
    let z: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / z).collect())
}

fn check_categorical(nominal: &[f64]) -> Result<()> {
    if nominal.is_empty() {
        return Err(Error::invalid("empty categorical"));
    }
    if nominal.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::invalid("categorical entries must be finite and nonnegative"));
    }
    let total: f64 = nominal.iter().sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::invalid(format!("categorical sums to {total}, not 1")));
    }
    Ok(())
}

/// Factorized gate on a single Bernoulli edge event.
pub fn gate_edge_prob(p: f64, psi: f64) -> f64 {
    p * psi
}

/// Reweight `nominal` according to the deployment mode.
///
/// `destinations[i]` is the region of outcome `i`; it is only consulted in local mode.
pub fn apply_mode(
    nominal: &[f64],
    psi: &[f64],
    destinations: &[usize],
    spec: &DeformationSpec,
) -> Result<Vec<f64>> {
    match &spec.mode {
        DeformMode::Off => {
            check_categorical(nominal)?;
            Ok(nominal.to_vec())
        }
        DeformMode::Full => reweight_categorical(nominal, psi),
        DeformMode::TopK { k } => {
            if psi.len() != nominal.len() {
                return Err(Error::invalid("conductance and nominal lengths differ"));
            }
            let mut masked = vec![1.0; psi.len()];
            for i in top_k_indices(nominal, *k) {
                masked[i] = psi[i];
            }
            reweight_categorical(nominal, &masked)
        }
        DeformMode::Local { regions } => {
            if destinations.len() != nominal.len() {
                return Err(Error::invalid("destination regions and nominal lengths differ"));
            }
            let masked: Vec<f64> = psi
                .iter()
                .zip(destinations)
                .map(|(&s, r)| if regions.contains(r) { s } else { 1.0 })
                .collect();
            reweight_categorical(nominal, &masked)
        }
    }
}

/// Indices of the `k` largest weights, ties broken by ascending index.
pub fn top_k_indices(weights: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::FieldParams;

    #[test]
    fn conductance_examples() {
        let spec = DeformationSpec {
            w_g: 1.0,
            w_h: 2.0,
            psi_min: 0.01,
            mode: DeformMode::Full,
        };
        let f = HarmFields::from_values(FieldParams::default(), vec![0.0, 0.0, 0.0], vec![0.0, 1.0, 10.0])
            .unwrap();
        assert_eq!(conductance(0, &f, &spec), 1.0);
        assert!((conductance(1, &f, &spec) - (-2.0f64).exp()).abs() < 1e-15);
        assert_eq!(conductance(2, &f, &spec), 0.01);
        assert_eq!(conductance(2, &f, &DeformationSpec::off()), 1.0);
    }

    #[test]
    fn reweight_examples() {
        let out = reweight_categorical(&[0.5, 0.5], &[1.0, 1.0]).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
        let e = (-1.0f64).exp();
        let out = reweight_categorical(&[0.5, 0.5], &[1.0, e]).unwrap();
        assert!((out[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((out[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((out[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn reweight_rejects_bad_input() {
        assert!(reweight_categorical(&[0.5, 0.6], &[1.0, 1.0]).is_err());
        assert!(reweight_categorical(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        assert!(reweight_categorical(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn gate_examples() {
        assert_eq!(gate_edge_prob(0.4, 1.0), 0.4);
        assert!((gate_edge_prob(0.4, 0.25) - 0.1).abs() < 1e-15);
        assert!(gate_edge_prob(0.5, 0.01) > 0.0);
    }

    #[test]
    fn mode_degeneracies() {
        let nominal = [0.1, 0.2, 0.3, 0.4];
        let psi = [0.5, 1.0, 0.2, 0.9];
        let regions = [0, 1, 2, 3];
        let base = DeformationSpec::default();
        let full = apply_mode(&nominal, &psi, &regions, &base).unwrap();
        let off = apply_mode(&nominal, &psi, &regions, &base.with_mode(DeformMode::Off)).unwrap();
        assert_eq!(off, nominal.to_vec());
        let topk = apply_mode(&nominal, &psi, &regions, &base.with_mode(DeformMode::TopK { k: 4 })).unwrap();
        assert_eq!(topk, full);
        let local = apply_mode(
            &nominal,
            &psi,
            &regions,
            &base.with_mode(DeformMode::Local {
                regions: vec![0, 1, 2, 3],
            }),
        )
        .unwrap();
        assert_eq!(local, full);
    }

    #[test]
    fn top_k_ties_by_index() {
        assert_eq!(top_k_indices(&[0.25, 0.25, 0.5, 0.0], 2), vec![2, 0]);
        assert_eq!(top_k_indices(&[0.2, 0.2, 0.2], 2), vec![0, 1]);
    }

    #[test]
    fn top_k_leaves_the_rest_unweighted() {
        let base = DeformationSpec::default();
        let out = apply_mode(&[0.5, 0.3, 0.2], &[0.5, 0.5, 0.5], &[0, 1, 2], &base.with_mode(DeformMode::TopK { k: 1 }))
            .unwrap();
        let z = 0.25 + 0.3 + 0.2;
        assert!((out[0] - 0.25 / z).abs() < 1e-15);
        assert!((out[2] - 0.2 / z).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        let mut s = DeformationSpec::default();
        assert!(s.validate().is_ok());
        s.psi_min = 0.0;
        assert!(s.validate().is_err());
        let s = DeformationSpec::default().with_mode(DeformMode::TopK { k: 0 });
        assert!(s.validate().is_err());
        let s = DeformationSpec::default().with_mode(DeformMode::Local { regions: vec![] });
        assert!(s.validate().is_err());
    }
}
