use std::fmt;

use serde::{Deserialize, Serialize};

use crate::deformation::DeformMode;
use crate::error::{Error, Result};
use crate::graph::DiffusionGraph;
use crate::policy::FeatureMode;
use crate::rsd::ReplayDeformation;
use crate::trainer::CostWiring;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Ge,
    Ss,
    Dr,
    Shield,
    ShieldUm,
    PmSt,
    PmWindow,
    Rapo,
    OffAtRep,
    RapoTopK,
    RapoLocal,
}

impl MethodId {
    pub const ALL: [MethodId; 11] = [
        MethodId::Ge,
        MethodId::Ss,
        MethodId::Dr,
        MethodId::Shield,
        MethodId::ShieldUm,
        MethodId::PmSt,
        MethodId::PmWindow,
        MethodId::Rapo,
        MethodId::OffAtRep,
        MethodId::RapoTopK,
        MethodId::RapoLocal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Ge => "ge",
            MethodId::Ss => "ss",
            MethodId::Dr => "dr",
            MethodId::Shield => "shield",
            MethodId::ShieldUm => "shield_um",
            MethodId::PmSt => "pm_st",
            MethodId::PmWindow => "pm_window",
            MethodId::Rapo => "rapo",
            MethodId::OffAtRep => "off_at_rep",
            MethodId::RapoTopK => "rapo_topk",
            MethodId::RapoLocal => "rapo_local",
        }
    }

    pub fn parse(text: &str) -> Result<MethodId> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == text)
            .ok_or_else(|| Error::invalid(format!("unknown method id `{text}`")))
    }

    /// Method whose trained checkpoint this one evaluates, if not its own.
    pub fn checkpoint_source(self) -> MethodId {
        match self {
            MethodId::Shield | MethodId::ShieldUm => MethodId::Ge,
            MethodId::OffAtRep | MethodId::RapoTopK | MethodId::RapoLocal => MethodId::Rapo,
            other => other,
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Policy family trained for a method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyShape {
    Markov,
    WindowHistory,
}

/// How one method is trained and evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub id: MethodId,
    /// Deformation during training, exposure and decay.
    pub deformation: DeformMode,
    pub replay: ReplayDeformation,
    pub features: FeatureMode,
    pub wiring: CostWiring,
    pub shape: PolicyShape,
    pub shielded: bool,
    pub utility_matched: bool,
}

impl MethodConfig {
    /// Configuration of `id`; `top_k` and `local` fill the partial-deployment modes.
    pub fn new(id: MethodId, top_k: usize, local: Vec<usize>) -> Self {
        let base = MethodConfig {
            id,
            deformation: DeformMode::Off,
            replay: ReplayDeformation::Inherit,
            features: FeatureMode::Observation,
            wiring: CostWiring::None,
            shape: PolicyShape::Markov,
            shielded: false,
            utility_matched: false,
        };
        let rapo = MethodConfig {
            deformation: DeformMode::Full,
            features: FeatureMode::Augmented,
            wiring: CostWiring::Fields,
            ..base.clone()
        };
        match id {
            MethodId::Ge => base,
            MethodId::Ss => MethodConfig {
                wiring: CostWiring::Instantaneous,
                ..base
            },
            MethodId::Dr => MethodConfig {
                wiring: CostWiring::DelayedTrace,
                ..base
            },
            MethodId::Shield => MethodConfig { shielded: true, ..base },
            MethodId::ShieldUm => MethodConfig {
                shielded: true,
                utility_matched: true,
                ..base
            },
            MethodId::PmSt => MethodConfig {
                deformation: DeformMode::Off,
                ..rapo
            },
            MethodId::PmWindow => MethodConfig {
                shape: PolicyShape::WindowHistory,
                ..base
            },
            MethodId::Rapo => rapo,
            MethodId::OffAtRep => MethodConfig {
                replay: ReplayDeformation::Off,
                ..rapo
            },
            MethodId::RapoTopK => MethodConfig {
                deformation: DeformMode::TopK { k: top_k },
                ..rapo
            },
            MethodId::RapoLocal => MethodConfig {
                deformation: DeformMode::Local { regions: local },
                ..rapo
            },
        }
    }

    /// True when the kernel is nominal in every phase.
    pub fn is_stationary(&self) -> bool {
        self.deformation == DeformMode::Off
    }
}

/// Sensitive regions and their undirected neighbours.
pub fn local_default_regions(graph: &DiffusionGraph) -> Vec<usize> {
    let adj = graph.undirected_adjacency();
    let mut out: Vec<usize> = Vec::new();
    for &v in graph.sensitive_nodes() {
        out.push(graph.region_of(v));
        out.extend(adj[v].iter().map(|&u| graph.region_of(u)));
    }
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for id in MethodId::ALL {
            assert_eq!(MethodId::parse(id.as_str()).unwrap(), id);
        }
        assert!(MethodId::parse("nope").is_err());
    }

    #[test]
    fn pm_st_differs_from_rapo_only_in_deformation() {
        let rapo = MethodConfig::new(MethodId::Rapo, 3, vec![]);
        let pm = MethodConfig::new(MethodId::PmSt, 3, vec![]);
        assert_eq!(pm.features, FeatureMode::Augmented);
        assert_eq!(pm.wiring, CostWiring::Fields);
        assert_eq!(pm.deformation, DeformMode::Off);
        assert_eq!(
            MethodConfig {
                deformation: rapo.deformation.clone(),
                id: rapo.id,
                ..pm
            },
            rapo
        );
    }

    #[test]
    fn off_at_rep_differs_only_at_replay() {
        let rapo = MethodConfig::new(MethodId::Rapo, 3, vec![]);
        let off = MethodConfig::new(MethodId::OffAtRep, 3, vec![]);
        assert_eq!(off.deformation, DeformMode::Full);
        assert_eq!(off.replay, ReplayDeformation::Off);
        assert_eq!(
            MethodConfig {
                replay: ReplayDeformation::Inherit,
                id: MethodId::Rapo,
                ..off
            },
            rapo
        );
        assert_eq!(MethodId::OffAtRep.checkpoint_source(), MethodId::Rapo);
    }
}
