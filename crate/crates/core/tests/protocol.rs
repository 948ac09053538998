use replaylab::baselines::suite::{evaluation_seeds, graph_for, run_method_suite, train_checkpoints};
use replaylab::baselines::MethodId;
use replaylab::config::RunConfig;
use replaylab::deformation::{DeformMode, DeformationSpec};
use replaylab::env::EnvParams;
use replaylab::fields::{FieldParams, HarmFields};
use replaylab::graph::{build_graph, GraphParams};
use replaylab::policy::{FeatureMode, Policy};
use replaylab::rsd::{run_rsd_episode, EpisodeSeeds, EpisodeSpec, FieldReset, ReplayDeformation, RngMode, RsdConfig};
use replaylab::Error;

fn short_protocol() -> RsdConfig {
    RsdConfig {
        t_exp: 150,
        t_decay: 60,
        t_rep: 150,
        ..RsdConfig::default()
    }
}

fn frozen_policy(features: FeatureMode, seed: u64) -> Policy {
    let mut p = Policy::softmax(features, Some(8), seed);
    p.freeze();
    p
}

#[test]
fn unfrozen_policy_is_rejected() {
    let (g, _) = build_graph(&GraphParams::default(), 1).unwrap();
    let spec = EpisodeSpec {
        graph: &g,
        env: EnvParams::default(),
        fields: FieldParams::default(),
        deform: DeformationSpec::default(),
        seed_count: 3,
    };
    let mut live = Policy::softmax(FeatureMode::Augmented, None, 3);
    let err = run_rsd_episode(&short_protocol(), &mut live, &spec, EpisodeSeeds { episode_seed: 1, z: 2 }).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
}

#[test]
fn evaluation_leaves_weights_untouched() {
    let (g, _) = build_graph(&GraphParams::default(), 1).unwrap();
    let spec = EpisodeSpec {
        graph: &g,
        env: EnvParams::default(),
        fields: FieldParams::default(),
        deform: DeformationSpec::default(),
        seed_count: 3,
    };
    let mut policy = frozen_policy(FeatureMode::Augmented, 5);
    let before = policy.weights_hash();
    for k in 0..4 {
        run_rsd_episode(&short_protocol(), &mut policy, &spec, EpisodeSeeds { episode_seed: k, z: 1 + k as u32 }).unwrap();
        assert_eq!(policy.weights_hash(), before);
    }
}

#[test]
fn replay_starts_from_reset_observable_state_with_persisted_fields() {
    let (g, _) = build_graph(&GraphParams::default(), 2).unwrap();
    let spec = EpisodeSpec {
        graph: &g,
        env: EnvParams::default(),
        fields: FieldParams::default(),
        deform: DeformationSpec::default(),
        seed_count: 3,
    };
    let mut policy = frozen_policy(FeatureMode::Augmented, 8);
    let seeds = EpisodeSeeds { episode_seed: 11, z: 4 };

    let rec = run_rsd_episode(&short_protocol(), &mut policy, &spec, seeds).unwrap();
    let decay_end = &rec.boundaries[2];
    assert_eq!(rec.replay_start_fields, decay_end.hash);
    assert!(decay_end.trace_sum > 0.0, "exposure should leave a trace behind");
    assert!(rec.replay.reach[0] < rec.exposure.reach[rec.exposure.len() - 1]);

    let reset = RsdConfig {
        field_reset: FieldReset::Reset,
        ..short_protocol()
    };
    let rec = run_rsd_episode(&reset, &mut policy, &spec, seeds).unwrap();
    let zero = HarmFields::new(g.region_count(), FieldParams::default());
    assert_eq!(rec.replay_start_fields, zero.hash());
    assert!(rec.fields_reset);
}

#[test]
fn paired_stationary_episode_replays_exactly() {
    let (g, _) = build_graph(&GraphParams::default(), 3).unwrap();
    let spec = EpisodeSpec {
        graph: &g,
        env: EnvParams::default(),
        fields: FieldParams::default(),
        deform: DeformationSpec::off(),
        seed_count: 3,
    };
    let cfg = RsdConfig {
        rng_mode: RngMode::Paired,
        ..short_protocol()
    };
    let mut policy = frozen_policy(FeatureMode::Observation, 2);
    for k in 0..10 {
        let rec = run_rsd_episode(&cfg, &mut policy, &spec, EpisodeSeeds { episode_seed: k, z: 1 + k as u32 }).unwrap();
        assert_eq!(rec.exposure.hash, rec.replay.hash);
        assert_eq!(rec.exposure.reward, rec.replay.reward);
    }
}

#[test]
fn counterfactual_flag_only_changes_replay() {
    let (g, _) = build_graph(&GraphParams::default(), 2).unwrap();
    let spec = EpisodeSpec {
        graph: &g,
        env: EnvParams::default(),
        fields: FieldParams::default(),
        deform: DeformationSpec::default().with_mode(DeformMode::Full),
        seed_count: 3,
    };
    let mut policy = frozen_policy(FeatureMode::Augmented, 8);
    let seeds = EpisodeSeeds { episode_seed: 21, z: 6 };
    let on = run_rsd_episode(&short_protocol(), &mut policy, &spec, seeds).unwrap();
    let off_cfg = RsdConfig {
        replay_deformation: ReplayDeformation::Off,
        ..short_protocol()
    };
    let off = run_rsd_episode(&off_cfg, &mut policy, &spec, seeds).unwrap();
    assert_eq!(on.exposure, off.exposure);
    assert_eq!(on.decay, off.decay);
    assert_eq!(on.replay_start_fields, off.replay_start_fields);
    assert!(off.counterfactual && !on.counterfactual);
    assert!(off.replay.odds.iter().all(|o| o.p == o.p0 && o.q == o.q0));
}

const SUITE: &str = r#"{
  "run_id": "protocol",
  "graph": {"nodes": 50, "seeds": [2]},
  "rsd": {"t_exp": 150, "t_decay": 60, "t_rep": 150, "episodes": 3},
  "methods": [{"id": "rapo"}, {"id": "off_at_rep"}, {"id": "pm_st"}],
  "training": {"steps": 1200, "hidden": 8},
  "seeds": {"master": 5}
}"#;

#[test]
fn off_at_rep_shares_rapo_checkpoint_and_fields() {
    let cfg = RunConfig::from_json(SUITE).unwrap();
    let out = run_method_suite(&cfg).unwrap();
    let find = |id: MethodId| out.outcomes.iter().find(|o| o.id == id).unwrap();
    let (rapo, off) = (find(MethodId::Rapo), find(MethodId::OffAtRep));
    assert_eq!(rapo.checkpoint_hash, off.checkpoint_hash);
    for (a, b) in rapo.records.iter().zip(&off.records) {
        assert_eq!(a.exposure.hash, b.exposure.hash);
        assert_eq!(a.replay_start_fields, b.replay_start_fields);
        assert!(b.counterfactual);
    }
    // PM-ST trains separately under the same wiring, so only its checkpoint differs
    assert_ne!(find(MethodId::PmSt).checkpoint_hash, rapo.checkpoint_hash);
}

#[test]
fn missing_checkpoint_is_a_protocol_error() {
    let cfg = RunConfig::from_json(SUITE).unwrap();
    let mut store = train_checkpoints(&cfg).unwrap();
    store.remove(&(MethodId::Rapo, 2));
    let err = replaylab::baselines::suite::run_method_suite_with(&cfg, &store).unwrap_err();
    match err {
        Error::Protocol(msg) => assert!(msg.contains("off_at_rep") || msg.contains("rapo")),
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn evaluation_seeds_cycle_stimuli() {
    let cfg = RunConfig::from_json(SUITE).unwrap();
    let seeds = evaluation_seeds(&cfg, 2);
    assert_eq!(seeds.iter().map(|s| s.z).collect::<Vec<_>>(), vec![1, 2, 3]);
    let g = graph_for(&cfg, 2).unwrap();
    assert_eq!(g.seed(), 2);
}
