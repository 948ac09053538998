//! Train, evaluate and report every configured method on every graph.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::methods::{local_default_regions, MethodConfig, MethodId, PolicyShape};
use super::shield::{tune_shield_um, ShieldParams, ShieldTuning, ShieldedPolicy};
use crate::config::{MethodOverrides, PolicySource, RunConfig};
use crate::env::Action;
use crate::error::{Error, Result};
use crate::graph::{build_graph, DiffusionGraph, STIMULUS_COUNT};
use crate::metrics::{discounted_return, episode_metrics, summarize, EpisodeMetrics};
use crate::policy::{Checkpoint, Policy};
use crate::rng;
use crate::rsd::{run_rsd_episode, Controller, EpisodeSeeds, EpisodeSpec, RsdConfig, RsdEpisodeRecord};
use crate::stats::welch_t_test;
use crate::trainer::train_policy;

/// Frozen policies keyed by the method that trained them and the graph seed.
pub type CheckpointStore = BTreeMap<(MethodId, u64), Policy>;

pub fn graph_for(cfg: &RunConfig, graph_seed: u64) -> Result<DiffusionGraph> {
    Ok(build_graph(&cfg.graph.params(), graph_seed)?.0)
}

/// Evaluation episodes for one graph, shared by every method.
pub fn evaluation_seeds(cfg: &RunConfig, graph_seed: u64) -> Vec<EpisodeSeeds> {
    episode_plan(cfg, graph_seed, "episodes", cfg.rsd.episodes)
}

/// Held-out episodes used only to tune the utility-matched shield.
pub fn tuning_seeds(cfg: &RunConfig, graph_seed: u64) -> Vec<EpisodeSeeds> {
    episode_plan(cfg, graph_seed, "shield-tuning", cfg.shield.tuning_episodes)
}

fn episode_plan(cfg: &RunConfig, graph_seed: u64, label: &str, count: usize) -> Vec<EpisodeSeeds> {
    let base = rng::derive_index(rng::derive(cfg.seeds.master, label), graph_seed);
    (0..count)
        .map(|k| EpisodeSeeds {
            episode_seed: rng::derive_index(base, k as u64),
            z: 1 + (k as u32) % STIMULUS_COUNT,
        })
        .collect()
}

fn training_seed(cfg: &RunConfig, id: MethodId, graph_seed: u64) -> u64 {
    rng::derive_index(rng::derive(rng::derive(cfg.seeds.master, "train"), id.as_str()), graph_seed)
}

/// Overrides in force for `id`: those of its checkpoint source, then its own.
pub fn effective_overrides(cfg: &RunConfig, id: MethodId) -> MethodOverrides {
    let own = |m: MethodId| {
        cfg.methods
            .iter()
            .find(|e| e.id == m.as_str())
            .map(|e| e.overrides.clone())
            .unwrap_or_default()
    };
    let source = id.checkpoint_source();
    let base = if source == id { MethodOverrides::default() } else { own(source) };
    layer(&base, &own(id))
}

fn layer(base: &MethodOverrides, over: &MethodOverrides) -> MethodOverrides {
    MethodOverrides {
        w_h: over.w_h.or(base.w_h),
        scar_rate: over.scar_rate.or(base.scar_rate),
        retention: over.retention.or(base.retention),
        top_k: over.top_k.or(base.top_k),
        shield_threshold: over.shield_threshold.or(base.shield_threshold),
    }
}

/// Method configuration and episode inputs for `id` on `graph`.
pub fn method_setup<'g>(
    cfg: &RunConfig,
    id: MethodId,
    graph: &'g DiffusionGraph,
    overrides: &MethodOverrides,
) -> (MethodConfig, EpisodeSpec<'g>) {
    let local = if cfg.deformation.local_regions.is_empty() {
        local_default_regions(graph)
    } else {
        cfg.deformation.local_regions.clone()
    };
    let top_k = overrides.top_k.unwrap_or(cfg.deformation.top_k);
    let method = MethodConfig::new(id, top_k, local);
    let mut fields = cfg.fields;
    if let Some(eta) = overrides.scar_rate {
        fields.scar_rate = eta;
    }
    if let Some(r) = overrides.retention {
        fields.retention = r;
    }
    let mut deform = cfg.deformation.spec(method.deformation.clone());
    if let Some(w) = overrides.w_h {
        deform.w_h = w;
    }
    let spec = EpisodeSpec {
        graph,
        env: cfg.env.clone(),
        fields,
        deform,
        seed_count: cfg.graph.seeds_per_stimulus,
    };
    (method, spec)
}

fn protocol_for(cfg: &RunConfig, method: &MethodConfig) -> RsdConfig {
    RsdConfig {
        replay_deformation: method.replay,
        ..cfg.rsd.protocol()
    }
}

/// Train (or script) the policy that `id` owns on `graph`, frozen.
pub fn train_method(cfg: &RunConfig, id: MethodId, graph: &DiffusionGraph, overrides: &MethodOverrides) -> Result<Policy> {
    if id.checkpoint_source() != id {
        return Err(Error::invalid(format!("method `{id}` evaluates the `{}` checkpoint", id.checkpoint_source())));
    }
    if cfg.policy_source == PolicySource::ScriptedModerate {
        let mut p = Policy::scripted(Action::Moderate);
        p.freeze();
        return Ok(p);
    }
    let (method, spec) = method_setup(cfg, id, graph, overrides);
    let seed = training_seed(cfg, id, graph.seed());
    let init_seed = rng::derive(seed, "init");
    let policy = match method.shape {
        PolicyShape::Markov => Policy::softmax(method.features, cfg.training.hidden, init_seed),
        PolicyShape::WindowHistory => {
            Policy::window_history(cfg.training.window, method.features, cfg.training.hidden, init_seed)?
        }
    };
    let rsd = protocol_for(cfg, &method);
    Ok(train_policy(policy, method.wiring, &spec, &rsd, &cfg.training, seed)?.policy)
}

/// Run one frozen controller over `seeds` in parallel; records come back in seed order.
pub fn run_episodes<C>(rsd: &RsdConfig, controller: &C, spec: &EpisodeSpec<'_>, seeds: &[EpisodeSeeds]) -> Result<Vec<RsdEpisodeRecord>>
where
    C: Controller + Clone + Send + Sync,
{
    seeds
        .par_iter()
        .map(|&s| run_rsd_episode(rsd, &mut controller.clone(), spec, s))
        .collect()
}

/// Mean discounted replay return of the reference records; must be positive.
pub fn reference_return(records: &[RsdEpisodeRecord], gamma: f64) -> Result<f64> {
    let r = crate::stats::mean(&records.iter().map(|r| discounted_return(&r.replay.reward, gamma)).collect::<Vec<_>>());
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::protocol(format!("reference replay return must be positive, got {r}")));
    }
    Ok(r)
}

/// Everything produced for one method on one graph.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub id: MethodId,
    pub graph_seed: u64,
    pub checkpoint: Checkpoint,
    pub checkpoint_hash: String,
    pub records: Vec<RsdEpisodeRecord>,
    pub metrics: Vec<EpisodeMetrics>,
    pub shield_threshold: Option<f64>,
    pub tuning: Option<ShieldTuning>,
}

/// One row of the aggregate report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// A single seed, or every seed joined by `;` for the pooled row.
    pub graph_seed: String,
    pub episodes: usize,
    pub rag_mean: f64,
    pub rag_std: f64,
    pub auc_r_mean: f64,
    pub auc_r_std: f64,
    pub sm_r_mean: f64,
    pub sm_r_std: f64,
    pub replay_ret_mean: f64,
    pub asd_mean: f64,
    pub odds_ratio_mean: f64,
    pub rc_exp_mean: f64,
    pub rc_rep_mean: f64,
    /// Welch p-value of this method's RAG against PM-ST's.
    pub rag_welch_p: Option<f64>,
    pub shield_transitions_per_step: u64,
    pub shield_um_status: String,
}

pub const REPORT_COLUMNS: [&str; 17] = [
    "method",
    "graph_seed",
    "episodes",
    "rag_mean",
    "rag_std",
    "auc_r_mean",
    "auc_r_std",
    "sm_r_mean",
    "sm_r_std",
    "replay_ret_mean",
    "asd_mean",
    "odds_ratio_mean",
    "rc_exp_mean",
    "rc_rep_mean",
    "rag_welch_p",
    "shield_transitions_per_step",
    "shield_um_status",
];

#[derive(Debug, Clone)]
pub struct SuiteOutput {
    pub config_hash: String,
    /// Requested methods in config order, then graphs in config order.
    pub outcomes: Vec<MethodOutcome>,
    /// GE reference replay return per graph seed.
    pub references: BTreeMap<u64, f64>,
    /// One pooled row per method.
    pub rows: Vec<ReportRow>,
    /// One row per method and graph.
    pub graph_rows: Vec<ReportRow>,
}

/// Train every needed policy, then evaluate.
pub fn run_method_suite(cfg: &RunConfig) -> Result<SuiteOutput> {
    with_pool(cfg, || evaluate_suite(cfg, &train_all(cfg)?))
}

/// Train the checkpoints a run needs, keyed by owning method and graph seed.
pub fn train_checkpoints(cfg: &RunConfig) -> Result<CheckpointStore> {
    with_pool(cfg, || train_all(cfg))
}

fn train_all(cfg: &RunConfig) -> Result<CheckpointStore> {
    let mut store = CheckpointStore::new();
    for &seed in &cfg.graph.seeds {
        let graph = graph_for(cfg, seed)?;
        for id in needed_sources(cfg)? {
            let policy = train_method(cfg, id, &graph, &effective_overrides(cfg, id))?;
            store.insert((id, seed), policy);
        }
    }
    Ok(store)
}

/// Evaluate with pre-trained checkpoints; a missing one is a protocol error naming the method.
pub fn run_method_suite_with(cfg: &RunConfig, store: &CheckpointStore) -> Result<SuiteOutput> {
    with_pool(cfg, || evaluate_suite(cfg, store))
}

fn with_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(f)
}

pub fn requested_methods(cfg: &RunConfig) -> Result<Vec<MethodId>> {
    cfg.methods.iter().map(|m| MethodId::parse(&m.id)).collect()
}

/// Methods whose checkpoints the run needs, in canonical order.
pub fn needed_sources(cfg: &RunConfig) -> Result<Vec<MethodId>> {
    let requested = requested_methods(cfg)?;
    let mut out = vec![MethodId::Ge];
    for id in &requested {
        out.push(id.checkpoint_source());
        if *id == MethodId::ShieldUm {
            out.push(MethodId::Rapo);
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn checkpoint(store: &CheckpointStore, id: MethodId, graph_seed: u64) -> Result<&Policy> {
    let source = id.checkpoint_source();
    store.get(&(source, graph_seed)).ok_or_else(|| {
        Error::protocol(format!("missing checkpoint for method `{id}` (trained as `{source}`) on graph {graph_seed}"))
    })
}

fn evaluate_suite(cfg: &RunConfig, store: &CheckpointStore) -> Result<SuiteOutput> {
    let config_hash = cfg.hash()?;
    let gamma = cfg.training.gamma;
    let requested = requested_methods(cfg)?;
    let mut per_graph: Vec<BTreeMap<MethodId, MethodOutcome>> = Vec::new();
    let mut references = BTreeMap::new();

    for &graph_seed in &cfg.graph.seeds {
        let graph = graph_for(cfg, graph_seed)?;
        let seeds = evaluation_seeds(cfg, graph_seed);
        let mut done: BTreeMap<MethodId, MethodOutcome> = BTreeMap::new();

        let ge = evaluate_plain(cfg, MethodId::Ge, &graph, store, &seeds)?;
        let reference = reference_return(&ge.1, gamma)?;
        references.insert(graph_seed, reference);

        for id in std::iter::once(MethodId::Ge).chain(requested.iter().copied()) {
            if done.contains_key(&id) {
                continue;
            }
            let (records, threshold, tuning) = match id {
                MethodId::Ge => (ge.1.clone(), None, None),
                MethodId::Shield | MethodId::ShieldUm => {
                    let overrides = effective_overrides(cfg, id);
                    let (tuning, threshold) = if id == MethodId::ShieldUm {
                        let t = tune_for_graph(cfg, &graph, store, reference)?;
                        (Some(t), t.threshold)
                    } else {
                        (None, overrides.shield_threshold.unwrap_or(cfg.shield.threshold))
                    };
                    let records = evaluate_shield(cfg, id, &graph, store, &seeds, threshold)?;
                    (records, Some(threshold), tuning)
                }
                _ => (evaluate_plain(cfg, id, &graph, store, &seeds)?.1, None, None),
            };
            let policy = checkpoint(store, id, graph_seed)?;
            let ckpt = policy.to_checkpoint(&config_hash);
            let checkpoint_hash = ckpt.hash()?;
            let mut records = records;
            for r in &mut records {
                r.method = id.as_str().to_string();
                r.config_hash = config_hash.clone();
                r.checkpoint_hash = checkpoint_hash.clone();
            }
            let metrics = records
                .iter()
                .map(|r| episode_metrics(r, &graph, Some(reference), gamma))
                .collect::<Result<Vec<_>>>()?;
            done.insert(
                id,
                MethodOutcome {
                    id,
                    graph_seed,
                    checkpoint: ckpt,
                    checkpoint_hash,
                    records,
                    metrics,
                    shield_threshold: threshold,
                    tuning,
                },
            );
        }
        per_graph.push(done);
    }

    let mut outcomes = Vec::new();
    for id in &requested {
        for done in &mut per_graph {
            if let Some(o) = done.remove(id) {
                outcomes.push(o);
            }
        }
    }
    let (rows, graph_rows) = report_rows(cfg, &outcomes)?;
    Ok(SuiteOutput {
        config_hash,
        outcomes,
        references,
        rows,
        graph_rows,
    })
}

fn evaluate_plain(
    cfg: &RunConfig,
    id: MethodId,
    graph: &DiffusionGraph,
    store: &CheckpointStore,
    seeds: &[EpisodeSeeds],
) -> Result<(MethodConfig, Vec<RsdEpisodeRecord>)> {
    let policy = checkpoint(store, id, graph.seed())?;
    let (method, spec) = method_setup(cfg, id, graph, &effective_overrides(cfg, id));
    let records = run_episodes(&protocol_for(cfg, &method), policy, &spec, seeds)?;
    Ok((method, records))
}

fn shield_params(cfg: &RunConfig, threshold: f64) -> ShieldParams {
    ShieldParams {
        threshold,
        n_mc: cfg.shield.n_mc,
        horizon: cfg.shield.horizon,
    }
}

fn evaluate_shield(
    cfg: &RunConfig,
    id: MethodId,
    graph: &DiffusionGraph,
    store: &CheckpointStore,
    seeds: &[EpisodeSeeds],
    threshold: f64,
) -> Result<Vec<RsdEpisodeRecord>> {
    let base = checkpoint(store, id, graph.seed())?.clone();
    let shielded = ShieldedPolicy::new(base, shield_params(cfg, threshold))?;
    let (method, spec) = method_setup(cfg, id, graph, &effective_overrides(cfg, id));
    run_episodes(&protocol_for(cfg, &method), &shielded, &spec, seeds)
}

/// Bisect the shield threshold on held-out episodes towards RAPO's replay return there.
fn tune_for_graph(
    cfg: &RunConfig,
    graph: &DiffusionGraph,
    store: &CheckpointStore,
    reference: f64,
) -> Result<ShieldTuning> {
    let gamma = cfg.training.gamma;
    let held_out = tuning_seeds(cfg, graph.seed());
    let mean_ret = |records: &[RsdEpisodeRecord]| {
        crate::stats::mean(
            &records
                .iter()
                .map(|r| discounted_return(&r.replay.reward, gamma) / reference)
                .collect::<Vec<_>>(),
        )
    };
    let (_, rapo_records) = evaluate_plain(cfg, MethodId::Rapo, graph, store, &held_out)?;
    let target = mean_ret(&rapo_records);
    let upper = (cfg.shield.horizon * graph.sensitive_nodes().len()) as f64 + 1.0;
    tune_shield_um(target, cfg.shield.tolerance, cfg.shield.iterations, (0.0, upper), |theta| {
        let records = evaluate_shield(cfg, MethodId::ShieldUm, graph, store, &held_out, theta)?;
        Ok(mean_ret(&records))
    })
}

/// Pooled and per-graph report rows for the requested methods.
pub fn report_rows(cfg: &RunConfig, outcomes: &[MethodOutcome]) -> Result<(Vec<ReportRow>, Vec<ReportRow>)> {
    let requested = &requested_methods(cfg)?;
    let rag = |ms: &[&EpisodeMetrics]| ms.iter().map(|m| m.rag).collect::<Vec<f64>>();
    let of = |id: MethodId, seed: Option<u64>| -> Vec<&EpisodeMetrics> {
        outcomes
            .iter()
            .filter(|o| o.id == id && seed.is_none_or(|s| s == o.graph_seed))
            .flat_map(|o| o.metrics.iter())
            .collect()
    };
    let has_pm = requested.contains(&MethodId::PmSt);
    let row = |id: MethodId, seed: Option<u64>| {
        let ms = of(id, seed);
        let owned: Vec<EpisodeMetrics> = ms.iter().map(|&m| m.clone()).collect();
        let s = summarize(&owned);
        let welch = if has_pm && id != MethodId::PmSt {
            welch_t_test(&rag(&ms), &rag(&of(MethodId::PmSt, seed))).map(|t| t.p_value)
        } else {
            None
        };
        let mine: Vec<&MethodOutcome> = outcomes
            .iter()
            .filter(|o| o.id == id && seed.is_none_or(|s| s == o.graph_seed))
            .collect();
        let transitions = mine
            .iter()
            .flat_map(|o| o.records.iter())
            .map(|r| r.shield_transitions_per_step)
            .max()
            .unwrap_or(0);
        let statuses: Vec<&str> = mine.iter().filter_map(|o| o.tuning.map(|t| t.status.as_str())).collect();
        let status = if statuses.is_empty() {
            String::new()
        } else if statuses.iter().all(|&s| s == "matched") {
            "matched".to_string()
        } else {
            statuses.join(";")
        };
        ReportRow {
            method: id.as_str().to_string(),
            graph_seed: match seed {
                Some(s) => s.to_string(),
                None => cfg.graph.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
            },
            episodes: s.episodes,
            rag_mean: s.rag_mean,
            rag_std: s.rag_std,
            auc_r_mean: s.auc_r_mean,
            auc_r_std: s.auc_r_std,
            sm_r_mean: s.sm_r_mean,
            sm_r_std: s.sm_r_std,
            replay_ret_mean: s.replay_ret_mean,
            asd_mean: s.asd_mean,
            odds_ratio_mean: s.odds_ratio_mean,
            rc_exp_mean: s.rc_exp_mean,
            rc_rep_mean: s.rc_rep_mean,
            rag_welch_p: welch,
            shield_transitions_per_step: transitions,
            shield_um_status: status,
        }
    };
    let rows = requested.iter().map(|&id| row(id, None)).collect();
    let graph_rows = requested
        .iter()
        .flat_map(|&id| cfg.graph.seeds.iter().map(move |&s| (id, s)))
        .map(|(id, s)| row(id, Some(s)))
        .collect();
    Ok((rows, graph_rows))
}

/// Write rows as CSV with a header.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// One utility-safety point of the RAPO sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub w_h: f64,
    pub eta: f64,
    pub rag: f64,
    pub auc_r: f64,
    pub sm_r: f64,
    pub replay_ret: f64,
}

/// Train and evaluate RAPO at every (w_H, scar rate) grid point; rows sorted by (w_H, eta).
pub fn run_sweep(cfg: &RunConfig, w_h: &[f64], eta: &[f64]) -> Result<Vec<SweepRow>> {
    if w_h.is_empty() || eta.is_empty() {
        return Err(Error::config("sweep", "grids must be nonempty"));
    }
    let mut grid: Vec<(f64, f64)> = w_h.iter().flat_map(|&w| eta.iter().map(move |&e| (w, e))).collect();
    grid.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    with_pool(cfg, || {
        let gamma = cfg.training.gamma;
        let mut graphs = Vec::new();
        for &seed in &cfg.graph.seeds {
            let graph = graph_for(cfg, seed)?;
            let ge = train_method(cfg, MethodId::Ge, &graph, &effective_overrides(cfg, MethodId::Ge))?;
            let seeds = evaluation_seeds(cfg, seed);
            let (method, spec) = method_setup(cfg, MethodId::Ge, &graph, &effective_overrides(cfg, MethodId::Ge));
            let reference = reference_return(&run_episodes(&protocol_for(cfg, &method), &ge, &spec, &seeds)?, gamma)?;
            graphs.push((graph, seeds, reference));
        }
        let mut rows = Vec::new();
        for (w, e) in grid {
            let overrides = layer(
                &effective_overrides(cfg, MethodId::Rapo),
                &MethodOverrides {
                    w_h: Some(w),
                    scar_rate: Some(e),
                    ..MethodOverrides::default()
                },
            );
            let mut metrics = Vec::new();
            for (graph, seeds, reference) in &graphs {
                let policy = train_method(cfg, MethodId::Rapo, graph, &overrides)?;
                let (method, spec) = method_setup(cfg, MethodId::Rapo, graph, &overrides);
                for r in run_episodes(&protocol_for(cfg, &method), &policy, &spec, seeds)? {
                    metrics.push(episode_metrics(&r, graph, Some(*reference), gamma)?);
                }
            }
            let s = summarize(&metrics);
            rows.push(SweepRow {
                w_h: w,
                eta: e,
                rag: s.rag_mean,
                auc_r: s.auc_r_mean,
                sm_r: s.sm_r_mean,
                replay_ret: s.replay_ret_mean,
            });
        }
        Ok(rows)
    })
}
