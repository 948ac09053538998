//! Run directory layout and manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use replaylab::baselines::shield::ShieldTuning;
use replaylab::baselines::suite::{write_csv, CheckpointStore, SuiteOutput};
use replaylab::config::RunConfig;
use replaylab::policy::{Checkpoint, Policy};
use replaylab::rsd::EpisodeSeeds;
use replaylab::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.csv";
pub const GRAPH_REPORT_FILE: &str = "report_by_graph.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRegistry {
    pub master: u64,
    pub graphs: Vec<u64>,
    /// Evaluation episodes per graph seed.
    pub episodes: BTreeMap<u64, Vec<EpisodeSeeds>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStatus {
    pub method: String,
    pub graph_seed: u64,
    pub status: String,
    pub checkpoint: String,
    pub checkpoint_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shield_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tuning: Option<ShieldTuning>,
    pub records: Vec<String>,
}

/// Index of everything a run wrote; all paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub config: String,
    pub seeds: SeedRegistry,
    /// GE reference replay return per graph seed.
    pub references: BTreeMap<u64, f64>,
    pub methods: Vec<MethodStatus>,
    pub checkpoints: Vec<String>,
    pub report: String,
    pub report_by_graph: String,
}

pub fn checkpoint_name(method: &str, graph_seed: u64) -> String {
    format!("{method}-{graph_seed}.json")
}

pub fn write_checkpoints(dir: &Path, store: &CheckpointStore, config_hash: &str) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for ((id, seed), policy) in store {
        let name = checkpoint_name(id.as_str(), *seed);
        fs::write(dir.join(&name), policy.to_checkpoint(config_hash).to_json()?)?;
        names.push(name);
    }
    Ok(names)
}

/// Load every `{method}-{graph_seed}.json` checkpoint in `dir`.
pub fn read_checkpoints(dir: &Path) -> Result<CheckpointStore> {
    let mut store = CheckpointStore::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::config("--checkpoints", format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for path in paths {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let Some((method, seed)) = stem.rsplit_once('-') else {
            continue;
        };
        let (Ok(id), Ok(seed)) = (replaylab::baselines::MethodId::parse(method), seed.parse::<u64>()) else {
            continue;
        };
        let ckpt = Checkpoint::from_json(&fs::read_to_string(&path)?)?;
        store.insert((id, seed), Policy::from_checkpoint(&ckpt)?);
    }
    Ok(store)
}

/// Write config snapshot, checkpoints, episode records, reports and the manifest.
pub fn write_run(dir: &Path, cfg: &RunConfig, store: &CheckpointStore, out: &SuiteOutput) -> Result<RunManifest> {
    fs::create_dir_all(dir)?;
    let config_text = cfg.to_json()?;
    fs::write(dir.join(CONFIG_FILE), &config_text)?;
    let checkpoints = write_checkpoints(&dir.join(CHECKPOINT_DIR), store, &out.config_hash)?
        .into_iter()
        .map(|n| format!("{CHECKPOINT_DIR}/{n}"))
        .collect();

    let mut methods = Vec::new();
    for o in &out.outcomes {
        let rel = format!("{}/{}", o.id.as_str(), o.graph_seed);
        fs::create_dir_all(dir.join(&rel))?;
        let mut records = Vec::new();
        for r in &o.records {
            let name = format!("{rel}/{}.jsonl", r.episode_seed);
            let mut line = serde_json::to_string(r)?;
            line.push('\n');
            fs::write(dir.join(&name), line)?;
            records.push(name);
        }
        methods.push(MethodStatus {
            method: o.id.as_str().to_string(),
            graph_seed: o.graph_seed,
            status: "ok".into(),
            checkpoint: format!(
                "{CHECKPOINT_DIR}/{}",
                checkpoint_name(o.id.checkpoint_source().as_str(), o.graph_seed)
            ),
            checkpoint_hash: o.checkpoint_hash.clone(),
            shield_threshold: o.shield_threshold,
            tuning: o.tuning,
            records,
        });
    }

    write_csv(&out.rows, fs::File::create(dir.join(REPORT_FILE))?)?;
    write_csv(&out.graph_rows, fs::File::create(dir.join(GRAPH_REPORT_FILE))?)?;

    let manifest = RunManifest {
        run_id: cfg.run_id.clone(),
        config_hash: out.config_hash.clone(),
        config: CONFIG_FILE.into(),
        seeds: SeedRegistry {
            master: cfg.seeds.master,
            graphs: cfg.graph.seeds.clone(),
            episodes: cfg
                .graph
                .seeds
                .iter()
                .map(|&s| (s, replaylab::baselines::suite::evaluation_seeds(cfg, s)))
                .collect(),
        },
        references: out.references.clone(),
        methods,
        checkpoints,
        report: REPORT_FILE.into(),
        report_by_graph: GRAPH_REPORT_FILE.into(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::config("--run", format!("no manifest in {}: {e}", dir.display())))?;
    Ok(serde_json::from_str(&text)?)
}
