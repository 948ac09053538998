use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

use replaylab::baselines::suite::{
    graph_for, report_rows, run_method_suite_with, run_sweep, train_checkpoints, write_csv, MethodOutcome,
};
use replaylab::baselines::MethodId;
use replaylab::config::RunConfig;
use replaylab::graph::{build_graph, GraphParams};
use replaylab::metrics::episode_metrics;
use replaylab::policy::Checkpoint;
use replaylab::rsd::RsdEpisodeRecord;
use replaylab::verification;
use replaylab::Error;

use crate::load_config;
use crate::manifest::{self, read_checkpoints, read_manifest, write_checkpoints, write_run};

pub fn gen_graph(nodes: usize, branching: f64, sens_frac: f64, seed: u64, out: &Path) -> Result<()> {
    let params = GraphParams {
        nodes,
        branching_target: branching,
        sens_frac,
        ..GraphParams::default()
    };
    let (graph, selection) = build_graph(&params, seed)?;
    fs::write(out, graph.to_json()?).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "nodes={} edges={} sensitive={}{}",
        graph.node_count(),
        graph.edges().len(),
        graph.sensitive_nodes().len(),
        if selection.truncated { " (sensitive set truncated)" } else { "" }
    );
    Ok(())
}

pub fn train(config: &Path, out: &Path, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(config, workers)?;
    let store = train_checkpoints(&cfg)?;
    let names = write_checkpoints(out, &store, &cfg.hash()?)?;
    for n in names {
        println!("{}", out.join(n).display());
    }
    Ok(())
}

fn run_dir(runs_dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    runs_dir.join(&cfg.run_id)
}

pub fn rsd_eval(config: &Path, checkpoints: &Path, runs_dir: &Path, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(config, workers)?;
    let store = read_checkpoints(checkpoints)?;
    let out = run_method_suite_with(&cfg, &store)?;
    let dir = run_dir(runs_dir, &cfg);
    write_run(&dir, &cfg, &store, &out)?;
    print_rows(&dir)
}

pub fn run(config: &Path, runs_dir: &Path, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(config, workers)?;
    let store = train_checkpoints(&cfg)?;
    let out = run_method_suite_with(&cfg, &store)?;
    let dir = run_dir(runs_dir, &cfg);
    write_run(&dir, &cfg, &store, &out)?;
    print_rows(&dir)
}

fn print_rows(dir: &Path) -> Result<()> {
    let text = fs::read_to_string(dir.join(manifest::REPORT_FILE))?;
    print!("{text}");
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn sweep(config: &Path, w_h: &[f64], eta: &[f64], out: &Path, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(config, workers)?;
    let rows = run_sweep(&cfg, w_h, eta)?;
    write_csv(&rows, fs::File::create(out)?)?;
    print!("{}", fs::read_to_string(out)?);
    Ok(())
}

/// Rebuild the report from the records a run persisted.
pub fn report(run: &Path, out: Option<&Path>) -> Result<()> {
    let manifest = read_manifest(run)?;
    let text = fs::read_to_string(run.join(&manifest.config))?;
    let cfg = RunConfig::from_json(&text)?;
    if cfg.hash()? != manifest.config_hash {
        return Err(Error::protocol("config snapshot does not match the manifest hash").into());
    }
    let gamma = cfg.training.gamma;
    let mut outcomes = Vec::new();
    for status in &manifest.methods {
        let graph = graph_for(&cfg, status.graph_seed)?;
        let reference = manifest.references.get(&status.graph_seed).copied();
        let checkpoint = Checkpoint::from_json(&fs::read_to_string(run.join(&status.checkpoint))?)?;
        let mut records = Vec::new();
        for path in &status.records {
            for line in fs::read_to_string(run.join(path))?.lines() {
                records.push(serde_json::from_str::<RsdEpisodeRecord>(line)?);
            }
        }
        let metrics = records
            .iter()
            .map(|r| episode_metrics(r, &graph, reference, gamma))
            .collect::<replaylab::Result<Vec<_>>>()?;
        outcomes.push(MethodOutcome {
            id: MethodId::parse(&status.method)?,
            graph_seed: status.graph_seed,
            checkpoint,
            checkpoint_hash: status.checkpoint_hash.clone(),
            records,
            metrics,
            shield_threshold: status.shield_threshold,
            tuning: status.tuning,
        });
    }
    let (rows, _) = report_rows(&cfg, &outcomes)?;
    match out {
        Some(path) => write_csv(&rows, fs::File::create(path)?)?,
        None => {
            let mut buf = Vec::new();
            write_csv(&rows, &mut buf)?;
            std::io::stdout().write_all(&buf)?;
        }
    }
    Ok(())
}

pub fn verify(trials: usize, seed: u64) -> Result<()> {
    if trials == 0 {
        return Err(Error::config("--trials", "must be at least 1").into());
    }
    let s = verification::run_all(trials, seed)?;
    let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "{} no-go paired: {}/{} identical",
        mark(s.no_go_paired.passed),
        s.no_go_paired.identical,
        s.no_go_paired.episodes
    );
    println!(
        "{} no-go independent: KS p = {:.4} over {} episodes",
        mark(s.no_go_independent.passed),
        s.no_go_independent.ks_p_value.unwrap_or(f64::NAN),
        s.no_go_independent.episodes
    );
    println!(
        "{} no-go negative control: {}/{} identical with a latent shift",
        mark(!s.no_go_negative_control.passed),
        s.no_go_negative_control.identical,
        s.no_go_negative_control.episodes
    );
    for b in [&s.odds, &s.safe_mass] {
        println!(
            "{} {}: {} violations in {} trials, closed-form error {:.2e}, negative control {}",
            mark(b.passed),
            b.name,
            b.violations,
            b.trials,
            b.closed_form_error,
            if b.negative_control_detected { "detected" } else { "missed" }
        );
    }
    println!(
        "{} compounding: {} violations in {} chains, negative control {}",
        mark(s.compounding.passed),
        s.compounding.violations,
        s.compounding.chains,
        if s.compounding.negative_control_detected { "detected" } else { "missed" }
    );
    if !s.passed() {
        bail!(Error::HypothesisViolation("verification failed".into()));
    }
    Ok(())
}
