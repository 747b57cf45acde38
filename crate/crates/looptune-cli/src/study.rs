//! Study execution: every configured method run over every seed.
//!
//! Work is split into (method, seed) units so repetitions can run on
//! separate cores. A unit failure is logged and skipped rather than sinking
//! the study; the caller decides how many failures are tolerable.

use anyhow::Context;
use rayon::prelude::*;

use looptune::bo::{
    run_blackbox, run_hierarchical, run_multitask, BoHistory, BoundsRow, EpisodeRunner,
    MethodKind,
};

use crate::config::ExperimentConfig;
use crate::io::StreamRow;

pub struct StudyOutcome {
    /// All unit histories, ordered by (method, seed, task).
    pub histories: Vec<BoHistory>,
    /// Hierarchical bound diagnostics, tagged with their seed.
    pub bounds: Vec<(u64, BoundsRow)>,
    /// Noise-stream checksums per (method, task, seed).
    pub streams: Vec<StreamRow>,
    pub failed_units: usize,
    pub total_units: usize,
}

struct UnitOutput {
    histories: Vec<BoHistory>,
    bounds: Vec<(u64, BoundsRow)>,
    streams: Vec<StreamRow>,
}

fn run_unit(
    cfg: &ExperimentConfig,
    runner: &EpisodeRunner,
    method: MethodKind,
    seed_idx: u64,
) -> anyhow::Result<UnitOutput> {
    let bo_cfg = cfg.bo_config(method)?;
    let mut out = UnitOutput { histories: Vec::new(), bounds: Vec::new(), streams: Vec::new() };
    match method {
        MethodKind::Blackbox => {
            for task_idx in 0..runner.tasks.len() {
                let history = run_blackbox(&bo_cfg, runner, task_idx, seed_idx)
                    .with_context(|| format!("blackbox task {task_idx} seed {seed_idx}"))?;
                out.histories.push(history);
            }
        }
        MethodKind::Multitask => {
            let histories = run_multitask(&bo_cfg, runner, seed_idx)
                .with_context(|| format!("multitask seed {seed_idx}"))?;
            out.histories.extend(histories);
        }
        MethodKind::Hierarchical => {
            let hier = cfg.hier_config();
            let outcome = run_hierarchical(&bo_cfg, &hier, runner, seed_idx)
                .with_context(|| format!("hierarchical seed {seed_idx}"))?;
            out.histories.extend(outcome.histories);
            out.bounds.extend(outcome.bounds.into_iter().map(|b| (seed_idx, b)));
        }
    }
    for (task_idx, task) in runner.tasks.iter().enumerate() {
        out.streams.push(StreamRow {
            method,
            task_label: task.label.clone(),
            seed_index: seed_idx,
            checksum: runner.stream_checksum(task_idx, seed_idx, cfg.budget),
        });
    }
    Ok(out)
}

/// Run the full study described by the config. `methods` can restrict the
/// run to a subset of the configured methods, in config order.
pub fn run_study(
    cfg: &ExperimentConfig,
    methods: &[MethodKind],
) -> anyhow::Result<StudyOutcome> {
    let runner = cfg.runner()?;
    let units: Vec<(MethodKind, u64)> = methods
        .iter()
        .flat_map(|&m| (0..cfg.seeds).map(move |s| (m, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .context("building worker pool")?;
    let results: Vec<anyhow::Result<UnitOutput>> = pool.install(|| {
        units
            .par_iter()
            .map(|&(method, seed_idx)| run_unit(cfg, &runner, method, seed_idx))
            .collect()
    });

    let total_units = results.len();
    let mut outcome = StudyOutcome {
        histories: Vec::new(),
        bounds: Vec::new(),
        streams: Vec::new(),
        failed_units: 0,
        total_units,
    };
    for ((method, seed_idx), result) in units.into_iter().zip(results) {
        match result {
            Ok(unit) => {
                outcome.histories.extend(unit.histories);
                outcome.bounds.extend(unit.bounds);
                outcome.streams.extend(unit.streams);
            }
            Err(err) => {
                outcome.failed_units += 1;
                eprintln!("unit ({}, seed {seed_idx}) failed: {err:#}", method.name());
            }
        }
    }
    Ok(outcome)
}

/// Serialize a completed study as (file name, content) pairs: the resolved
/// config, the raw CSVs, every aggregate output, and a closing manifest
/// hashing all of them.
pub fn study_files(
    cfg: &ExperimentConfig,
    outcome: &StudyOutcome,
) -> anyhow::Result<Vec<(String, String)>> {
    let mut files: Vec<(String, String)> = Vec::new();
    files.push(("config.toml".to_string(), toml::to_string(cfg).context("serializing config")?));
    files.push(("history.csv".to_string(), crate::io::history_to_csv(&outcome.histories)));
    files.push(("bounds.csv".to_string(), crate::io::bounds_to_csv(&outcome.bounds)));
    files.push(("streams.csv".to_string(), crate::io::streams_to_csv(&outcome.streams)));
    if !outcome.histories.is_empty() {
        let agg = crate::aggregate::aggregate(&outcome.histories)?;
        files.extend(crate::aggregate::emit_files(&agg)?);
    }
    let hashed: Vec<(String, String)> =
        files.iter().map(|(name, body)| (name.clone(), crate::io::sha256_hex(body))).collect();
    files.push(("manifest.txt".to_string(), crate::io::manifest_text(&cfg.config_hash()?, &hashed)));
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seeds = 2;
        cfg.budget = 2;
        cfg.episode_steps = 4;
        cfg.workers = 1;
        cfg.optimizer.restarts = 4;
        cfg.optimizer.local_steps = 2;
        cfg
    }

    #[test]
    fn a_small_study_produces_ordered_complete_output() {
        let cfg = tiny_config();
        let methods = cfg.methods().unwrap();
        let outcome = run_study(&cfg, &methods).unwrap();
        assert_eq!(outcome.failed_units, 0);
        assert_eq!(outcome.total_units, 3 * 2);
        // 3 methods x 2 seeds x 2 tasks, each with budget records.
        assert_eq!(outcome.histories.len(), 12);
        assert!(outcome.histories.iter().all(|h| h.records.len() == cfg.budget));
        assert_eq!(outcome.streams.len(), 12);

        // Units merge in (method, seed) order with tasks inside.
        let order: Vec<(MethodKind, u64, &str)> = outcome
            .histories
            .iter()
            .map(|h| (h.method, h.seed_index, h.task_label.as_str()))
            .collect();
        assert_eq!(order[0], (MethodKind::Blackbox, 0, "task1"));
        assert_eq!(order[1], (MethodKind::Blackbox, 0, "task2"));
        assert_eq!(order[2], (MethodKind::Blackbox, 1, "task1"));
        assert_eq!(order[4], (MethodKind::Multitask, 0, "task1"));
        assert_eq!(order[8], (MethodKind::Hierarchical, 0, "task1"));

        // Episode noise streams are shared across methods.
        let blackbox: Vec<u64> = outcome
            .streams
            .iter()
            .filter(|s| s.method == MethodKind::Blackbox)
            .map(|s| s.checksum)
            .collect();
        let hier: Vec<u64> = outcome
            .streams
            .iter()
            .filter(|s| s.method == MethodKind::Hierarchical)
            .map(|s| s.checksum)
            .collect();
        assert_eq!(blackbox, hier);
    }

    #[test]
    fn restricting_methods_restricts_units() {
        let cfg = tiny_config();
        let outcome = run_study(&cfg, &[MethodKind::Blackbox]).unwrap();
        assert_eq!(outcome.total_units, 2);
        assert!(outcome.histories.iter().all(|h| h.method == MethodKind::Blackbox));
        assert!(outcome.bounds.is_empty());
    }
}
