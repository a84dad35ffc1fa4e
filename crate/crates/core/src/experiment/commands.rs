//! Subcommands that write artifacts under `output_dir`.
//!
//! Every file starts with the resolved config and its fingerprint (`#`
//! comments for text files, `//` for DOT, a `provenance` object for JSON).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{
    compare, coverage_table, grow_arm, initial_policy, resolve_p_branch, train, with_workers,
    ExperimentError, TRAINING_LOG_HEADER,
};
use crate::config::{Arm, ExperimentConfig};
use crate::policy::PolicyParams;
use crate::rollout::RolloutSummary;

pub const ROLLOUT_HEADER: &str =
    "task_seed,arm,group_size,successes,tree_steps,chain_steps,branch_events,branch_requests";
pub const THEORY_HEADER: &str = "q,branching,closed_form,monte_carlo,abs_error,three_sigma,within";

/// Files written by a command, plus a short human-readable summary.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

fn io_err(path: &Path, e: std::io::Error) -> ExperimentError {
    ExperimentError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn write_file(path: &Path, contents: &str) -> Result<PathBuf, ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

fn comment_header(provenance: &BTreeMap<String, String>, prefix: &str) -> String {
    provenance.iter().map(|(k, v)| format!("{prefix} {k} = {v}\n")).collect()
}

fn provenance(config: &ExperimentConfig, command: &str, extra: &[(&str, String)]) -> BTreeMap<String, String> {
    let mut map = config.provenance();
    map.insert("command".into(), command.into());
    for (k, v) in extra {
        map.insert((*k).into(), v.clone());
    }
    map
}

/// The configured checkpoint, or the (cold-started) initial policy.
pub fn starting_policy(config: &ExperimentConfig) -> Result<PolicyParams<f64>, ExperimentError> {
    match &config.policy {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            Ok(PolicyParams::from_json(&text)?)
        }
        None => initial_policy(config),
    }
}

/// One forest for `task_seed` under the configured arm.
pub fn cmd_rollout(config: &ExperimentConfig) -> Result<CommandOutput, ExperimentError> {
    config.validate()?;
    with_workers(config.workers, || rollout(config))?
}

fn rollout(config: &ExperimentConfig) -> Result<CommandOutput, ExperimentError> {
    let seed = config.seeds[0];
    let policy = starting_policy(config)?;
    let p_branch = match config.arm {
        Arm::Fixed => Some(resolve_p_branch(config, &policy, seed)?),
        _ => None,
    };
    let forest = grow_arm(config, config.arm, p_branch.unwrap_or(0.0), &policy, config.task_seed, seed)?;
    let summary = RolloutSummary::of(&forest, config.task_seed);
    let mut extra = vec![("seed", seed.to_string())];
    if let Some(p) = p_branch {
        extra.push(("p_branch_resolved", p.to_string()));
    }
    let prov = provenance(config, "rollout", &extra);
    let dir = &config.output_dir;
    let row = format!(
        "{},{},{},{},{},{},{},{}\n",
        summary.task_seed,
        config.arm,
        summary.group_size,
        summary.successes,
        summary.tree_steps,
        summary.chain_steps,
        summary.branch_events,
        summary.branch_requests
    );
    let files = vec![
        write_file(&dir.join("rollout.forest.jsonl"), &forest.to_jsonl(config.task_seed, &prov))?,
        write_file(&dir.join("rollout.dot"), &forest.to_dot(&prov))?,
        write_file(
            &dir.join("rollout.metrics.csv"),
            &format!("{}{ROLLOUT_HEADER}\n{row}", comment_header(&prov, "#")),
        )?,
    ];
    Ok(CommandOutput {
        files,
        summary: format!(
            "arm {} task {}: |G| = {}, successes = {}, tree/chain steps = {}/{}, branch events = {}",
            config.arm,
            config.task_seed,
            summary.group_size,
            summary.successes,
            summary.tree_steps,
            summary.chain_steps,
            summary.branch_events
        ),
    })
}

/// Trains one policy per seed. The log is written row by row so an
/// interrupted run leaves a valid prefix; the checkpoint holds the last
/// parameters that passed every numeric check.
pub fn cmd_train(config: &ExperimentConfig) -> Result<CommandOutput, ExperimentError> {
    config.validate()?;
    with_workers(config.workers, || train_all(config))?
}

fn train_all(config: &ExperimentConfig) -> Result<CommandOutput, ExperimentError> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::new();
    let mut report = String::new();
    let mut finals = Vec::new();
    let mut fault = None;
    for &seed in &config.seeds {
        let prov = provenance(config, "train", &[("seed", seed.to_string())]);
        let log_path = dir.join(format!("train_seed{seed}.metrics.csv"));
        let mut log = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
        log.write_all(format!("{}{TRAINING_LOG_HEADER}\n", comment_header(&prov, "#")).as_bytes())
            .map_err(|e| io_err(&log_path, e))?;
        let mut write_error = None;
        let run = train(config, seed, |row| {
            if write_error.is_none() {
                if let Err(e) = log.write_all(format!("{}\n", row.csv()).as_bytes()) {
                    write_error = Some(e);
                }
            }
        })?;
        if let Some(e) = write_error {
            return Err(io_err(&log_path, e));
        }
        files.push(log_path);
        let mut policy_prov = prov.clone();
        if let Some(p) = run.p_branch {
            policy_prov.insert("p_branch_resolved".into(), p.to_string());
        }
        let checkpoint = dir.join(format!("train_seed{seed}.policy.json"));
        files.push(write_file(&checkpoint, &run.policy.to_json(Some(&policy_prov)))?);
        let _ = writeln!(
            report,
            "seed {seed}: initial success {:.6}, final success {:.6}, iterations {}{}",
            run.initial_success,
            run.final_success(),
            run.log.len(),
            if run.fault.is_some() { " (stopped on numeric fault)" } else { "" }
        );
        finals.push(run.final_success());
        if let Some(e) = run.fault {
            fault = Some(e);
            break;
        }
    }
    let mean = finals.iter().sum::<f64>() / finals.len().max(1) as f64;
    let _ = writeln!(report, "mean final success {mean:.6}");
    let prov = provenance(config, "train", &[]);
    files.push(write_file(&dir.join("train.report.txt"), &format!("{}{report}", comment_header(&prov, "#")))?);
    if let Some(e) = fault {
        return Err(e);
    }
    Ok(CommandOutput { files, summary: report })
}

/// Runs every arm on the shared task seeds and writes the comparison report.
pub fn cmd_compare(configs: &[ExperimentConfig]) -> Result<CommandOutput, ExperimentError> {
    let workers = configs.first().map_or(0, |c| c.workers);
    let report = with_workers(workers, || compare(configs))??;
    let first = &configs[0];
    let mut header: Vec<(String, String)> = vec![
        ("command".into(), "compare".into()),
        ("tasks".into(), report.task_seeds.len().to_string()),
        ("seeds".into(), first.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
    ];
    for (i, c) in configs.iter().enumerate() {
        for (k, v) in c.provenance() {
            let label = if configs.len() == 1 { k } else { format!("config{i}.{k}") };
            header.push((label, v));
        }
    }
    let text = report.render(&header);
    let path = write_file(&first.output_dir.join("compare.report.txt"), &text)?;
    Ok(CommandOutput { files: vec![path], summary: text })
}

/// Coverage probability table on the standard grid.
pub fn cmd_theory(config: &ExperimentConfig) -> Result<CommandOutput, ExperimentError> {
    if config.trials == 0 {
        return Err(crate::config::ConfigError::Invalid("trials must be at least 1".into()).into());
    }
    let seed = config.seeds.first().copied().unwrap_or(0);
    let cells = with_workers(config.workers, || {
        coverage_table(&super::COVERAGE_Q, &super::COVERAGE_BRANCHING, config.trials, seed)
    })??;
    let prov = provenance(config, "theory", &[("seed", seed.to_string())]);
    let mut text = comment_header(&prov, "#");
    text.push_str(THEORY_HEADER);
    text.push('\n');
    let mut inside = 0;
    for c in &cells {
        inside += c.within_bound() as usize;
        let _ = writeln!(
            text,
            "{},{},{:.6},{:.6},{:.6},{:.6},{}",
            c.q, c.branching, c.closed_form, c.monte_carlo, c.abs_error, c.three_sigma, c.within_bound()
        );
    }
    let path = write_file(&config.output_dir.join("theory.metrics.csv"), &text)?;
    Ok(CommandOutput {
        files: vec![path],
        summary: format!("{inside}/{} cells within 3 sigma", cells.len()),
    })
}
