//! `spark` experiment runner.
//!
//! Every subcommand reads zero or more `--config` files, applies `--key value`
//! overrides (one flag per config key), and writes artifacts under
//! `output_dir`. Exit codes: 0 success, 2 config error, 3 numeric fault.

use std::fs;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use spark_core::config::{ConfigError, ExperimentConfig};
use spark_core::experiment::{cmd_compare, cmd_rollout, cmd_theory, cmd_train, ExperimentError};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Short aliases accepted alongside the long key names.
const ALIASES: [(&str, &str); 4] = [("budget", "N"), ("roots", "M"), ("branching", "B"), ("horizon", "K")];

fn subcommand(name: &'static str, about: &'static str, many_configs: bool) -> Command {
    let mut cmd = Command::new(name).about(about).arg(
        Arg::new("config")
            .long("config")
            .short('c')
            .value_name("FILE")
            .action(if many_configs { ArgAction::Append } else { ArgAction::Set })
            .help(if many_configs {
                "Config file; repeat to compare several configs"
            } else {
                "Config file (`key = value` lines)"
            }),
    );
    for (key, default) in ExperimentConfig::default().entries() {
        let mut arg = Arg::new(key)
            .long(key)
            .value_name("VALUE")
            .allow_hyphen_values(true)
            .help(format!("Override `{key}` (default: {default})"));
        if let Some((_, alias)) = ALIASES.iter().find(|(k, _)| *k == key) {
            arg = arg.alias(*alias);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn cli() -> Command {
    Command::new("spark")
        .about("Budget-constrained branching rollouts and tree-based GRPO experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(subcommand("rollout", "Grow one trajectory forest and export it", false))
        .subcommand(subcommand("train", "Train a policy per seed and checkpoint it", false))
        .subcommand(subcommand("compare", "Run every arm on shared task seeds with paired tests", true))
        .subcommand(subcommand("theory", "Closed-form vs Monte Carlo coverage table", false))
}

fn read_config(path: &str) -> Result<ExperimentConfig, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    ExperimentConfig::from_text(&text).map_err(|e| format!("{path}: {e}"))
}

fn apply_overrides(config: &mut ExperimentConfig, matches: &ArgMatches) -> Result<(), ConfigError> {
    for (key, _) in ExperimentConfig::default().entries() {
        if let Some(value) = matches.get_one::<String>(key) {
            config.set(key, value)?;
        }
    }
    config.validate()
}

fn configs(matches: &ArgMatches) -> Result<Vec<ExperimentConfig>, String> {
    let paths: Vec<&String> = matches.get_many::<String>("config").map(Iterator::collect).unwrap_or_default();
    let mut configs = if paths.is_empty() {
        vec![ExperimentConfig::default()]
    } else {
        paths.into_iter().map(|p| read_config(p)).collect::<Result<_, _>>()?
    };
    for config in &mut configs {
        apply_overrides(config, matches).map_err(|e| e.to_string())?;
    }
    Ok(configs)
}

fn run(name: &str, configs: &[ExperimentConfig]) -> Result<String, ExperimentError> {
    let config = &configs[0];
    let output = match name {
        "rollout" => cmd_rollout(config)?,
        "train" => cmd_train(config)?,
        "compare" => cmd_compare(configs)?,
        "theory" => cmd_theory(config)?,
        other => unreachable!("unknown subcommand {other}"),
    };
    let mut text = output.summary;
    if !text.ends_with('\n') {
        text.push('\n');
    }
    for file in output.files {
        text.push_str(&format!("wrote {}\n", file.display()));
    }
    Ok(text)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let configs = match configs(sub) {
        Ok(c) => c,
        Err(message) => {
            eprintln!("config error: {message}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run(name, &configs) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) if e.is_config() => {
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) if e.is_numeric() => {
            eprintln!("numeric fault: {e}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_OTHER)
        }
    }
}
