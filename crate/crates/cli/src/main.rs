use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use motionforge_cli::commands::{cmd_collect, cmd_report, cmd_train_matcher, cmd_train_rl, cmd_validate_spec, CliError};
use motionforge_cli::config::KEYS;
use motionforge_cli::effective_config;

fn heading(section: &str) -> &'static str {
    match section {
        "run" => "Run keys",
        "reward" => "Reward keys",
        "collect" => "Collect keys",
        "matcher" => "Matcher keys",
        _ => "RL keys",
    }
}

/// `--config` plus one flag per config key.
fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("key = value config file")];
    for (section, key, help) in KEYS {
        args.push(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .help(*help)
                .help_heading(heading(section)),
        );
    }
    args
}

fn cli() -> Command {
    let sub = |name: &'static str, about: &'static str| Command::new(name).about(about).args(config_args());
    Command::new("motionforge")
        .about("Motion-matching rewards: data collection, matcher training, RL runs and reports")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("collect", "Generate a labelled transition dataset"))
        .subcommand(sub("train-matcher", "Train the image-pair motion matcher"))
        .subcommand(sub("train-rl", "Train DDPG agents, one per seed"))
        .subcommand(
            sub("report", "Summarize runs and plot success rates")
                .arg(Arg::new("runs").num_args(0..).value_name("DIR").help("run directories or metrics files")),
        )
        .subcommand(
            sub("validate-spec", "Parse and validate a task DSL file")
                .arg(Arg::new("file").required(true).value_name("FILE")),
        )
        .subcommand(sub("show-config", "Print the effective configuration"))
}

fn run(name: &str, m: &ArgMatches) -> Result<(), CliError> {
    let flags: Vec<(&str, String)> = KEYS
        .iter()
        .filter_map(|(_, k, _)| m.get_one::<String>(k).map(|v| (*k, v.clone())))
        .collect();
    let cfg = effective_config(
        m.get_one::<String>("config").map(String::as_str),
        std::env::var("MOTIONFORGE_OUT").ok(),
        &flags,
    )
    .map_err(CliError::Usage)?;
    match name {
        "collect" => cmd_collect(&cfg).map(drop),
        "train-matcher" => cmd_train_matcher(&cfg).map(drop),
        "train-rl" => cmd_train_rl(&cfg).map(drop),
        "report" => {
            let runs: Vec<PathBuf> = m.get_many::<String>("runs").into_iter().flatten().map(PathBuf::from).collect();
            cmd_report(&cfg, &runs).map(drop)
        }
        "validate-spec" => cmd_validate_spec(&cfg, &PathBuf::from(m.get_one::<String>("file").expect("required"))),
        "show-config" => {
            print!("{}", cfg.to_text());
            Ok(())
        }
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
