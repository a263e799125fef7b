// bilevel — experiment runner.
//
//   bilevel list [--params]
//   bilevel check <config> [--set key=value ...]
//   bilevel run   <config> [--set key=value ...]
//
// Artifacts land in $BILEVEL_OUTPUT_ROOT/<output.dir> (root defaults to
// ./output). Failures print a JSON error record on stderr.

mod config;
mod error;
mod experiments;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::RawConfig;
use crate::error::CliError;
use crate::experiments::{Experiment, REGISTRY};

#[derive(Parser)]
#[command(name = "bilevel", version, about = "Run bilevel optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts
    Run(ConfigArgs),
    /// Validate a configuration and print it with every default filled in
    Check(ConfigArgs),
    /// List registered experiments
    List {
        /// Also print each experiment's parameters and defaults
        #[arg(long)]
        params: bool,
    },
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file (`key = value` lines or JSON)
    config: Option<PathBuf>,
    /// Override or add a key; may be repeated
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn load(args: &ConfigArgs) -> Result<RawConfig, CliError> {
    let mut raw = match &args.config {
        Some(path) => config::read_raw(path)?,
        None => RawConfig::new(),
    };
    for item in &args.set {
        let (k, v) = item.split_once('=').ok_or_else(|| CliError::Syntax {
            line: 0,
            message: format!("--set expects KEY=VALUE, found `{item}`"),
        })?;
        raw.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(raw)
}

fn resolve(raw: &RawConfig) -> Result<(&'static Experiment, config::Resolved), CliError> {
    let name = raw.get("experiment").ok_or(CliError::MissingExperiment)?;
    let exp = experiments::find(name)?;
    let cfg = config::resolve(exp.name, raw, &exp.schema(), |k, p| exp.auto_default(k, p))?;
    Ok((exp, cfg))
}

fn report(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code() as u8)
}

fn list(params: bool) {
    for e in &REGISTRY {
        println!("{:<18} {}", e.name, e.description);
        if params {
            for p in e.schema() {
                println!("    {:<30} {:<12} {}", p.key, p.default, p.doc);
            }
        }
    }
}

fn run(args: &ConfigArgs) -> ExitCode {
    let (exp, cfg) = match load(args).and_then(|raw| resolve(&raw)) {
        Ok(v) => v,
        Err(e) => return report(&e),
    };
    let dir = output::output_dir(cfg.str("output.dir"));
    if let Err(e) = output::prepare(&dir) {
        return report(&e);
    }
    log::info!("running {} into {}", exp.name, dir.display());
    let started = Instant::now();
    let result = exp.run(&cfg);
    let wall = started.elapsed().as_secs_f64();

    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            let mut record = e.to_json();
            record["resolved_config"] = cfg.to_json();
            let _ = output::write_json(&dir.join("error.json"), &record);
            return report(&e);
        }
    };
    let artifacts = match output::write_tables(&dir, &outcome.tables) {
        Ok(a) => a,
        Err(e) => return report(&e),
    };
    let manifest = json!({
        "experiment": exp.name,
        "status": if outcome.failure.is_some() { "failed" } else { outcome.status },
        "resolved_config": cfg.to_json(),
        "artifacts": artifacts,
        "summary": outcome.summary,
        "wall_time_seconds": wall,
        "library_version": bilevel_core::VERSION,
    });
    if let Err(e) = output::write_json(&dir.join("manifest.json"), &manifest) {
        return report(&e);
    }
    if let Some(reason) = outcome.failure {
        let record = json!({ "error": "experiment_failure", "message": reason, "partial_artifacts": artifacts.len() });
        let _ = output::write_json(&dir.join("error.json"), &record);
        eprintln!("{record}");
        return ExitCode::from(1);
    }
    println!("{}", dir.join("manifest.json").display());
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::List { params } => {
            list(params);
            ExitCode::SUCCESS
        }
        Command::Check(args) => match load(&args).and_then(|raw| resolve(&raw)) {
            Ok((_, cfg)) => {
                println!("{}", serde_json::to_string_pretty(&cfg.to_json()).expect("json"));
                ExitCode::SUCCESS
            }
            Err(e) => report(&e),
        },
        Command::Run(args) => run(&args),
    }
}
