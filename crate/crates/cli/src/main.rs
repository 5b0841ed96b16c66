use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use fedgov::data::{generate_cohort, preset, preset_names, write_embeddings_csv};
use fedgov::experiment::{read_results, render_report, run_experiment, ExperimentConfig, TransportMode};
use fedgov::governance::{read_public_key, verify_file, ChainStatus};
use fedgov::Error;

/// Exit status for a run stopped by a policy decision.
const EXIT_DENIED: u8 = 3;
/// Exit status when an audit chain fails verification.
const EXIT_BROKEN: u8 = 1;
const EXIT_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "fedgov", version, about = "Governed federated learning experiments")]
struct Cli {
    /// Log filter, e.g. `info` or `fedgov=debug`.
    #[arg(long, global = true, env = "FEDGOV_LOG", default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Memory,
    Tcp,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic site cohorts as CSV with a provenance sidecar.
    GenerateData {
        #[arg(long, required = true, num_args = 1..)]
        preset: Vec<String>,
        #[arg(long, default_value_t = fedgov::experiment::DEFAULT_SCALE)]
        scale: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the strategies listed in an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "memory")]
        transport: TransportArg,
        /// Overrides `output_dir` from the config.
        #[arg(long, env = "FEDGOV_OUTPUT_DIR")]
        output_dir: Option<PathBuf>,
    },
    /// Check an audit log against a node's public key.
    VerifyAudit {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        key: PathBuf,
    },
    /// Render the results table from a results file.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
}

fn generate(presets: &[String], scale: f64, seed: u64, out: &PathBuf) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for name in presets {
        let spec = preset(name, scale).with_context(|| format!("known presets: {}", preset_names().join(", ")))?;
        let ds = generate_cohort(&spec, seed)?;
        let csv = out.join(format!("{}.csv", spec.site_id));
        write_embeddings_csv(&ds, &csv)?;
        let provenance = json!({ "preset": name, "scale": scale, "seed": seed, "rows": ds.len(), "spec": spec });
        fs::write(out.join(format!("{}.provenance.json", spec.site_id)), serde_json::to_string_pretty(&provenance)? + "\n")?;
        println!("{}", csv.display());
    }
    Ok(())
}

fn run(config: &PathBuf, transport: TransportArg, output_dir: Option<PathBuf>) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    let mode = match transport {
        TransportArg::Memory => TransportMode::Memory,
        TransportArg::Tcp => TransportMode::Tcp,
    };
    match run_experiment(&cfg, mode) {
        Ok(out) => {
            print!("{}", out.report);
            println!("results written to {}", out.dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(Error::PolicyDenied { subject, action, resource, decision }) => {
            eprintln!("policy denied {action} for {subject} on {resource}");
            eprintln!("{decision}");
            Ok(ExitCode::from(EXIT_DENIED))
        }
        Err(e) => Err(e.into()),
    }
}

fn verify(log: &PathBuf, key: &PathBuf) -> Result<ExitCode> {
    let key = read_public_key(key)?;
    match verify_file(log, &key)? {
        ChainStatus::Ok => {
            println!("ok");
            Ok(ExitCode::SUCCESS)
        }
        broken @ ChainStatus::Broken { .. } => {
            println!("{broken}");
            Ok(ExitCode::from(EXIT_BROKEN))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    let result = match cli.command {
        Command::GenerateData { preset, scale, seed, out } => generate(&preset, scale, seed, &out).map(|()| ExitCode::SUCCESS),
        Command::Run { config, transport, output_dir } => run(&config, transport, output_dir),
        Command::VerifyAudit { log, key } => verify(&log, &key),
        Command::Report { results } => read_results(&results).map(|r| {
            print!("{}", render_report(&r));
            ExitCode::SUCCESS
        }).map_err(Into::into),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
