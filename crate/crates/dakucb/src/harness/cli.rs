//! Command-line interface: `run`, `score`, `oracle`, `validate`.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime error.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::env::load_embeddings;
use crate::kernels::{median_pairwise_distance, JointKernelSpec, KernelSpec};
use crate::scores::{i_jrke, joint_kd, kd_squared, rke, vendi_joint, Estimator, ScoreReport};
use crate::{Error, Result};

use super::config::{resolve, RunConfig};
use super::report::emit_report;
use super::runner::{oracle_arm, run_experiment};

#[derive(Parser)]
#[command(
    name = "dakucb",
    about = "Diversity-aware kernelized bandit simulator for online generator selection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured experiment and emit rounds.csv / evals.csv / summary.json.
    Run {
        /// TOML run configuration.
        config: PathBuf,
        /// Override config keys, e.g. --set policy.lambda=0.5 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory override.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the arm columns of an embedding file.
    Score {
        /// JSON-Lines embedding dataset.
        file: PathBuf,
        #[arg(long, value_enum)]
        metric: MetricArg,
        /// Reference arm id for the distance metrics (kd, jkd).
        #[arg(long, default_value = "0")]
        reference: String,
        /// Output-kernel bandwidth; median heuristic when omitted.
        #[arg(long)]
        sigma: Option<f64>,
        /// Prompt-kernel bandwidth; median heuristic when omitted.
        #[arg(long)]
        text_sigma: Option<f64>,
    },
    /// Compute the one-arm oracle for a configured environment.
    Oracle {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Validate a configuration and print "ok".
    Validate {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Rke,
    Ijrke,
    Jkd,
    Vendi,
    Kd,
}

/// Entry point for the binary; argv without the program name.
pub fn cli_main(args: &[String]) -> i32 {
    let mut argv: Vec<String> = vec!["dakucb".to_string()];
    argv.extend_from_slice(args);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(err) => {
            // clap renders both --help/--version and usage errors
            let _ = err.print();
            return if err.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("error: {}", failure.error);
            failure.code
        }
    }
}

/// An error tagged with the exit code it maps to: 1 for anything caught
/// before execution starts (config/schema/argument problems), 2 afterwards.
struct CliFailure {
    code: i32,
    error: Error,
}

fn validation(error: Error) -> CliFailure {
    let code = match error {
        Error::Io { .. } => 2,
        _ => 1,
    };
    CliFailure { code, error }
}

fn runtime(error: Error) -> CliFailure {
    CliFailure { code: 2, error }
}

fn dispatch(cli: Cli) -> std::result::Result<(), CliFailure> {
    match cli.command {
        Command::Validate { config, set } => {
            let config = RunConfig::load(&config, &set).map_err(validation)?;
            config.validate().map_err(validation)?;
            resolve(&config).map_err(validation)?;
            println!("ok");
            Ok(())
        }
        Command::Run { config, set, out } => {
            let mut config = RunConfig::load(&config, &set).map_err(validation)?;
            if let Some(dir) = out {
                config.output.dir = dir;
            }
            resolve(&config).map_err(validation)?;
            let log = run_experiment(&config).map_err(runtime)?;
            let paths = emit_report(&log, &config.output.dir).map_err(runtime)?;
            for path in &paths {
                println!("wrote {}", path.display());
            }
            let ratios: Vec<String> = log
                .summary
                .selection_ratios
                .iter()
                .map(|s| format!("{:.3}", s.mean))
                .collect();
            println!("selection ratios: [{}]", ratios.join(", "));
            Ok(())
        }
        Command::Oracle { config, set } => {
            let config = RunConfig::load(&config, &set).map_err(validation)?;
            let resolved = resolve(&config).map_err(validation)?;
            let arm = oracle_arm(&resolved, config.seed).map_err(runtime)?;
            println!("oracle arm: {arm}");
            Ok(())
        }
        Command::Score {
            file,
            metric,
            reference,
            sigma,
            text_sigma,
        } => score_command(&file, metric, &reference, sigma, text_sigma).map_err(validation),
    }
}

fn score_command(
    file: &std::path::Path,
    metric: MetricArg,
    reference: &str,
    sigma: Option<f64>,
    text_sigma: Option<f64>,
) -> Result<()> {
    let dataset = load_embeddings(file)?;
    let arm_ids = dataset.arm_ids().to_vec();
    let reference_idx = arm_ids
        .iter()
        .position(|id| id == reference)
        .ok_or_else(|| {
            Error::invalid(format!(
                "reference arm '{reference}' not in dataset (arms: {arm_ids:?})"
            ))
        })?;

    let prompts: Vec<Vec<f64>> = dataset
        .records()
        .iter()
        .map(|r| r.prompt_vec.clone())
        .collect();
    let all_outputs: Vec<Vec<f64>> = dataset
        .records()
        .iter()
        .flat_map(|r| r.outputs.values().cloned())
        .collect();
    let data_spec = KernelSpec::Gaussian {
        sigma: sigma.unwrap_or_else(|| median_pairwise_distance(&all_outputs).unwrap_or(1.0)),
    };
    let text_spec = KernelSpec::Gaussian {
        sigma: text_sigma.unwrap_or_else(|| median_pairwise_distance(&prompts).unwrap_or(1.0)),
    };
    let squared = JointKernelSpec::squared(text_spec.clone(), data_spec.clone());
    let unsquared = JointKernelSpec::new(text_spec, data_spec.clone());

    let reference_corpus = dataset.arm_corpus(reference_idx)?;
    let mut reports = Vec::new();
    for (idx, id) in arm_ids.iter().enumerate() {
        let corpus = dataset.arm_corpus(idx)?;
        let n = corpus.len();
        let (name, value) = match metric {
            MetricArg::Rke => ("rke", rke(&corpus.outputs(), &data_spec)?),
            MetricArg::Ijrke => ("i_jrke", i_jrke(&corpus, &squared)?),
            MetricArg::Vendi => ("vendi_joint_proxy", vendi_joint(&corpus, &unsquared)?),
            MetricArg::Kd => (
                "kd_squared",
                kd_squared(
                    &corpus.outputs(),
                    &reference_corpus.outputs(),
                    &data_spec,
                    Estimator::VStatistic,
                )?,
            ),
            MetricArg::Jkd => ("jkd", joint_kd(&corpus, &reference_corpus, &unsquared)?),
        };
        reports.push((
            id.clone(),
            ScoreReport::new(name, value, n, Estimator::VStatistic),
        ));
    }
    for (id, report) in &reports {
        println!(
            "{} arm={} n={} value={}",
            report.name, id, report.n, report.value
        );
    }
    Ok(())
}
