//! Config-driven experiment runner and CLI: multi-trial execution, periodic
//! score evaluation over accumulated histories, and CSV/JSON emission.

mod cli;
pub mod config;
mod report;
mod runner;

pub use cli::cli_main;
pub use config::{
    resolve, ArmSection, ConfidenceSection, EnvKind, EnvSection, EnvTemplate, KernelConfig,
    KernelsSection, ModeKind, OutputSection, PolicyKind, PolicySection, ResolvedExperiment,
    RunConfig, SamplerSection, ScorerKind, ScorerSection,
};
pub use report::{emit_report, evals_csv, rounds_csv};
pub use runner::{oracle_arm, run_experiment, EvalRow, MetricsLog, Stat, Summary, TrialRun};
