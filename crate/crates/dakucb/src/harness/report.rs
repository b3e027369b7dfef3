//! CSV and JSON emission of a run's metrics.
//!
//! Determinism contract: `rounds.csv` and `evals.csv` are byte-identical for
//! identical (config, seed); `summary.json` matches except for the
//! `wall_clock_seconds` field.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

use super::runner::MetricsLog;

/// Writes `rounds.csv`, `evals.csv` and `summary.json` into `dir`, creating
/// it if needed. Returns the written paths.
pub fn emit_report(log: &MetricsLog, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
    let rounds_path = dir.join("rounds.csv");
    let evals_path = dir.join("evals.csv");
    let summary_path = dir.join("summary.json");

    write_file(&rounds_path, &rounds_csv(log))?;
    write_file(&evals_path, &evals_csv(log))?;
    let summary = serde_json::to_string_pretty(&log.summary)
        .map_err(|e| Error::Schema(format!("summary serialization: {e}")))?;
    write_file(&summary_path, &(summary + "\n"))?;
    Ok(vec![rounds_path, evals_path, summary_path])
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Header: `trial,round,cluster,arm,alpha_0..alpha_{G-1},y_fid,y_div,ucb_0..ucb_{G-1}`.
pub fn rounds_csv(log: &MetricsLog) -> String {
    let arms = log.arm_count;
    let mut out = String::from("trial,round,cluster,arm");
    for g in 0..arms {
        let _ = write!(out, ",alpha_{g}");
    }
    out.push_str(",y_fid,y_div");
    for g in 0..arms {
        let _ = write!(out, ",ucb_{g}");
    }
    out.push('\n');
    for run in &log.runs {
        for record in &run.rounds {
            let _ = write!(
                out,
                "{},{},{},{}",
                run.trial, record.round, record.cluster, record.arm
            );
            for w in &record.weights {
                let _ = write!(out, ",{w}");
            }
            let _ = write!(out, ",{},{}", record.fidelity_label, record.diversity_label);
            for s in &record.scores {
                let _ = write!(out, ",{s}");
            }
            out.push('\n');
        }
    }
    out
}

/// Header: `trial,round,rke,i_jrke,jkd,vendi_proxy,mean_fid`.
pub fn evals_csv(log: &MetricsLog) -> String {
    let mut out = String::from("trial,round,rke,i_jrke,jkd,vendi_proxy,mean_fid\n");
    for run in &log.runs {
        for eval in &run.evals {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                run.trial,
                eval.round,
                eval.rke,
                eval.i_jrke,
                eval.jkd,
                eval.vendi_proxy,
                eval.mean_fidelity
            );
        }
    }
    out
}
