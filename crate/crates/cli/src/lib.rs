//! Library side of the `wsiattn` command: run configuration, case
//! directories, the report pipeline, and prediction plumbing.

pub mod case;
pub mod config;
pub mod predict;

use std::path::PathBuf;

use anyhow::{Context, Result};
use rayon::prelude::*;

pub use case::{run_report, write_case_dir, CaseInput, ReportOutcome};
pub use config::{Metadata, RunConfig};

/// Runs `run_report` over several cases on at most `jobs` threads and writes
/// a combined `report.csv` when any case was annotated. Results keep the
/// input order; a failed case does not stop the others.
pub fn run_reports(case_dirs: &[PathBuf], config: &RunConfig, jobs: usize) -> Result<Vec<Result<ReportOutcome>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building thread pool")?;
    let outcomes: Vec<Result<ReportOutcome>> =
        pool.install(|| case_dirs.par_iter().map(|dir| run_report(dir, config)).collect());
    if case_dirs.len() > 1 {
        let reports: Vec<_> = outcomes
            .iter()
            .filter_map(|o| o.as_ref().ok().and_then(|o| o.report.clone()))
            .collect();
        if !reports.is_empty() {
            let mut bytes = Vec::new();
            wsi_attention::metrics::write_case_reports(&reports, &mut bytes)?;
            config::write_file(&config.output_dir.join("report.csv"), bytes)?;
        }
    }
    Ok(outcomes)
}
