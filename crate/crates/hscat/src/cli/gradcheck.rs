//! `hscat gradcheck`: finite-difference verification of every autodiff op
//! and of the ray-marcher adjoint. Any failing entry exits with the
//! numerical-failure code.

use clap::Args;
use hscat_core::autodiff::{ops_fd_report, CheckReport};
use hscat_core::render::adjoint_fd_report;
use serde::Deserialize;
use serde_json::json;

use crate::error::{HscatError, Result};
use crate::override_map;

use super::{resolve, Cli};

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed for the randomized instances.
    #[arg(long)]
    pub seed: u64,
    /// "ops", "adjoint", or "all".
    #[arg(long)]
    pub suite: Option<String>,
    /// Randomized adjoint instances to verify.
    #[arg(long)]
    pub adjoint_instances: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckCfg {
    suite: String,
    adjoint_instances: usize,
}

pub fn run(cli: &Cli, args: &GradcheckArgs) -> Result<serde_json::Value> {
    let overrides = override_map!(
        "suite" => args.suite,
        "adjoint_instances" => args.adjoint_instances,
    );
    let (cfg, _) = resolve::<GradcheckCfg>("gradcheck", cli.config.as_deref(), overrides)?;

    let report: CheckReport = match cfg.suite.as_str() {
        "ops" => ops_fd_report(args.seed),
        "adjoint" => adjoint_fd_report(args.seed, cfg.adjoint_instances),
        "all" => {
            let mut r = ops_fd_report(args.seed);
            r.entries
                .extend(adjoint_fd_report(args.seed, cfg.adjoint_instances).entries);
            r
        }
        other => {
            return Err(HscatError::validation(format!(
                "suite must be ops, adjoint, or all — got {other:?}"
            )))
        }
    };

    let mut failures = 0usize;
    for e in &report.entries {
        let status = if e.pass() { "pass" } else { "FAIL" };
        if !e.pass() {
            failures += 1;
        }
        if !cli.json {
            println!(
                "{status}  {name}  rel_err {err:.3e}  tol {tol:.0e}",
                name = e.name,
                err = e.max_rel_err,
                tol = e.tol
            );
        }
    }
    if failures > 0 {
        return Err(HscatError::numerical(format!(
            "{failures}/{} gradient checks failed",
            report.entries.len()
        )));
    }

    Ok(json!({
        "suite": cfg.suite,
        "checks": report.entries.len(),
        "failures": failures,
        "max_rel_err": report
            .entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0f64, f64::max),
    }))
}
