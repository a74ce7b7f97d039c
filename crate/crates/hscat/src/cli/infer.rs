//! `hscat infer`: feed-forward reconstruction of one dataset sample.

use std::path::PathBuf;

use clap::Args;
use hscat_core::metrics::{masked_mae, masked_mse};
use hscat_core::tensois::infer;
use serde::Deserialize;
use serde_json::json;

use crate::checkpoint::load_model;
use crate::container::{ContainerWriter, Role};
use crate::error::{HscatError, Result};
use crate::manifest::{self, load_gt, luminance_views};
use crate::override_map;
use crate::pfm;
use crate::rundir::{config_hash, RunDir};

use super::{resolve, Cli, OutArg};

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint produced by `hscat train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset root directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Sample id within the dataset.
    #[arg(long)]
    pub sample: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InferCfg {
    sample: u64,
}

pub fn run(cli: &Cli, args: &InferArgs) -> Result<serde_json::Value> {
    let overrides = override_map!("sample" => args.sample);
    let (cfg, mut echo) = resolve::<InferCfg>("infer", cli.config.as_deref(), overrides)?;
    echo["model"] = json!(args.model.to_string_lossy());
    echo["dataset"] = json!(args.dataset.to_string_lossy());

    let ck = load_model(&args.model)?;
    let m = manifest::load(&args.dataset)?;
    let entry = m
        .samples
        .iter()
        .find(|s| s.id == cfg.sample)
        .ok_or_else(|| {
            HscatError::validation(format!("dataset has no sample id {}", cfg.sample))
        })?;
    let mut views = Vec::with_capacity(entry.views.len());
    for rel in &entry.views {
        views.push(pfm::read_image(&args.dataset.join(rel))?);
    }
    let gt = load_gt(&args.dataset, entry)?;

    let model_hash = config_hash(
        ck.meta
            .get("model_config")
            .ok_or_else(|| HscatError::Format("checkpoint missing model_config".into()))?,
    );

    let run = RunDir::create(&args.out.out)?;
    let run_hash = run.write_resolved_config(&echo)?;
    let (field, pred) = infer(&ck.model, &luminance_views(&views), &gt.mask)
        .map_err(|e| HscatError::numerical(format!("inference: {e}")))?;

    let mae_sigma = masked_mae(&field.sigma, &gt.sigma, &gt.mask)
        .map_err(|e| HscatError::numerical(format!("metrics: {e}")))?;
    let mae_alpha = masked_mae(&field.albedo, &gt.alpha, &gt.mask)
        .map_err(|e| HscatError::numerical(format!("metrics: {e}")))?;
    let mse_sigma = masked_mse(&field.sigma, &gt.sigma, &gt.mask)
        .map_err(|e| HscatError::numerical(format!("metrics: {e}")))?;

    let meta = json!({
        "kind": "field",
        "predicted_from_sample": entry.id,
        "scale": field.scale,
        "s_hat": pred.s_hat,
        "model_config_hash": model_hash,
        "dataset_hash": m.hash,
        "config_hash": run_hash,
    });
    let mut w = ContainerWriter::new(meta);
    w.add_grid("sigma", Role::Sigma, &field.sigma);
    w.add_grid("alpha", Role::Alpha, &field.albedo);
    w.add_grid("mask", Role::Mask, &gt.mask);
    w.write_to(&run.file("prediction.hsct"))?;

    let report = json!({
        "sample": entry.id,
        "mae_sigma": mae_sigma,
        "mae_alpha": mae_alpha,
        "mse_sigma": mse_sigma,
        "scale_hat": field.scale,
        "scale_gt": gt.scale,
        "model_config_hash": model_hash,
        "dataset_hash": m.hash,
    });
    run.write_json("report.json", &report)?;
    run.finish()?;

    let mut summary = report;
    summary["prediction"] = json!(args.out.out.join("prediction.hsct").to_string_lossy());
    Ok(summary)
}
