//! `hscat eval`: volume metrics of a checkpoint over a dataset split, with
//! an optional homogeneous-media probe.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use hscat_core::geometry::{grid_sdf, occupancy_mask};
use hscat_core::metrics::{homo_eval, masked_mae, HomoEvalConfig};
use hscat_core::tensois::infer;
use serde::Deserialize;
use serde_json::json;

use crate::checkpoint::load_model;
use crate::error::{HscatError, Result};
use crate::manifest::{self, load_gt, luminance_views, make_mesh};
use crate::override_map;
use crate::pfm;
use crate::rundir::{config_hash, RunDir};

use super::{resolve, Cli, OutArg};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint produced by `hscat train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset root directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// "train" or "val".
    #[arg(long)]
    pub split: Option<String>,
    /// Homogeneous-protocol draws per shape (0 disables the probe).
    #[arg(long)]
    pub homo_draws: Option<usize>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalCfg {
    split: String,
    homo_draws: usize,
}

pub fn run(cli: &Cli, args: &EvalArgs) -> Result<serde_json::Value> {
    let overrides = override_map!(
        "split" => args.split,
        "homo_draws" => args.homo_draws,
    );
    let (cfg, mut echo) = resolve::<EvalCfg>("eval", cli.config.as_deref(), overrides)?;
    if cfg.split != "train" && cfg.split != "val" {
        return Err(HscatError::validation(format!(
            "split must be train or val, got {:?}",
            cfg.split
        )));
    }
    echo["model"] = json!(args.model.to_string_lossy());
    echo["dataset"] = json!(args.dataset.to_string_lossy());

    let ck = load_model(&args.model)?;
    let m = manifest::load(&args.dataset)?;
    let model_hash = config_hash(
        ck.meta
            .get("model_config")
            .ok_or_else(|| HscatError::Format("checkpoint missing model_config".into()))?,
    );

    let run = RunDir::create(&args.out.out)?;
    let run_hash = run.write_resolved_config(&echo)?;

    let ids: Vec<usize> = m
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == cfg.split)
        .map(|(i, _)| i)
        .collect();
    if ids.is_empty() {
        return Err(HscatError::validation(format!(
            "split {:?} has no samples",
            cfg.split
        )));
    }
    let mut per_sample = Vec::with_capacity(ids.len());
    let mut sum_sigma = 0.0;
    let mut sum_alpha = 0.0;
    for &i in &ids {
        let entry = &m.samples[i];
        let mut views = Vec::with_capacity(entry.views.len());
        for rel in &entry.views {
            views.push(pfm::read_image(&args.dataset.join(rel))?);
        }
        let gt = load_gt(&args.dataset, entry)?;
        let (field, _) = infer(&ck.model, &luminance_views(&views), &gt.mask)
            .map_err(|e| HscatError::numerical(format!("inference: {e}")))?;
        let mae_sigma = masked_mae(&field.sigma, &gt.sigma, &gt.mask)
            .map_err(|e| HscatError::numerical(format!("metrics: {e}")))?;
        let mae_alpha = masked_mae(&field.albedo, &gt.alpha, &gt.mask)
            .map_err(|e| HscatError::numerical(format!("metrics: {e}")))?;
        sum_sigma += mae_sigma;
        sum_alpha += mae_alpha;
        per_sample.push(json!({
            "sample": entry.id,
            "mae_sigma": mae_sigma,
            "mae_alpha": mae_alpha,
        }));
    }
    let mae_sigma = sum_sigma / ids.len() as f64;
    let mae_alpha = sum_alpha / ids.len() as f64;

    let mut report = json!({
        "split": cfg.split,
        "samples": ids.len(),
        "mae_sigma": mae_sigma,
        "mae_alpha": mae_alpha,
        "per_sample": per_sample,
        "model_config_hash": model_hash,
        "dataset_hash": m.hash,
        "config_hash": run_hash,
    });

    if cfg.homo_draws > 0 {
        // One occupancy mask per dataset shape, regenerated from its seed.
        let mut masks = Vec::new();
        let mut shape_names = BTreeMap::new();
        for (si, (name, me)) in m.meshes.iter().enumerate() {
            let mesh = make_mesh(name, me.seed)?;
            let sdf = grid_sdf(&mesh, &m.params.spec())
                .map_err(|e| HscatError::numerical(format!("voxelize: {e}")))?;
            masks.push(occupancy_mask(&sdf));
            shape_names.insert(si, name.clone());
        }
        let mut model = ck.model.clone();
        let hcfg = HomoEvalConfig {
            draws: cfg.homo_draws,
            ..HomoEvalConfig::desk()
        };
        let homo = homo_eval(
            &mut model,
            m.params.grid,
            m.params.image,
            &masks,
            &hcfg,
        )
        .map_err(|e| HscatError::numerical(format!("homogeneous eval: {e}")))?;
        report["homo"] = json!({
            "draws_per_shape": cfg.homo_draws,
            "mae_sigma_norm": homo.mae_sigma_norm,
            "mae_alpha": homo.mae_alpha,
            "samples": homo
                .samples
                .iter()
                .map(|s| {
                    json!({
                        "shape": shape_names.get(&s.shape),
                        "draw": s.draw,
                        "gt_sigma_t": s.gt_sigma_t,
                        "gt_alpha": s.gt_alpha,
                        "mean_sigma_t": s.mean_sigma_t,
                        "std_sigma_t": s.std_sigma_t,
                        "mean_alpha": s.mean_alpha,
                        "std_alpha": s.std_alpha,
                    })
                })
                .collect::<Vec<_>>(),
        });
    }

    run.write_json("metrics.json", &report)?;
    run.finish()?;

    let summary = json!({
        "split": report["split"],
        "samples": report["samples"],
        "mae_sigma": report["mae_sigma"],
        "mae_alpha": report["mae_alpha"],
        "metrics": args.out.out.join("metrics.json").to_string_lossy(),
        "model_config_hash": model_hash,
        "dataset_hash": m.hash,
    });
    Ok(summary)
}
