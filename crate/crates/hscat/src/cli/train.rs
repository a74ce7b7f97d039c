//! `hscat train`: fit the feed-forward model on a generated dataset.

use std::path::PathBuf;

use clap::Args;
use hscat_core::tensois::{train, LightMode, Model, ModelConfig, TensoisError, TrainConfig};
use serde::Deserialize;
use serde_json::json;

use crate::checkpoint::save_model;
use crate::error::{HscatError, Result};
use crate::manifest::{self, load_pairs};
use crate::override_map;
use crate::parallel::RayonExec;
use crate::rundir::RunDir;

use super::{resolve, Cli, OutArg};

pub const MODEL_FILE: &str = "model.hsct";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root directory (holding manifest.json).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Shuffle/initialization seed.
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Feature-regularization weight between the two-light encodings.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCfgIn {
    lr: f64,
    batch_size: usize,
    epochs: usize,
    lambda: f64,
}

pub fn map_train_err(e: TensoisError) -> HscatError {
    match e {
        TensoisError::NonFiniteLoss { epoch, batch } => HscatError::numerical(format!(
            "non-finite loss at epoch {epoch}, batch {batch}"
        )),
        other => HscatError::validation(format!("training: {other}")),
    }
}

/// Desk model shaped to the dataset's image/grid resolution.
pub fn model_config_for(params: &manifest::DatasetParams) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::desk(LightMode::Point);
    cfg.image_size = params.image;
    cfg.grid_res = params.grid;
    cfg.validate()
        .map_err(|e| HscatError::validation(format!("dataset incompatible with model: {e}")))?;
    Ok(cfg)
}

pub fn run(cli: &Cli, args: &TrainArgs) -> Result<serde_json::Value> {
    let overrides = override_map!(
        "lr" => args.lr,
        "batch_size" => args.batch_size,
        "epochs" => args.epochs,
        "lambda" => args.lambda,
    );
    let (cfg, mut echo) = resolve::<TrainCfgIn>("train", cli.config.as_deref(), overrides)?;
    echo["seed"] = json!(args.seed);
    echo["dataset"] = json!(args.dataset.to_string_lossy());

    let m = manifest::load(&args.dataset)?;
    manifest::validate_files(&m, &args.dataset)?;
    let train_set = load_pairs(&m, &args.dataset, "train")?;
    let val_set = load_pairs(&m, &args.dataset, "val")?;
    if train_set.is_empty() {
        return Err(HscatError::validation("dataset has no training samples"));
    }

    let model_cfg = model_config_for(&m.params)?;
    let mut model = Model::init(model_cfg, args.seed).map_err(map_train_err)?;
    let tc = TrainConfig {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        lambda: cfg.lambda,
        seed: args.seed,
    };

    let run = RunDir::create(&args.out.out)?;
    let config_hash = run.write_resolved_config(&echo)?;
    let exec = RayonExec::new(cli.threads)?;
    let outcome = train(&mut model, &train_set, &val_set, &tc, &exec).map_err(map_train_err)?;

    let best = Model {
        config: model.config.clone(),
        params: outcome.best_params.clone(),
    };
    save_model(
        &run.file(MODEL_FILE),
        &best,
        Some(&tc),
        json!({
            "dataset_hash": m.hash,
            "config_hash": config_hash,
        }),
    )?;
    let log: Vec<_> = outcome
        .log
        .iter()
        .map(|e| {
            json!({
                "epoch": e.epoch,
                "train_objective": e.train_objective,
                "train_l_vol": e.train_l_vol,
                "val_l_vol": e.val_l_vol,
            })
        })
        .collect();
    run.write_json("log.json", &json!(log))?;
    run.finish()?;

    Ok(json!({
        "model": args.out.out.join(MODEL_FILE).to_string_lossy(),
        "epochs": cfg.epochs,
        "best_epoch": outcome.best_epoch,
        "best_val_l_vol": outcome.best_val_l_vol,
        "train_pairs": train_set.len(),
        "val_pairs": val_set.len(),
        "dataset_hash": m.hash,
        "config_hash": config_hash,
    }))
}
