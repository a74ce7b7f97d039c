//! `hscat dataset`: generate a multi-view corpus with its manifest.

use clap::Args;
use serde::Deserialize;
use serde_json::json;

use crate::error::{HscatError, Result};
use crate::manifest::{generate, plan, DatasetParams};
use crate::override_map;
use crate::rundir::RunDir;

use super::{resolve, Cli, OutArg};

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Master seed every sample derives from.
    #[arg(long)]
    pub seed: u64,
    /// "mini" (360 samples) or "tiny" (4-sample smoke preset).
    #[arg(long)]
    pub preset: Option<String>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetCfg {
    preset: String,
}

pub fn run(cli: &Cli, args: &DatasetArgs) -> Result<serde_json::Value> {
    let overrides = override_map!("preset" => args.preset);
    let (cfg, mut echo) = resolve::<DatasetCfg>("dataset", cli.config.as_deref(), overrides)?;
    let params = match cfg.preset.as_str() {
        "mini" => DatasetParams::mini(args.seed),
        "tiny" => DatasetParams::tiny(args.seed),
        other => {
            return Err(HscatError::validation(format!(
                "preset must be mini or tiny, got {other:?}"
            )))
        }
    };
    echo["seed"] = json!(args.seed);
    echo["params"] = serde_json::to_value(&params).unwrap();

    let manifest = plan(&params)?;
    let run = RunDir::create(&args.out.out)?;
    let config_hash = run.write_resolved_config(&echo)?;
    generate(&manifest, run.path())?;
    let images: usize = manifest.samples.iter().map(|s| s.views.len()).sum();
    run.finish()?;

    Ok(json!({
        "root": args.out.out.to_string_lossy(),
        "samples": manifest.samples.len(),
        "images": images,
        "manifest_hash": manifest.hash,
        "config_hash": config_hash,
    }))
}
