//! `hscat synth`: seeded field synthesis into a container.

use clap::Args;
use hscat_core::geometry::{grid_sdf, occupancy_mask};
use hscat_core::noise::{synth_albedo_field, synth_sigma_field, NoiseSpec};
use hscat_core::rng::hash_words;
use serde::Deserialize;
use serde_json::json;

use crate::container::{ContainerWriter, Role};
use crate::error::{HscatError, Result};
use crate::jsonrep::NoiseSpecRep;
use crate::manifest::make_mesh;
use crate::override_map;
use crate::rundir::RunDir;

use super::{resolve, Cli, OutArg};

pub const FIELD_FILE: &str = "field.hsct";

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Master seed for the noise draws.
    #[arg(long)]
    pub seed: u64,
    /// Voxels per axis.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Occupancy shape: icosphere|cuboid|torus|cylinder|ellipsoid|blob|none.
    #[arg(long)]
    pub shape: Option<String>,
    /// Density scale stored with the field (m^-1 per unit sigma).
    #[arg(long)]
    pub scale: Option<f64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthCfg {
    grid: usize,
    shape: String,
    scale: f64,
}

pub fn run(cli: &Cli, args: &SynthArgs) -> Result<serde_json::Value> {
    let overrides = override_map!(
        "grid" => args.grid,
        "shape" => args.shape,
        "scale" => args.scale,
    );
    let (cfg, mut echo) = resolve::<SynthCfg>("synth", cli.config.as_deref(), overrides)?;
    if !(cfg.scale.is_finite() && cfg.scale > 0.0) {
        return Err(HscatError::validation("scale must be positive"));
    }
    echo["seed"] = json!(args.seed);

    let desk = NoiseSpec::desk(0);
    let spec_s = NoiseSpec::new(
        cfg.grid,
        desk.octaves,
        desk.base_exp,
        hash_words(&[args.seed, 0x5163]),
    )
    .map_err(|e| HscatError::validation(format!("noise spec: {e}")))?;
    let spec_a = NoiseSpec::new(
        cfg.grid,
        desk.octaves,
        desk.base_exp,
        hash_words(&[args.seed, 0xa1fa]),
    )
    .map_err(|e| HscatError::validation(format!("noise spec: {e}")))?;

    let run = RunDir::create(&args.out.out)?;
    let config_hash = run.write_resolved_config(&echo)?;

    let sigma = synth_sigma_field(&spec_s)
        .map_err(|e| HscatError::numerical(format!("sigma synth: {e}")))?;
    let alpha = synth_albedo_field(&spec_a)
        .map_err(|e| HscatError::numerical(format!("albedo synth: {e}")))?;

    let mut meta = json!({
        "kind": "field",
        "seed": args.seed,
        "scale": cfg.scale,
        "shape": cfg.shape,
        "noise_sigma": NoiseSpecRep::from(spec_s),
        "noise_alpha": NoiseSpecRep::from(spec_a),
        "config_hash": config_hash,
    });
    let mut w;
    if cfg.shape == "none" {
        w = ContainerWriter::new(meta);
        w.add_grid("sigma", Role::Sigma, &sigma);
        w.add_grid("alpha", Role::Alpha, &alpha);
    } else {
        let mesh_seed = hash_words(&[args.seed, 0xb10b]);
        let mesh = make_mesh(&cfg.shape, mesh_seed)?;
        let sdf = grid_sdf(&mesh, &hscat_core::geometry::GridSpec::cube(cfg.grid))
            .map_err(|e| HscatError::numerical(format!("voxelize: {e}")))?;
        let mask = occupancy_mask(&sdf);
        meta["mesh_seed"] = json!(mesh_seed);
        w = ContainerWriter::new(meta);
        w.add_grid("sigma", Role::Sigma, &sigma);
        w.add_grid("alpha", Role::Alpha, &alpha);
        w.add_grid("mask", Role::Mask, &mask);
    }
    let field_path = run.file(FIELD_FILE);
    w.write_to(&field_path)?;
    run.finish()?;

    Ok(json!({
        "field": field_path.to_string_lossy(),
        "grid": cfg.grid,
        "shape": cfg.shape,
        "config_hash": config_hash,
    }))
}
