//! `hscat optimize`: per-scene inverse optimization against self-rendered
//! targets of a stored field.

use std::path::PathBuf;

use clap::Args;
use hscat_core::geometry::GridSpec;
use hscat_core::inverse_opt::{optimize_scene, OptimError, SceneSetup};
use hscat_core::lighting::LightConfig;
use hscat_core::metrics::masked_mae;
use hscat_core::render::{
    camera_rig, olat_light_position, raymarch_render, Background, OlatVariant, RenderConfig,
    Scene,
};
use hscat_core::tensor::DenseGrid;
use serde::Deserialize;
use serde_json::json;

use crate::container::{Container, ContainerWriter, Role};
use crate::error::{HscatError, Result};
use crate::jsonrep::OptimConfigRep;
use crate::override_map;
use crate::rundir::RunDir;

use super::{resolve, Cli, OutArg};

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Ground-truth field container; targets are rendered from it.
    #[arg(long)]
    pub field: PathBuf,
    /// Seed for factor initialization.
    #[arg(long)]
    pub seed: u64,
    /// "dense" or "vm".
    #[arg(long)]
    pub parameterization: Option<String>,
    /// Factor rank for --parameterization vm.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tv_weight: Option<f64>,
    /// "l1" or "mse".
    #[arg(long)]
    pub image_loss: Option<String>,
    /// Number of target views (cameras 0..n of the rig).
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizeCfg {
    parameterization: String,
    rank: usize,
    tv_weight: f64,
    steps: usize,
    lr: f64,
    image_loss: String,
    scale_min: f64,
    scale_max: f64,
    views: usize,
    width: usize,
    height: usize,
}

/// Store the six factor groups of a decomposition as shaped f64 sections.
fn add_vm_sections(
    w: &mut ContainerWriter,
    prefix: &str,
    vm: &hscat_core::tensor::VmDecomposition,
) {
    let [ni, nj, nk] = vm.shape;
    let r = vm.rank;
    w.add_f64(&format!("{prefix}_vx"), Role::Vm, &[r, ni], &vm.vx);
    w.add_f64(&format!("{prefix}_vy"), Role::Vm, &[r, nj], &vm.vy);
    w.add_f64(&format!("{prefix}_vz"), Role::Vm, &[r, nk], &vm.vz);
    w.add_f64(&format!("{prefix}_myz"), Role::Vm, &[r, nj, nk], &vm.myz);
    w.add_f64(&format!("{prefix}_mxz"), Role::Vm, &[r, ni, nk], &vm.mxz);
    w.add_f64(&format!("{prefix}_mxy"), Role::Vm, &[r, ni, nj], &vm.mxy);
}

pub fn run(cli: &Cli, args: &OptimizeArgs) -> Result<serde_json::Value> {
    let overrides = override_map!(
        "parameterization" => args.parameterization,
        "rank" => args.rank,
        "steps" => args.steps,
        "lr" => args.lr,
        "tv_weight" => args.tv_weight,
        "image_loss" => args.image_loss,
        "views" => args.views,
        "width" => args.width,
        "height" => args.height,
    );
    let (cfg, mut echo) = resolve::<OptimizeCfg>("optimize", cli.config.as_deref(), overrides)?;
    echo["seed"] = json!(args.seed);
    echo["field"] = json!(args.field.to_string_lossy());

    let rep = OptimConfigRep {
        parameterization: cfg.parameterization.clone(),
        rank: cfg.rank,
        tv_weight: cfg.tv_weight,
        steps: cfg.steps,
        lr: cfg.lr,
        image_loss: cfg.image_loss.clone(),
        seed: args.seed,
        scale_range: [cfg.scale_min, cfg.scale_max],
    };
    let optim_cfg = rep.to_core()?;
    if cfg.views == 0 || cfg.views > 6 {
        return Err(HscatError::validation("views must be 1..=6"));
    }

    let c = Container::read_from(&args.field)?;
    let sigma = c.grid("sigma")?;
    let alpha = c.grid("alpha")?;
    let mask = if c.section("mask").is_ok() {
        Some(c.grid("mask")?)
    } else {
        None
    };
    let scale = c
        .meta()
        .get("scale")
        .and_then(serde_json::Value::as_f64)
        .ok_or_else(|| HscatError::validation("field has no stored scale"))?;
    let n = sigma.shape[0];
    if sigma.shape != [n, n, n] {
        return Err(HscatError::validation("optimize expects a cubic field grid"));
    }
    let spec = GridSpec::cube(n);
    let cams = camera_rig(1.0, 45.0).map_err(|e| HscatError::validation(format!("rig: {e}")))?;
    let light = LightConfig::Point {
        position: olat_light_position(0, OlatVariant::Colocated, 1.0),
        intensity: [40.0; 3],
    };
    let render = RenderConfig::for_grid(&spec, cfg.width, cfg.height, Background::Black);
    let mut targets = Vec::with_capacity(cfg.views);
    for cam in cams.iter().take(cfg.views) {
        let scene = Scene {
            sigma: &sigma,
            albedo: &alpha,
            mask: mask.as_ref(),
            scale,
            spec,
            light: light.clone(),
            background: Background::Black,
        };
        targets.push(
            raymarch_render(&scene, cam, &render)
                .map_err(|e| HscatError::numerical(format!("target render: {e}")))?,
        );
    }
    let setup = SceneSetup {
        cams: cams[..cfg.views].to_vec(),
        light,
        background: Background::Black,
        spec,
        render,
    };

    let run = RunDir::create(&args.out.out)?;
    let run_hash = run.write_resolved_config(&echo)?;
    let result = optimize_scene(&targets, mask.as_ref(), &setup, &optim_cfg).map_err(|e| match e {
        OptimError::Diverged { step, .. } => {
            HscatError::numerical(format!("optimization diverged at step {step}"))
        }
        OptimError::Render(r) => HscatError::numerical(format!("render: {r}")),
        other => HscatError::validation(format!("optimize: {other}")),
    })?;

    let ones = DenseGrid::from_fn([n, n, n], |_, _, _| 1.0);
    let eval_mask = mask.as_ref().unwrap_or(&ones);
    let mae_sigma = masked_mae(&result.field.sigma, &sigma, eval_mask)
        .map_err(|e| HscatError::numerical(format!("metrics: {e}")))?;
    let mae_alpha = masked_mae(&result.field.albedo, &alpha, eval_mask)
        .map_err(|e| HscatError::numerical(format!("metrics: {e}")))?;

    let meta = json!({
        "kind": "field",
        "scale": result.field.scale,
        "optimizer": serde_json::to_value(&rep).unwrap(),
        "source_field": args.field.to_string_lossy(),
        "config_hash": run_hash,
    });
    let mut w = ContainerWriter::new(meta);
    w.add_grid("sigma", Role::Sigma, &result.field.sigma);
    w.add_grid("alpha", Role::Alpha, &result.field.albedo);
    if let Some((vs, va)) = &result.vm {
        add_vm_sections(&mut w, "vm_sigma", vs);
        add_vm_sections(&mut w, "vm_alpha", va);
    }
    w.write_to(&run.file("recovered.hsct"))?;
    run.write_json("trace.json", &json!(result.trace))?;

    let initial = result.trace.first().copied().unwrap_or(f64::NAN);
    let report = json!({
        "initial_image_loss": initial,
        "best_image_loss": result.best_loss,
        "best_step": result.best_step,
        "loss_ratio": result.best_loss / initial,
        "image_loss": cfg.image_loss,
        // Recovered-volume errors are reported for context, not asserted.
        "recovered_mae_sigma": mae_sigma,
        "recovered_mae_alpha": mae_alpha,
        "recovered_scale": result.field.scale,
        "gt_scale": scale,
        "config_hash": run_hash,
    });
    run.write_json("report.json", &report)?;
    run.finish()?;

    let mut summary = report;
    summary["recovered"] = json!(args.out.out.join("recovered.hsct").to_string_lossy());
    Ok(summary)
}
