//! `hscat render`: one view of a stored field, by ray marching or Monte
//! Carlo.

use std::path::PathBuf;

use clap::Args;
use hscat_core::geometry::GridSpec;
use hscat_core::lighting::{project_envmap, LightConfig};
use hscat_core::render::{
    camera_rig, mc_render, olat_light_position, raymarch_render, Background, RenderConfig, Scene,
};
use hscat_core::tensois::VIEWS;
use serde::Deserialize;
use serde_json::json;

use crate::container::Container;
use crate::error::{HscatError, Result};
use crate::override_map;
use crate::rundir::RunDir;
use crate::{pfm, pngio};

use super::{resolve, Cli, OutArg};

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Field container to render.
    #[arg(long)]
    pub field: PathBuf,
    /// Camera index on the six-view rig (0-5).
    #[arg(long)]
    pub view: Option<usize>,
    /// "raymarch" or "mc".
    #[arg(long)]
    pub renderer: Option<String>,
    /// Samples per pixel (Monte Carlo only).
    #[arg(long)]
    pub spp: Option<usize>,
    /// RNG seed; mandatory with --renderer mc.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// "colocated", "left", "right", or "env".
    #[arg(long)]
    pub light: Option<String>,
    /// Lat-long PFM environment map (implies --light env).
    #[arg(long)]
    pub env_map: Option<PathBuf>,
    #[arg(long)]
    pub light_intensity: Option<f64>,
    /// "black", "env", or "R,G,B".
    #[arg(long)]
    pub background: Option<String>,
    /// Density scale override (default: the value stored with the field).
    #[arg(long)]
    pub scale: Option<f64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderCfg {
    width: usize,
    height: usize,
    renderer: String,
    spp: usize,
    view: usize,
    light: String,
    light_intensity: f64,
    background: String,
}

fn parse_background(s: &str, has_env: bool) -> Result<Background> {
    match s {
        "black" => Ok(Background::Black),
        "env" => {
            if has_env {
                Ok(Background::Env)
            } else {
                Err(HscatError::validation(
                    "background \"env\" needs --light env",
                ))
            }
        }
        rgb => {
            let parts: Vec<f64> = rgb
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| {
                    HscatError::validation(format!(
                        "background must be black, env, or R,G,B — got {rgb:?}"
                    ))
                })?;
            if parts.len() != 3 {
                return Err(HscatError::validation("background R,G,B needs 3 values"));
            }
            Ok(Background::Const([parts[0], parts[1], parts[2]]))
        }
    }
}

pub fn run(cli: &Cli, args: &RenderArgs) -> Result<serde_json::Value> {
    let overrides = override_map!(
        "width" => args.width,
        "height" => args.height,
        "renderer" => args.renderer,
        "spp" => args.spp,
        "view" => args.view,
        "light" => args.light,
        "light_intensity" => args.light_intensity,
        "background" => args.background,
    );
    let (cfg, mut echo) = resolve::<RenderCfg>("render", cli.config.as_deref(), overrides)?;
    if cfg.view >= VIEWS {
        return Err(HscatError::validation(format!(
            "view must be 0..{}, got {}",
            VIEWS - 1,
            cfg.view
        )));
    }
    let mc = match cfg.renderer.as_str() {
        "raymarch" => false,
        "mc" => true,
        other => {
            return Err(HscatError::validation(format!(
                "renderer must be raymarch or mc, got {other:?}"
            )))
        }
    };
    if mc && args.seed.is_none() {
        return Err(HscatError::validation(
            "--seed is mandatory with --renderer mc",
        ));
    }
    if mc && cfg.spp == 0 {
        return Err(HscatError::validation("spp must be at least 1"));
    }
    echo["field"] = json!(args.field.to_string_lossy());
    if let Some(s) = args.seed {
        echo["seed"] = json!(s);
    }

    let c = Container::read_from(&args.field)?;
    let sigma = c.grid("sigma")?;
    let alpha = c.grid("alpha")?;
    let mask = if c.section("mask").is_ok() {
        Some(c.grid("mask")?)
    } else {
        None
    };
    let n = sigma.shape[0];
    if sigma.shape != [n, n, n] {
        return Err(HscatError::validation("render expects a cubic field grid"));
    }
    let scale = match args.scale {
        Some(s) => s,
        None => c
            .meta()
            .get("scale")
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| {
                HscatError::validation("field has no stored scale; pass --scale")
            })?,
    };
    echo["scale"] = json!(scale);

    let env_sh = match (&args.env_map, cfg.light.as_str()) {
        (Some(path), _) => Some(project_envmap(&pfm::read_envmap(path)?)),
        (None, "env") => Some(hscat_core::lighting::SHCoeffs::constant([1.0; 3])),
        _ => None,
    };
    let light = match (env_sh, cfg.light.as_str()) {
        (Some(sh), _) => LightConfig::Env(sh),
        (None, name) => LightConfig::Point {
            position: olat_light_position(
                cfg.view,
                crate::manifest::parse_olat(name)?,
                1.0,
            ),
            intensity: [cfg.light_intensity; 3],
        },
    };
    let background = parse_background(&cfg.background, matches!(light, LightConfig::Env(_)))?;

    let spec = GridSpec::cube(n);
    let cams = camera_rig(1.0, 45.0).map_err(|e| HscatError::validation(format!("rig: {e}")))?;
    let scene = Scene {
        sigma: &sigma,
        albedo: &alpha,
        mask: mask.as_ref(),
        scale,
        spec,
        light,
        background,
    };
    let render_cfg = {
        let base = RenderConfig::for_grid(&spec, cfg.width, cfg.height, background);
        RenderConfig { background, ..base }
    };

    let run = RunDir::create(&args.out.out)?;
    let config_hash = run.write_resolved_config(&echo)?;

    let (img, se) = if mc {
        let (mean, se) = mc_render(
            &scene,
            &cams[cfg.view],
            &render_cfg,
            cfg.spp,
            args.seed.unwrap(),
        )
        .map_err(|e| HscatError::numerical(format!("mc render: {e}")))?;
        (mean, Some(se))
    } else {
        (
            raymarch_render(&scene, &cams[cfg.view], &render_cfg)
                .map_err(|e| HscatError::numerical(format!("render: {e}")))?,
            None,
        )
    };
    if !img.data.iter().all(|p| p.iter().all(|v| v.is_finite())) {
        return Err(HscatError::numerical("render produced non-finite pixels"));
    }

    pfm::write_image(&run.file("render.pfm"), &img)?;
    pngio::write_png(&run.file("render.png"), &img)?;
    if let Some(se) = &se {
        pfm::write_image(&run.file("stderr.pfm"), se)?;
    }
    let mean = img.mean();
    run.finish()?;

    Ok(json!({
        "image": args.out.out.join("render.pfm").to_string_lossy(),
        "mean": mean,
        "renderer": cfg.renderer,
        "config_hash": config_hash,
    }))
}
