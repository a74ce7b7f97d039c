//! JSON representations of the dependency-free core configuration types,
//! used in container metadata, manifests, and resolved run configs.

use hscat_core::inverse_opt::{ImageLoss, OptimConfig, Parameterization};
use hscat_core::lighting::{SHCoeffs, SH_COEFF_COUNT};
use hscat_core::noise::NoiseSpec;
use hscat_core::tensois::{LightMode, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HscatError, Result};

/// Serde twin of [`NoiseSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpecRep {
    pub grid_size: usize,
    pub octaves: u32,
    pub base_exp: u32,
    pub seed: u64,
}

impl From<NoiseSpec> for NoiseSpecRep {
    fn from(s: NoiseSpec) -> Self {
        NoiseSpecRep {
            grid_size: s.grid_size,
            octaves: s.octaves,
            base_exp: s.base_exp,
            seed: s.seed,
        }
    }
}

impl NoiseSpecRep {
    pub fn to_core(self) -> Result<NoiseSpec> {
        NoiseSpec::new(self.grid_size, self.octaves, self.base_exp, self.seed)
            .map_err(|e| HscatError::validation(format!("noise spec: {e}")))
    }
}

/// Serde twin of [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfigRep {
    pub image_size: usize,
    pub light_mode: String,
    pub encoder_widths: [usize; 4],
    pub rank: usize,
    pub grid_res: usize,
    pub density_range: [f64; 2],
    pub scale_head: bool,
    pub light_head: bool,
    pub direct_regression: bool,
}

impl From<&ModelConfig> for ModelConfigRep {
    fn from(c: &ModelConfig) -> Self {
        ModelConfigRep {
            image_size: c.image_size,
            light_mode: match c.light_mode {
                LightMode::Point => "point".into(),
                LightMode::Env => "env".into(),
            },
            encoder_widths: c.encoder_widths,
            rank: c.rank,
            grid_res: c.grid_res,
            density_range: [c.density_range.0, c.density_range.1],
            scale_head: c.scale_head,
            light_head: c.light_head,
            direct_regression: c.direct_regression,
        }
    }
}

impl ModelConfigRep {
    pub fn to_core(&self) -> Result<ModelConfig> {
        let light_mode = match self.light_mode.as_str() {
            "point" => LightMode::Point,
            "env" => LightMode::Env,
            other => {
                return Err(HscatError::validation(format!(
                    "light_mode must be \"point\" or \"env\", got {other:?}"
                )))
            }
        };
        let cfg = ModelConfig {
            image_size: self.image_size,
            light_mode,
            encoder_widths: self.encoder_widths,
            rank: self.rank,
            grid_res: self.grid_res,
            density_range: (self.density_range[0], self.density_range[1]),
            scale_head: self.scale_head,
            light_head: self.light_head,
            direct_regression: self.direct_regression,
        };
        cfg.validate()
            .map_err(|e| HscatError::validation(format!("model config: {e}")))?;
        Ok(cfg)
    }
}

/// Serde twin of [`TrainConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfigRep {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl From<&TrainConfig> for TrainConfigRep {
    fn from(c: &TrainConfig) -> Self {
        TrainConfigRep {
            lr: c.lr,
            batch_size: c.batch_size,
            epochs: c.epochs,
            lambda: c.lambda,
            seed: c.seed,
        }
    }
}

impl TrainConfigRep {
    pub fn to_core(self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lambda: self.lambda,
            seed: self.seed,
        }
    }
}

/// Serde twin of [`OptimConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfigRep {
    /// "dense" or "vm".
    pub parameterization: String,
    /// Factor rank when `parameterization` is "vm"; ignored otherwise.
    #[serde(default)]
    pub rank: usize,
    pub tv_weight: f64,
    pub steps: usize,
    pub lr: f64,
    /// "l1" or "mse".
    pub image_loss: String,
    pub seed: u64,
    pub scale_range: [f64; 2],
}

impl From<&OptimConfig> for OptimConfigRep {
    fn from(c: &OptimConfig) -> Self {
        let (parameterization, rank) = match c.parameterization {
            Parameterization::Dense => ("dense".to_string(), 0),
            Parameterization::Vm { rank } => ("vm".to_string(), rank),
        };
        OptimConfigRep {
            parameterization,
            rank,
            tv_weight: c.tv_weight,
            steps: c.steps,
            lr: c.lr,
            image_loss: match c.image_loss {
                ImageLoss::L1 => "l1".into(),
                ImageLoss::Mse => "mse".into(),
            },
            seed: c.seed,
            scale_range: [c.scale_range.0, c.scale_range.1],
        }
    }
}

impl OptimConfigRep {
    pub fn to_core(&self) -> Result<OptimConfig> {
        let parameterization = match self.parameterization.as_str() {
            "dense" => Parameterization::Dense,
            "vm" => Parameterization::Vm { rank: self.rank },
            other => {
                return Err(HscatError::validation(format!(
                    "parameterization must be \"dense\" or \"vm\", got {other:?}"
                )))
            }
        };
        let image_loss = match self.image_loss.as_str() {
            "l1" => ImageLoss::L1,
            "mse" => ImageLoss::Mse,
            other => {
                return Err(HscatError::validation(format!(
                    "image_loss must be \"l1\" or \"mse\", got {other:?}"
                )))
            }
        };
        let cfg = OptimConfig {
            parameterization,
            tv_weight: self.tv_weight,
            steps: self.steps,
            lr: self.lr,
            image_loss,
            seed: self.seed,
            scale_range: (self.scale_range[0], self.scale_range[1]),
        };
        cfg.validate()
            .map_err(|e| HscatError::validation(format!("optimizer config: {e}")))?;
        Ok(cfg)
    }
}

/// Flat 27-value SH representation, channel-major (`c * 9 + basis`).
pub fn sh_to_vec(sh: &SHCoeffs) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * SH_COEFF_COUNT);
    for ch in 0..3 {
        out.extend_from_slice(&sh.coeffs[ch]);
    }
    out
}

pub fn sh_from_vec(v: &[f64]) -> Result<SHCoeffs> {
    if v.len() != 3 * SH_COEFF_COUNT {
        return Err(HscatError::validation(format!(
            "SH vector must have 27 entries, got {}",
            v.len()
        )));
    }
    let mut sh = SHCoeffs::default();
    for ch in 0..3 {
        sh.coeffs[ch].copy_from_slice(&v[ch * SH_COEFF_COUNT..(ch + 1) * SH_COEFF_COUNT]);
    }
    Ok(sh)
}
