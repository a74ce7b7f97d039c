//! Feed-forward inverse-scattering model: six per-view conv encoders, four
//! decoder branches emitting vector–matrix components for σ_t and α, a scale
//! head, and an optional lighting head, plus the multi-light training loop.
//!
//! The network runs on [`crate::autodiff::Tape`]; one tape per training item
//! carries both light variants so the feature-regularization term can couple
//! their latents. All weights are f64.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Grads, Tape, Tensor, VarId};
use crate::lighting::SHCoeffs;
use crate::rng::CounterRng;
use crate::tensor::{reconstruct, DenseGrid, MaskGrid, ScatterField, VmDecomposition};

#[cfg(not(feature = "std"))]
use crate::float::FloatExt;

/// Decoder trunk width after the 1×1 projection from the latent.
const DEC_PROJ: usize = 128;
/// Widths of the three upsample+conv decoder stages.
const DEC_WIDTHS: [usize; 3] = [64, 48, 32];
/// Hidden width of the scale and light heads.
const HEAD_HIDDEN: usize = 64;
/// Number of camera views.
pub const VIEWS: usize = 6;

/// Illumination regime the model is trained for; fixes the input layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightMode {
    /// OLAT point lights: single-channel intensity images.
    Point,
    /// Environment lighting: 9 channels per view (I ‖ I·M ‖ M).
    Env,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensoisError {
    BadConfig(&'static str),
    ViewCount { expected: usize, got: usize },
    ChannelLayout { expected: Vec<usize>, got: Vec<usize> },
    EmptyMask,
    NonFiniteLoss { epoch: usize, batch: usize },
}

impl core::fmt::Display for TensoisError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TensoisError::BadConfig(msg) => write!(f, "bad model config: {msg}"),
            TensoisError::ViewCount { expected, got } => {
                write!(f, "expected {expected} views, got {got}")
            }
            TensoisError::ChannelLayout { expected, got } => {
                write!(f, "view shape mismatch: expected {expected:?}, got {got:?}")
            }
            TensoisError::EmptyMask => write!(f, "occupancy mask has no occupied voxel"),
            TensoisError::NonFiniteLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
        }
    }
}

impl core::error::Error for TensoisError {}

/// Architecture and output-space configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square input image side; must be a multiple of 16 (four stride-2 convs).
    pub image_size: usize,
    pub light_mode: LightMode,
    /// Encoder stage widths (four stride-2 conv+relu blocks).
    pub encoder_widths: [usize; 4],
    /// Rank R of the predicted decompositions.
    pub rank: usize,
    /// Cubic grid resolution N of the reconstructed fields.
    pub grid_res: usize,
    /// Physical density range (s_min, s_max) that ŝ ∈ [0,1] maps onto.
    pub density_range: (f64, f64),
    pub scale_head: bool,
    /// Lighting head (environment mode only).
    pub light_head: bool,
    /// Ablation: replace the four VM branches with two dense-grid decoders.
    pub direct_regression: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: 64² images, 32³ grids, R = 10.
    pub fn desk(light_mode: LightMode) -> ModelConfig {
        ModelConfig {
            image_size: 64,
            light_mode,
            encoder_widths: [16, 32, 64, 128],
            rank: 10,
            grid_res: 32,
            density_range: (8.0, 80.0),
            scale_head: true,
            light_head: light_mode == LightMode::Env,
            direct_regression: false,
        }
    }

    /// Channels per input view.
    pub fn in_channels(&self) -> usize {
        match self.light_mode {
            LightMode::Point => 1,
            LightMode::Env => 9,
        }
    }

    /// Latent spatial side after the four stride-2 encoder stages.
    pub fn latent_size(&self) -> usize {
        self.image_size / 16
    }

    /// Latent channel count: concatenation of all six view features.
    pub fn latent_channels(&self) -> usize {
        VIEWS * self.encoder_widths[3]
    }

    pub fn validate(&self) -> Result<(), TensoisError> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(TensoisError::BadConfig(
                "image_size must be a positive multiple of 16",
            ));
        }
        if self.grid_res != self.image_size / 2 {
            return Err(TensoisError::BadConfig(
                "grid_res must equal image_size/2 (three ×2 decoder stages from image_size/16)",
            ));
        }
        if self.rank == 0 {
            return Err(TensoisError::BadConfig("rank must be at least 1"));
        }
        if self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(TensoisError::BadConfig("encoder widths must be positive"));
        }
        if self.light_head && self.light_mode != LightMode::Env {
            return Err(TensoisError::BadConfig(
                "light head requires environment mode",
            ));
        }
        let (lo, hi) = self.density_range;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(TensoisError::BadConfig("degenerate density range"));
        }
        Ok(())
    }
}

/// Optimizer and loop configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Adam learning rate. Zero is allowed (no-op steps, useful as a control).
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight λ of the feature-regularization term.
    pub lambda: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk() -> TrainConfig {
        TrainConfig {
            lr: 1e-4,
            batch_size: 8,
            epochs: 10,
            lambda: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TensoisError> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TensoisError::BadConfig("learning rate must be ≥ 0"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(TensoisError::BadConfig("lambda must be ≥ 0"));
        }
        if self.batch_size == 0 {
            return Err(TensoisError::BadConfig("batch size must be ≥ 1"));
        }
        Ok(())
    }
}

/// One named weight tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// The model: configuration plus named parameters in a fixed order.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Param>,
}

/// Appends conv parameters (He-uniform weights, zero bias) for one layer.
fn push_conv(
    params: &mut Vec<Param>,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    seed: u64,
) {
    let fan_in = (in_c * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let mut rng = CounterRng::keyed(&[seed, params.len() as u64]);
    let w: Vec<f64> = (0..out_c * in_c * k * k)
        .map(|_| rng.next_range(-bound, bound))
        .collect();
    params.push(Param {
        name: format!("{name}.w"),
        value: Tensor::from_vec(&[out_c, in_c, k, k], w),
    });
    params.push(Param {
        name: format!("{name}.b"),
        value: Tensor::zeros(&[out_c]),
    });
}

/// Appends dense-layer parameters (He-uniform weights, zero bias).
fn push_dense(params: &mut Vec<Param>, name: &str, out_d: usize, in_d: usize, seed: u64) {
    let bound = (6.0 / in_d as f64).sqrt();
    let mut rng = CounterRng::keyed(&[seed, params.len() as u64]);
    let w: Vec<f64> = (0..out_d * in_d)
        .map(|_| rng.next_range(-bound, bound))
        .collect();
    params.push(Param {
        name: format!("{name}.w"),
        value: Tensor::from_vec(&[out_d, in_d], w),
    });
    params.push(Param {
        name: format!("{name}.b"),
        value: Tensor::zeros(&[out_d]),
    });
}

/// Appends one decoder branch: 1×1 projection, three upsample+conv stages,
/// and a 1×1 output to `out_channels`.
fn push_branch(params: &mut Vec<Param>, name: &str, latent_c: usize, out_channels: usize, seed: u64) {
    push_conv(params, &format!("{name}.proj"), DEC_PROJ, latent_c, 1, seed);
    let mut prev = DEC_PROJ;
    for (t, &w) in DEC_WIDTHS.iter().enumerate() {
        push_conv(params, &format!("{name}.up{t}"), w, prev, 3, seed);
        prev = w;
    }
    push_conv(params, &format!("{name}.out"), out_channels, prev, 1, seed);
}

impl Model {
    /// Deterministic initialization: He-uniform weights keyed by
    /// (seed, parameter index), zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model, TensoisError> {
        config.validate()?;
        let mut params = Vec::new();
        let in_c = config.in_channels();
        for v in 0..VIEWS {
            let mut prev = in_c;
            for (l, &w) in config.encoder_widths.iter().enumerate() {
                push_conv(&mut params, &format!("enc{v}.conv{l}"), w, prev, 3, seed);
                prev = w;
            }
        }
        let latent_c = config.latent_channels();
        let r3 = 3 * config.rank;
        if config.direct_regression {
            // Ablation: one dense-grid branch per parameter tensor; the final
            // 1×1 emits N channels at N×N, reshaped to the cubic grid.
            push_branch(&mut params, "dec.sigma.dense", latent_c, config.grid_res, seed);
            push_branch(&mut params, "dec.alpha.dense", latent_c, config.grid_res, seed);
        } else {
            push_branch(&mut params, "dec.sigma.vec", latent_c, r3, seed);
            push_branch(&mut params, "dec.sigma.mat", latent_c, r3, seed);
            push_branch(&mut params, "dec.alpha.vec", latent_c, r3, seed);
            push_branch(&mut params, "dec.alpha.mat", latent_c, r3, seed);
        }
        if config.scale_head {
            push_dense(&mut params, "head.scale.fc1", HEAD_HIDDEN, latent_c, seed);
            push_dense(&mut params, "head.scale.fc2", 1, HEAD_HIDDEN, seed);
        }
        if config.light_head {
            push_dense(
                &mut params,
                "head.light.fc1",
                HEAD_HIDDEN,
                config.encoder_widths[3],
                seed,
            );
            push_dense(&mut params, "head.light.fc2", 27, HEAD_HIDDEN, seed);
        }
        Ok(Model { config, params })
    }

    /// Total scalar parameter count.
    pub fn param_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Index of a parameter by name.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Flat offsets of each parameter in a concatenated gradient buffer.
    pub fn flat_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.params.len() + 1);
        let mut acc = 0;
        offs.push(0);
        for p in &self.params {
            acc += p.value.numel();
            offs.push(acc);
        }
        offs
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug)]
pub struct ForwardVars {
    /// Concatenated latent (6·C_enc, h, h).
    pub z: VarId,
    /// Raw σ_t reconstruction (N,N,N), before the readout clamp.
    pub sigma_grid: VarId,
    /// Raw α reconstruction (N,N,N), before the readout clamp.
    pub alpha_grid: VarId,
    /// Normalized scale prediction ŝ (1,), if the scale head is present.
    pub s_hat: Option<VarId>,
    /// Lighting coefficients (27,), if the light head is present.
    pub light: Option<VarId>,
    /// VM factor handles [vx, myz, vy, mxz, vz, mxy] per parameter tensor;
    /// absent in direct-regression mode.
    pub sigma_factors: Option<[VarId; 6]>,
    pub alpha_factors: Option<[VarId; 6]>,
}

/// Detached prediction (plain values, no tape).
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Predicted components for σ_t; None in direct-regression mode.
    pub vm_sigma: Option<VmDecomposition>,
    /// Predicted components for α; None in direct-regression mode.
    pub vm_alpha: Option<VmDecomposition>,
    /// Raw reconstructed grids (pre-clamp).
    pub sigma: DenseGrid,
    pub alpha: DenseGrid,
    /// Normalized scale prediction ŝ.
    pub s_hat: f64,
    /// Predicted lighting coefficients (environment mode).
    pub l_sh_hat: Option<SHCoeffs>,
}

impl Prediction {
    /// σ_t grid with the readout clamp (non-negative).
    pub fn sigma_grid(&self) -> DenseGrid {
        let mut g = self.sigma.clone();
        for v in g.data.iter_mut() {
            *v = v.max(0.0);
        }
        g
    }

    /// α grid with the readout clamp to [0.3, 0.95].
    pub fn alpha_grid(&self) -> DenseGrid {
        let mut g = self.alpha.clone();
        for v in g.data.iter_mut() {
            *v = v.clamp(0.3, 0.95);
        }
        g
    }
}

/// Runs one encoder stack (four stride-2 conv+relu blocks) over one view.
fn encode_view(
    tape: &mut Tape,
    leaves: &[VarId],
    model: &Model,
    view: usize,
    input: VarId,
) -> VarId {
    let mut x = input;
    for l in 0..4 {
        let w = leaves[model.param_index(&format!("enc{view}.conv{l}.w")).unwrap()];
        let b = leaves[model.param_index(&format!("enc{view}.conv{l}.b")).unwrap()];
        x = tape.conv2d(x, w, b, 2, 1);
        x = tape.relu(x);
    }
    x
}

/// Runs one decoder branch from the latent to its (C_out, N, N) map.
fn run_branch(tape: &mut Tape, leaves: &[VarId], model: &Model, name: &str, z: VarId) -> VarId {
    let pw = leaves[model.param_index(&format!("{name}.proj.w")).unwrap()];
    let pb = leaves[model.param_index(&format!("{name}.proj.b")).unwrap()];
    let mut x = tape.conv2d(z, pw, pb, 1, 0);
    x = tape.relu(x);
    for t in 0..DEC_WIDTHS.len() {
        x = tape.upsample2(x);
        let w = leaves[model.param_index(&format!("{name}.up{t}.w")).unwrap()];
        let b = leaves[model.param_index(&format!("{name}.up{t}.b")).unwrap()];
        x = tape.conv2d(x, w, b, 1, 1);
        x = tape.relu(x);
    }
    let ow = leaves[model.param_index(&format!("{name}.out.w")).unwrap()];
    let ob = leaves[model.param_index(&format!("{name}.out.b")).unwrap()];
    tape.conv2d(x, ow, ob, 1, 0)
}

/// Splits a decoder output into the three per-axis factor blocks and builds
/// the fused reconstruction. `vec_map` is (3R, N, N) before the H reduction;
/// `mat_map` is (3R, N, N).
fn assemble_vm(
    tape: &mut Tape,
    rank: usize,
    n: usize,
    vec_map: VarId,
    mat_map: VarId,
) -> ([VarId; 6], VarId) {
    // Vector components come from 2D maps reduced over the H axis: (3R, N).
    let vecs = tape.mean_axis(vec_map, 1);
    let vx = tape.slice_channels(vecs, 0, rank);
    let vy = tape.slice_channels(vecs, rank, rank);
    let vz = tape.slice_channels(vecs, 2 * rank, rank);
    let myz = tape.slice_channels(mat_map, 0, rank);
    let mxz = tape.slice_channels(mat_map, rank, rank);
    let mxy = tape.slice_channels(mat_map, 2 * rank, rank);
    let factors = [vx, myz, vy, mxz, vz, mxy];
    let grid = tape.sum_outer3(factors, [n, n, n]);
    (factors, grid)
}

/// Puts every parameter on the tape as a leaf, in parameter order.
pub fn leaf_params(tape: &mut Tape, model: &Model) -> Vec<VarId> {
    model
        .params
        .iter()
        .map(|p| tape.leaf(p.value.clone()))
        .collect()
}

/// Forward pass over six views. `leaves` must come from [`leaf_params`] on
/// the same tape (shared across multiple forwards for weight tying).
pub fn forward(
    tape: &mut Tape,
    model: &Model,
    leaves: &[VarId],
    views: &[Tensor],
) -> Result<ForwardVars, TensoisError> {
    let cfg = &model.config;
    if views.len() != VIEWS {
        return Err(TensoisError::ViewCount {
            expected: VIEWS,
            got: views.len(),
        });
    }
    let expect = vec![cfg.in_channels(), cfg.image_size, cfg.image_size];
    for v in views {
        if v.shape != expect {
            return Err(TensoisError::ChannelLayout {
                expected: expect.clone(),
                got: v.shape.clone(),
            });
        }
    }
    let mut feats = Vec::with_capacity(VIEWS);
    for (i, view) in views.iter().enumerate() {
        let x = tape.leaf(view.clone());
        feats.push(encode_view(tape, leaves, model, i, x));
    }
    let z = tape.concat_channels(&feats);

    let n = cfg.grid_res;
    let (sigma_factors, alpha_factors, sigma_grid, alpha_grid);
    if cfg.direct_regression {
        let smap = run_branch(tape, leaves, model, "dec.sigma.dense", z);
        let amap = run_branch(tape, leaves, model, "dec.alpha.dense", z);
        sigma_grid = tape.reshape(smap, &[n, n, n]);
        alpha_grid = tape.reshape(amap, &[n, n, n]);
        sigma_factors = None;
        alpha_factors = None;
    } else {
        let sv = run_branch(tape, leaves, model, "dec.sigma.vec", z);
        let sm = run_branch(tape, leaves, model, "dec.sigma.mat", z);
        let av = run_branch(tape, leaves, model, "dec.alpha.vec", z);
        let am = run_branch(tape, leaves, model, "dec.alpha.mat", z);
        let (sf, sg) = assemble_vm(tape, cfg.rank, n, sv, sm);
        let (af, ag) = assemble_vm(tape, cfg.rank, n, av, am);
        sigma_factors = Some(sf);
        alpha_factors = Some(af);
        sigma_grid = sg;
        alpha_grid = ag;
    }

    let s_hat = if cfg.scale_head {
        let pooled = tape.mean_spatial(z);
        let w1 = leaves[model.param_index("head.scale.fc1.w").unwrap()];
        let b1 = leaves[model.param_index("head.scale.fc1.b").unwrap()];
        let w2 = leaves[model.param_index("head.scale.fc2.w").unwrap()];
        let b2 = leaves[model.param_index("head.scale.fc2.b").unwrap()];
        let h = tape.dense(pooled, w1, b1);
        let h = tape.relu(h);
        Some(tape.dense(h, w2, b2))
    } else {
        None
    };

    let light = if cfg.light_head {
        // z_l: mean of the per-view feature maps, then spatial mean.
        let mut acc = feats[0];
        for &f in &feats[1..] {
            acc = tape.add(acc, f);
        }
        let mean_map = tape.mul_scalar(acc, 1.0 / VIEWS as f64);
        let pooled = tape.mean_spatial(mean_map);
        let w1 = leaves[model.param_index("head.light.fc1.w").unwrap()];
        let b1 = leaves[model.param_index("head.light.fc1.b").unwrap()];
        let w2 = leaves[model.param_index("head.light.fc2.w").unwrap()];
        let b2 = leaves[model.param_index("head.light.fc2.b").unwrap()];
        let h = tape.dense(pooled, w1, b1);
        let h = tape.relu(h);
        Some(tape.dense(h, w2, b2))
    } else {
        None
    };

    Ok(ForwardVars {
        z,
        sigma_grid,
        alpha_grid,
        s_hat,
        light,
        sigma_factors,
        alpha_factors,
    })
}

/// Extracts a detached [`Prediction`] from forward-pass handles.
pub fn detach_prediction(tape: &Tape, model: &Model, fwd: &ForwardVars) -> Prediction {
    let cfg = &model.config;
    let n = cfg.grid_res;
    let grid_of = |id: VarId| -> DenseGrid {
        DenseGrid {
            shape: [n, n, n],
            data: tape.value(id).data.clone(),
        }
    };
    let vm_of = |factors: &[VarId; 6]| -> VmDecomposition {
        let mut vm = VmDecomposition::zeros(cfg.rank, [n, n, n]).unwrap();
        vm.vx = tape.value(factors[0]).data.clone();
        vm.myz = tape.value(factors[1]).data.clone();
        vm.vy = tape.value(factors[2]).data.clone();
        vm.mxz = tape.value(factors[3]).data.clone();
        vm.vz = tape.value(factors[4]).data.clone();
        vm.mxy = tape.value(factors[5]).data.clone();
        vm
    };
    let l_sh_hat = fwd.light.map(|id| {
        let t = tape.value(id);
        let mut sh = SHCoeffs::constant([0.0; 3]);
        for c in 0..3 {
            for i in 0..9 {
                sh.coeffs[c][i] = t.data[c * 9 + i];
            }
        }
        sh
    });
    Prediction {
        vm_sigma: fwd.sigma_factors.as_ref().map(vm_of),
        vm_alpha: fwd.alpha_factors.as_ref().map(vm_of),
        sigma: grid_of(fwd.sigma_grid),
        alpha: grid_of(fwd.alpha_grid),
        s_hat: fwd.s_hat.map(|id| tape.value(id).item()).unwrap_or(0.0),
        l_sh_hat,
    }
}

/// Ground truth for one training item.
#[derive(Debug, Clone)]
pub struct GtSample {
    pub sigma: DenseGrid,
    pub alpha: DenseGrid,
    pub mask: MaskGrid,
    /// Physical optical-density scale s.
    pub scale: f64,
    /// Per-light ground-truth lighting coefficients (environment mode).
    pub light_sh: Option<SHCoeffs>,
}

/// Normalizes a physical scale into [0,1] by the configured density range.
pub fn normalize_scale(cfg: &ModelConfig, s: f64) -> f64 {
    let (lo, hi) = cfg.density_range;
    (s - lo) / (hi - lo)
}

/// Inverse of [`normalize_scale`], with ŝ clamped to [0,1] at readout.
pub fn denormalize_scale(cfg: &ModelConfig, s_hat: f64) -> f64 {
    let (lo, hi) = cfg.density_range;
    lo + s_hat.clamp(0.0, 1.0) * (hi - lo)
}

/// Per-item loss terms (tape handles).
#[derive(Debug)]
pub struct LossVars {
    pub l_vol: VarId,
    pub l_scale: Option<VarId>,
    pub l_light: Option<VarId>,
    /// l_vol + l_scale + l_light.
    pub item: VarId,
}

/// Builds the per-light loss terms against ground truth.
pub fn loss_components(
    tape: &mut Tape,
    cfg: &ModelConfig,
    fwd: &ForwardVars,
    gt: &GtSample,
) -> Result<LossVars, TensoisError> {
    let n = cfg.grid_res;
    let occupied: f64 = gt.mask.data.iter().sum();
    if occupied <= 0.0 {
        return Err(TensoisError::EmptyMask);
    }
    let shape = [n, n, n];
    let sigma_t = Tensor::from_vec(&shape, gt.sigma.data.clone());
    let alpha_t = Tensor::from_vec(&shape, gt.alpha.data.clone());
    let mask_t = Tensor::from_vec(&shape, gt.mask.data.clone());
    let lv_sigma = tape.masked_l1(fwd.sigma_grid, &sigma_t, &mask_t);
    let lv_alpha = tape.masked_l1(fwd.alpha_grid, &alpha_t, &mask_t);
    let l_vol = tape.add(lv_sigma, lv_alpha);

    let mut item = l_vol;
    let l_scale = match fwd.s_hat {
        Some(s_hat) => {
            let target = tape.leaf(Tensor::from_vec(&[1], vec![normalize_scale(cfg, gt.scale)]));
            let ls = tape.mse(s_hat, target);
            item = tape.add(item, ls);
            Some(ls)
        }
        None => None,
    };
    let l_light = match (fwd.light, gt.light_sh.as_ref()) {
        (Some(pred), Some(gt_sh)) => {
            let mut flat = Vec::with_capacity(27);
            for c in 0..3 {
                flat.extend_from_slice(&gt_sh.coeffs[c]);
            }
            let target = tape.leaf(Tensor::from_vec(&[27], flat));
            let ll = tape.mse(pred, target);
            item = tape.add(item, ll);
            Some(ll)
        }
        _ => None,
    };
    Ok(LossVars {
        l_vol,
        l_scale,
        l_light,
        item,
    })
}

/// Total loss of one prediction under a latent pair:
/// L_vol + L_scale + L_light + λ·L_reg, with L_reg = mse(z₁, z₂).
pub fn loss_total(
    tape: &mut Tape,
    cfg: &ModelConfig,
    fwd: &ForwardVars,
    gt: &GtSample,
    z_pair: (VarId, VarId),
    lambda: f64,
) -> Result<VarId, TensoisError> {
    let parts = loss_components(tape, cfg, fwd, gt)?;
    let reg = tape.mse(z_pair.0, z_pair.1);
    let reg = tape.mul_scalar(reg, lambda);
    Ok(tape.add(parts.item, reg))
}

/// One training item: six views under two lights with shared ground truth.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub views_a: Vec<Tensor>,
    pub views_b: Vec<Tensor>,
    pub gt: GtSample,
    /// Ground-truth lighting of the second variant (environment mode).
    pub light_sh_b: Option<SHCoeffs>,
    /// Stable identifier, reported on non-finite losses.
    pub id: u64,
}

/// Gradient and stats of one item.
pub struct ItemOut {
    /// Concatenated gradients in parameter order; empty for forward-only.
    pub flat_grad: Vec<f64>,
    /// Two-light objective: mean item loss + λ·L_reg.
    pub objective: f64,
    /// Mean L_vol over the two lights.
    pub l_vol: f64,
}

/// Two-light objective on one tape: mean of the per-light item losses plus
/// λ·mse(z_a, z_b).
fn pair_objective(
    tape: &mut Tape,
    cfg: &ModelConfig,
    fwd_a: &ForwardVars,
    fwd_b: &ForwardVars,
    gt_a: &GtSample,
    gt_b: &GtSample,
    lambda: f64,
) -> Result<(VarId, VarId), TensoisError> {
    let parts_a = loss_components(tape, cfg, fwd_a, gt_a)?;
    let parts_b = loss_components(tape, cfg, fwd_b, gt_b)?;
    let sum_items = tape.add(parts_a.item, parts_b.item);
    let mean_items = tape.mul_scalar(sum_items, 0.5);
    let reg = tape.mse(fwd_a.z, fwd_b.z);
    let reg = tape.mul_scalar(reg, lambda);
    let objective = tape.add(mean_items, reg);
    let lv_sum = tape.add(parts_a.l_vol, parts_b.l_vol);
    let l_vol = tape.mul_scalar(lv_sum, 0.5);
    Ok((objective, l_vol))
}

/// Builds the second light's ground truth (shared fields, own lighting).
fn gt_b_of(sample: &TrainSample) -> GtSample {
    GtSample {
        light_sh: sample.light_sh_b.clone(),
        ..sample.gt.clone()
    }
}

/// Forward+backward for one item; pure in (model, sample).
pub fn grad_item(
    model: &Model,
    sample: &TrainSample,
    lambda: f64,
) -> Result<ItemOut, TensoisError> {
    let mut tape = Tape::new();
    let leaves = leaf_params(&mut tape, model);
    let fwd_a = forward(&mut tape, model, &leaves, &sample.views_a)?;
    let fwd_b = forward(&mut tape, model, &leaves, &sample.views_b)?;
    let gt_b = gt_b_of(sample);
    let (objective, l_vol) =
        pair_objective(&mut tape, &model.config, &fwd_a, &fwd_b, &sample.gt, &gt_b, lambda)?;
    let grads = tape.backward(objective);
    let mut flat = Vec::with_capacity(model.param_scalars());
    for &leaf in &leaves {
        flat.extend_from_slice(&grads.get(leaf, &tape).data);
    }
    Ok(ItemOut {
        flat_grad: flat,
        objective: tape.value(objective).item(),
        l_vol: tape.value(l_vol).item(),
    })
}

/// Forward-only evaluation of one item.
pub fn eval_item(
    model: &Model,
    sample: &TrainSample,
    lambda: f64,
) -> Result<ItemOut, TensoisError> {
    let mut tape = Tape::new();
    let leaves = leaf_params(&mut tape, model);
    let fwd_a = forward(&mut tape, model, &leaves, &sample.views_a)?;
    let fwd_b = forward(&mut tape, model, &leaves, &sample.views_b)?;
    let gt_b = gt_b_of(sample);
    let (objective, l_vol) =
        pair_objective(&mut tape, &model.config, &fwd_a, &fwd_b, &sample.gt, &gt_b, lambda)?;
    Ok(ItemOut {
        flat_grad: Vec::new(),
        objective: tape.value(objective).item(),
        l_vol: tape.value(l_vol).item(),
    })
}

/// Batch executor: maps `job` over `0..n`, returning results in index order.
/// The sequential [`SeqExec`] is always available; a thread-pool executor can
/// be supplied from outside — reduction order stays deterministic because
/// results come back indexed.
pub trait BatchExec: Sync {
    fn run(
        &self,
        n: usize,
        job: &(dyn Fn(usize) -> Result<ItemOut, TensoisError> + Sync),
    ) -> Vec<Result<ItemOut, TensoisError>>;
}

/// In-order sequential executor.
pub struct SeqExec;

impl BatchExec for SeqExec {
    fn run(
        &self,
        n: usize,
        job: &(dyn Fn(usize) -> Result<ItemOut, TensoisError> + Sync),
    ) -> Vec<Result<ItemOut, TensoisError>> {
        (0..n).map(job).collect()
    }
}

/// Adam optimizer state over the model's flat parameter vector.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, scalars: usize) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; scalars],
            v: vec![0.0; scalars],
        }
    }

    /// One update over the concatenated parameter buffer.
    pub fn step(&mut self, model: &mut Model, flat_grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut off = 0;
        for p in model.params.iter_mut() {
            for val in p.value.data.iter_mut() {
                let g = flat_grad[off];
                self.m[off] = self.beta1 * self.m[off] + (1.0 - self.beta1) * g;
                self.v[off] = self.beta2 * self.v[off] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[off] / bc1;
                let vhat = self.v[off] / bc2;
                *val -= self.lr * mhat / (vhat.sqrt() + self.eps);
                off += 1;
            }
        }
        debug_assert_eq!(off, flat_grad.len());
    }
}

/// Per-epoch statistics.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_objective: f64,
    pub train_l_vol: f64,
    pub val_l_vol: f64,
}

/// Training outcome: per-epoch log and the best-validation snapshot.
#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_l_vol: f64,
    /// Weights at the best validation epoch.
    pub best_params: Vec<Param>,
}

/// Deterministic Fisher–Yates shuffle keyed by (seed, epoch).
fn shuffle_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = CounterRng::keyed(&[seed, 0x51, epoch as u64]);
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Multi-light training loop: Adam on the two-light objective, per-epoch
/// train/val L_vol log, best-validation snapshot. A non-finite loss aborts
/// with the epoch and batch index.
pub fn train(
    model: &mut Model,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
    exec: &dyn BatchExec,
) -> Result<TrainOutcome, TensoisError> {
    cfg.validate()?;
    model.config.validate()?;
    if train_set.is_empty() {
        return Err(TensoisError::BadConfig("empty training set"));
    }
    let scalars = model.param_scalars();
    let mut adam = Adam::new(cfg.lr, scalars);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    let mut best_params = model.params.clone();

    for epoch in 0..cfg.epochs {
        let order = shuffle_indices(train_set.len(), cfg.seed, epoch);
        let mut epoch_obj = 0.0;
        let mut epoch_lvol = 0.0;
        let mut batches = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let outs = exec.run(chunk.len(), &|i| {
                grad_item(model, &train_set[chunk[i]], cfg.lambda)
            });
            let mut flat = vec![0.0f64; scalars];
            let mut obj = 0.0;
            let mut lvol = 0.0;
            for out in outs {
                let out = out?;
                if !out.objective.is_finite() {
                    return Err(TensoisError::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                    });
                }
                for (acc, g) in flat.iter_mut().zip(out.flat_grad.iter()) {
                    *acc += g;
                }
                obj += out.objective;
                lvol += out.l_vol;
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in flat.iter_mut() {
                *g *= inv;
            }
            adam.step(model, &flat);
            epoch_obj += obj * inv;
            epoch_lvol += lvol * inv;
            batches += 1.0;
        }

        let val_l_vol = if val_set.is_empty() {
            f64::NAN
        } else {
            let outs = exec.run(val_set.len(), &|i| eval_item(model, &val_set[i], cfg.lambda));
            let mut acc = 0.0;
            for out in outs {
                acc += out?.l_vol;
            }
            acc / val_set.len() as f64
        };
        if val_l_vol.is_finite() && val_l_vol < best_val {
            best_val = val_l_vol;
            best_epoch = epoch;
            best_params = model.params.clone();
        }
        log.push(EpochStats {
            epoch,
            train_objective: epoch_obj / batches,
            train_l_vol: epoch_lvol / batches,
            val_l_vol,
        });
    }
    if val_set.is_empty() {
        best_params = model.params.clone();
        best_epoch = cfg.epochs.saturating_sub(1);
        best_val = f64::NAN;
    }
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_l_vol: best_val,
        best_params,
    })
}

/// Single-light inference: reconstructs the fields, applies the readout
/// clamps and the occupancy mask, and denormalizes the scale.
pub fn infer(
    model: &Model,
    views: &[Tensor],
    mask: &MaskGrid,
) -> Result<(ScatterField, Prediction), TensoisError> {
    let cfg = &model.config;
    let n = cfg.grid_res;
    if mask.shape != [n, n, n] {
        return Err(TensoisError::BadConfig("mask shape vs grid_res mismatch"));
    }
    let mut tape = Tape::new();
    let leaves = leaf_params(&mut tape, model);
    let fwd = forward(&mut tape, model, &leaves, views)?;
    let pred = detach_prediction(&tape, model, &fwd);
    let mut sigma = pred.sigma_grid();
    let mut alpha = pred.alpha_grid();
    for ((s, a), m) in sigma
        .data
        .iter_mut()
        .zip(alpha.data.iter_mut())
        .zip(mask.data.iter())
    {
        *s *= m;
        *a *= m;
    }
    let scale = denormalize_scale(cfg, pred.s_hat);
    let field = ScatterField::new(sigma, alpha, scale)
        .map_err(|_| TensoisError::BadConfig("non-finite prediction"))?;
    Ok((field, pred))
}

/// Environment-mode input assembly: I (3) ‖ I·M (3) ‖ M broadcast (3).
pub fn env_input(rgb: &Tensor, mask2d: &Tensor) -> Tensor {
    assert!(
        rgb.shape.len() == 3 && rgb.shape[0] == 3,
        "env_input: expected RGB image"
    );
    let (h, w) = (rgb.shape[1], rgb.shape[2]);
    assert_eq!(mask2d.shape, vec![1, h, w], "env_input: mask layout");
    let hw = h * w;
    let mut data = Vec::with_capacity(9 * hw);
    data.extend_from_slice(&rgb.data);
    for ch in 0..3 {
        for p in 0..hw {
            data.push(rgb.data[ch * hw + p] * mask2d.data[p]);
        }
    }
    for _ in 0..3 {
        data.extend_from_slice(&mask2d.data);
    }
    Tensor::from_vec(&[9, h, w], data)
}

/// Reconstructs the grid a detached VM prediction encodes (readout path).
pub fn reconstruct_prediction(vm: &VmDecomposition) -> DenseGrid {
    reconstruct(vm).expect("prediction decomposition is well-formed")
}

/// Gradient of `grads` for the named parameter, if any is nonzero.
pub fn block_has_gradient(
    model: &Model,
    leaves: &[VarId],
    grads: &Grads,
    prefix: &str,
) -> bool {
    model
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .any(|(i, _)| {
            grads
                .get_ref(leaves[i])
                .map(|t| t.data.iter().any(|&g| g != 0.0))
                .unwrap_or(false)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    /// Small config that keeps unit tests fast: 16² images, 8³ grids, R=2.
    fn tiny(mode: LightMode) -> ModelConfig {
        ModelConfig {
            image_size: 16,
            light_mode: mode,
            encoder_widths: [2, 3, 4, 5],
            rank: 2,
            grid_res: 8,
            density_range: (8.0, 80.0),
            scale_head: true,
            light_head: mode == LightMode::Env,
            direct_regression: false,
        }
    }

    fn random_views(cfg: &ModelConfig, seed: u64) -> Vec<Tensor> {
        let c = cfg.in_channels();
        let s = cfg.image_size;
        (0..VIEWS)
            .map(|v| {
                let mut rng = CounterRng::keyed(&[seed, v as u64]);
                let data: Vec<f64> = (0..c * s * s).map(|_| rng.next_range(0.0, 1.0)).collect();
                Tensor::from_vec(&[c, s, s], data)
            })
            .collect()
    }

    fn random_gt(cfg: &ModelConfig, seed: u64) -> GtSample {
        let n = cfg.grid_res;
        let mut rng = CounterRng::keyed(&[seed, 0xf1e1d]);
        let sigma = DenseGrid::from_fn([n, n, n], |_, _, _| rng.next_range(0.0, 1.0));
        let alpha = DenseGrid::from_fn([n, n, n], |_, _, _| rng.next_range(0.3, 0.95));
        let mut mask = DenseGrid::zeros([n, n, n]);
        for v in mask.data.iter_mut() {
            *v = if rng.next_f64() < 0.7 { 1.0 } else { 0.0 };
        }
        mask.set(0, 0, 0, 1.0);
        let light_sh = match cfg.light_mode {
            LightMode::Env => Some(SHCoeffs::constant([0.8, 0.7, 0.6])),
            LightMode::Point => None,
        };
        GtSample {
            sigma,
            alpha,
            mask,
            scale: 44.0,
            light_sh,
        }
    }

    fn sample_of(cfg: &ModelConfig, seed: u64) -> TrainSample {
        let light_sh_b = match cfg.light_mode {
            LightMode::Env => Some(SHCoeffs::constant([0.5, 0.5, 0.9])),
            LightMode::Point => None,
        };
        TrainSample {
            views_a: random_views(cfg, seed),
            views_b: random_views(cfg, seed ^ 0xdead),
            gt: random_gt(cfg, seed),
            light_sh_b,
            id: seed,
        }
    }

    #[test]
    fn output_shapes_match_decomposition_arithmetic() {
        let cfg = ModelConfig::desk(LightMode::Point);
        let model = Model::init(cfg, 1).unwrap();
        let views = random_views(&model.config, 7);
        let mut tape = Tape::new();
        let leaves = leaf_params(&mut tape, &model);
        let fwd = forward(&mut tape, &model, &leaves, &views).unwrap();
        let pred = detach_prediction(&tape, &model, &fwd);
        let vm = pred.vm_sigma.unwrap();
        assert_eq!(vm.rank, 10);
        assert_eq!(vm.shape, [32, 32, 32]);
        // 3R vectors of length N and 3R matrices N×N.
        assert_eq!(vm.vx.len() + vm.vy.len() + vm.vz.len(), 960);
        assert_eq!(vm.myz.len() + vm.mxz.len() + vm.mxy.len(), 30720);
        assert_eq!(pred.sigma.shape, [32, 32, 32]);
        // The tape grid equals the reconstruction of the detached components.
        let recon = reconstruct_prediction(&vm);
        for (a, b) in recon.data.iter().zip(pred.sigma.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_final_decoder_layers_give_zero_grids() {
        let mut model = Model::init(tiny(LightMode::Point), 2).unwrap();
        for p in model.params.iter_mut() {
            if p.name.contains(".out.") {
                for v in p.value.data.iter_mut() {
                    *v = 0.0;
                }
            }
        }
        let views = random_views(&model.config, 3);
        let mut tape = Tape::new();
        let leaves = leaf_params(&mut tape, &model);
        let fwd = forward(&mut tape, &model, &leaves, &views).unwrap();
        let pred = detach_prediction(&tape, &model, &fwd);
        assert!(pred.sigma.data.iter().all(|&v| v == 0.0));
        assert!(pred.alpha.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_views_changes_latent() {
        let model = Model::init(tiny(LightMode::Point), 4).unwrap();
        let views = random_views(&model.config, 9);
        let mut swapped = views.clone();
        swapped.swap(0, 1);
        let mut t1 = Tape::new();
        let l1 = leaf_params(&mut t1, &model);
        let f1 = forward(&mut t1, &model, &l1, &views).unwrap();
        let mut t2 = Tape::new();
        let l2 = leaf_params(&mut t2, &model);
        let f2 = forward(&mut t2, &model, &l2, &swapped).unwrap();
        let z1 = &t1.value(f1.z).data;
        let z2 = &t2.value(f2.z).data;
        assert!(z1.iter().zip(z2.iter()).any(|(a, b)| a != b));
    }

    #[test]
    fn wrong_view_count_and_channels_error() {
        let model = Model::init(tiny(LightMode::Point), 4).unwrap();
        let views = random_views(&model.config, 1);
        let mut tape = Tape::new();
        let leaves = leaf_params(&mut tape, &model);
        match forward(&mut tape, &model, &leaves, &views[..4]) {
            Err(TensoisError::ViewCount { got: 4, .. }) => {}
            other => panic!("expected view-count error, got {other:?}"),
        }
        let bad: Vec<Tensor> = (0..6).map(|_| Tensor::zeros(&[2, 16, 16])).collect();
        match forward(&mut tape, &model, &leaves, &bad) {
            Err(TensoisError::ChannelLayout { .. }) => {}
            other => panic!("expected channel-layout error, got {other:?}"),
        }
    }

    #[test]
    fn loss_zero_at_ground_truth_and_linear_in_lambda() {
        let cfg = tiny(LightMode::Env);
        let gt = random_gt(&cfg, 11);
        let n = cfg.grid_res;
        // Fake forward handles that exactly reproduce the ground truth.
        let mut tape = Tape::new();
        let sigma = tape.leaf(Tensor::from_vec(&[n, n, n], gt.sigma.data.clone()));
        let alpha = tape.leaf(Tensor::from_vec(&[n, n, n], gt.alpha.data.clone()));
        let s_hat = tape.leaf(Tensor::from_vec(
            &[1],
            vec![normalize_scale(&cfg, gt.scale)],
        ));
        let mut flat = Vec::new();
        for c in 0..3 {
            flat.extend_from_slice(&gt.light_sh.as_ref().unwrap().coeffs[c]);
        }
        let light = tape.leaf(Tensor::from_vec(&[27], flat));
        let z = tape.leaf(Tensor::from_vec(&[2, 1, 1], vec![0.4, -0.2]));
        let fwd = ForwardVars {
            z,
            sigma_grid: sigma,
            alpha_grid: alpha,
            s_hat: Some(s_hat),
            light: Some(light),
            sigma_factors: None,
            alpha_factors: None,
        };
        let total = loss_total(&mut tape, &cfg, &fwd, &gt, (z, z), 0.1).unwrap();
        assert_eq!(tape.value(total).item(), 0.0);

        // λ sweep on distinct latents: total(λ) = total(0) + λ·L_reg.
        let z2 = tape.leaf(Tensor::from_vec(&[2, 1, 1], vec![0.1, 0.3]));
        let t0 = loss_total(&mut tape, &cfg, &fwd, &gt, (z, z2), 0.0).unwrap();
        let t1 = loss_total(&mut tape, &cfg, &fwd, &gt, (z, z2), 0.1).unwrap();
        let reg = tape.mse(z, z2);
        let expect = tape.value(t0).item() + 0.1 * tape.value(reg).item();
        assert!((tape.value(t1).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn l_vol_is_mean_over_occupancy() {
        let cfg = tiny(LightMode::Point);
        let gt = {
            let mut g = random_gt(&cfg, 13);
            for v in g.mask.data.iter_mut() {
                *v = 1.0;
            }
            g
        };
        let n = cfg.grid_res;
        let mut tape = Tape::new();
        // σ off by +0.1 everywhere, α exact → L_vol = 0.1.
        let mut sig = gt.sigma.data.clone();
        for v in sig.iter_mut() {
            *v += 0.1;
        }
        let sigma = tape.leaf(Tensor::from_vec(&[n, n, n], sig));
        let alpha = tape.leaf(Tensor::from_vec(&[n, n, n], gt.alpha.data.clone()));
        let fwd = ForwardVars {
            z: sigma,
            sigma_grid: sigma,
            alpha_grid: alpha,
            s_hat: None,
            light: None,
            sigma_factors: None,
            alpha_factors: None,
        };
        let parts = loss_components(&mut tape, &cfg, &fwd, &gt).unwrap();
        assert!((tape.value(parts.l_vol).item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn masked_l1_unchanged_by_extra_unoccupied_voxels() {
        // Adding mask-0 voxels (whatever the prediction there) leaves the
        // occupancy-normalized loss unchanged.
        let mut tape = Tape::new();
        let pred_small = tape.leaf(Tensor::from_vec(&[2, 1, 1], vec![1.0, 2.0]));
        let target_small = Tensor::from_vec(&[2, 1, 1], vec![0.5, 2.5]);
        let mask_small = Tensor::from_vec(&[2, 1, 1], vec![1.0, 1.0]);
        let small = tape.masked_l1(pred_small, &target_small, &mask_small);

        let pred_big = tape.leaf(Tensor::from_vec(&[4, 1, 1], vec![1.0, 2.0, 7.0, -3.0]));
        let target_big = Tensor::from_vec(&[4, 1, 1], vec![0.5, 2.5, 0.0, 0.0]);
        let mask_big = Tensor::from_vec(&[4, 1, 1], vec![1.0, 1.0, 0.0, 0.0]);
        let big = tape.masked_l1(pred_big, &target_big, &mask_big);
        assert_eq!(tape.value(small).item(), tape.value(big).item());
    }

    #[test]
    fn empty_mask_is_an_error() {
        let cfg = tiny(LightMode::Point);
        let mut gt = random_gt(&cfg, 17);
        for v in gt.mask.data.iter_mut() {
            *v = 0.0;
        }
        let n = cfg.grid_res;
        let mut tape = Tape::new();
        let sigma = tape.leaf(Tensor::zeros(&[n, n, n]));
        let fwd = ForwardVars {
            z: sigma,
            sigma_grid: sigma,
            alpha_grid: sigma,
            s_hat: None,
            light: None,
            sigma_factors: None,
            alpha_factors: None,
        };
        assert_eq!(
            loss_components(&mut tape, &cfg, &fwd, &gt).unwrap_err(),
            TensoisError::EmptyMask
        );
    }

    #[test]
    fn every_block_receives_gradient() {
        let model = Model::init(tiny(LightMode::Env), 21).unwrap();
        let sample = sample_of(&model.config, 23);
        let mut tape = Tape::new();
        let leaves = leaf_params(&mut tape, &model);
        let fwd_a = forward(&mut tape, &model, &leaves, &sample.views_a).unwrap();
        let fwd_b = forward(&mut tape, &model, &leaves, &sample.views_b).unwrap();
        let gt_b = gt_b_of(&sample);
        let (objective, _) = pair_objective(
            &mut tape,
            &model.config,
            &fwd_a,
            &fwd_b,
            &sample.gt,
            &gt_b,
            0.1,
        )
        .unwrap();
        assert!(tape.value(objective).item() > 0.0);
        let grads = tape.backward(objective);
        for prefix in [
            "enc0.", "enc1.", "enc2.", "enc3.", "enc4.", "enc5.", "dec.sigma.vec.",
            "dec.sigma.mat.", "dec.alpha.vec.", "dec.alpha.mat.", "head.scale.", "head.light.",
        ] {
            assert!(
                block_has_gradient(&model, &leaves, &grads, prefix),
                "no gradient reached block {prefix}"
            );
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights_bitwise() {
        let mut model = Model::init(tiny(LightMode::Point), 31).unwrap();
        let before: Vec<Vec<u64>> = model
            .params
            .iter()
            .map(|p| p.value.data.iter().map(|v| v.to_bits()).collect())
            .collect();
        let samples = [sample_of(&model.config, 41), sample_of(&model.config, 43)];
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 2,
            epochs: 1,
            lambda: 0.1,
            seed: 7,
        };
        train(&mut model, &samples, &[], &cfg, &SeqExec).unwrap();
        let after: Vec<Vec<u64>> = model
            .params
            .iter()
            .map(|p| p.value.data.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn non_finite_loss_reports_batch() {
        let mut model = Model::init(tiny(LightMode::Point), 31).unwrap();
        let mut bad = sample_of(&model.config, 47);
        bad.gt.sigma.set(0, 0, 0, f64::NAN);
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 1,
            epochs: 1,
            lambda: 0.1,
            seed: 7,
        };
        match train(&mut model, &[bad], &[], &cfg, &SeqExec) {
            Err(TensoisError::NonFiniteLoss { epoch: 0, batch: 0 }) => {}
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn short_training_reduces_single_sample_loss() {
        let mut model = Model::init(tiny(LightMode::Point), 51).unwrap();
        let sample = sample_of(&model.config, 53);
        let initial = eval_item(&model, &sample, 0.1).unwrap().l_vol;
        let cfg = TrainConfig {
            lr: 3e-3,
            batch_size: 1,
            epochs: 40,
            lambda: 0.1,
            seed: 7,
        };
        let outcome = train(&mut model, core::slice::from_ref(&sample), &[], &cfg, &SeqExec)
            .unwrap();
        let final_lvol = eval_item(&model, &sample, 0.1).unwrap().l_vol;
        assert!(
            final_lvol < 0.6 * initial,
            "overfit failed: {initial} -> {final_lvol}"
        );
        assert_eq!(outcome.log.len(), 40);
    }

    #[test]
    fn infer_is_deterministic_and_respects_mask() {
        let model = Model::init(tiny(LightMode::Point), 61).unwrap();
        let views = random_views(&model.config, 63);
        let n = model.config.grid_res;
        let mut mask = DenseGrid::zeros([n, n, n]);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if (i + j + k) % 2 == 0 {
                        mask.set(i, j, k, 1.0);
                    }
                }
            }
        }
        let (f1, p1) = infer(&model, &views, &mask).unwrap();
        let (f2, _) = infer(&model, &views, &mask).unwrap();
        assert_eq!(
            f1.sigma.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            f2.sigma.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let mut idx = 0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if (i + j + k) % 2 == 1 {
                        assert_eq!(f1.sigma.data[idx], 0.0);
                        assert_eq!(f1.albedo.data[idx], 0.0);
                    }
                    idx += 1;
                }
            }
        }
        // Scale lands inside the configured density range.
        let (lo, hi) = model.config.density_range;
        assert!(f1.scale >= lo && f1.scale <= hi);
        assert!((0.3..=0.95).contains(&p1.alpha_grid().data[0]) || p1.alpha_grid().data[0] == 0.0);
    }

    #[test]
    fn direct_regression_mode_trains_and_predicts_grids() {
        let mut cfg = tiny(LightMode::Point);
        cfg.direct_regression = true;
        let mut model = Model::init(cfg, 71).unwrap();
        let sample = sample_of(&model.config, 73);
        let out = grad_item(&model, &sample, 0.1).unwrap();
        assert!(out.objective.is_finite());
        assert!(out.flat_grad.iter().any(|&g| g != 0.0));
        let tcfg = TrainConfig {
            lr: 1e-3,
            batch_size: 1,
            epochs: 2,
            lambda: 0.1,
            seed: 7,
        };
        train(
            &mut model,
            core::slice::from_ref(&sample),
            &[],
            &tcfg,
            &SeqExec,
        )
        .unwrap();
        let (field, pred) = infer(&model, &sample.views_a, &sample.gt.mask).unwrap();
        assert!(pred.vm_sigma.is_none());
        assert_eq!(field.sigma.shape, [8, 8, 8]);
    }

    #[test]
    fn env_input_layout() {
        let rgb = Tensor::from_vec(&[3, 1, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let mask = Tensor::from_vec(&[1, 1, 2], vec![1.0, 0.0]);
        let x = env_input(&rgb, &mask);
        assert_eq!(x.shape, vec![9, 1, 2]);
        // I
        assert_eq!(&x.data[0..6], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        // I·M
        assert_eq!(&x.data[6..12], &[0.1, 0.0, 0.3, 0.0, 0.5, 0.0]);
        // M broadcast
        assert_eq!(&x.data[12..18], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }
}
