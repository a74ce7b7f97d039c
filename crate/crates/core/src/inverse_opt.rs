//! Per-scene inverse optimization: fit σ_t/α (dense grid or VM components)
//! plus the density scale to a set of target images by Adam through the
//! differentiable ray-marcher, with anisotropic total-variation
//! regularization.

use alloc::vec;
use alloc::vec::Vec;

use crate::render::{
    raymarch_adjoint, raymarch_render, Background, Camera, Image, RenderConfig, RenderError,
    Scene, VolumeGrads,
};
use crate::geometry::GridSpec;
use crate::lighting::LightConfig;
use crate::rng::CounterRng;
use crate::tensor::{reconstruct, DenseGrid, MaskGrid, ScatterField, VmDecomposition};

#[cfg(not(feature = "std"))]
use crate::float::FloatExt;

/// Valid σ_t range of the synthesized fields.
pub const SIGMA_RANGE: (f64, f64) = (0.0, 1.0);
/// Valid single-scattering albedo range.
pub const ALBEDO_RANGE: (f64, f64) = (0.3, 0.95);

/// How the unknown volume is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    /// One free value per voxel, projected into range after each step.
    Dense,
    /// Low-rank VM components, clamped at evaluation (gradients gated).
    Vm { rank: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageLoss {
    L1,
    Mse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub parameterization: Parameterization,
    pub tv_weight: f64,
    pub steps: usize,
    pub lr: f64,
    pub image_loss: ImageLoss,
    pub seed: u64,
    /// Valid density-scale range; s is projected into it after each step.
    pub scale_range: (f64, f64),
}

impl OptimConfig {
    pub fn desk(parameterization: Parameterization) -> OptimConfig {
        OptimConfig {
            parameterization,
            tv_weight: 0.0,
            steps: 2000,
            lr: 2e-2,
            image_loss: ImageLoss::L1,
            seed: 0,
            scale_range: (8.0, 80.0),
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if self.steps == 0 {
            return Err(OptimError::BadConfig("steps must be ≥ 1"));
        }
        if !(self.tv_weight.is_finite() && self.tv_weight >= 0.0) {
            return Err(OptimError::BadConfig("tv_weight must be ≥ 0"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(OptimError::BadConfig("lr must be > 0"));
        }
        if let Parameterization::Vm { rank } = self.parameterization {
            if rank == 0 {
                return Err(OptimError::BadConfig("vm rank must be ≥ 1"));
            }
        }
        let (lo, hi) = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && hi > lo && lo > 0.0) {
            return Err(OptimError::BadConfig("degenerate scale range"));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum OptimError {
    BadConfig(&'static str),
    /// Target count or size does not match the camera rig / render config.
    TargetLayout,
    Render(RenderError),
    /// Image loss exceeded 10× its initial value; the trace up to and
    /// including the offending step is preserved.
    Diverged { step: usize, trace: Vec<f64> },
}

impl core::fmt::Display for OptimError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            OptimError::BadConfig(msg) => write!(f, "bad optimizer config: {msg}"),
            OptimError::TargetLayout => write!(f, "targets do not match rig or resolution"),
            OptimError::Render(e) => write!(f, "render failure: {e}"),
            OptimError::Diverged { step, trace } => write!(
                f,
                "image loss diverged at step {step} ({} > 10× initial {})",
                trace.last().copied().unwrap_or(f64::NAN),
                trace.first().copied().unwrap_or(f64::NAN)
            ),
        }
    }
}

impl core::error::Error for OptimError {}

impl From<RenderError> for OptimError {
    fn from(e: RenderError) -> Self {
        OptimError::Render(e)
    }
}

/// Anisotropic total variation: mean |forward difference| over all valid
/// x, y, and z neighbor pairs.
pub fn tv_loss(grid: &DenseGrid) -> f64 {
    let [ni, nj, nk] = grid.shape;
    let count = (ni.saturating_sub(1) * nj * nk
        + ni * nj.saturating_sub(1) * nk
        + ni * nj * nk.saturating_sub(1)) as f64;
    if count == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..ni {
        for j in 0..nj {
            for k in 0..nk {
                let v = grid.get(i, j, k);
                if i + 1 < ni {
                    acc += (grid.get(i + 1, j, k) - v).abs();
                }
                if j + 1 < nj {
                    acc += (grid.get(i, j + 1, k) - v).abs();
                }
                if k + 1 < nk {
                    acc += (grid.get(i, j, k + 1) - v).abs();
                }
            }
        }
    }
    acc / count
}

/// Adds `w · ∂tv_loss/∂grid` into `out` (sign subgradient, 0 at ties).
fn tv_grad_into(grid: &DenseGrid, w: f64, out: &mut DenseGrid) {
    let [ni, nj, nk] = grid.shape;
    let count = (ni.saturating_sub(1) * nj * nk
        + ni * nj.saturating_sub(1) * nk
        + ni * nj * nk.saturating_sub(1)) as f64;
    if count == 0.0 || w == 0.0 {
        return;
    }
    let g = w / count;
    for i in 0..ni {
        for j in 0..nj {
            for k in 0..nk {
                let v = grid.get(i, j, k);
                let push = |d: f64, hi_idx: usize, lo_idx: usize, out: &mut DenseGrid| {
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    out.data[hi_idx] += g * s;
                    out.data[lo_idx] -= g * s;
                };
                if i + 1 < ni {
                    let d = grid.get(i + 1, j, k) - v;
                    push(d, grid.idx(i + 1, j, k), grid.idx(i, j, k), out);
                }
                if j + 1 < nj {
                    let d = grid.get(i, j + 1, k) - v;
                    push(d, grid.idx(i, j + 1, k), grid.idx(i, j, k), out);
                }
                if k + 1 < nk {
                    let d = grid.get(i, j, k + 1) - v;
                    push(d, grid.idx(i, j, k + 1), grid.idx(i, j, k), out);
                }
            }
        }
    }
}

/// The fixed capture setup the targets were taken under.
#[derive(Debug, Clone)]
pub struct SceneSetup {
    pub cams: Vec<Camera>,
    pub light: LightConfig,
    pub background: Background,
    pub spec: GridSpec,
    pub render: RenderConfig,
}

/// Optimization result: the recovered field at the best-observed image loss,
/// the raw per-step image-loss trace, and (for VM runs) the raw components.
#[derive(Debug, Clone)]
pub struct OptimResult {
    pub field: ScatterField,
    /// Image loss measured at the start of each step (pre-update).
    pub trace: Vec<f64>,
    pub best_step: usize,
    pub best_loss: f64,
    /// Raw σ/α components for VM parameterization runs.
    pub vm: Option<(VmDecomposition, VmDecomposition)>,
}

impl OptimResult {
    /// Running minimum of the trace (monotone non-increasing by construction).
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trace.len());
        let mut best = f64::INFINITY;
        for &v in &self.trace {
            best = best.min(v);
            out.push(best);
        }
        out
    }
}

fn clamp_grid(grid: &DenseGrid, lo: f64, hi: f64) -> DenseGrid {
    let mut g = grid.clone();
    for v in g.data.iter_mut() {
        *v = v.clamp(lo, hi);
    }
    g
}

/// Zeroes `w` where the raw value was clamped (outside [lo, hi]).
fn gate_grad(raw: &DenseGrid, lo: f64, hi: f64, w: &mut DenseGrid) {
    for (g, &v) in w.data.iter_mut().zip(raw.data.iter()) {
        if v < lo || v > hi {
            *g = 0.0;
        }
    }
}

/// VJP of [`reconstruct`]: contracts an upstream grid-shaped gradient with
/// the fixed components to give component gradients.
fn vm_backprop(vm: &VmDecomposition, w: &DenseGrid) -> VmDecomposition {
    let [ni, nj, nk] = vm.shape;
    let mut g = VmDecomposition::zeros(vm.rank, vm.shape).expect("rank validated");
    for r in 0..vm.rank {
        for i in 0..ni {
            for j in 0..nj {
                for k in 0..nk {
                    let up = w.data[(i * nj + j) * nk + k];
                    if up == 0.0 {
                        continue;
                    }
                    g.vx[r * ni + i] += up * vm.myz[(r * nj + j) * nk + k];
                    g.myz[(r * nj + j) * nk + k] += up * vm.vx[r * ni + i];
                    g.vy[r * nj + j] += up * vm.mxz[(r * ni + i) * nk + k];
                    g.mxz[(r * ni + i) * nk + k] += up * vm.vy[r * nj + j];
                    g.vz[r * nk + k] += up * vm.mxy[(r * ni + i) * nj + j];
                    g.mxy[(r * ni + i) * nj + j] += up * vm.vz[r * nk + k];
                }
            }
        }
    }
    g
}

/// VM initialization: rank 0 encodes the constant `mid` exactly (unit
/// vectors, mid/3 matrices per axis); higher ranks get small random
/// components so their gradient products are nonzero.
fn vm_init(rank: usize, shape: [usize; 3], mid: f64, seed: u64, tag: u64) -> VmDecomposition {
    let mut vm = VmDecomposition::zeros(rank, shape).expect("rank validated");
    let [ni, nj, nk] = shape;
    for i in 0..ni {
        vm.vx[i] = 1.0;
    }
    for j in 0..nj {
        vm.vy[j] = 1.0;
    }
    for k in 0..nk {
        vm.vz[k] = 1.0;
    }
    let third = mid / 3.0;
    for v in vm.myz[..nj * nk].iter_mut() {
        *v = third;
    }
    for v in vm.mxz[..ni * nk].iter_mut() {
        *v = third;
    }
    for v in vm.mxy[..ni * nj].iter_mut() {
        *v = third;
    }
    let mut rng = CounterRng::keyed(&[seed, 0x1b17, tag]);
    for buf in [
        &mut vm.vx[ni..],
        &mut vm.vy[nj..],
        &mut vm.vz[nk..],
        &mut vm.myz[nj * nk..],
        &mut vm.mxz[ni * nk..],
        &mut vm.mxy[ni * nj..],
    ] {
        for v in buf.iter_mut() {
            *v = rng.next_range(-0.05, 0.05);
        }
    }
    vm
}

/// Flat parameter vector living behind Adam.
struct Params {
    data: Vec<f64>,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    fn new(n: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
        }
    }
}

/// Copies VM components into a flat buffer (vx, vy, vz, myz, mxz, mxy).
fn vm_to_flat(vm: &VmDecomposition, out: &mut Vec<f64>) {
    out.extend_from_slice(&vm.vx);
    out.extend_from_slice(&vm.vy);
    out.extend_from_slice(&vm.vz);
    out.extend_from_slice(&vm.myz);
    out.extend_from_slice(&vm.mxz);
    out.extend_from_slice(&vm.mxy);
}

fn vm_from_flat(vm: &mut VmDecomposition, flat: &[f64]) -> usize {
    let mut off = 0;
    for buf in [
        &mut vm.vx,
        &mut vm.vy,
        &mut vm.vz,
        &mut vm.myz,
        &mut vm.mxz,
        &mut vm.mxy,
    ] {
        let len = buf.len();
        buf.copy_from_slice(&flat[off..off + len]);
        off += len;
    }
    off
}

/// Image loss of one view and its per-pixel gradient; both normalized by the
/// total element count over all views so view contributions add to a mean.
fn image_loss_and_grad(
    rendered: &Image,
    target: &Image,
    loss: ImageLoss,
    inv_count: f64,
    grad: &mut Image,
) -> f64 {
    let mut acc = 0.0;
    for (o, (r, t)) in grad
        .data
        .iter_mut()
        .zip(rendered.data.iter().zip(target.data.iter()))
    {
        for c in 0..3 {
            let d = r[c] - t[c];
            match loss {
                ImageLoss::L1 => {
                    acc += d.abs();
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    o[c] = s * inv_count;
                }
                ImageLoss::Mse => {
                    acc += d * d;
                    o[c] = 2.0 * d * inv_count;
                }
            }
        }
    }
    acc * inv_count
}

/// Recovers a scatter field from target images by Adam through the
/// differentiable ray-marcher.
///
/// The per-step objective is the mean image loss over all views plus
/// `tv_weight · (tv(σ̂) + tv(α̂))` on the evaluated grids. Dense parameters
/// are projected into their valid ranges after each step; VM reconstructions
/// are clamped at evaluation with gradients gated at the clamp. A step whose
/// image loss exceeds 10× the initial one aborts with the trace collected so
/// far. The returned field is the one observed at the best (lowest) image
/// loss, so the reported best-so-far curve is monotone.
pub fn optimize_scene(
    targets: &[Image],
    mask: Option<&MaskGrid>,
    setup: &SceneSetup,
    cfg: &OptimConfig,
) -> Result<OptimResult, OptimError> {
    cfg.validate()?;
    setup
        .spec
        .validate()
        .map_err(|_| OptimError::BadConfig("bad grid spec"))?;
    if targets.is_empty()
        || targets.len() != setup.cams.len()
        || targets
            .iter()
            .any(|t| t.width != setup.render.width || t.height != setup.render.height)
    {
        return Err(OptimError::TargetLayout);
    }
    let shape = setup.spec.res;
    let (s_lo, s_hi) = cfg.scale_range;
    let sigma_mid = 0.5 * (SIGMA_RANGE.0 + SIGMA_RANGE.1);
    let albedo_mid = 0.5 * (ALBEDO_RANGE.0 + ALBEDO_RANGE.1);
    let n_vox = shape[0] * shape[1] * shape[2];

    // Flat parameter layout: [σ block | α block | scale].
    let (mut params, mut vm_sigma, mut vm_albedo) = match cfg.parameterization {
        Parameterization::Dense => {
            let mut flat = vec![sigma_mid; n_vox];
            flat.extend(core::iter::repeat(albedo_mid).take(n_vox));
            flat.push(0.5 * (s_lo + s_hi));
            (Params { data: flat }, None, None)
        }
        Parameterization::Vm { rank } => {
            let vs = vm_init(rank, shape, sigma_mid, cfg.seed, 0);
            let va = vm_init(rank, shape, albedo_mid, cfg.seed, 1);
            let mut flat = Vec::new();
            vm_to_flat(&vs, &mut flat);
            vm_to_flat(&va, &mut flat);
            flat.push(0.5 * (s_lo + s_hi));
            (Params { data: flat }, Some(vs), Some(va))
        }
    };
    let n_params = params.data.len();
    let mut adam = AdamState::new(n_params);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut best_loss = f64::INFINITY;
    let mut best_step = 0;
    let mut best_params = params.data.clone();
    let inv_count = 1.0 / (targets.len() * setup.render.width * setup.render.height * 3) as f64;
    let mut grad_img = Image::zeros(setup.render.width, setup.render.height);

    for step in 0..cfg.steps {
        // Evaluate parameters into grids (and keep raw values for gating).
        let scale = params.data[n_params - 1];
        let (sigma_eval, albedo_eval, raw_sigma, raw_albedo);
        match cfg.parameterization {
            Parameterization::Dense => {
                sigma_eval = DenseGrid {
                    shape,
                    data: params.data[..n_vox].to_vec(),
                };
                albedo_eval = DenseGrid {
                    shape,
                    data: params.data[n_vox..2 * n_vox].to_vec(),
                };
                raw_sigma = None;
                raw_albedo = None;
                debug_assert!(sigma_eval
                    .data
                    .iter()
                    .all(|&v| (SIGMA_RANGE.0..=SIGMA_RANGE.1).contains(&v)));
                debug_assert!(albedo_eval
                    .data
                    .iter()
                    .all(|&v| (ALBEDO_RANGE.0..=ALBEDO_RANGE.1).contains(&v)));
            }
            Parameterization::Vm { .. } => {
                let vs = vm_sigma.as_mut().expect("vm mode");
                let va = vm_albedo.as_mut().expect("vm mode");
                let off = vm_from_flat(vs, &params.data);
                vm_from_flat(va, &params.data[off..]);
                let rs = reconstruct(vs).map_err(|_| OptimError::BadConfig("vm shape"))?;
                let ra = reconstruct(va).map_err(|_| OptimError::BadConfig("vm shape"))?;
                sigma_eval = clamp_grid(&rs, SIGMA_RANGE.0, SIGMA_RANGE.1);
                albedo_eval = clamp_grid(&ra, ALBEDO_RANGE.0, ALBEDO_RANGE.1);
                raw_sigma = Some(rs);
                raw_albedo = Some(ra);
            }
        }
        debug_assert!((s_lo..=s_hi).contains(&scale));

        let scene = Scene {
            sigma: &sigma_eval,
            albedo: &albedo_eval,
            mask,
            scale,
            spec: setup.spec,
            light: setup.light.clone(),
            background: setup.background,
        };

        // Forward + adjoint over all views.
        let mut img_loss = 0.0;
        let mut acc = VolumeGrads {
            d_sigma: DenseGrid::zeros(shape),
            d_albedo: DenseGrid::zeros(shape),
            d_scale: 0.0,
        };
        for (cam, target) in setup.cams.iter().zip(targets.iter()) {
            let rendered = raymarch_render(&scene, cam, &setup.render)?;
            img_loss +=
                image_loss_and_grad(&rendered, target, cfg.image_loss, inv_count, &mut grad_img);
            let (_, vg) = raymarch_adjoint(&scene, cam, &setup.render, &grad_img)?;
            for (a, g) in acc.d_sigma.data.iter_mut().zip(vg.d_sigma.data.iter()) {
                *a += g;
            }
            for (a, g) in acc.d_albedo.data.iter_mut().zip(vg.d_albedo.data.iter()) {
                *a += g;
            }
            acc.d_scale += vg.d_scale;
        }

        trace.push(img_loss);
        if step == 0 || img_loss < best_loss {
            best_loss = img_loss;
            best_step = step;
            best_params.copy_from_slice(&params.data);
        }
        if img_loss > 10.0 * trace[0] || !img_loss.is_finite() {
            return Err(OptimError::Diverged { step, trace });
        }

        // TV regularization on the evaluated grids.
        if cfg.tv_weight > 0.0 {
            tv_grad_into(&sigma_eval, cfg.tv_weight, &mut acc.d_sigma);
            tv_grad_into(&albedo_eval, cfg.tv_weight, &mut acc.d_albedo);
        }

        // Pull grid gradients back onto the parameter vector.
        let mut grads = vec![0.0f64; n_params];
        match cfg.parameterization {
            Parameterization::Dense => {
                grads[..n_vox].copy_from_slice(&acc.d_sigma.data);
                grads[n_vox..2 * n_vox].copy_from_slice(&acc.d_albedo.data);
            }
            Parameterization::Vm { .. } => {
                let vs = vm_sigma.as_ref().expect("vm mode");
                let va = vm_albedo.as_ref().expect("vm mode");
                gate_grad(
                    raw_sigma.as_ref().unwrap(),
                    SIGMA_RANGE.0,
                    SIGMA_RANGE.1,
                    &mut acc.d_sigma,
                );
                gate_grad(
                    raw_albedo.as_ref().unwrap(),
                    ALBEDO_RANGE.0,
                    ALBEDO_RANGE.1,
                    &mut acc.d_albedo,
                );
                let gs = vm_backprop(vs, &acc.d_sigma);
                let ga = vm_backprop(va, &acc.d_albedo);
                let mut flat = Vec::with_capacity(n_params);
                vm_to_flat(&gs, &mut flat);
                vm_to_flat(&ga, &mut flat);
                grads[..n_params - 1].copy_from_slice(&flat);
            }
        }
        grads[n_params - 1] = acc.d_scale;

        adam.step(&mut params.data, &grads, cfg.lr);

        // Projection: dense grids and the scale always stay in range.
        if cfg.parameterization == Parameterization::Dense {
            for v in params.data[..n_vox].iter_mut() {
                *v = v.clamp(SIGMA_RANGE.0, SIGMA_RANGE.1);
            }
            for v in params.data[n_vox..2 * n_vox].iter_mut() {
                *v = v.clamp(ALBEDO_RANGE.0, ALBEDO_RANGE.1);
            }
        }
        let s = &mut params.data[n_params - 1];
        *s = s.clamp(s_lo, s_hi);
    }

    // Materialize the best-observed parameters into a field.
    let (field, vm_out) = match cfg.parameterization {
        Parameterization::Dense => {
            let sigma = DenseGrid {
                shape,
                data: best_params[..n_vox].to_vec(),
            };
            let albedo = DenseGrid {
                shape,
                data: best_params[n_vox..2 * n_vox].to_vec(),
            };
            let field = ScatterField::new(sigma, albedo, best_params[n_params - 1])
                .map_err(|_| OptimError::BadConfig("non-finite result"))?;
            (field, None)
        }
        Parameterization::Vm { .. } => {
            let vs = vm_sigma.as_mut().expect("vm mode");
            let va = vm_albedo.as_mut().expect("vm mode");
            let off = vm_from_flat(vs, &best_params);
            vm_from_flat(va, &best_params[off..]);
            let sigma = clamp_grid(
                &reconstruct(vs).map_err(|_| OptimError::BadConfig("vm shape"))?,
                SIGMA_RANGE.0,
                SIGMA_RANGE.1,
            );
            let albedo = clamp_grid(
                &reconstruct(va).map_err(|_| OptimError::BadConfig("vm shape"))?,
                ALBEDO_RANGE.0,
                ALBEDO_RANGE.1,
            );
            let field = ScatterField::new(sigma, albedo, best_params[n_params - 1])
                .map_err(|_| OptimError::BadConfig("non-finite result"))?;
            (field, Some((vs.clone(), va.clone())))
        }
    };
    Ok(OptimResult {
        field,
        trace,
        best_step,
        best_loss,
        vm: vm_out,
    })
}
