//! Evaluation metrics: masked MAE/MSE over voxel grids, multi-scale
//! structural similarity on images, and the homogeneous-media evaluation
//! protocol (per-sample mean ± std of the predicted parameters against
//! scalar ground truth).

use alloc::vec::Vec;

use crate::autodiff::Tensor;
use crate::geometry::GridSpec;
use crate::lighting::LightConfig;
use crate::render::{
    default_rig, olat_light_position, raymarch_render, Background, Image, OlatVariant,
    RenderConfig, RenderError, Scene,
};
use crate::rng::CounterRng;
use crate::tensois::{infer, Model, TensoisError};
use crate::tensor::{DenseGrid, MaskGrid, ScatterField};

#[cfg(not(feature = "std"))]
use crate::float::FloatExt;

#[derive(Debug)]
pub enum MetricsError {
    ShapeMismatch,
    EmptyMask,
    /// Smaller than 2×2: no scale of MS-SSIM is computable.
    ImageTooSmall,
    BadConfig(&'static str),
    /// Model predictions are identically zero over the occupied region.
    UntrainedModel,
    Render(RenderError),
    Model(TensoisError),
}

impl core::fmt::Display for MetricsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MetricsError::ShapeMismatch => write!(f, "grid or image shapes do not match"),
            MetricsError::EmptyMask => write!(f, "occupancy mask has no occupied voxel"),
            MetricsError::ImageTooSmall => write!(f, "image too small for any SSIM scale"),
            MetricsError::BadConfig(msg) => write!(f, "bad metrics config: {msg}"),
            MetricsError::UntrainedModel => {
                write!(f, "model predicts identically zero fields (untrained)")
            }
            MetricsError::Render(e) => write!(f, "render failure: {e}"),
            MetricsError::Model(e) => write!(f, "model failure: {e}"),
        }
    }
}

impl core::error::Error for MetricsError {}

impl From<RenderError> for MetricsError {
    fn from(e: RenderError) -> Self {
        MetricsError::Render(e)
    }
}

impl From<TensoisError> for MetricsError {
    fn from(e: TensoisError) -> Self {
        MetricsError::Model(e)
    }
}

fn masked_reduce(
    pred: &DenseGrid,
    gt: &DenseGrid,
    mask: &MaskGrid,
    square: bool,
) -> Result<f64, MetricsError> {
    if pred.shape != gt.shape || pred.shape != mask.shape {
        return Err(MetricsError::ShapeMismatch);
    }
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for ((p, g), m) in pred
        .data
        .iter()
        .zip(gt.data.iter())
        .zip(mask.data.iter())
    {
        let d = p - g;
        acc += m * if square { d * d } else { d.abs() };
        wsum += m;
    }
    if wsum <= 0.0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(acc / wsum)
}

/// Mean absolute error over the occupied region: Σ|pred − gt|·M / ΣM.
pub fn masked_mae(
    pred: &DenseGrid,
    gt: &DenseGrid,
    mask: &MaskGrid,
) -> Result<f64, MetricsError> {
    masked_reduce(pred, gt, mask, false)
}

/// Mean squared error over the occupied region: Σ(pred − gt)²·M / ΣM.
pub fn masked_mse(
    pred: &DenseGrid,
    gt: &DenseGrid,
    mask: &MaskGrid,
) -> Result<f64, MetricsError> {
    masked_reduce(pred, gt, mask, true)
}

// ---------------------------------------------------------------------------
// MS-SSIM
// ---------------------------------------------------------------------------

/// Scale weights of the standard five-level MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// MS-SSIM value plus how it was computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsSsimDetail {
    pub value: f64,
    pub scales_used: usize,
    /// True when the image was too small for all five scales and the weights
    /// of the feasible prefix were renormalized.
    pub fallback: bool,
}

struct Gray {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Gray {
    /// 2×2 mean pooling; odd trailing rows/columns are dropped.
    fn downsample(&self) -> Gray {
        let (nw, nh) = (self.w / 2, self.h / 2);
        let mut data = Vec::with_capacity(nw * nh);
        for y in 0..nh {
            for x in 0..nw {
                let i = 2 * y * self.w + 2 * x;
                data.push(0.25 * (self.data[i] + self.data[i + 1] + self.data[i + self.w] + self.data[i + self.w + 1]));
            }
        }
        Gray { w: nw, h: nh, data }
    }
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean luminance and contrast-structure terms of one scale. Windows are
/// clipped at borders with weight renormalization.
fn ssim_scale_stats(a: &Gray, b: &Gray, c1: f64, c2: f64) -> (f64, f64) {
    let win = gaussian_window();
    let half = WINDOW as isize / 2;
    let mut l_acc = 0.0;
    let mut cs_acc = 0.0;
    let n = (a.w * a.h) as f64;
    for cy in 0..a.h as isize {
        for cx in 0..a.w as isize {
            let mut wsum = 0.0;
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in -half..=half {
                let y = cy + dy;
                if y < 0 || y >= a.h as isize {
                    continue;
                }
                let wy = win[(dy + half) as usize];
                for dx in -half..=half {
                    let x = cx + dx;
                    if x < 0 || x >= a.w as isize {
                        continue;
                    }
                    let w = wy * win[(dx + half) as usize];
                    let idx = y as usize * a.w + x as usize;
                    wsum += w;
                    ma += w * a.data[idx];
                    mb += w * b.data[idx];
                }
            }
            ma /= wsum;
            mb /= wsum;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in -half..=half {
                let y = cy + dy;
                if y < 0 || y >= a.h as isize {
                    continue;
                }
                let wy = win[(dy + half) as usize];
                for dx in -half..=half {
                    let x = cx + dx;
                    if x < 0 || x >= a.w as isize {
                        continue;
                    }
                    let w = wy * win[(dx + half) as usize];
                    let idx = y as usize * a.w + x as usize;
                    let da = a.data[idx] - ma;
                    let db = b.data[idx] - mb;
                    va += w * da * da;
                    vb += w * db * db;
                    cov += w * da * db;
                }
            }
            va /= wsum;
            vb /= wsum;
            cov /= wsum;
            l_acc += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            cs_acc += (2.0 * cov + c2) / (va + vb + c2);
        }
    }
    (l_acc / n, cs_acc / n)
}

fn ms_ssim_gray(a: Gray, b: Gray) -> Result<MsSsimDetail, MetricsError> {
    let min_side = a.w.min(a.h);
    if min_side < 2 {
        return Err(MetricsError::ImageTooSmall);
    }
    // Largest M with floor(min_side / 2^(M−1)) ≥ 2, capped at five.
    let mut scales = 1;
    while scales < 5 && (min_side >> scales) >= 2 {
        scales += 1;
    }
    let fallback = scales < 5;
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();

    // Dynamic range from the pair's maximum magnitude.
    let range = a
        .data
        .iter()
        .chain(b.data.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        + 1e-12;
    let c1 = (K1 * range) * (K1 * range);
    let c2 = (K2 * range) * (K2 * range);

    let (mut ca, mut cb) = (a, b);
    let mut value = 1.0;
    for s in 0..scales {
        let (l, cs) = ssim_scale_stats(&ca, &cb, c1, c2);
        let weight = MS_SSIM_WEIGHTS[s] / wsum;
        value *= cs.max(0.0).powf(weight);
        if s + 1 == scales {
            value *= l.max(0.0).powf(weight);
        } else {
            ca = ca.downsample();
            cb = cb.downsample();
        }
    }
    Ok(MsSsimDetail {
        value,
        scales_used: scales,
        fallback,
    })
}

/// Multi-scale structural similarity in [0, 1], averaged over RGB channels.
///
/// Standard construction: 11×11 Gaussian window (σ = 1.5), K₁ = 0.01,
/// K₂ = 0.03, dynamic range taken from the image pair, contrast-structure
/// at every dyadic scale and luminance at the coarsest, exponents
/// {0.0448, 0.2856, 0.3001, 0.2363, 0.1333}. Images whose shorter side
/// cannot sustain five scales fall back to the feasible prefix with
/// renormalized weights (see [`ms_ssim_detailed`]).
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    ms_ssim_detailed(a, b).map(|d| d.value)
}

/// [`ms_ssim`] plus the number of scales used and the fallback flag.
pub fn ms_ssim_detailed(a: &Image, b: &Image) -> Result<MsSsimDetail, MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::ShapeMismatch);
    }
    let mut acc = 0.0;
    let mut detail = None;
    for c in 0..3 {
        let ga = Gray {
            w: a.width,
            h: a.height,
            data: a.channel(c),
        };
        let gb = Gray {
            w: b.width,
            h: b.height,
            data: b.channel(c),
        };
        let d = ms_ssim_gray(ga, gb)?;
        acc += d.value;
        detail = Some(d);
    }
    let d = detail.expect("three channels processed");
    Ok(MsSsimDetail {
        value: acc / 3.0,
        ..d
    })
}

// ---------------------------------------------------------------------------
// Homogeneous evaluation protocol
// ---------------------------------------------------------------------------

/// Produces a field prediction from rendered views; implemented by [`Model`]
/// and by test oracles. `&mut` so predictors may keep protocol state.
pub trait ScatterPredictor {
    fn predict(
        &mut self,
        views: &[Tensor],
        mask: &MaskGrid,
    ) -> Result<ScatterField, MetricsError>;
}

impl ScatterPredictor for Model {
    fn predict(
        &mut self,
        views: &[Tensor],
        mask: &MaskGrid,
    ) -> Result<ScatterField, MetricsError> {
        let (field, _) = infer(self, views, mask)?;
        Ok(field)
    }
}

#[derive(Debug, Clone)]
pub struct HomoEvalConfig {
    /// Random (σ_t, α) draws per shape.
    pub draws: usize,
    pub sigma_range: (f64, f64),
    pub alpha_range: (f64, f64),
    pub seed: u64,
    /// Point-light radiant intensity for the rendered probe views.
    pub light_intensity: [f64; 3],
}

impl HomoEvalConfig {
    pub fn desk() -> HomoEvalConfig {
        HomoEvalConfig {
            draws: 5,
            sigma_range: (8.0, 80.0),
            alpha_range: (0.3, 0.95),
            seed: 0,
            light_intensity: [40.0; 3],
        }
    }
}

/// One homogeneous probe: scalar ground truth and the prediction's
/// occupied-voxel statistics.
#[derive(Debug, Clone)]
pub struct HomoSample {
    pub shape: usize,
    pub draw: usize,
    pub gt_sigma_t: f64,
    pub gt_alpha: f64,
    /// Mean/σ of the per-voxel physical extinction ŝ·σ̂ over occupancy.
    pub mean_sigma_t: f64,
    pub std_sigma_t: f64,
    pub mean_alpha: f64,
    pub std_alpha: f64,
}

/// Aggregate table of the protocol.
#[derive(Debug, Clone)]
pub struct HomoEvalReport {
    pub samples: Vec<HomoSample>,
    /// MAE of the per-sample extinction means vs. ground truth, normalized
    /// by the σ_t range width (so it is comparable to the α number).
    pub mae_sigma_norm: f64,
    /// MAE of the per-sample albedo means vs. ground truth (raw units).
    pub mae_alpha: f64,
}

/// The deterministic (σ_t, α) ground-truth draw of protocol sample
/// (shape, draw). Exposed so oracles can reproduce the schedule.
pub fn homo_draw(cfg: &HomoEvalConfig, shape: usize, draw: usize) -> (f64, f64) {
    let mut rng = CounterRng::keyed(&[cfg.seed, 0x40e0, shape as u64, draw as u64]);
    let sigma_t = rng.next_range(cfg.sigma_range.0, cfg.sigma_range.1);
    let alpha = rng.next_range(cfg.alpha_range.0, cfg.alpha_range.1);
    (sigma_t, alpha)
}

fn occupied_stats(grid: &DenseGrid, mask: &MaskGrid) -> (f64, f64, f64) {
    let mut n = 0.0;
    let mut mean = 0.0;
    for (v, m) in grid.data.iter().zip(mask.data.iter()) {
        if *m > 0.0 {
            n += 1.0;
            mean += v;
        }
    }
    mean /= n;
    let mut var = 0.0;
    for (v, m) in grid.data.iter().zip(mask.data.iter()) {
        if *m > 0.0 {
            let d = v - mean;
            var += d * d;
        }
    }
    (mean, (var / n).sqrt(), n)
}

/// Runs the homogeneous-evaluation protocol: for every shape and draw,
/// renders six colocated-OLAT views of a homogeneous field (σ ≡ 1 carried
/// by the density scale, constant α), asks the predictor for a field, and
/// tabulates occupied-voxel statistics. Iteration order is shapes outer,
/// draws inner, matching [`homo_draw`].
///
/// The model consumes single-channel views (RGB mean), so the predictor must
/// be a point-light model when it is a [`Model`].
pub fn homo_eval(
    predictor: &mut dyn ScatterPredictor,
    grid_res: usize,
    image_size: usize,
    masks: &[MaskGrid],
    cfg: &HomoEvalConfig,
) -> Result<HomoEvalReport, MetricsError> {
    if cfg.draws == 0 || masks.is_empty() {
        return Err(MetricsError::BadConfig("need at least one shape and draw"));
    }
    if !(cfg.sigma_range.1 > cfg.sigma_range.0 && cfg.alpha_range.1 > cfg.alpha_range.0) {
        return Err(MetricsError::BadConfig("degenerate parameter ranges"));
    }
    let n = grid_res;
    let spec = GridSpec::cube(n);
    let cams = default_rig();
    let rcfg = RenderConfig::for_grid(&spec, image_size, image_size, Background::Black);
    let ones = DenseGrid::from_fn([n, n, n], |_, _, _| 1.0);

    let mut samples = Vec::with_capacity(masks.len() * cfg.draws);
    let mut mae_sig = 0.0;
    let mut mae_alb = 0.0;
    for (shape, mask) in masks.iter().enumerate() {
        if mask.shape != [n, n, n] {
            return Err(MetricsError::ShapeMismatch);
        }
        if mask.data.iter().all(|&m| m <= 0.0) {
            return Err(MetricsError::EmptyMask);
        }
        for draw in 0..cfg.draws {
            let (gt_sigma_t, gt_alpha) = homo_draw(cfg, shape, draw);
            let albedo = DenseGrid::from_fn([n, n, n], |_, _, _| gt_alpha);
            let mut views = Vec::with_capacity(cams.len());
            for (v, cam) in cams.iter().enumerate() {
                let scene = Scene {
                    sigma: &ones,
                    albedo: &albedo,
                    mask: Some(mask),
                    scale: gt_sigma_t,
                    spec,
                    light: LightConfig::Point {
                        position: olat_light_position(v, OlatVariant::Colocated, 1.0),
                        intensity: cfg.light_intensity,
                    },
                    background: Background::Black,
                };
                let img = raymarch_render(&scene, cam, &rcfg)?;
                let gray: Vec<f64> = img
                    .data
                    .iter()
                    .map(|p| (p[0] + p[1] + p[2]) / 3.0)
                    .collect();
                views.push(Tensor::from_vec(&[1, image_size, image_size], gray));
            }
            let field = predictor.predict(&views, mask)?;
            if field.sigma.shape != [n, n, n] {
                return Err(MetricsError::ShapeMismatch);
            }
            // Physical extinction per voxel is scale × σ̂.
            let mut ext = field.sigma.clone();
            for v in ext.data.iter_mut() {
                *v *= field.scale;
            }
            let (mean_sigma_t, std_sigma_t, _) = occupied_stats(&ext, mask);
            let (mean_alpha, std_alpha, _) = occupied_stats(&field.albedo, mask);
            if mean_sigma_t == 0.0 && std_sigma_t == 0.0 {
                return Err(MetricsError::UntrainedModel);
            }
            mae_sig += (mean_sigma_t - gt_sigma_t).abs();
            mae_alb += (mean_alpha - gt_alpha).abs();
            samples.push(HomoSample {
                shape,
                draw,
                gt_sigma_t,
                gt_alpha,
                mean_sigma_t,
                std_sigma_t,
                mean_alpha,
                std_alpha,
            });
        }
    }
    let count = samples.len() as f64;
    Ok(HomoEvalReport {
        samples,
        mae_sigma_norm: mae_sig / count / (cfg.sigma_range.1 - cfg.sigma_range.0),
        mae_alpha: mae_alb / count,
    })
}
