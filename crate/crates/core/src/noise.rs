//! Seeded 3D Perlin noise, its fractal (octave) sum, and synthesis of the
//! heterogeneous σ_t and α fields.
//!
//! Gradients are the 12 cube-edge directions (unit length), selected per
//! lattice node by a 64-bit hash of (lattice coords, frequency, seed) — no
//! permutation table, so identical inputs give identical bits on every
//! platform. With unit gradients the raw 3D value is bounded by √3/2;
//! rescaling by 2/√3 maps it onto [−1, 1].
//!
//! The fractal sum at octave l uses frequency 2^(a+l) and amplitude 2^(−l),
//! normalized by Z = Σ 2^(−l) = 2 − 2^(1−L) so the total stays in [−1, 1].

use crate::rng::hash_words;
use crate::tensor::DenseGrid;

#[cfg(not(feature = "std"))]
use crate::float::FloatExt;

/// Parameters of one fractal noise draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseSpec {
    /// Samples per axis of the target grid.
    pub grid_size: usize,
    /// Octave count L; octave l has frequency 2^(base_exp + l).
    pub octaves: u32,
    /// Base frequency exponent a.
    pub base_exp: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NoiseError {
    /// Violates 2^(a + L − 1) ≤ N: the finest lattice would be denser than
    /// the sample grid.
    LatticeTooFine { finest: u64, grid: usize },
    /// L must be at least 1.
    NoOctaves,
}

impl core::fmt::Display for NoiseError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            NoiseError::LatticeTooFine { finest, grid } => write!(
                f,
                "finest octave lattice {finest} exceeds grid size {grid}"
            ),
            NoiseError::NoOctaves => write!(f, "octave count must be at least 1"),
        }
    }
}

impl core::error::Error for NoiseError {}

impl NoiseSpec {
    pub fn new(grid_size: usize, octaves: u32, base_exp: u32, seed: u64) -> Result<Self, NoiseError> {
        let spec = NoiseSpec {
            grid_size,
            octaves,
            base_exp,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Desk-scale default: 32³ grid, five octaves, frequencies 2…32.
    pub fn desk(seed: u64) -> Self {
        NoiseSpec {
            grid_size: 32,
            octaves: 5,
            base_exp: 1,
            seed,
        }
    }

    /// Full-scale variant: 64³ grid, five octaves, frequencies 4…64.
    pub fn full(seed: u64) -> Self {
        NoiseSpec {
            grid_size: 64,
            octaves: 5,
            base_exp: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        if self.octaves == 0 {
            return Err(NoiseError::NoOctaves);
        }
        let finest = 1u64 << (self.base_exp + self.octaves - 1);
        if finest > self.grid_size as u64 {
            return Err(NoiseError::LatticeTooFine {
                finest,
                grid: self.grid_size,
            });
        }
        Ok(())
    }
}

/// Amplitude normalization Z = Σ_{l<L} 2^(−l) = 2 − 2^(1−L).
pub fn fractal_normalization(octaves: u32) -> f64 {
    2.0 - (2.0f64).powi(1 - octaves as i32)
}

// 12 cube-edge gradient directions, normalized to unit length. Unit
// gradients are what make the √3/2 output bound (and hence the [−1, 1]
// range after rescaling) rigorous: |Σ w·g·d| ≤ Σ w·|d| peaks at the cell
// center, where every corner offset has length √3/2.
const E: f64 = core::f64::consts::FRAC_1_SQRT_2;
const GRADS: [[f64; 3]; 12] = [
    [E, E, 0.0],
    [-E, E, 0.0],
    [E, -E, 0.0],
    [-E, -E, 0.0],
    [E, 0.0, E],
    [-E, 0.0, E],
    [E, 0.0, -E],
    [-E, 0.0, -E],
    [0.0, E, E],
    [0.0, -E, E],
    [0.0, E, -E],
    [0.0, -E, -E],
];

/// Gradient at a lattice node, keyed by node coords, frequency, and seed.
#[inline]
fn lattice_gradient(ix: i64, iy: i64, iz: i64, frequency: u32, seed: u64) -> [f64; 3] {
    let h = hash_words(&[seed, frequency as u64, ix as u64, iy as u64, iz as u64]);
    GRADS[(h % 12) as usize]
}

/// Quintic fade 6t⁵ − 15t⁴ + 10t³ (C² at the cell boundary).
#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Rescale so the analytic 3D bound √3/2 maps onto 1.
const PERLIN_SCALE: f64 = 1.154_700_538_379_251_5; // 2/√3

/// Classic Perlin noise at point `p` in lattice units.
///
/// Exactly 0 at integer lattice nodes; C¹ everywhere; output in [−1, 1].
pub fn perlin3(p: [f64; 3], frequency: u32, seed: u64) -> f64 {
    let xf = p[0].floor();
    let yf = p[1].floor();
    let zf = p[2].floor();
    let (ix, iy, iz) = (xf as i64, yf as i64, zf as i64);
    let (fx, fy, fz) = (p[0] - xf, p[1] - yf, p[2] - zf);
    let (ux, uy, uz) = (fade(fx), fade(fy), fade(fz));

    let mut corner = [0.0f64; 8];
    for (n, c) in corner.iter_mut().enumerate() {
        let (dx, dy, dz) = ((n >> 2) as i64, ((n >> 1) & 1) as i64, (n & 1) as i64);
        let g = lattice_gradient(ix + dx, iy + dy, iz + dz, frequency, seed);
        let ox = fx - dx as f64;
        let oy = fy - dy as f64;
        let oz = fz - dz as f64;
        *c = g[0] * ox + g[1] * oy + g[2] * oz;
    }
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let y0 = lerp(
        lerp(corner[0], corner[1], uz),
        lerp(corner[2], corner[3], uz),
        uy,
    );
    let y1 = lerp(
        lerp(corner[4], corner[5], uz),
        lerp(corner[6], corner[7], uz),
        uy,
    );
    PERLIN_SCALE * lerp(y0, y1, ux)
}

/// Fractal (octave) Perlin noise at grid coordinate `p` ∈ [0, N)³.
///
/// Octave l samples `perlin3` at `p·2^(a+l)/N` — both powers of two, so the
/// coordinate scaling is exact in floating point.
pub fn fractal_perlin3(p: [f64; 3], spec: &NoiseSpec) -> Result<f64, NoiseError> {
    spec.validate()?;
    let n = spec.grid_size as f64;
    let z = fractal_normalization(spec.octaves);
    let mut total = 0.0;
    let mut amp = 1.0;
    for l in 0..spec.octaves {
        let freq = 1u32 << (spec.base_exp + l);
        let s = freq as f64 / n;
        total += amp * perlin3([p[0] * s, p[1] * s, p[2] * s], freq, spec.seed);
        amp *= 0.5;
    }
    Ok(total / z)
}

/// σ_t field: |fractal noise| at every voxel — the modulus folds the smooth
/// noise and creates crease discontinuities along its zero set.
pub fn synth_sigma_field(spec: &NoiseSpec) -> Result<DenseGrid, NoiseError> {
    spec.validate()?;
    let n = spec.grid_size;
    let mut g = DenseGrid::zeros([n, n, n]);
    let mut idx = 0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let v = fractal_perlin3([i as f64, j as f64, k as f64], spec)?;
                g.data[idx] = v.abs();
                idx += 1;
            }
        }
    }
    Ok(g)
}

/// Remap of normalized noise onto the albedo range [0.3, 0.95].
#[inline]
pub fn albedo_remap(noise: f64) -> f64 {
    0.3 + 0.65 * (noise + 1.0) / 2.0
}

/// α field: smooth remap (no modulus) of an independent noise draw.
pub fn synth_albedo_field(spec: &NoiseSpec) -> Result<DenseGrid, NoiseError> {
    spec.validate()?;
    let n = spec.grid_size;
    let mut g = DenseGrid::zeros([n, n, n]);
    let mut idx = 0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let v = fractal_perlin3([i as f64, j as f64, k as f64], spec)?;
                g.data[idx] = albedo_remap(v);
                idx += 1;
            }
        }
    }
    Ok(g)
}
