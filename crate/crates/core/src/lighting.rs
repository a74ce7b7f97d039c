//! Real spherical-harmonic lighting, bands 0–2 (9 coefficients per channel).
//!
//! Basis functions use the real SH convention with the Condon–Shortley phase
//! omitted, ordered (l, m) = (0,0), (1,−1), (1,0), (1,1), (2,−2) … (2,2).
//! Directions are z-up: θ is the polar angle from +z, φ the azimuth from +x.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::float::FloatExt;

pub const SH_COEFF_COUNT: usize = 9;

// Normalization constants for bands 0–2.
const C0: f64 = 0.282_094_791_773_878_14; // 1/(2√π)
const C1: f64 = 0.488_602_511_902_919_9; // √(3/4π)
const C2: f64 = 1.092_548_430_592_079_2; // √(15/4π)
const C20: f64 = 0.315_391_565_252_520_05; // √(5/16π)
const C22: f64 = 0.546_274_215_296_039_6; // √(15/16π)

/// RGB spherical-harmonic coefficients, bands 0–2.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SHCoeffs {
    /// `coeffs[channel][basis]`, channels R, G, B.
    pub coeffs: [[f64; SH_COEFF_COUNT]; 3],
}

impl SHCoeffs {
    /// Coefficients whose reconstruction is the constant `value` everywhere.
    pub fn constant(value: [f64; 3]) -> Self {
        let mut c = SHCoeffs::default();
        for ch in 0..3 {
            c.coeffs[ch][0] = value[ch] / C0;
        }
        c
    }

    /// Gray (equal-channel) coefficients from a single 9-vector.
    pub fn gray(c: [f64; SH_COEFF_COUNT]) -> Self {
        SHCoeffs {
            coeffs: [c, c, c],
        }
    }
}

/// Evaluate the 9 basis functions at a direction (normalized internally).
///
/// Panics on a zero-length direction — that is always a caller bug.
pub fn sh_basis(dir: [f64; 3]) -> [f64; SH_COEFF_COUNT] {
    let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    assert!(len > 0.0, "sh_basis: zero-length direction");
    let (x, y, z) = (dir[0] / len, dir[1] / len, dir[2] / len);
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2 * x * y,
        C2 * y * z,
        C20 * (3.0 * z * z - 1.0),
        C2 * x * z,
        C22 * (x * x - y * y),
    ]
}

/// Reconstructed radiance Σ c·Y at a direction.
pub fn eval_sh(sh: &SHCoeffs, dir: [f64; 3]) -> [f64; 3] {
    let basis = sh_basis(dir);
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let mut acc = 0.0;
        for i in 0..SH_COEFF_COUNT {
            acc += sh.coeffs[ch][i] * basis[i];
        }
        out[ch] = acc;
    }
    out
}

/// Equirectangular (lat-long) radiance map, rows from θ = 0 (up, +z) to π.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvMap {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB radiance, `data[row * width + col]`.
    pub data: Vec<[f64; 3]>,
}

impl EnvMap {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Self {
        assert!(width > 0 && height > 0, "EnvMap: empty dimensions");
        assert_eq!(data.len(), width * height, "EnvMap: data length mismatch");
        EnvMap {
            width,
            height,
            data,
        }
    }

    pub fn constant(width: usize, height: usize, value: [f64; 3]) -> Self {
        EnvMap::new(width, height, vec![value; width * height])
    }

    /// Build a map by evaluating `f(direction)` at every pixel center.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(pixel_direction(r, c, width, height)));
            }
        }
        EnvMap::new(width, height, data)
    }

    /// Nearest-pixel radiance lookup in a direction.
    pub fn sample_dir(&self, dir: [f64; 3]) -> [f64; 3] {
        let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        assert!(len > 0.0, "EnvMap::sample_dir: zero-length direction");
        let z = (dir[2] / len).clamp(-1.0, 1.0);
        let theta = z.acos();
        let mut phi = dir[1].atan2(dir[0]);
        if phi < 0.0 {
            phi += 2.0 * core::f64::consts::PI;
        }
        let r = ((theta / core::f64::consts::PI * self.height as f64) as usize)
            .min(self.height - 1);
        let c = ((phi / (2.0 * core::f64::consts::PI) * self.width as f64) as usize)
            .min(self.width - 1);
        self.data[r * self.width + c]
    }
}

/// World direction of a lat-long pixel center.
#[inline]
pub fn pixel_direction(row: usize, col: usize, width: usize, height: usize) -> [f64; 3] {
    let theta = core::f64::consts::PI * (row as f64 + 0.5) / height as f64;
    let phi = 2.0 * core::f64::consts::PI * (col as f64 + 0.5) / width as f64;
    let st = theta.sin();
    [st * phi.cos(), st * phi.sin(), theta.cos()]
}

/// Project a lat-long map onto bands 0–2: c = ∫ L(ω)·Y(ω) dω, quadrature
/// over pixel centers with solid-angle weights Δω = (2π/W)(π/H)·sin θ.
pub fn project_envmap(map: &EnvMap) -> SHCoeffs {
    let dphi = 2.0 * core::f64::consts::PI / map.width as f64;
    let dtheta = core::f64::consts::PI / map.height as f64;
    let mut out = SHCoeffs::default();
    for r in 0..map.height {
        let theta = core::f64::consts::PI * (r as f64 + 0.5) / map.height as f64;
        let w_row = dphi * dtheta * theta.sin();
        for c in 0..map.width {
            let basis = sh_basis(pixel_direction(r, c, map.width, map.height));
            let px = map.data[r * map.width + c];
            for ch in 0..3 {
                let lw = px[ch] * w_row;
                for i in 0..SH_COEFF_COUNT {
                    out.coeffs[ch][i] += lw * basis[i];
                }
            }
        }
    }
    out
}

/// A light source for rendering: either a point emitter or an SH environment.
#[derive(Debug, Clone, PartialEq)]
pub enum LightConfig {
    /// Isotropic point emitter: radiant intensity, no falloff modeling beyond
    /// medium attenuation (desk-scale scenes keep distances near unity).
    Point {
        position: [f64; 3],
        intensity: [f64; 3],
    },
    /// Low-frequency environment described by SH bands 0–2.
    Env(SHCoeffs),
}

impl LightConfig {
    /// Uniform white environment of the given radiance.
    pub fn uniform_env(radiance: f64) -> Self {
        LightConfig::Env(SHCoeffs::constant([radiance; 3]))
    }
}

/// Directions and weights of a fixed 6-point axis quadrature on the sphere
/// (used for environment in-scattering: ∫ f dω ≈ (4π/6) Σ f(±axes)).
pub const AXIS_DIRECTIONS: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use approx::assert_relative_eq;

    const SQRT_4PI: f64 = 3.544_907_701_811_032;

    #[test]
    fn basis_constants_at_poles() {
        let b = sh_basis([0.0, 0.0, 1.0]);
        assert_relative_eq!(b[0], 0.282_094_8, max_relative = 1e-6);
        assert_relative_eq!(b[2], 0.488_602_5, max_relative = 1e-6);
        assert_relative_eq!(b[6], 2.0 * C20, max_relative = 1e-12);
        for i in [1, 3, 4, 5, 7, 8] {
            assert!(b[i].abs() < 1e-15, "basis {i} should vanish at +z");
        }
        // x-axis: only DC, Y11, Y20 (= −C20), Y22 nonzero.
        let bx = sh_basis([1.0, 0.0, 0.0]);
        assert_relative_eq!(bx[3], C1, max_relative = 1e-12);
        assert_relative_eq!(bx[6], -C20, max_relative = 1e-12);
        assert_relative_eq!(bx[8], C22, max_relative = 1e-12);
    }

    #[test]
    fn basis_normalizes_input() {
        let a = sh_basis([0.0, 0.0, 10.0]);
        let b = sh_basis([0.0, 0.0, 1.0]);
        for i in 0..SH_COEFF_COUNT {
            assert_eq!(a[i].to_bits(), b[i].to_bits());
        }
    }

    #[test]
    #[should_panic(expected = "zero-length")]
    fn basis_rejects_zero_direction() {
        sh_basis([0.0, 0.0, 0.0]);
    }

    #[test]
    fn monte_carlo_orthonormality() {
        let mut rng = CounterRng::new(40);
        let n = 200_000;
        let mut gram = [[0.0f64; SH_COEFF_COUNT]; SH_COEFF_COUNT];
        for _ in 0..n {
            let b = sh_basis(rng.next_unit_dir());
            for i in 0..SH_COEFF_COUNT {
                for j in i..SH_COEFF_COUNT {
                    gram[i][j] += b[i] * b[j];
                }
            }
        }
        let w = 4.0 * core::f64::consts::PI / n as f64;
        for i in 0..SH_COEFF_COUNT {
            for j in i..SH_COEFF_COUNT {
                let v = gram[i][j] * w;
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (v - expect).abs() < 0.02,
                    "<Y{i},Y{j}> = {v}, expected {expect}"
                );
            }
        }
    }

    #[test]
    fn constant_map_projects_to_dc_and_reconstructs_unity() {
        let map = EnvMap::constant(256, 128, [1.0, 1.0, 1.0]);
        let sh = project_envmap(&map);
        for ch in 0..3 {
            assert_relative_eq!(sh.coeffs[ch][0], SQRT_4PI, max_relative = 1e-4);
            for i in 1..SH_COEFF_COUNT {
                assert!(
                    sh.coeffs[ch][i].abs() < 1e-3,
                    "coeff {i} = {}",
                    sh.coeffs[ch][i]
                );
            }
        }
        for dir in [[0.0, 0.0, 1.0], [1.0, 2.0, -0.5], [-1.0, 0.3, 0.1]] {
            let v = eval_sh(&sh, dir);
            for ch in 0..3 {
                assert_relative_eq!(v[ch], 1.0, epsilon = 1e-3);
            }
        }
        // SHCoeffs::constant inverts eval exactly.
        let direct = SHCoeffs::constant([2.5, 1.0, 0.25]);
        let v = eval_sh(&direct, [0.3, -0.4, 0.866]);
        assert_relative_eq!(v[0], 2.5, max_relative = 1e-12);
        assert_relative_eq!(v[2], 0.25, max_relative = 1e-12);
    }

    #[test]
    fn clamped_cosine_zonal_coefficients() {
        // L(ω) = max(cos θ, 0): zonal coefficients have closed forms
        // c0 = π·C0, c1z = (2π/3)·C1, c2z = (π/4)·2·C20.
        let map = EnvMap::from_fn(512, 256, |d| {
            let c = d[2].max(0.0);
            [c, c, c]
        });
        let sh = project_envmap(&map);
        assert_relative_eq!(
            sh.coeffs[0][0],
            core::f64::consts::PI * C0,
            epsilon = 1e-3
        );
        assert_relative_eq!(sh.coeffs[0][2], 1.023_326_7, epsilon = 1e-3);
        assert_relative_eq!(
            sh.coeffs[0][6],
            core::f64::consts::FRAC_PI_2 * C20,
            epsilon = 1e-3
        );
        // Non-zonal coefficients vanish by symmetry.
        for i in [1, 3, 4, 5, 7, 8] {
            assert!(sh.coeffs[0][i].abs() < 1e-6);
        }
    }

    #[test]
    fn band_limited_map_roundtrips() {
        let mut rng = CounterRng::new(91);
        let mut truth = SHCoeffs::default();
        for ch in 0..3 {
            for i in 0..SH_COEFF_COUNT {
                truth.coeffs[ch][i] = rng.next_range(-1.0, 1.0);
            }
        }
        let map = EnvMap::from_fn(256, 128, |d| eval_sh(&truth, d));
        let back = project_envmap(&map);
        for ch in 0..3 {
            for i in 0..SH_COEFF_COUNT {
                assert!(
                    (back.coeffs[ch][i] - truth.coeffs[ch][i]).abs() < 1e-3,
                    "ch {ch} coeff {i}: {} vs {}",
                    back.coeffs[ch][i],
                    truth.coeffs[ch][i]
                );
            }
        }
    }

    #[test]
    fn projection_is_linear() {
        let m1 = EnvMap::from_fn(32, 16, |d| [d[2].abs(), 0.5, d[0] * d[0]]);
        let m2 = EnvMap::from_fn(32, 16, |d| [0.1, d[1].max(0.0), 1.0]);
        let combo = EnvMap::new(
            32,
            16,
            m1.data
                .iter()
                .zip(m2.data.iter())
                .map(|(a, b)| [2.0 * a[0] + 3.0 * b[0], 2.0 * a[1] + 3.0 * b[1], 2.0 * a[2] + 3.0 * b[2]])
                .collect(),
        );
        let c1 = project_envmap(&m1);
        let c2 = project_envmap(&m2);
        let cc = project_envmap(&combo);
        for ch in 0..3 {
            for i in 0..SH_COEFF_COUNT {
                let expect = 2.0 * c1.coeffs[ch][i] + 3.0 * c2.coeffs[ch][i];
                assert_relative_eq!(cc.coeffs[ch][i], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dc_invariant_under_azimuthal_rotation() {
        let mut rng = CounterRng::new(5);
        let data: Vec<[f64; 3]> = (0..32 * 16)
            .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
            .collect();
        let map = EnvMap::new(32, 16, data.clone());
        // Rotate each row by 8 columns (a 90° azimuth turn).
        let mut rotated = data;
        for r in 0..16 {
            rotated[r * 32..(r + 1) * 32].rotate_left(8);
        }
        let rot = EnvMap::new(32, 16, rotated);
        let a = project_envmap(&map);
        let b = project_envmap(&rot);
        for ch in 0..3 {
            assert_relative_eq!(a.coeffs[ch][0], b.coeffs[ch][0], epsilon = 1e-12);
        }
    }

    #[test]
    fn envmap_nearest_lookup_hits_poles_and_equator() {
        let map = EnvMap::from_fn(64, 32, |d| [d[2], d[0], d[1]]);
        let top = map.sample_dir([0.0, 0.0, 1.0]);
        assert!(top[0] > 0.99);
        let px = map.sample_dir([1.0, 0.0, 0.0]);
        assert!(px[1] > 0.99, "equator +x lookup: {px:?}");
        assert!(px[0].abs() < 0.1);
    }
}
