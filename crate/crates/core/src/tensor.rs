//! Dense voxel grids, the rank-R vector–matrix (VM) decomposition, ALS
//! fitting, and off-lattice trilinear sampling.
//!
//! A VM decomposition represents a 3D tensor T ∈ R^{I×J×K} as
//!
//! ```text
//! T(i,j,k) = Σ_r  vx_r[i]·Myz_r[j,k] + vy_r[j]·Mxz_r[i,k] + vz_r[k]·Mxy_r[i,j]
//! ```
//!
//! i.e. R components per axis, each an axis vector times a matrix spanning the
//! complementary plane. Storage is R·(I+J+K) vector scalars plus
//! R·(JK+IK+IJ) matrix scalars, far below I·J·K for desk-scale ranks.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::float::FloatExt;

use crate::geometry::GridSpec;

/// Errors for grid/decomposition construction and algebra.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Component dimensions disagree with the requested shape.
    ShapeMismatch,
    /// Rank must be ≥ 1.
    BadRank,
    /// A value was NaN or infinite where finiteness is required.
    NonFinite,
}

impl core::fmt::Display for TensorError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TensorError::ShapeMismatch => write!(f, "component dimensions do not match shape"),
            TensorError::BadRank => write!(f, "rank must be at least 1"),
            TensorError::NonFinite => write!(f, "non-finite value"),
        }
    }
}

impl core::error::Error for TensorError {}

/// Dense scalar field on an I×J×K voxel grid, k-fastest layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl DenseGrid {
    pub fn zeros(shape: [usize; 3]) -> Self {
        DenseGrid {
            shape,
            data: vec![0.0; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut g = DenseGrid::zeros(shape);
        let mut idx = 0;
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    g.data[idx] = f(i, j, k);
                    idx += 1;
                }
            }
        }
        g
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let n = self.idx(i, j, k);
        self.data[n] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn max(&self) -> f64 {
        self.data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Binary occupancy over a grid; values are exactly 0.0 or 1.0.
pub type MaskGrid = DenseGrid;

/// Rank-R VM decomposition of an I×J×K tensor.
///
/// Component r of axis X is the vector `vx[r·I..(r+1)·I]` paired with the
/// matrix `myz[r·J·K..]` (row-major over (j,k)); Y and Z likewise.
#[derive(Debug, Clone, PartialEq)]
pub struct VmDecomposition {
    pub rank: usize,
    pub shape: [usize; 3],
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    pub vz: Vec<f64>,
    pub myz: Vec<f64>,
    pub mxz: Vec<f64>,
    pub mxy: Vec<f64>,
}

impl VmDecomposition {
    pub fn zeros(rank: usize, shape: [usize; 3]) -> Result<Self, TensorError> {
        if rank == 0 {
            return Err(TensorError::BadRank);
        }
        let [i, j, k] = shape;
        Ok(VmDecomposition {
            rank,
            shape,
            vx: vec![0.0; rank * i],
            vy: vec![0.0; rank * j],
            vz: vec![0.0; rank * k],
            myz: vec![0.0; rank * j * k],
            mxz: vec![0.0; rank * i * k],
            mxy: vec![0.0; rank * i * j],
        })
    }

    /// Random components scaled by `amp`, for tests and ALS initialization.
    pub fn random(rank: usize, shape: [usize; 3], amp: f64, seed: u64) -> Result<Self, TensorError> {
        let mut vm = Self::zeros(rank, shape)?;
        let mut rng = crate::rng::CounterRng::keyed(&[seed, 0x766d]);
        for buf in [
            &mut vm.vx,
            &mut vm.vy,
            &mut vm.vz,
            &mut vm.myz,
            &mut vm.mxz,
            &mut vm.mxy,
        ] {
            for v in buf.iter_mut() {
                *v = amp * rng.next_range(-1.0, 1.0);
            }
        }
        Ok(vm)
    }

    fn dims_consistent(&self) -> bool {
        let [i, j, k] = self.shape;
        self.vx.len() == self.rank * i
            && self.vy.len() == self.rank * j
            && self.vz.len() == self.rank * k
            && self.myz.len() == self.rank * j * k
            && self.mxz.len() == self.rank * i * k
            && self.mxy.len() == self.rank * i * j
    }

    /// Total scalar count of the decomposition.
    pub fn param_count(&self) -> usize {
        self.vx.len()
            + self.vy.len()
            + self.vz.len()
            + self.myz.len()
            + self.mxz.len()
            + self.mxy.len()
    }

    /// Concatenates the rank blocks of two decompositions over the same
    /// grid. Each reconstruction is a sum over rank terms, so the stacked
    /// decomposition reconstructs to exactly `self + other`.
    pub fn stacked(&self, other: &VmDecomposition) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch);
        }
        let mut out = self.clone();
        out.rank = self.rank + other.rank;
        for (dst, src) in [
            (&mut out.vx, &other.vx),
            (&mut out.vy, &other.vy),
            (&mut out.vz, &other.vz),
            (&mut out.myz, &other.myz),
            (&mut out.mxz, &other.mxz),
            (&mut out.mxy, &other.mxy),
        ] {
            dst.extend_from_slice(src);
        }
        Ok(out)
    }

    /// Scales every matrix factor by `c`. Reconstruction is linear in the
    /// matrices with vectors held fixed, so this scales the reconstructed
    /// grid by `c`.
    pub fn scale_matrices(&mut self, c: f64) {
        for m in self
            .myz
            .iter_mut()
            .chain(self.mxz.iter_mut())
            .chain(self.mxy.iter_mut())
        {
            *m *= c;
        }
    }
}

/// Paired σ_t/α grids plus the global optical-density scale s (1/m).
#[derive(Debug, Clone)]
pub struct ScatterField {
    pub sigma: DenseGrid,
    pub albedo: DenseGrid,
    /// Multiplicative optical density: physical extinction is `s·sigma`.
    pub scale: f64,
}

impl ScatterField {
    pub fn new(sigma: DenseGrid, albedo: DenseGrid, scale: f64) -> Result<Self, TensorError> {
        if sigma.shape != albedo.shape {
            return Err(TensorError::ShapeMismatch);
        }
        if !(sigma.all_finite() && albedo.all_finite() && scale.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(ScatterField {
            sigma,
            albedo,
            scale,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.sigma.shape
    }
}

/// Evaluates the decomposition to a dense grid.
pub fn reconstruct(vm: &VmDecomposition) -> Result<DenseGrid, TensorError> {
    if !vm.dims_consistent() {
        return Err(TensorError::ShapeMismatch);
    }
    let [ni, nj, nk] = vm.shape;
    let mut out = DenseGrid::zeros(vm.shape);
    for r in 0..vm.rank {
        // X component: vx[i] spreads the (j,k) matrix over slabs of constant i.
        let myz = &vm.myz[r * nj * nk..(r + 1) * nj * nk];
        for i in 0..ni {
            let v = vm.vx[r * ni + i];
            if v != 0.0 {
                let row = &mut out.data[i * nj * nk..(i + 1) * nj * nk];
                for (o, m) in row.iter_mut().zip(myz.iter()) {
                    *o += v * m;
                }
            }
        }
        // Y component.
        let mxz = &vm.mxz[r * ni * nk..(r + 1) * ni * nk];
        for i in 0..ni {
            for j in 0..nj {
                let v = vm.vy[r * nj + j];
                if v != 0.0 {
                    let row = &mut out.data[(i * nj + j) * nk..(i * nj + j + 1) * nk];
                    let mrow = &mxz[i * nk..(i + 1) * nk];
                    for (o, m) in row.iter_mut().zip(mrow.iter()) {
                        *o += v * m;
                    }
                }
            }
        }
        // Z component.
        let mxy = &vm.mxy[r * ni * nj..(r + 1) * ni * nj];
        let vz = &vm.vz[r * nk..(r + 1) * nk];
        for i in 0..ni {
            for j in 0..nj {
                let m = mxy[i * nj + j];
                if m != 0.0 {
                    let row = &mut out.data[(i * nj + j) * nk..(i * nj + j + 1) * nk];
                    for (o, z) in row.iter_mut().zip(vz.iter()) {
                        *o += m * z;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Storage cost of the decomposition relative to the dense tensor.
///
/// Counts every scalar (vectors and matrices): R·(I+J+K) + R·(JK+IK+IJ)
/// over I·J·K. Can exceed 1 for small grids; that is allowed.
pub fn compression_ratio(rank: usize, shape: [usize; 3]) -> f64 {
    let [i, j, k] = shape;
    let scalars = rank * (i + j + k) + rank * (j * k + i * k + i * j);
    scalars as f64 / (i * j * k) as f64
}

/// Outcome of an ALS fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub vm: VmDecomposition,
    /// Relative Frobenius error ‖grid − reconstruct‖ / ‖grid‖ after the last sweep.
    pub rel_error: f64,
    /// True if any normal-equation solve needed the ridge fallback.
    pub used_ridge: bool,
}

/// Least-squares matrix update for one axis block: with the unfolded
/// residual `e` (n_axis × n_plane) and the block's vectors held fixed,
/// solves G = VᵀV, M = G⁻¹·Vᵀ·E. Returns true if the ridge kicked in.
fn update_matrices(
    vecs: &[f64],
    mats: &mut [f64],
    e: &[f64],
    rank: usize,
    n_axis: usize,
    n_plane: usize,
) -> bool {
    let mut g = vec![0.0f64; rank * rank];
    for a in 0..rank {
        for b in a..rank {
            let dot: f64 = (0..n_axis)
                .map(|i| vecs[a * n_axis + i] * vecs[b * n_axis + i])
                .sum();
            g[a * rank + b] = dot;
            g[b * rank + a] = dot;
        }
    }
    let mut rhs = vec![0.0f64; n_plane * rank];
    for r in 0..rank {
        for i in 0..n_axis {
            let v = vecs[r * n_axis + i];
            if v != 0.0 {
                let erow = &e[i * n_plane..(i + 1) * n_plane];
                for (q, ev) in erow.iter().enumerate() {
                    rhs[q * rank + r] += v * ev;
                }
            }
        }
    }
    let ridge = solve_spd_rows(&g, rank, &mut rhs, n_plane);
    for q in 0..n_plane {
        for r in 0..rank {
            mats[r * n_plane + q] = rhs[q * rank + r];
        }
    }
    ridge
}

/// Least-squares vector update for one axis block: with the matrices held
/// fixed, solves G = M·Mᵀ, V = E·Mᵀ·G⁻¹. Returns true if the ridge kicked in.
fn update_vectors(
    vecs: &mut [f64],
    mats: &[f64],
    e: &[f64],
    rank: usize,
    n_axis: usize,
    n_plane: usize,
) -> bool {
    let mut g = vec![0.0f64; rank * rank];
    for a in 0..rank {
        for b in a..rank {
            let dot: f64 = mats[a * n_plane..(a + 1) * n_plane]
                .iter()
                .zip(mats[b * n_plane..(b + 1) * n_plane].iter())
                .map(|(x, y)| x * y)
                .sum();
            g[a * rank + b] = dot;
            g[b * rank + a] = dot;
        }
    }
    let mut rhs = vec![0.0f64; n_axis * rank];
    for i in 0..n_axis {
        for r in 0..rank {
            rhs[i * rank + r] = e[i * n_plane..(i + 1) * n_plane]
                .iter()
                .zip(mats[r * n_plane..(r + 1) * n_plane].iter())
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    let ridge = solve_spd_rows(&g, rank, &mut rhs, n_axis);
    for i in 0..n_axis {
        for r in 0..rank {
            vecs[r * n_axis + i] = rhs[i * rank + r];
        }
    }
    ridge
}

/// Alternating least squares fit of a rank-R VM decomposition.
///
/// Sweeps visit the X, Y, Z blocks in that order. Each visit solves the
/// block's matrices against its current vectors, refines the vectors
/// against those matrices, then re-solves the matrices so the block ends
/// self-consistent — a residual that is exactly representable by one block
/// is therefore absorbed within a single visit. Every half-step is an
/// exact least-squares solve, so the residual is monotone non-increasing
/// per sweep. Vector init is keyed per (axis, rank) block, making a
/// lower-rank fit's starting point a prefix of a higher-rank one's.
/// Singular normal equations fall back to a ridge solve (ε = 1e−8) and set
/// `used_ridge`.
pub fn fit_vm(
    grid: &DenseGrid,
    rank: usize,
    sweeps: usize,
    seed: u64,
) -> Result<FitResult, TensorError> {
    if rank == 0 {
        return Err(TensorError::BadRank);
    }
    if sweeps == 0 {
        return Err(TensorError::BadRank);
    }
    let [ni, nj, nk] = grid.shape;
    // Vectors start random; matrices start at zero so the first matrix
    // solve of each block fits the true residual instead of fighting the
    // other blocks' random noise.
    let mut vm = VmDecomposition::zeros(rank, grid.shape)?;
    for (axis_tag, buf, n_axis) in [
        (0u64, &mut vm.vx, ni),
        (1, &mut vm.vy, nj),
        (2, &mut vm.vz, nk),
    ] {
        for r in 0..rank {
            let mut rng = crate::rng::CounterRng::keyed(&[seed, 0xa1, axis_tag, r as u64]);
            for v in buf[r * n_axis..(r + 1) * n_axis].iter_mut() {
                *v = rng.next_range(-1.0, 1.0);
            }
        }
    }
    let gnorm = grid.norm();
    let mut used_ridge = false;

    for _ in 0..sweeps {
        for axis in 0..3 {
            // Residual without this axis's own contribution.
            let mut partial = vm.clone();
            match axis {
                0 => {
                    partial.vx.iter_mut().for_each(|v| *v = 0.0);
                }
                1 => {
                    partial.vy.iter_mut().for_each(|v| *v = 0.0);
                }
                _ => {
                    partial.vz.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let others = reconstruct(&partial)?;
            let mut resid = grid.clone();
            for (r, o) in resid.data.iter_mut().zip(others.data.iter()) {
                *r -= o;
            }
            // Unfold the residual so this axis indexes rows: E is (n_axis ×
            // n_plane) with the complementary plane flattened row-major in the
            // same order as the stored matrices.
            let (n_axis, n_plane) = match axis {
                0 => (ni, nj * nk),
                1 => (nj, ni * nk),
                _ => (nk, ni * nj),
            };
            let mut e = vec![0.0f64; n_axis * n_plane];
            let mut p = 0;
            for i in 0..ni {
                for j in 0..nj {
                    for k in 0..nk {
                        let v = resid.data[p];
                        p += 1;
                        match axis {
                            0 => e[i * n_plane + j * nk + k] = v,
                            1 => e[j * n_plane + i * nk + k] = v,
                            _ => e[k * n_plane + i * nj + j] = v,
                        }
                    }
                }
            }
            let (vecs, mats) = match axis {
                0 => (&mut vm.vx, &mut vm.myz),
                1 => (&mut vm.vy, &mut vm.mxz),
                _ => (&mut vm.vz, &mut vm.mxy),
            };
            used_ridge |= update_matrices(vecs, mats, &e, rank, n_axis, n_plane);
            used_ridge |= update_vectors(vecs, mats, &e, rank, n_axis, n_plane);
            used_ridge |= update_matrices(vecs, mats, &e, rank, n_axis, n_plane);
        }
    }

    let recon = reconstruct(&vm)?;
    let mut err2 = 0.0;
    for (a, b) in grid.data.iter().zip(recon.data.iter()) {
        let d = a - b;
        err2 += d * d;
    }
    let rel_error = if gnorm > 0.0 {
        err2.sqrt() / gnorm
    } else {
        err2.sqrt()
    };
    Ok(FitResult {
        vm,
        rel_error,
        used_ridge,
    })
}

/// Solves `G·x = rhs_row` for every row of `rhs` in place (rows of length
/// `rank`). Returns true if the ridge fallback was needed.
fn solve_spd_rows(g: &[f64], rank: usize, rhs: &mut [f64], rows: usize) -> bool {
    let mut chol = g.to_vec();
    let mut ridge = false;
    if !cholesky_in_place(&mut chol, rank) {
        ridge = true;
        chol.copy_from_slice(g);
        let trace: f64 = (0..rank).map(|r| g[r * rank + r]).sum();
        let eps = 1e-8 * (trace / rank as f64).max(1.0);
        for r in 0..rank {
            chol[r * rank + r] += eps;
        }
        // With the ridge the matrix is SPD unless inputs are non-finite.
        let ok = cholesky_in_place(&mut chol, rank);
        debug_assert!(ok, "ridge-regularized Gram matrix must factor");
    }
    let mut x = vec![0.0f64; rank];
    for row in 0..rows {
        let r0 = row * rank;
        x.copy_from_slice(&rhs[r0..r0 + rank]);
        // Forward substitution L·y = b.
        for i in 0..rank {
            let mut s = x[i];
            for j in 0..i {
                s -= chol[i * rank + j] * x[j];
            }
            x[i] = s / chol[i * rank + i];
        }
        // Back substitution Lᵀ·x = y.
        for i in (0..rank).rev() {
            let mut s = x[i];
            for j in i + 1..rank {
                s -= chol[j * rank + i] * x[j];
            }
            x[i] = s / chol[i * rank + i];
        }
        rhs[r0..r0 + rank].copy_from_slice(&x);
    }
    ridge
}

/// In-place Cholesky (lower). Returns false if the matrix is not positive
/// definite to working precision.
fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return false;
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
        for j in i + 1..n {
            a[i * n + j] = 0.0;
        }
    }
    true
}

/// Trilinear sample of `grid` at world point `p`.
///
/// Exact at voxel centers; edge values extend flat between the outermost
/// centers and the bounds; strictly outside the bounds the value is 0.
pub fn sample_trilinear(grid: &DenseGrid, p: [f64; 3], spec: &GridSpec) -> f64 {
    let min = spec.bounds_min;
    let max = spec.bounds_max;
    for a in 0..3 {
        if p[a] < min[a] || p[a] > max[a] {
            return 0.0;
        }
    }
    let [ni, nj, nk] = grid.shape;
    let vs = spec.voxel_size();
    // Continuous voxel coordinate with centers at integers.
    let u = [
        (p[0] - min[0]) / vs[0] - 0.5,
        (p[1] - min[1]) / vs[1] - 0.5,
        (p[2] - min[2]) / vs[2] - 0.5,
    ];
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut f = [0.0f64; 3];
    let n = [ni, nj, nk];
    for a in 0..3 {
        let fl = u[a].floor();
        f[a] = u[a] - fl;
        let base = fl as i64;
        i0[a] = base.clamp(0, n[a] as i64 - 1) as usize;
        i1[a] = (base + 1).clamp(0, n[a] as i64 - 1) as usize;
    }
    let c = |i: usize, j: usize, k: usize| grid.get(i, j, k);
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let x00 = lerp(c(i0[0], i0[1], i0[2]), c(i1[0], i0[1], i0[2]), f[0]);
    let x10 = lerp(c(i0[0], i1[1], i0[2]), c(i1[0], i1[1], i0[2]), f[0]);
    let x01 = lerp(c(i0[0], i0[1], i1[2]), c(i1[0], i0[1], i1[2]), f[0]);
    let x11 = lerp(c(i0[0], i1[1], i1[2]), c(i1[0], i1[1], i1[2]), f[0]);
    let y0 = lerp(x00, x10, f[1]);
    let y1 = lerp(x01, x11, f[1]);
    lerp(y0, y1, f[2])
}

/// Trilinear weights of the 8 voxels around `p`: the adjoint side of
/// [`sample_trilinear`]. Returns `None` outside the bounds.
///
/// `out` receives (flat voxel index, weight) pairs; weights sum to 1.
pub fn trilinear_weights(
    shape: [usize; 3],
    p: [f64; 3],
    spec: &GridSpec,
    out: &mut [(usize, f64); 8],
) -> bool {
    let min = spec.bounds_min;
    let max = spec.bounds_max;
    for a in 0..3 {
        if p[a] < min[a] || p[a] > max[a] {
            return false;
        }
    }
    let vs = spec.voxel_size();
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut f = [0.0f64; 3];
    for a in 0..3 {
        let u = (p[a] - min[a]) / vs[a] - 0.5;
        let fl = u.floor();
        f[a] = u - fl;
        let base = fl as i64;
        i0[a] = base.clamp(0, shape[a] as i64 - 1) as usize;
        i1[a] = (base + 1).clamp(0, shape[a] as i64 - 1) as usize;
    }
    let [_, nj, nk] = shape;
    let flat = |i: usize, j: usize, k: usize| (i * nj + j) * nk + k;
    let mut n = 0;
    for (di, wi) in [(i0[0], 1.0 - f[0]), (i1[0], f[0])] {
        for (dj, wj) in [(i0[1], 1.0 - f[1]), (i1[1], f[1])] {
            for (dk, wk) in [(i0[2], 1.0 - f[2]), (i1[2], f[2])] {
                out[n] = (flat(di, dj, dk), wi * wj * wk);
                n += 1;
            }
        }
    }
    true
}
