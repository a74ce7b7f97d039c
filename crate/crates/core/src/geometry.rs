//! Triangle meshes, signed-distance evaluation on the voxel grid, and
//! binary occupancy masking.
//!
//! The sign convention is negative strictly inside; a voxel is occupied iff
//! its SDF value is ≤ 0 (ties occupied). Inside/outside is decided by
//! ray-parity along the three grid axes with a majority vote, which is robust
//! to grazing hits; a generalized-winding-number oracle cross-checks it in
//! the tests.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::float::FloatExt;

use crate::tensor::{DenseGrid, MaskGrid};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeometryError {
    /// OBJ syntax or index error, with the 1-based source line.
    Parse { line: usize, msg: String },
    /// No vertices or no faces after filtering.
    EmptyMesh,
    /// SDF requested for a mesh without a closed surface.
    NotWatertight,
    /// Grid resolution or bounds invalid.
    BadGrid,
}

impl core::fmt::Display for GeometryError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GeometryError::Parse { line, msg } => write!(f, "OBJ parse error at line {line}: {msg}"),
            GeometryError::EmptyMesh => write!(f, "mesh has no usable geometry"),
            GeometryError::NotWatertight => write!(f, "mesh is not watertight"),
            GeometryError::BadGrid => write!(f, "invalid grid specification"),
        }
    }
}

impl core::error::Error for GeometryError {}

/// Axis-aligned voxelization domain: a cube of side 0.5 m centered at the
/// origin by default, `res` voxels per axis, voxel centers at
/// `min + (idx + 0.5)·voxel_size`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub res: [usize; 3],
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
}

impl GridSpec {
    /// Cubic grid over the standard world volume (side 0.5 m, centered).
    pub fn cube(n: usize) -> Self {
        GridSpec {
            res: [n, n, n],
            bounds_min: [-0.25; 3],
            bounds_max: [0.25; 3],
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.res.iter().all(|&r| r > 0)
            && (0..3).all(|a| self.bounds_max[a] > self.bounds_min[a]);
        if ok {
            Ok(())
        } else {
            Err(GeometryError::BadGrid)
        }
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        [
            (self.bounds_max[0] - self.bounds_min[0]) / self.res[0] as f64,
            (self.bounds_max[1] - self.bounds_min[1]) / self.res[1] as f64,
            (self.bounds_max[2] - self.bounds_min[2]) / self.res[2] as f64,
        ]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let vs = self.voxel_size();
        [
            self.bounds_min[0] + (i as f64 + 0.5) * vs[0],
            self.bounds_min[1] + (j as f64 + 0.5) * vs[1],
            self.bounds_min[2] + (k as f64 + 0.5) * vs[2],
        ]
    }

    /// Length of the world-space diagonal.
    pub fn diagonal(&self) -> f64 {
        let d = [
            self.bounds_max[0] - self.bounds_min[0],
            self.bounds_max[1] - self.bounds_min[1],
            self.bounds_max[2] - self.bounds_min[2],
        ];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

/// Indexed triangle mesh in world meters.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    /// True iff every undirected edge is shared by exactly two triangles
    /// with opposite orientation.
    pub watertight: bool,
}

impl TriMesh {
    /// Validates indices, drops zero-area triangles, records watertightness.
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[u32; 3]>) -> Result<Self, GeometryError> {
        if vertices.is_empty() {
            return Err(GeometryError::EmptyMesh);
        }
        let nv = vertices.len() as u32;
        let mut kept = Vec::with_capacity(triangles.len());
        for t in triangles {
            if t.iter().any(|&i| i >= nv) {
                return Err(GeometryError::Parse {
                    line: 0,
                    msg: format!("face index {} out of range", t.iter().max().unwrap()),
                });
            }
            let area2 = tri_area_sq(&vertices[t[0] as usize], &vertices[t[1] as usize], &vertices[t[2] as usize]);
            if area2 > 0.0 {
                kept.push(t);
            }
        }
        if kept.is_empty() {
            return Err(GeometryError::EmptyMesh);
        }
        let watertight = edges_closed(&kept);
        Ok(TriMesh {
            vertices,
            triangles: kept,
            watertight,
        })
    }

    /// Uniform scale about the origin.
    pub fn scaled(&self, factor: f64) -> TriMesh {
        let mut m = self.clone();
        for v in &mut m.vertices {
            v[0] *= factor;
            v[1] *= factor;
            v[2] *= factor;
        }
        m
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }
}

fn tri_area_sq(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let n = cross(&ab, &ac);
    dot(&n, &n)
}

fn edges_closed(tris: &[[u32; 3]]) -> bool {
    // (min,max) edge -> (count, signed orientation sum)
    let mut edges: BTreeMap<(u32, u32), (u32, i32)> = BTreeMap::new();
    for t in tris {
        for e in 0..3 {
            let a = t[e];
            let b = t[(e + 1) % 3];
            if a == b {
                return false;
            }
            let key = (a.min(b), a.max(b));
            let sign = if a < b { 1 } else { -1 };
            let entry = edges.entry(key).or_insert((0, 0));
            entry.0 += 1;
            entry.1 += sign;
        }
    }
    edges.values().all(|&(count, orient)| count == 2 && orient == 0)
}

/// Parses the ASCII OBJ subset: `v x y z` and `f i j k…` records (faces may
/// carry `/…` attribute suffixes, which are ignored; polygons fan-triangulate).
/// Indices are 1-based; 0 or out-of-range indices are parse errors.
pub fn parse_obj(text: &str) -> Result<TriMesh, GeometryError> {
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut p = [0.0f64; 3];
                for (a, slot) in p.iter_mut().enumerate() {
                    let tok = it.next().ok_or_else(|| GeometryError::Parse {
                        line: line_no,
                        msg: format!("vertex needs 3 coordinates, got {a}"),
                    })?;
                    *slot = tok.parse::<f64>().map_err(|_| GeometryError::Parse {
                        line: line_no,
                        msg: format!("bad coordinate '{tok}'"),
                    })?;
                }
                vertices.push(p);
            }
            Some("f") => {
                let mut idx: Vec<u32> = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or("");
                    let v: i64 = first.parse().map_err(|_| GeometryError::Parse {
                        line: line_no,
                        msg: format!("bad face index '{tok}'"),
                    })?;
                    if v < 1 {
                        return Err(GeometryError::Parse {
                            line: line_no,
                            msg: format!("face index {v} not positive (OBJ is 1-based)"),
                        });
                    }
                    if v as usize > vertices.len() {
                        return Err(GeometryError::Parse {
                            line: line_no,
                            msg: format!("face index {v} exceeds vertex count {}", vertices.len()),
                        });
                    }
                    idx.push((v - 1) as u32);
                }
                if idx.len() < 3 {
                    return Err(GeometryError::Parse {
                        line: line_no,
                        msg: String::from("face needs at least 3 indices"),
                    });
                }
                for t in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[t], idx[t + 1]]);
                }
            }
            // Normals, texcoords, groups, materials: outside the subset, skipped.
            _ => {}
        }
    }
    TriMesh::new(vertices, faces)
}

/// Serializes a mesh to the same OBJ subset `parse_obj` reads.
pub fn write_obj(mesh: &TriMesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for t in &mesh.triangles {
        out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    out
}

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

#[inline]
fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Squared distance from point `p` to triangle `(a, b, c)` (Ericson's
/// region-based closest-point construction).
fn point_tri_dist_sq(p: &[f64; 3], a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(&ab, &ap);
    let d2 = dot(&ac, &ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return dot(&ap, &ap);
    }
    let bp = sub(p, b);
    let d3 = dot(&ab, &bp);
    let d4 = dot(&ac, &bp);
    if d3 >= 0.0 && d4 <= d3 {
        return dot(&bp, &bp);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        let q = [a[0] + v * ab[0], a[1] + v * ab[1], a[2] + v * ab[2]];
        let dq = sub(p, &q);
        return dot(&dq, &dq);
    }
    let cp = sub(p, c);
    let d5 = dot(&ab, &cp);
    let d6 = dot(&ac, &cp);
    if d6 >= 0.0 && d5 <= d6 {
        return dot(&cp, &cp);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        let q = [a[0] + w * ac[0], a[1] + w * ac[1], a[2] + w * ac[2]];
        let dq = sub(p, &q);
        return dot(&dq, &dq);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        let bc = sub(c, b);
        let q = [b[0] + w * bc[0], b[1] + w * bc[1], b[2] + w * bc[2]];
        let dq = sub(p, &q);
        return dot(&dq, &dq);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    let q = [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ];
    let dq = sub(p, &q);
    dot(&dq, &dq)
}

// ---------------------------------------------------------------------------
// Uniform-grid accelerator for nearest-triangle queries
// ---------------------------------------------------------------------------

struct TriAccel {
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    // CSR bucket layout.
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl TriAccel {
    fn build(mesh: &TriMesh) -> TriAccel {
        let (lo, hi) = mesh.bounds();
        let pad = 1e-6;
        let extent = [
            (hi[0] - lo[0]).max(1e-9),
            (hi[1] - lo[1]).max(1e-9),
            (hi[2] - lo[2]).max(1e-9),
        ];
        let max_extent = extent[0].max(extent[1]).max(extent[2]);
        // Aim for a handful of triangles per occupied cell.
        let target = ((mesh.triangles.len() as f64 / 4.0).cbrt().ceil() as usize).clamp(4, 48);
        let cell = max_extent / target as f64;
        let dims = [
            ((extent[0] / cell).ceil() as usize).max(1),
            ((extent[1] / cell).ceil() as usize).max(1),
            ((extent[2] / cell).ceil() as usize).max(1),
        ];
        let origin = [lo[0] - pad, lo[1] - pad, lo[2] - pad];
        let ncells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0u32; ncells + 1];
        let cell_of = |v: f64, a: usize| -> usize {
            (((v - origin[a]) / cell) as i64).clamp(0, dims[a] as i64 - 1) as usize
        };
        let tri_range = |t: &[u32; 3]| {
            let mut tlo = [f64::INFINITY; 3];
            let mut thi = [f64::NEG_INFINITY; 3];
            for &vi in t {
                let v = &mesh.vertices[vi as usize];
                for a in 0..3 {
                    tlo[a] = tlo[a].min(v[a]);
                    thi[a] = thi[a].max(v[a]);
                }
            }
            (
                [cell_of(tlo[0], 0), cell_of(tlo[1], 1), cell_of(tlo[2], 2)],
                [cell_of(thi[0], 0), cell_of(thi[1], 1), cell_of(thi[2], 2)],
            )
        };
        for t in &mesh.triangles {
            let (c0, c1) = tri_range(t);
            for x in c0[0]..=c1[0] {
                for y in c0[1]..=c1[1] {
                    for z in c0[2]..=c1[2] {
                        counts[(x * dims[1] + y) * dims[2] + z + 1] += 1;
                    }
                }
            }
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut items = vec![0u32; counts[ncells] as usize];
        let mut cursor = counts.clone();
        for (ti, t) in mesh.triangles.iter().enumerate() {
            let (c0, c1) = tri_range(t);
            for x in c0[0]..=c1[0] {
                for y in c0[1]..=c1[1] {
                    for z in c0[2]..=c1[2] {
                        let c = (x * dims[1] + y) * dims[2] + z;
                        items[cursor[c] as usize] = ti as u32;
                        cursor[c] += 1;
                    }
                }
            }
        }
        TriAccel {
            origin,
            cell,
            dims,
            starts: counts,
            items,
        }
    }

    /// Unsigned distance from `p` to the mesh surface via expanding cell shells.
    fn distance(&self, mesh: &TriMesh, p: &[f64; 3]) -> f64 {
        let home = [
            (((p[0] - self.origin[0]) / self.cell) as i64).clamp(0, self.dims[0] as i64 - 1),
            (((p[1] - self.origin[1]) / self.cell) as i64).clamp(0, self.dims[1] as i64 - 1),
            (((p[2] - self.origin[2]) / self.cell) as i64).clamp(0, self.dims[2] as i64 - 1),
        ];
        let max_dim = *self.dims.iter().max().unwrap() as i64;
        let mut best = f64::INFINITY;
        for ring in 0..=max_dim + 1 {
            // Everything in ring r is at least (r−1) cells away; once that
            // exceeds the best hit we are done.
            if best.is_finite() && ((ring - 1).max(0) as f64) * self.cell > best.sqrt() {
                break;
            }
            self.visit_ring(home, ring, |cellidx| {
                let s = self.starts[cellidx] as usize;
                let e = self.starts[cellidx + 1] as usize;
                for &ti in &self.items[s..e] {
                    let t = &mesh.triangles[ti as usize];
                    let d = point_tri_dist_sq(
                        p,
                        &mesh.vertices[t[0] as usize],
                        &mesh.vertices[t[1] as usize],
                        &mesh.vertices[t[2] as usize],
                    );
                    if d < best {
                        best = d;
                    }
                }
            });
        }
        best.sqrt()
    }

    /// Calls `f` for every in-bounds cell at Chebyshev distance `ring` from `home`.
    fn visit_ring(&self, home: [i64; 3], ring: i64, mut f: impl FnMut(usize)) {
        let [dx, dy, dz] = self.dims;
        let inb = |x: i64, y: i64, z: i64| {
            x >= 0 && y >= 0 && z >= 0 && x < dx as i64 && y < dy as i64 && z < dz as i64
        };
        let emit = |x: i64, y: i64, z: i64, f: &mut dyn FnMut(usize)| {
            if inb(x, y, z) {
                f((x as usize * dy + y as usize) * dz + z as usize);
            }
        };
        if ring == 0 {
            emit(home[0], home[1], home[2], &mut f);
            return;
        }
        for a in -ring..=ring {
            for b in -ring..=ring {
                // Two faces per axis pair; skip duplicated edges via the guards.
                emit(home[0] + a, home[1] + b, home[2] - ring, &mut f);
                emit(home[0] + a, home[1] + b, home[2] + ring, &mut f);
                if b.abs() != ring {
                    emit(home[0] + a, home[1] - ring, home[2] + b, &mut f);
                    emit(home[0] + a, home[1] + ring, home[2] + b, &mut f);
                }
                if a.abs() != ring && b.abs() != ring {
                    emit(home[0] - ring, home[1] + a, home[2] + b, &mut f);
                    emit(home[0] + ring, home[1] + a, home[2] + b, &mut f);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Inside test: per-column ray parity
// ---------------------------------------------------------------------------

/// For the axis-`axis` lines through all voxel centers, returns per-column
/// sorted crossing positions along that axis.
fn column_crossings(mesh: &TriMesh, spec: &GridSpec, axis: usize) -> Vec<Vec<f64>> {
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let nu = spec.res[u];
    let nv = spec.res[v];
    let vs = spec.voxel_size();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); nu * nv];
    let coord = |idx: usize, a: usize| spec.bounds_min[a] + (idx as f64 + 0.5) * vs[a];
    for t in &mesh.triangles {
        let a = &mesh.vertices[t[0] as usize];
        let b = &mesh.vertices[t[1] as usize];
        let c = &mesh.vertices[t[2] as usize];
        // Columns overlapped by the triangle's (u,v) projection.
        let ulo = a[u].min(b[u]).min(c[u]);
        let uhi = a[u].max(b[u]).max(c[u]);
        let vlo = a[v].min(b[v]).min(c[v]);
        let vhi = a[v].max(b[v]).max(c[v]);
        let iu0 = (((ulo - spec.bounds_min[u]) / vs[u] - 0.5).ceil() as i64).max(0);
        let iu1 = (((uhi - spec.bounds_min[u]) / vs[u] - 0.5).floor() as i64).min(nu as i64 - 1);
        let iv0 = (((vlo - spec.bounds_min[v]) / vs[v] - 0.5).ceil() as i64).max(0);
        let iv1 = (((vhi - spec.bounds_min[v]) / vs[v] - 0.5).floor() as i64).min(nv as i64 - 1);
        for iu in iu0..=iu1 {
            for iv in iv0..=iv1 {
                let pu = coord(iu as usize, u);
                let pv = coord(iv as usize, v);
                // 2D barycentric test of (pu,pv) in the projected triangle.
                let (x1, y1) = (a[u], a[v]);
                let (x2, y2) = (b[u], b[v]);
                let (x3, y3) = (c[u], c[v]);
                let det = (y2 - y3) * (x1 - x3) + (x3 - x2) * (y1 - y3);
                if det.abs() < 1e-30 {
                    continue; // projected edge-on; the other two axes vote
                }
                let l1 = ((y2 - y3) * (pu - x3) + (x3 - x2) * (pv - y3)) / det;
                let l2 = ((y3 - y1) * (pu - x3) + (x1 - x3) * (pv - y3)) / det;
                let l3 = 1.0 - l1 - l2;
                if l1 < 0.0 || l2 < 0.0 || l3 < 0.0 {
                    continue;
                }
                let hit = l1 * a[axis] + l2 * b[axis] + l3 * c[axis];
                cols[(iu as usize) * nv + iv as usize].push(hit);
            }
        }
    }
    for col in &mut cols {
        col.sort_by(|x, y| x.partial_cmp(y).unwrap());
    }
    cols
}

/// Signed distance field of `mesh` sampled at all voxel centers of `spec`.
///
/// Magnitude is the exact distance to the nearest triangle; sign comes from
/// 3-axis ray parity with majority vote (negative strictly inside).
/// Non-watertight meshes are rejected — parity is meaningless on open
/// surfaces.
pub fn grid_sdf(mesh: &TriMesh, spec: &GridSpec) -> Result<DenseGrid, GeometryError> {
    spec.validate()?;
    if !mesh.watertight {
        return Err(GeometryError::NotWatertight);
    }
    let accel = TriAccel::build(mesh);
    let [ni, nj, nk] = spec.res;
    let mut out = DenseGrid::zeros(spec.res);

    // Per-axis crossing tables: parity of crossings beyond the voxel center.
    let cx = column_crossings(mesh, spec, 0);
    let cy = column_crossings(mesh, spec, 1);
    let cz = column_crossings(mesh, spec, 2);
    let parity_beyond = |col: &Vec<f64>, x: f64| -> u32 {
        // Crossings strictly greater than x (ray toward +axis).
        let n = col.partition_point(|&h| h <= x);
        ((col.len() - n) % 2) as u32
    };

    for i in 0..ni {
        for j in 0..nj {
            for k in 0..nk {
                let p = spec.voxel_center(i, j, k);
                let d = accel.distance(mesh, &p);
                let votes = parity_beyond(&cx[j * nk + k], p[0])
                    + parity_beyond(&cy[i * nk + k], p[1])
                    + parity_beyond(&cz[i * nj + j], p[2]);
                let inside = votes >= 2;
                out.set(i, j, k, if inside { -d } else { d });
            }
        }
    }
    Ok(out)
}

/// Binary occupancy from an SDF: occupied iff SDF ≤ 0 (ties occupied).
pub fn occupancy_mask(sdf: &DenseGrid) -> MaskGrid {
    let mut m = DenseGrid::zeros(sdf.shape);
    for (dst, &d) in m.data.iter_mut().zip(sdf.data.iter()) {
        *dst = if d <= 0.0 { 1.0 } else { 0.0 };
    }
    m
}

// ---------------------------------------------------------------------------
// Procedural primitives (dataset shapes; all watertight by construction)
// ---------------------------------------------------------------------------

/// Icosphere: `subdiv` loop subdivisions of an icosahedron, projected to
/// `radius`. Counts: subdiv 3 → 642 vertices, 1280 triangles.
pub fn icosphere(subdiv: usize, radius: f64) -> TriMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdiv {
        let mut midpoint: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        let mut next: Vec<[u32; 3]> = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0u32; 3];
            for e in 0..3 {
                let a = f[e];
                let b = f[(e + 1) % 3];
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoint.entry(key).or_insert_with(|| {
                    let va = verts[a as usize];
                    let vb = verts[b as usize];
                    verts.push([
                        0.5 * (va[0] + vb[0]),
                        0.5 * (va[1] + vb[1]),
                        0.5 * (va[2] + vb[2]),
                    ]);
                    (verts.len() - 1) as u32
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    for v in &mut verts {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v[0] *= radius / n;
        v[1] *= radius / n;
        v[2] *= radius / n;
    }
    TriMesh::new(verts, faces).expect("icosphere construction is valid")
}

/// Axis-aligned box with half extents `h`.
pub fn cuboid(h: [f64; 3]) -> TriMesh {
    let v = |sx: f64, sy: f64, sz: f64| [sx * h[0], sy * h[1], sz * h[2]];
    let verts = vec![
        v(-1.0, -1.0, -1.0),
        v(1.0, -1.0, -1.0),
        v(1.0, 1.0, -1.0),
        v(-1.0, 1.0, -1.0),
        v(-1.0, -1.0, 1.0),
        v(1.0, -1.0, 1.0),
        v(1.0, 1.0, 1.0),
        v(-1.0, 1.0, 1.0),
    ];
    // Outward CCW faces.
    let faces = vec![
        [0u32, 2, 1],
        [0, 3, 2], // -z
        [4, 5, 6],
        [4, 6, 7], // +z
        [0, 1, 5],
        [0, 5, 4], // -y
        [3, 7, 6],
        [3, 6, 2], // +y
        [0, 4, 7],
        [0, 7, 3], // -x
        [1, 2, 6],
        [1, 6, 5], // +x
    ];
    TriMesh::new(verts, faces).expect("cuboid construction is valid")
}

/// Torus in the xy-plane: `major` ring radius, `minor` tube radius.
pub fn torus(major: f64, minor: f64, seg_u: usize, seg_v: usize) -> TriMesh {
    let tau = core::f64::consts::TAU;
    let mut verts = Vec::with_capacity(seg_u * seg_v);
    for iu in 0..seg_u {
        let a = iu as f64 / seg_u as f64 * tau;
        for iv in 0..seg_v {
            let b = iv as f64 / seg_v as f64 * tau;
            let r = major + minor * b.cos();
            verts.push([r * a.cos(), r * a.sin(), minor * b.sin()]);
        }
    }
    let mut faces = Vec::with_capacity(seg_u * seg_v * 2);
    for iu in 0..seg_u {
        for iv in 0..seg_v {
            let a = (iu * seg_v + iv) as u32;
            let b = (((iu + 1) % seg_u) * seg_v + iv) as u32;
            let c = (((iu + 1) % seg_u) * seg_v + (iv + 1) % seg_v) as u32;
            let d = (iu * seg_v + (iv + 1) % seg_v) as u32;
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    TriMesh::new(verts, faces).expect("torus construction is valid")
}

/// Capped cylinder along z.
pub fn cylinder(radius: f64, half_height: f64, segments: usize) -> TriMesh {
    let tau = core::f64::consts::TAU;
    let mut verts = Vec::with_capacity(segments * 2 + 2);
    for iz in 0..2 {
        let z = if iz == 0 { -half_height } else { half_height };
        for s in 0..segments {
            let a = s as f64 / segments as f64 * tau;
            verts.push([radius * a.cos(), radius * a.sin(), z]);
        }
    }
    let bot_center = verts.len() as u32;
    verts.push([0.0, 0.0, -half_height]);
    let top_center = verts.len() as u32;
    verts.push([0.0, 0.0, half_height]);
    let mut faces = Vec::new();
    for s in 0..segments {
        let s1 = (s + 1) % segments;
        let b0 = s as u32;
        let b1 = s1 as u32;
        let t0 = (segments + s) as u32;
        let t1 = (segments + s1) as u32;
        faces.push([b0, b1, t1]);
        faces.push([b0, t1, t0]);
        faces.push([bot_center, b1, b0]);
        faces.push([top_center, t0, t1]);
    }
    TriMesh::new(verts, faces).expect("cylinder construction is valid")
}

/// Ellipsoid: icosphere scaled per axis.
pub fn ellipsoid(subdiv: usize, radii: [f64; 3]) -> TriMesh {
    let mut m = icosphere(subdiv, 1.0);
    for v in &mut m.vertices {
        v[0] *= radii[0];
        v[1] *= radii[1];
        v[2] *= radii[2];
    }
    m
}

/// Icosphere with a deterministic sinusoidal radial perturbation; stays
/// star-shaped (and therefore watertight) for `amp` < 1.
pub fn blob(subdiv: usize, radius: f64, amp: f64, seed: u64) -> TriMesh {
    let mut rng = crate::rng::CounterRng::keyed(&[seed, 0x626c_6f62]);
    let ph = [
        rng.next_range(0.0, core::f64::consts::TAU),
        rng.next_range(0.0, core::f64::consts::TAU),
        rng.next_range(0.0, core::f64::consts::TAU),
    ];
    let mut m = icosphere(subdiv, radius);
    for v in &mut m.vertices {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let d = [v[0] / n, v[1] / n, v[2] / n];
        let bump = 1.0
            + amp
                * ((3.0 * d[0] + ph[0]).sin() * (2.0 * d[1] + ph[1]).cos()
                    + 0.5 * (4.0 * d[2] + ph[2]).sin())
                / 1.5;
        v[0] = d[0] * radius * bump;
        v[1] = d[1] * radius * bump;
        v[2] = d[2] * radius * bump;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Generalized winding number of `p` w.r.t. the mesh (Van Oosterom &
    /// Strackee solid angles); |w| > 0.5 ⇒ inside. Test-only oracle — the
    /// production inside-test is ray parity.
    fn winding_number(mesh: &TriMesh, p: &[f64; 3]) -> f64 {
        let mut total = 0.0;
        for t in &mesh.triangles {
            let a = sub(&mesh.vertices[t[0] as usize], p);
            let b = sub(&mesh.vertices[t[1] as usize], p);
            let c = sub(&mesh.vertices[t[2] as usize], p);
            let la = dot(&a, &a).sqrt();
            let lb = dot(&b, &b).sqrt();
            let lc = dot(&c, &c).sqrt();
            let num = dot(&a, &cross(&b, &c));
            let den = la * lb * lc + dot(&a, &b) * lc + dot(&b, &c) * la + dot(&c, &a) * lb;
            total += 2.0 * num.atan2(den);
        }
        total / (4.0 * core::f64::consts::PI)
    }

    #[test]
    fn parse_unit_cube() {
        let obj = "\
v -1 -1 -1\nv 1 -1 -1\nv 1 1 -1\nv -1 1 -1\nv -1 -1 1\nv 1 -1 1\nv 1 1 1\nv -1 1 1\n\
f 1 3 2\nf 1 4 3\nf 5 6 7\nf 5 7 8\nf 1 2 6\nf 1 6 5\nf 4 8 7\nf 4 7 3\nf 1 5 8\nf 1 8 4\nf 2 3 7\nf 2 7 6\n";
        let m = parse_obj(obj).unwrap();
        assert_eq!(m.vertices.len(), 8);
        assert_eq!(m.triangles.len(), 12);
        assert!(m.watertight);
    }

    #[test]
    fn parse_rejects_zero_index_with_line_number() {
        let obj = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n";
        match parse_obj(obj) {
            Err(GeometryError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_skips_comments_and_attribute_suffixes() {
        let obj = "# header\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1\n";
        let m = parse_obj(obj).unwrap();
        assert_eq!(m.triangles.len(), 1);
    }

    #[test]
    fn icosphere_subdivision_counts() {
        let m = icosphere(3, 0.2);
        assert_eq!(m.vertices.len(), 642);
        assert_eq!(m.triangles.len(), 1280);
        assert!(m.watertight);
    }

    #[test]
    fn obj_roundtrip_preserves_counts() {
        let m = icosphere(2, 0.2);
        let text = write_obj(&m);
        let back = parse_obj(&text).unwrap();
        assert_eq!(back.vertices.len(), m.vertices.len());
        assert_eq!(back.triangles.len(), m.triangles.len());
        assert!(back.watertight);
    }

    #[test]
    fn generated_primitives_are_watertight() {
        assert!(cuboid([0.2, 0.15, 0.1]).watertight);
        assert!(torus(0.15, 0.06, 24, 16).watertight);
        assert!(cylinder(0.12, 0.18, 24).watertight);
        assert!(ellipsoid(2, [0.2, 0.14, 0.1]).watertight);
        assert!(blob(3, 0.16, 0.3, 7).watertight);
    }

    #[test]
    fn sphere_sdf_center_and_corner() {
        let spec = GridSpec::cube(32);
        let mesh = icosphere(3, 0.2);
        let sdf = grid_sdf(&mesh, &spec).unwrap();
        let vs = spec.voxel_size()[0];
        let half_diag = vs * 3.0f64.sqrt() / 2.0;
        // Voxel nearest the origin.
        let c = sdf.get(16, 16, 16);
        assert!(
            (c + 0.2).abs() < 2.0 * half_diag + 2e-3,
            "center SDF {c} not near -0.2"
        );
        assert!(c < 0.0, "center must be inside");
        // Corner-most voxel center: distance from it to the sphere surface.
        let p = spec.voxel_center(31, 31, 31);
        let want = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.2;
        let got = sdf.get(31, 31, 31);
        assert!(got > 0.0);
        assert!(
            (got - want).abs() < 3e-3,
            "corner SDF {got} vs analytic {want} (icosphere facet tolerance)"
        );
    }

    #[test]
    fn sdf_rejects_open_mesh() {
        // Single triangle: every edge is boundary.
        let m = TriMesh::new(
            alloc::vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.1, 0.0]],
            alloc::vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(!m.watertight);
        assert_eq!(
            grid_sdf(&m, &GridSpec::cube(8)).unwrap_err(),
            GeometryError::NotWatertight
        );
    }

    #[test]
    fn ray_parity_agrees_with_winding_number() {
        let spec = GridSpec::cube(16);
        for (mi, mesh) in [
            blob(2, 0.16, 0.3, 3),
            torus(0.15, 0.06, 20, 14),
            cuboid([0.18, 0.12, 0.15]),
        ]
        .iter()
        .enumerate()
        {
            let sdf = grid_sdf(mesh, &spec).unwrap();
            let mut rng = crate::rng::CounterRng::keyed(&[55, mi as u64]);
            let mut checked = 0;
            let mut agree = 0;
            while checked < 1000 {
                let i = (rng.next_u64() as usize) % 16;
                let j = (rng.next_u64() as usize) % 16;
                let k = (rng.next_u64() as usize) % 16;
                let d = sdf.get(i, j, k);
                // Skip the ambiguous surface band: both tests are exact only
                // away from the boundary.
                if d.abs() < spec.voxel_size()[0] {
                    checked += 1;
                    agree += 1;
                    continue;
                }
                let w = winding_number(mesh, &spec.voxel_center(i, j, k));
                let inside_w = w.abs() > 0.5;
                let inside_p = d < 0.0;
                checked += 1;
                if inside_w == inside_p {
                    agree += 1;
                }
            }
            assert!(
                agree == checked,
                "mesh {mi}: parity/winding disagree on {} of {checked}",
                checked - agree
            );
        }
    }

    #[test]
    fn occupancy_volume_matches_sphere() {
        let spec = GridSpec::cube(32);
        let mesh = icosphere(3, 0.2);
        let sdf = grid_sdf(&mesh, &spec).unwrap();
        let mask = occupancy_mask(&sdf);
        let occupied: f64 = mask.data.iter().sum();
        let vs = spec.voxel_size();
        let analytic = 4.0 / 3.0 * core::f64::consts::PI * 0.2f64.powi(3) / (vs[0] * vs[1] * vs[2]);
        let rel = (occupied - analytic).abs() / analytic;
        assert!(
            rel < 0.05,
            "occupied {occupied} vs analytic {analytic} (rel {rel})"
        );
    }

    #[test]
    fn occupancy_threshold_rules() {
        let mut sdf = DenseGrid::zeros([2, 2, 2]);
        sdf.data = alloc::vec![0.0, -0.1, 0.1, 5.0, -0.0, 1e-12, -1e-12, 2.0];
        let m = occupancy_mask(&sdf);
        assert_eq!(m.data, alloc::vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        // All-positive SDF gives an empty mask (scene validation rejects later).
        let pos = DenseGrid::from_fn([3, 3, 3], |_, _, _| 1.0);
        assert!(occupancy_mask(&pos).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_invariant_under_vertex_permutation() {
        let spec = GridSpec::cube(12);
        let mesh = blob(2, 0.15, 0.25, 9);
        // Rotate the vertex list by one and remap faces.
        let n = mesh.vertices.len();
        let mut verts = mesh.vertices.clone();
        verts.rotate_left(1);
        let faces: alloc::vec::Vec<[u32; 3]> = mesh
            .triangles
            .iter()
            .map(|t| {
                [
                    (t[0] + n as u32 - 1) % n as u32,
                    (t[1] + n as u32 - 1) % n as u32,
                    (t[2] + n as u32 - 1) % n as u32,
                ]
            })
            .collect();
        let permuted = TriMesh::new(verts, faces).unwrap();
        let m1 = occupancy_mask(&grid_sdf(&mesh, &spec).unwrap());
        let m2 = occupancy_mask(&grid_sdf(&permuted, &spec).unwrap());
        assert_eq!(m1.data, m2.data);
    }

    #[test]
    fn mask_monotone_under_dilation() {
        let spec = GridSpec::cube(16);
        let mesh = ellipsoid(2, [0.15, 0.12, 0.18]);
        let grown = mesh.scaled(1.1);
        let m1 = occupancy_mask(&grid_sdf(&mesh, &spec).unwrap());
        let m2 = occupancy_mask(&grid_sdf(&grown, &spec).unwrap());
        for (a, b) in m1.data.iter().zip(m2.data.iter()) {
            assert!(
                b >= a,
                "dilation turned an occupied voxel unoccupied"
            );
        }
    }
}
