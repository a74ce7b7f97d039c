//! Dataset manifests and the synthetic multi-view corpus generator.
//!
//! A dataset is a root directory holding meshes, per-scene field containers,
//! per-sample view images, and one `manifest.json` that records every file
//! plus the seeds it was generated from. Regenerating any sample from its
//! manifest entry reproduces its files byte-for-byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hscat_core::autodiff::Tensor;
use hscat_core::geometry::{
    blob, cuboid, cylinder, ellipsoid, grid_sdf, icosphere, occupancy_mask, torus, GridSpec,
    TriMesh,
};
use hscat_core::lighting::LightConfig;
use hscat_core::noise::{synth_albedo_field, synth_sigma_field, NoiseSpec};
use hscat_core::render::{
    camera_rig, olat_light_position, raymarch_render, Background, Image, OlatVariant,
    RenderConfig, Scene,
};
use hscat_core::rng::hash_words;
use hscat_core::tensois::{GtSample, TrainSample, VIEWS};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{Container, ContainerWriter, Role};
use crate::error::{HscatError, Result};
use crate::jsonrep::NoiseSpecRep;
use crate::pfm;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Generator knobs recorded verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub name: String,
    pub seed: u64,
    /// Voxels per axis of every field grid.
    pub grid: usize,
    /// Square view-image side in pixels.
    pub image: usize,
    pub shapes: Vec<String>,
    /// Independent noise draws per shape.
    pub draws: usize,
    /// Highest draw indices are held out for validation.
    pub val_draws: usize,
    pub density_scales: Vec<f64>,
    /// OLAT variants, e.g. ["colocated", "left"].
    pub lights: Vec<String>,
    pub light_intensity: f64,
    pub cam_radius: f64,
    pub fov_deg: f64,
}

impl DatasetParams {
    /// The 360-sample corpus: 6 shapes × 10 draws × 3 scales × 2 lights.
    pub fn mini(seed: u64) -> Self {
        DatasetParams {
            name: "hetero-synth-mini".into(),
            seed,
            grid: 32,
            image: 64,
            shapes: SHAPES.iter().map(|s| s.to_string()).collect(),
            draws: 10,
            val_draws: 2,
            density_scales: vec![20.0, 44.0, 68.0],
            lights: vec!["colocated".into(), "left".into()],
            light_intensity: 40.0,
            cam_radius: 1.0,
            fov_deg: 45.0,
        }
    }

    /// Four-sample corpus for fast smoke tests (same structure as mini).
    pub fn tiny(seed: u64) -> Self {
        DatasetParams {
            name: "hetero-synth-tiny".into(),
            seed,
            shapes: vec!["icosphere".into()],
            draws: 2,
            val_draws: 1,
            density_scales: vec![44.0],
            ..DatasetParams::mini(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.image == 0 {
            return Err(HscatError::validation("grid and image must be positive"));
        }
        if self.val_draws > self.draws {
            return Err(HscatError::validation("val_draws exceeds draws"));
        }
        for s in &self.shapes {
            if !SHAPES.contains(&s.as_str()) {
                return Err(HscatError::validation(format!("unknown shape {s:?}")));
            }
        }
        for l in &self.lights {
            parse_olat(l)?;
        }
        if !(self.light_intensity > 0.0) || !(self.cam_radius > 0.0) {
            return Err(HscatError::validation("light/camera parameters must be positive"));
        }
        Ok(())
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec::cube(self.grid)
    }
}

pub const SHAPES: [&str; 6] = [
    "icosphere",
    "cuboid",
    "torus",
    "cylinder",
    "ellipsoid",
    "blob",
];

pub fn parse_olat(name: &str) -> Result<OlatVariant> {
    match name {
        "colocated" => Ok(OlatVariant::Colocated),
        "left" => Ok(OlatVariant::Left),
        "right" => Ok(OlatVariant::Right),
        other => Err(HscatError::validation(format!("unknown light {other:?}"))),
    }
}

/// Sized to stay inside the half-meter world box with margin.
pub fn make_mesh(shape: &str, seed: u64) -> Result<TriMesh> {
    Ok(match shape {
        "icosphere" => icosphere(3, 0.21),
        "cuboid" => cuboid([0.18, 0.14, 0.2]),
        "torus" => torus(0.15, 0.06, 48, 24),
        "cylinder" => cylinder(0.12, 0.18, 48),
        "ellipsoid" => ellipsoid(3, [0.2, 0.14, 0.17]),
        "blob" => blob(3, 0.18, 0.3, seed),
        other => return Err(HscatError::validation(format!("unknown shape {other:?}"))),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshEntry {
    pub path: String,
    pub seed: u64,
}

/// One training/eval sample: a field rendered under one light configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: u64,
    pub shape: String,
    pub draw: usize,
    pub scale: f64,
    pub light: String,
    pub split: String,
    pub sigma_seed: u64,
    pub alpha_seed: u64,
    /// Relative path of the field container shared by this scene's samples.
    pub field: String,
    /// Relative paths of the six view images.
    pub views: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub params: DatasetParams,
    pub meshes: BTreeMap<String, MeshEntry>,
    pub samples: Vec<SampleEntry>,
    /// SHA-256 of this manifest serialized with `hash` empty.
    pub hash: String,
}

impl Manifest {
    pub fn train_ids(&self) -> Vec<usize> {
        self.split_ids("train")
    }

    pub fn val_ids(&self) -> Vec<usize> {
        self.split_ids("val")
    }

    fn split_ids(&self, split: &str) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

fn sigma_seed(master: u64, shape_idx: usize, draw: usize) -> u64 {
    hash_words(&[master, 0x5163, shape_idx as u64, draw as u64])
}

fn alpha_seed(master: u64, shape_idx: usize, draw: usize) -> u64 {
    hash_words(&[master, 0xa1fa, shape_idx as u64, draw as u64])
}

fn mesh_seed(master: u64, shape_idx: usize) -> u64 {
    hash_words(&[master, 0xb10b, shape_idx as u64])
}

/// Lay out the full manifest (paths, seeds, splits) without touching disk.
pub fn plan(params: &DatasetParams) -> Result<Manifest> {
    params.validate()?;
    let mut meshes = BTreeMap::new();
    for (si, shape) in params.shapes.iter().enumerate() {
        meshes.insert(
            shape.clone(),
            MeshEntry {
                path: format!("meshes/{shape}.obj"),
                seed: mesh_seed(params.seed, si),
            },
        );
    }
    let mut samples = Vec::new();
    let mut id = 0u64;
    for (si, shape) in params.shapes.iter().enumerate() {
        for draw in 0..params.draws {
            let split = if draw >= params.draws - params.val_draws {
                "val"
            } else {
                "train"
            };
            for (ki, &scale) in params.density_scales.iter().enumerate() {
                let field = format!("fields/{shape}_d{draw}_k{ki}.hsct");
                for light in &params.lights {
                    let views = (0..VIEWS)
                        .map(|v| format!("images/s{id:04}_v{v}.pfm"))
                        .collect();
                    samples.push(SampleEntry {
                        id,
                        shape: shape.clone(),
                        draw,
                        scale,
                        light: light.clone(),
                        split: split.into(),
                        sigma_seed: sigma_seed(params.seed, si, draw),
                        alpha_seed: alpha_seed(params.seed, si, draw),
                        field: field.clone(),
                        views,
                    });
                    id += 1;
                }
            }
        }
    }
    let mut m = Manifest {
        version: MANIFEST_VERSION,
        params: params.clone(),
        meshes,
        samples,
        hash: String::new(),
    };
    m.hash = manifest_hash(&m)?;
    Ok(m)
}

/// SHA-256 over the manifest serialized with an empty `hash` field.
pub fn manifest_hash(m: &Manifest) -> Result<String> {
    let mut unhashed = m.clone();
    unhashed.hash = String::new();
    let json = serde_json::to_vec(&unhashed)
        .map_err(|e| HscatError::Format(format!("manifest encode: {e}")))?;
    Ok(hex(&Sha256::digest(&json)))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(m: &Manifest, root: &Path) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(m)
        .map_err(|e| HscatError::Format(format!("manifest encode: {e}")))?;
    fs::write(&path, json).map_err(|e| HscatError::io(&path, e))
}

pub fn load(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| HscatError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| HscatError::Format(format!("manifest decode: {e}")))?;
    let expect = manifest_hash(&m)?;
    if m.hash != expect {
        return Err(HscatError::Format(format!(
            "manifest hash mismatch: recorded {}, computed {expect}",
            m.hash
        )));
    }
    Ok(m)
}

/// Every referenced file must exist under the root; reports all gaps.
pub fn validate_files(m: &Manifest, root: &Path) -> Result<()> {
    let mut missing = Vec::new();
    let mut check = |rel: &str| {
        if !root.join(rel).is_file() {
            missing.push(rel.to_string());
        }
    };
    for e in m.meshes.values() {
        check(&e.path);
    }
    for s in &m.samples {
        check(&s.field);
        for v in &s.views {
            check(v);
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(HscatError::validation(format!(
            "{} dangling manifest reference(s), first: {}",
            missing.len(),
            missing[0]
        )))
    }
}

fn noise_spec(params: &DatasetParams, seed: u64) -> Result<NoiseSpec> {
    let desk = NoiseSpec::desk(seed);
    NoiseSpec::new(params.grid, desk.octaves, desk.base_exp, seed)
        .map_err(|e| HscatError::validation(format!("noise spec: {e}")))
}

/// Deterministic field container bytes for one (shape, draw, scale) scene.
fn field_writer(m: &Manifest, entry: &SampleEntry) -> Result<ContainerWriter> {
    let params = &m.params;
    let spec_s = noise_spec(params, entry.sigma_seed)?;
    let spec_a = noise_spec(params, entry.alpha_seed)?;
    let sigma = synth_sigma_field(&spec_s)
        .map_err(|e| HscatError::numerical(format!("sigma synth: {e}")))?;
    let alpha = synth_albedo_field(&spec_a)
        .map_err(|e| HscatError::numerical(format!("albedo synth: {e}")))?;
    let mesh_entry = m
        .meshes
        .get(&entry.shape)
        .ok_or_else(|| HscatError::validation(format!("no mesh entry for {}", entry.shape)))?;
    let mesh = make_mesh(&entry.shape, mesh_entry.seed)?;
    let sdf = grid_sdf(&mesh, &params.spec())
        .map_err(|e| HscatError::numerical(format!("voxelize: {e}")))?;
    let mask = occupancy_mask(&sdf);
    let meta = serde_json::json!({
        "kind": "field",
        "shape": entry.shape,
        "draw": entry.draw,
        "scale": entry.scale,
        "noise_sigma": NoiseSpecRep::from(spec_s),
        "noise_alpha": NoiseSpecRep::from(spec_a),
        "dataset_seed": params.seed,
    });
    let mut w = ContainerWriter::new(meta);
    w.add_grid("sigma", Role::Sigma, &sigma);
    w.add_grid("alpha", Role::Alpha, &alpha);
    w.add_grid("mask", Role::Mask, &mask);
    Ok(w)
}

/// Render the six views of one sample from its (regenerated) field.
fn render_views(m: &Manifest, entry: &SampleEntry, w: &ContainerWriter) -> Result<Vec<Image>> {
    let params = &m.params;
    let bytes = w.to_bytes()?;
    let c = Container::from_bytes(&bytes)?;
    let sigma = c.grid("sigma")?;
    let alpha = c.grid("alpha")?;
    let mask = c.grid("mask")?;
    let spec = params.spec();
    let cams = camera_rig(params.cam_radius, params.fov_deg)
        .map_err(|e| HscatError::validation(format!("camera rig: {e}")))?;
    let cfg = RenderConfig::for_grid(&spec, params.image, params.image, Background::Black);
    let variant = parse_olat(&entry.light)?;
    let mut out = Vec::with_capacity(VIEWS);
    for (v, cam) in cams.iter().enumerate() {
        let scene = Scene {
            sigma: &sigma,
            albedo: &alpha,
            mask: Some(&mask),
            scale: entry.scale,
            spec: spec.clone(),
            light: LightConfig::Point {
                position: olat_light_position(v, variant, params.cam_radius),
                intensity: [params.light_intensity; 3],
            },
            background: Background::Black,
        };
        out.push(
            raymarch_render(&scene, cam, &cfg)
                .map_err(|e| HscatError::numerical(format!("render: {e}")))?,
        );
    }
    Ok(out)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| HscatError::io(p, e))?;
    }
    Ok(())
}

/// (Re)generate every file of one sample — mesh, field container, views —
/// byte-identically, regardless of what is already on disk.
pub fn generate_sample(m: &Manifest, root: &Path, idx: usize) -> Result<()> {
    let entry = m
        .samples
        .get(idx)
        .ok_or_else(|| HscatError::validation(format!("sample index {idx} out of range")))?;
    let mesh_entry = m
        .meshes
        .get(&entry.shape)
        .ok_or_else(|| HscatError::validation(format!("no mesh entry for {}", entry.shape)))?;
    let mesh_path = root.join(&mesh_entry.path);
    ensure_parent(&mesh_path)?;
    crate::objio::save_mesh(&mesh_path, &make_mesh(&entry.shape, mesh_entry.seed)?)?;

    let w = field_writer(m, entry)?;
    let field_path = root.join(&entry.field);
    ensure_parent(&field_path)?;
    w.write_to(&field_path)?;

    let views = render_views(m, entry, &w)?;
    for (img, rel) in views.iter().zip(entry.views.iter()) {
        let path = root.join(rel);
        ensure_parent(&path)?;
        pfm::write_image(&path, img)?;
    }
    Ok(())
}

/// Generate the whole dataset under `root` and write its manifest.
pub fn generate(m: &Manifest, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| HscatError::io(root, e))?;
    // Samples are independent and deterministic, so scene duplicates (two
    // lights share one field) just rewrite identical bytes.
    m.samples
        .par_iter()
        .enumerate()
        .try_for_each(|(i, _)| generate_sample(m, root, i))?;
    save(m, root)?;
    validate_files(m, root)
}

// -- Loading for training and evaluation -------------------------------------

/// Single-channel luminance tensors from view images, shaped `[1, S, S]`.
pub fn luminance_views(images: &[Image]) -> Vec<Tensor> {
    images
        .iter()
        .map(|img| {
            let lum: Vec<f64> = img
                .data
                .iter()
                .map(|px| (px[0] + px[1] + px[2]) / 3.0)
                .collect();
            Tensor::from_vec(&[1, img.height, img.width], lum)
        })
        .collect()
}

fn load_views(m: &Manifest, root: &Path, entry: &SampleEntry) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(entry.views.len());
    for rel in &entry.views {
        let img = pfm::read_image(&root.join(rel))?;
        if img.width != m.params.image || img.height != m.params.image {
            return Err(HscatError::validation(format!(
                "{rel}: image is {}x{}, dataset expects {}",
                img.width, img.height, m.params.image
            )));
        }
        out.push(img);
    }
    Ok(out)
}

/// Ground truth for one scene, read back from its field container.
pub fn load_gt(root: &Path, entry: &SampleEntry) -> Result<GtSample> {
    let c = Container::read_from(&root.join(&entry.field))?;
    Ok(GtSample {
        sigma: c.grid("sigma")?,
        alpha: c.grid("alpha")?,
        mask: c.grid("mask")?,
        scale: entry.scale,
        light_sh: None,
    })
}

/// Assemble two-light training pairs for a split. Samples are grouped by
/// field container; the first configured light is side A.
pub fn load_pairs(m: &Manifest, root: &Path, split: &str) -> Result<Vec<TrainSample>> {
    let mut by_field: BTreeMap<&str, Vec<&SampleEntry>> = BTreeMap::new();
    for s in m.samples.iter().filter(|s| s.split == split) {
        by_field.entry(&s.field).or_default().push(s);
    }
    let mut out = Vec::new();
    for (field, group) in by_field {
        if group.len() != 2 {
            return Err(HscatError::validation(format!(
                "scene {field} has {} samples, two-light training needs 2",
                group.len()
            )));
        }
        let (a, b) = if group[0].light == m.params.lights[0] {
            (group[0], group[1])
        } else {
            (group[1], group[0])
        };
        out.push(TrainSample {
            views_a: luminance_views(&load_views(m, root, a)?),
            views_b: luminance_views(&load_views(m, root, b)?),
            gt: load_gt(root, a)?,
            light_sh_b: None,
            id: a.id,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mini_plan_has_the_published_arithmetic() {
        let m = plan(&DatasetParams::mini(9)).unwrap();
        assert_eq!(m.samples.len(), 360);
        let images: usize = m.samples.iter().map(|s| s.views.len()).sum();
        assert_eq!(images, 2160);
        assert_eq!(m.meshes.len(), 6);
        assert_eq!(m.train_ids().len(), 288);
        assert_eq!(m.val_ids().len(), 72);
        // Two lights per scene share one field container.
        let fields: std::collections::BTreeSet<_> =
            m.samples.iter().map(|s| s.field.clone()).collect();
        assert_eq!(fields.len(), 180);
    }

    #[test]
    fn plan_is_deterministic_and_seed_sensitive() {
        let a = plan(&DatasetParams::mini(9)).unwrap();
        let b = plan(&DatasetParams::mini(9)).unwrap();
        let c = plan(&DatasetParams::mini(10)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, c.hash);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let mut params = DatasetParams::tiny(1);
        params.shapes.clear();
        let m = plan(&params).unwrap();
        assert!(m.samples.is_empty());
        let dir = tempfile::tempdir().unwrap();
        generate(&m, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back, m);
        validate_files(&back, dir.path()).unwrap();
    }

    #[test]
    fn dangling_reference_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let params = DatasetParams::tiny(3);
        let m = plan(&params).unwrap();
        generate(&m, dir.path()).unwrap();
        fs::remove_file(dir.path().join(&m.samples[1].views[2])).unwrap();
        let err = validate_files(&m, dir.path()).unwrap_err();
        assert!(matches!(err, HscatError::Validation(_)));
        assert!(err.to_string().contains("dangling"));
    }

    #[test]
    fn tampered_manifest_fails_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = DatasetParams::tiny(4);
        params.shapes.clear();
        let m = plan(&params).unwrap();
        generate(&m, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace(
            "\"hetero-synth-tiny\"",
            "\"hetero-synth-tinY\"",
        );
        fs::write(&path, text).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
