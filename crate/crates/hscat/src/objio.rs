//! File IO for Wavefront OBJ meshes around the in-memory parser/writer.

use std::fs;
use std::path::Path;

use hscat_core::geometry::{parse_obj, write_obj, TriMesh};

use crate::error::{HscatError, Result};

pub fn load_mesh(path: &Path) -> Result<TriMesh> {
    let text = fs::read_to_string(path).map_err(|e| HscatError::io(path, e))?;
    parse_obj(&text).map_err(|e| HscatError::Format(format!("{}: {e}", path.display())))
}

pub fn save_mesh(path: &Path, mesh: &TriMesh) -> Result<()> {
    fs::write(path, write_obj(mesh)).map_err(|e| HscatError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use hscat_core::geometry::icosphere;

    #[test]
    fn mesh_survives_disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sphere.obj");
        let mesh = icosphere(1, 0.2);
        save_mesh(&path, &mesh).unwrap();
        let back = load_mesh(&path).unwrap();
        assert_eq!(back.triangles, mesh.triangles);
        assert_eq!(back.vertices.len(), mesh.vertices.len());
    }
}
