//! Scene documents (TOML) and binary label-grid dumps.
//!
//! ```text
//! magic      "S2TPVGRID"            9 bytes
//! dims       u32 * 3                (H, W, D)
//! bounds     f64 * 6                x0 x1 y0 y1 z0 z1
//! n_classes  u32                    label values including empty
//! labels     u8 * H*W*D             (h, w, d) order
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{VoxelLabelGrid, WorldSpec};
use crate::error::{Error, Result};
use crate::geometry::EgoGrid;

pub const SCENE_VERSION: u32 = 1;
pub const GRID_MAGIC: &[u8; 9] = b"S2TPVGRID";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    version: u32,
    world: WorldSpec,
}

pub fn scene_to_string(spec: &WorldSpec) -> Result<String> {
    let doc = SceneDoc { version: SCENE_VERSION, world: spec.clone() };
    toml::to_string(&doc).map_err(|e| Error::Format(format!("scene serialization failed: {e}")))
}

pub fn scene_from_str(text: &str) -> Result<WorldSpec> {
    let doc: SceneDoc = toml::from_str(text).map_err(|e| Error::Format(format!("bad scene document: {e}")))?;
    if doc.version != SCENE_VERSION {
        return Err(Error::Format(format!("scene version {} unsupported (expected {SCENE_VERSION})", doc.version)));
    }
    doc.world.check()?;
    Ok(doc.world)
}

pub fn write_scene(path: &Path, spec: &WorldSpec) -> Result<()> {
    std::fs::write(path, scene_to_string(spec)?).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<WorldSpec> {
    scene_from_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Every `*.toml` scene in `dir`, ordered by file name.
pub fn read_scenes(dir: &Path) -> Result<Vec<(PathBuf, WorldSpec)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "toml"));
    paths.sort();
    paths.into_iter().map(|p| read_scene(&p).map(|s| (p, s))).collect()
}

pub fn write_grid<W: Write>(grid: &EgoGrid, labels: &VoxelLabelGrid, mut w: W) -> Result<()> {
    if labels.dims != grid.dims {
        return Err(Error::dim(format!("labels {:?} do not match grid {:?}", labels.dims, grid.dims)));
    }
    let mut buf = Vec::with_capacity(GRID_MAGIC.len() + 64 + labels.labels.len());
    buf.extend_from_slice(GRID_MAGIC);
    for &d in &grid.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for b in grid.bounds.iter().flatten() {
        buf.extend_from_slice(&b.to_le_bytes());
    }
    buf.extend_from_slice(&(labels.n_classes as u32).to_le_bytes());
    buf.extend_from_slice(&labels.labels);
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::Format(format!("grid write failed: {e}")))
}

pub fn read_grid<R: Read>(mut r: R) -> Result<(EgoGrid, VoxelLabelGrid)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Format(format!("grid read failed: {e}")))?;
    let header = GRID_MAGIC.len() + 3 * 4 + 6 * 8 + 4;
    if bytes.len() < header || &bytes[..GRID_MAGIC.len()] != GRID_MAGIC {
        return Err(Error::Format("not a label grid dump".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let o = GRID_MAGIC.len();
    let dims = [u32_at(o), u32_at(o + 4), u32_at(o + 8)];
    let b = |k: usize| f64_at(o + 12 + 8 * k);
    let bounds = [[b(0), b(1)], [b(2), b(3)], [b(4), b(5)]];
    let n_classes = u32_at(o + 60);
    let grid = EgoGrid::new(dims, bounds)?;
    if bytes.len() - header != grid.n_voxels() {
        return Err(Error::Format(format!(
            "grid body has {} bytes, expected {}",
            bytes.len() - header,
            grid.n_voxels()
        )));
    }
    let labels = VoxelLabelGrid::new(dims, n_classes, bytes[header..].to_vec())?;
    Ok((grid, labels))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_spec;
    use super::*;

    #[test]
    fn scene_round_trip() {
        let spec = tiny_spec();
        let text = scene_to_string(&spec).unwrap();
        assert!(text.starts_with("version = 1"));
        assert_eq!(scene_from_str(&text).unwrap(), spec);
        let bumped = text.replacen("version = 1", "version = 2", 1);
        assert!(matches!(scene_from_str(&bumped), Err(Error::Format(_))));
    }

    #[test]
    fn scene_files_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_spec();
        b.seed = 2;
        write_scene(&dir.path().join("b.toml"), &b).unwrap();
        write_scene(&dir.path().join("a.toml"), &tiny_spec()).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "skip").unwrap();
        let all = read_scenes(dir.path()).unwrap();
        assert_eq!(all.iter().map(|(_, s)| s.seed).collect::<Vec<_>>(), vec![1, 2]);
        assert!(matches!(read_scene(&dir.path().join("missing.toml")), Err(Error::Io { .. })));
    }

    #[test]
    fn grid_round_trip() {
        let grid = EgoGrid::new([2, 3, 1], [[-1.0, 1.0], [0.0, 3.0], [0.0, 0.5]]).unwrap();
        let labels = VoxelLabelGrid::new([2, 3, 1], 9, vec![0, 8, 3, 3, 1, 8]).unwrap();
        let mut buf = Vec::new();
        write_grid(&grid, &labels, &mut buf).unwrap();
        assert_eq!(&buf[..9], b"S2TPVGRID");
        assert_eq!(buf.len(), 9 + 12 + 48 + 4 + 6);
        let (g2, l2) = read_grid(&buf[..]).unwrap();
        assert_eq!((g2, l2), (grid, labels));
        assert!(read_grid(&buf[..buf.len() - 1]).is_err());
    }
}
