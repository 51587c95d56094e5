//! Dataset directory layout:
//!
//! ```text
//! poses.txt          one `view_id fx fy cx cy r00 .. r22 tx ty tz` line per view
//! img_%05d.pgm       binary PGM, maxval 255
//! depth_%05d.raw     `W H` header line, then W·H little-endian f32, row-major
//! scene.json         optional: the generating scene and per-view lighting
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Scene;
use crate::camgeom::{
    read_pose_file, write_pose_file, Camera, CameraView, Intrinsics, PoseRecord,
};
use crate::error::{Error, Result};
use crate::raster::{read_pgm, read_raw_f32, write_pgm, write_raw_f32};

pub const POSES_FILE: &str = "poses.txt";
pub const SCENE_FILE: &str = "scene.json";

fn image_name(id: usize) -> String {
    format!("img_{id:05}.pgm")
}

fn depth_name(id: usize) -> String {
    format!("depth_{id:05}.raw")
}

pub fn save_dataset(dir: &Path, views: &[CameraView]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records: Vec<PoseRecord> = views
        .iter()
        .enumerate()
        .map(|(i, v)| PoseRecord::from_camera(i, &v.camera))
        .collect();
    for (i, v) in views.iter().enumerate() {
        write_pgm(&dir.join(image_name(i)), &v.image)?;
        write_raw_f32(&dir.join(depth_name(i)), &v.depth)?;
    }
    write_pose_file(&dir.join(POSES_FILE), &records)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<CameraView>> {
    let records = read_pose_file(&dir.join(POSES_FILE))?;
    records
        .iter()
        .map(|r| {
            let img_path = dir.join(image_name(r.view_id));
            let image = read_pgm(&img_path)?;
            let depth = read_raw_f32(&dir.join(depth_name(r.view_id)))?;
            if !image.same_shape(&depth) {
                return Err(Error::DimensionMismatch(format!(
                    "view {}: image {}x{} vs depth {}x{}",
                    r.view_id, image.width, image.height, depth.width, depth.height
                )));
            }
            let intrinsics = Intrinsics::new(r.fx, r.fy, r.cx, r.cy, image.width, image.height)
                .map_err(|e| Error::malformed(&img_path, e.to_string()))?;
            CameraView::new(
                Camera {
                    intrinsics,
                    pose: r.pose,
                },
                image,
                depth,
            )
        })
        .collect()
}

/// The scene a dataset was rendered from, kept so evaluation can re-render
/// the same poses under other lighting setups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene: Scene,
    pub lighting: Vec<usize>,
}

pub fn save_scene_record(dir: &Path, record: &SceneRecord) -> Result<()> {
    let path = dir.join(SCENE_FILE);
    let json = serde_json::to_string(record).expect("scene serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_scene_record(dir: &Path) -> Result<Option<SceneRecord>> {
    let path = dir.join(SCENE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::malformed(&path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, generate_trajectory, render, Complexity, TrajectoryConfig};

    fn rendered(n: usize) -> Vec<CameraView> {
        let scene = generate_scene(5, Complexity::Small);
        let cfg = TrajectoryConfig {
            width: 32,
            height: 32,
            min_coverage: 0.0,
            ..Default::default()
        };
        let t = generate_trajectory(&scene, n, 5, &cfg).unwrap();
        t.cameras
            .iter()
            .zip(&t.lighting)
            .map(|(c, &l)| render(&scene, c, l))
            .collect()
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let views = rendered(30);
        save_dataset(dir.path(), &views).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 30);
        for (a, b) in views.iter().zip(&back) {
            assert_eq!(a.depth, b.depth);
            for (p, q) in a.image.data.iter().zip(&b.image.data) {
                assert!((p - q).abs() <= 1.0 / 255.0 + 1e-7);
            }
            assert!((a.camera.pose.rotation - b.camera.pose.rotation).amax() < 1e-9);
            assert!((a.camera.pose.translation - b.camera.pose.translation).amax() < 1e-9);
            assert!((a.camera.intrinsics.fx - b.camera.intrinsics.fx).abs() < 1e-6);
        }
    }

    #[test]
    fn truncated_depth_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &rendered(2)).unwrap();
        let p = dir.path().join(depth_name(1));
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Malformed { .. })));
    }

    #[test]
    fn missing_and_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
        let mut views = rendered(2);
        save_dataset(dir.path(), &views).unwrap();
        views[1].depth = crate::raster::Plane::filled(16, 16, 1.0);
        write_raw_f32(&dir.path().join(depth_name(1)), &views[1].depth).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
