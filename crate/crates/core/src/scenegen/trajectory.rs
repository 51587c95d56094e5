use std::f64::consts::TAU;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{render_depth, Scene};
use crate::camgeom::{backproject, voxel_index, Camera, GridSpec, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// Orbit radius as a multiple of the scene's bounding radius.
    pub radius_range: (f64, f64),
    pub elevation_deg: (f64, f64),
    /// A voxel counts as covered when at least this many views see it.
    pub min_views: usize,
    pub min_coverage: f64,
    pub extent: f64,
    pub max_attempts: usize,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            fov_deg: 60.0,
            radius_range: (1.15, 1.5),
            elevation_deg: (25.0, 65.0),
            min_views: 3,
            min_coverage: 0.8,
            extent: GridSpec::DEFAULT_EXTENT,
            max_attempts: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub cameras: Vec<Camera>,
    /// Lighting setup index per view.
    pub lighting: Vec<usize>,
    /// Fraction of observed surface voxels seen by ≥ `min_views` views.
    pub coverage: f64,
}

/// Axis-aligned bounds of all scene vertices.
pub fn scene_bounds(scene: &Scene) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for t in &scene.triangles {
        for v in &t.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
    }
    (lo, hi)
}

/// Fraction of surface voxels (seen at least once) that are seen by at
/// least `min_views` distinct views.
pub fn coverage(scene: &Scene, cameras: &[Camera], extent: f64, min_views: usize) -> Result<f64> {
    let (lo, hi) = scene_bounds(scene);
    let grid = GridSpec::covering(lo, hi, extent, 0.05)?;
    let per_view: Vec<Vec<usize>> = cameras
        .par_iter()
        .map(|cam| {
            let depth = render_depth(scene, cam);
            let mut cells = Vec::new();
            for y in 0..depth.height {
                for x in 0..depth.width {
                    let z = depth.get(x, y) as f64;
                    if z <= 0.0 {
                        continue;
                    }
                    let p = backproject(&Vector2::new(x as f64, y as f64), z, cam)
                        .expect("positive depth");
                    if let Some(idx) = voxel_index(&p, &grid) {
                        cells.push(grid.linear(idx));
                    }
                }
            }
            cells.sort_unstable();
            cells.dedup();
            cells
        })
        .collect();
    let mut views_per_cell = std::collections::HashMap::<usize, usize>::new();
    for cells in &per_view {
        for &c in cells {
            *views_per_cell.entry(c).or_default() += 1;
        }
    }
    if views_per_cell.is_empty() {
        return Ok(0.0);
    }
    let covered = views_per_cell.values().filter(|&&n| n >= min_views).count();
    Ok(covered as f64 / views_per_cell.len() as f64)
}

fn sample_cameras(scene: &Scene, n_views: usize, rng: &mut impl Rng, cfg: &TrajectoryConfig) -> Result<Vec<Camera>> {
    let (lo, hi) = scene_bounds(scene);
    let center = (lo + hi) * 0.5;
    let radius = ((hi - lo) * 0.5).norm();
    let intrinsics = Intrinsics::from_fov(cfg.width, cfg.height, cfg.fov_deg.to_radians())?;
    let step = TAU / n_views as f64;
    let phase: f64 = rng.gen_range(0.0..TAU);
    (0..n_views)
        .map(|i| {
            let az = phase + i as f64 * step + rng.gen_range(-0.3..0.3) * step;
            let el = rng
                .gen_range(cfg.elevation_deg.0..=cfg.elevation_deg.1)
                .to_radians();
            let d = radius * rng.gen_range(cfg.radius_range.0..=cfg.radius_range.1);
            let eye = center + Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * d;
            let target = center
                + Vector3::new(
                    rng.gen_range(-0.03..0.03),
                    rng.gen_range(-0.03..0.03),
                    rng.gen_range(-0.01..0.01),
                );
            Ok(Camera {
                intrinsics,
                pose: Pose::look_at(eye, target, Vector3::z())?,
            })
        })
        .collect()
}

/// Orbit the scene with jittered radius and elevation. Retries with a new
/// seed salt until coverage reaches `cfg.min_coverage`.
pub fn generate_trajectory(
    scene: &Scene,
    n_views: usize,
    seed: u64,
    cfg: &TrajectoryConfig,
) -> Result<Trajectory> {
    if n_views < 2 {
        return Err(Error::Precondition(format!(
            "a trajectory needs at least 2 views, got {n_views}"
        )));
    }
    scene.validate()?;
    let mut best = 0.0f64;
    for attempt in 0..cfg.max_attempts {
        let mut rng = seeding::rng(seed, "trajectory", attempt as u64);
        let cameras = sample_cameras(scene, n_views, &mut rng, cfg)?;
        let cov = coverage(scene, &cameras, cfg.extent, cfg.min_views)?;
        log::debug!("trajectory attempt={attempt} coverage={cov:.4}");
        if cov >= cfg.min_coverage {
            let lighting = (0..n_views)
                .map(|_| rng.gen_range(0..scene.lightings.len()))
                .collect();
            return Ok(Trajectory {
                cameras,
                lighting,
                coverage: cov,
            });
        }
        best = best.max(cov);
    }
    Err(Error::CoverageUnreachable {
        attempts: cfg.max_attempts,
        best,
        required: cfg.min_coverage,
    })
}
