//! Expectation step: splat detector scores into a voxel grid through
//! ground-truth depth and render the per-voxel ratio `D / N` back into each
//! view.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::camgeom::{backproject, voxel_index, CameraView, GridSpec};
use crate::error::{Error, Result};
use crate::raster::{Heatmap, Plane};

/// Dense voxel grid holding, per cell, the sum of detector scores `D` and
/// the number of pixel hits `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub d: Vec<f64>,
    pub n: Vec<u32>,
}

impl VoxelGrid {
    pub fn empty(spec: GridSpec) -> Self {
        let cells = spec.cell_count();
        Self {
            spec,
            d: vec![0.0; cells],
            n: vec![0; cells],
        }
    }

    /// Cellwise sum with another grid over the same spec.
    pub fn merge(&mut self, other: &VoxelGrid) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::DimensionMismatch("merging grids with different specs".into()));
        }
        for (a, b) in self.d.iter_mut().zip(&other.d) {
            *a += b;
        }
        for (a, b) in self.n.iter_mut().zip(&other.n) {
            *a += b;
        }
        Ok(())
    }

    pub fn occupied(&self) -> usize {
        self.n.iter().filter(|&&n| n > 0).count()
    }

    /// Header `X Y Z extent ox oy oz`, then `i j k N D` per occupied cell in
    /// lexicographic order.
    pub fn dump(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "{} {} {} {} {} {} {}\n",
            s.dims[0], s.dims[1], s.dims[2], s.extent, s.origin.x, s.origin.y, s.origin.z
        );
        for (lin, (&n, &d)) in self.n.iter().zip(&self.d).enumerate() {
            if n > 0 {
                let [i, j, k] = s.unlinear(lin);
                writeln!(out, "{i} {j} {k} {n} {d}").unwrap();
            }
        }
        out
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        fs::write(path, self.dump()).map_err(|e| Error::io(path, e))
    }
}

/// Voxel hit by integer pixel `(x, y)` of `view`, if it has depth and lands
/// inside the grid.
#[inline]
fn pixel_voxel(view: &CameraView, x: usize, y: usize, spec: &GridSpec) -> Option<usize> {
    let z = view.depth.get(x, y) as f64;
    if z <= 0.0 {
        return None;
    }
    let p = backproject(&Vector2::new(x as f64, y as f64), z, &view.camera).ok()?;
    voxel_index(&p, spec).map(|idx| spec.linear(idx))
}

/// For every pixel with depth whose backprojection lies in the grid,
/// `N += 1` and `D += score` at the hit voxel.
pub fn accumulate(views: &[CameraView], heatmaps: &[Heatmap], spec: &GridSpec) -> Result<VoxelGrid> {
    if views.len() != heatmaps.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} views but {} heatmaps",
            views.len(),
            heatmaps.len()
        )));
    }
    for (i, (v, h)) in views.iter().zip(heatmaps).enumerate() {
        if !v.depth.same_shape(h) {
            return Err(Error::DimensionMismatch(format!(
                "view {i}: depth {}x{} vs heatmap {}x{}",
                v.depth.width, v.depth.height, h.width, h.height
            )));
        }
        if let Some(bad) = h.data.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::OutOfRange(format!("view {i}: heatmap value {bad}")));
        }
    }
    // Per-view hit lists in parallel, then a fixed-order reduction.
    let hits: Vec<Vec<(usize, f64)>> = views
        .par_iter()
        .zip(heatmaps.par_iter())
        .map(|(view, heat)| {
            let mut out = Vec::new();
            for y in 0..view.height() {
                for x in 0..view.width() {
                    if let Some(cell) = pixel_voxel(view, x, y, spec) {
                        out.push((cell, heat.get(x, y)));
                    }
                }
            }
            out
        })
        .collect();
    let mut grid = VoxelGrid::empty(*spec);
    for list in hits {
        for (cell, score) in list {
            grid.n[cell] += 1;
            grid.d[cell] += score;
        }
    }
    Ok(grid)
}

/// `D / N` for cells seen at least `min_views` times.
pub fn repeatability(grid: &VoxelGrid, min_views: u32) -> Vec<Option<f64>> {
    let min_views = min_views.max(1);
    grid.d
        .iter()
        .zip(&grid.n)
        .map(|(&d, &n)| (n >= min_views).then(|| (d / n as f64).clamp(0.0, 1.0)))
        .collect()
}

/// Per-pixel repeatability with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RepeatabilityMap {
    pub values: Plane<f64>,
    pub mask: Plane<bool>,
}

impl RepeatabilityMap {
    /// Fully valid map over the given values; handy for tests and
    /// synthetic inputs.
    pub fn all_valid(values: Plane<f64>) -> Self {
        let mask = Plane::filled(values.width, values.height, true);
        Self { values, mask }
    }

    pub fn width(&self) -> usize {
        self.values.width
    }

    pub fn height(&self) -> usize {
        self.values.height
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize) -> Option<f64> {
        self.mask.get(x, y).then(|| self.values.get(x, y))
    }
}

/// Look up each pixel's voxel and copy its `D / N` when `N ≥ min_views`.
pub fn render_repeatability(grid: &VoxelGrid, view: &CameraView, min_views: u32) -> RepeatabilityMap {
    let min_views = min_views.max(1);
    let (w, h) = (view.width(), view.height());
    let mut values = Plane::filled(w, h, 0.0);
    let mut mask = Plane::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if let Some(cell) = pixel_voxel(view, x, y, &grid.spec) {
                let n = grid.n[cell];
                if n >= min_views {
                    values.set(x, y, (grid.d[cell] / n as f64).clamp(0.0, 1.0));
                    mask.set(x, y, true);
                }
            }
        }
    }
    RepeatabilityMap { values, mask }
}

/// Entry `k−1` is the fraction of occupied cells with `N ≥ k`, for
/// `k = 1..=max N`. An empty grid yields `[0.0]`.
pub fn visibility_stats(grid: &VoxelGrid) -> Vec<f64> {
    let occupied = grid.occupied();
    let max_n = grid.n.iter().copied().max().unwrap_or(0) as usize;
    if occupied == 0 {
        return vec![0.0];
    }
    let mut hist = vec![0usize; max_n + 1];
    for &n in &grid.n {
        hist[n as usize] += 1;
    }
    // suffix sums: cells with N ≥ k
    let mut at_least = vec![0usize; max_n + 2];
    for k in (1..=max_n).rev() {
        at_least[k] = at_least[k + 1] + hist[k];
    }
    (1..=max_n)
        .map(|k| at_least[k] as f64 / occupied as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camgeom::{Camera, Intrinsics, Pose};
    use nalgebra::Vector3;

    fn view_with_depth(depth: Plane<f32>, pose: Pose) -> CameraView {
        let (w, h) = (depth.width, depth.height);
        let cam = Camera {
            intrinsics: Intrinsics::new(4.0, 4.0, 1.5, 1.5, w, h).unwrap(),
            pose,
        };
        CameraView::new(cam, Plane::filled(w, h, 0.5), depth).unwrap()
    }

    /// Three views whose pixel (1,1) sees world point (0,0,1) and nothing
    /// else has depth.
    fn three_view_point() -> (Vec<CameraView>, GridSpec) {
        let target = Vector3::new(0.0, 0.0, 1.0);
        let eyes = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.3, 0.0, 0.1),
            Vector3::new(-0.2, 0.25, 0.05),
        ];
        let views = eyes
            .iter()
            .map(|eye| {
                let pose = Pose::look_at(*eye, target, Vector3::y()).unwrap();
                // shift so the target lands exactly on pixel (1, 1)
                let cam_t = pose.to_camera(&target);
                let mut depth = Plane::filled(4, 4, 0.0f32);
                depth.set(1, 1, cam_t.z as f32);
                let mut v = view_with_depth(depth, pose);
                v.camera.intrinsics.cx = 1.0;
                v.camera.intrinsics.cy = 1.0;
                v
            })
            .collect();
        let spec = GridSpec::new(Vector3::new(-0.05, -0.05, 0.95), 0.1, [1, 1, 1]).unwrap();
        (views, spec)
    }

    fn heat_at(score: f64) -> Heatmap {
        let mut h = Plane::filled(4, 4, 0.0);
        h.set(1, 1, score);
        h
    }

    #[test]
    fn perfect_and_soft_scores() {
        let (views, spec) = three_view_point();
        let g = accumulate(&views, &[heat_at(1.0), heat_at(1.0), heat_at(1.0)], &spec).unwrap();
        assert_eq!(g.n[0], 3);
        assert_eq!(g.d[0], 3.0);
        assert_eq!(repeatability(&g, 3)[0], Some(1.0));
        let map = render_repeatability(&g, &views[0], 3);
        assert_eq!(map.value(1, 1), Some(1.0));
        assert_eq!(map.value(0, 0), None);

        let g = accumulate(&views, &[heat_at(1.0), heat_at(0.5), heat_at(0.0)], &spec).unwrap();
        assert_eq!((g.n[0], g.d[0]), (3, 1.5));
        assert_eq!(repeatability(&g, 3)[0], Some(0.5));
        assert_eq!(repeatability(&g, 4)[0], None);
        assert!(!render_repeatability(&g, &views[1], 4).mask.get(1, 1));
    }

    #[test]
    fn repeatability_edge_values() {
        let spec = GridSpec::new(Vector3::zeros(), 1.0, [3, 1, 1]).unwrap();
        let g = VoxelGrid {
            spec,
            d: vec![3.0, 0.0, 1.0],
            n: vec![3, 5, 1],
        };
        assert_eq!(repeatability(&g, 3), vec![Some(1.0), Some(0.0), None]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (views, spec) = three_view_point();
        assert!(matches!(
            accumulate(&views, &[heat_at(1.0)], &spec),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            accumulate(&views, &[heat_at(1.0), heat_at(1.5), heat_at(0.0)], &spec),
            Err(Error::OutOfRange(_))
        ));
        let small = Plane::filled(2, 2, 0.0);
        assert!(accumulate(&views[..1], &[small], &spec).is_err());
    }

    #[test]
    fn visibility_stat_examples() {
        let spec = GridSpec::new(Vector3::zeros(), 1.0, [4, 1, 1]).unwrap();
        let empty = VoxelGrid::empty(spec);
        assert_eq!(visibility_stats(&empty), vec![0.0]);
        let mut one = VoxelGrid::empty(spec);
        one.n[2] = 1;
        one.d[2] = 0.3;
        assert_eq!(visibility_stats(&one), vec![1.0]);
        let mut two = one.clone();
        two.n[0] = 3;
        assert_eq!(visibility_stats(&two), vec![1.0, 0.5, 0.5]);
    }

    #[test]
    fn dump_lists_occupied_cells() {
        let spec = GridSpec::new(Vector3::new(0.5, 0.0, 0.0), 0.25, [2, 1, 2]).unwrap();
        let mut g = VoxelGrid::empty(spec);
        g.n[spec.linear([1, 0, 1])] = 2;
        g.d[spec.linear([1, 0, 1])] = 0.75;
        assert_eq!(g.dump(), "2 1 2 0.25 0.5 0 0\n1 0 1 2 0.75\n");
    }
}
