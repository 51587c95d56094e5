//! Evaluation: multi-view repeatability with ground-truth depth, mean
//! matching accuracy with a normalized patch descriptor, and a 3D
//! localization-error proxy. Every detector score is reported next to a
//! uniform-random keypoint baseline with the same keypoint count.

use std::fs;
use std::path::Path;

use log::{info, warn};
use nalgebra::{Matrix3, Vector2};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camgeom::{nearest_pixel, project, warp_homography, Camera, CameraView, GridSpec, Pose};
use crate::detector::{forward, DetectorParams};
use crate::error::{Error, Result};
use crate::maximizer::{in_border, nms_select, Keypoint, MaximizerConfig};
use crate::raster::{quantize8, write_pgm, Heatmap, Image, Plane};
use crate::scenegen::{render, SceneRecord};
use crate::seeding;
use crate::voxelrep::RepeatabilityMap;

pub const PATCH: usize = 13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub threshold: f64,
    pub nms_radius: f64,
    pub cell: usize,
    pub border: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            threshold: 0.025,
            nms_radius: 3.0,
            cell: 8,
            border: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub keypoints: Vec<Keypoint>,
    pub threshold: f64,
    pub nms_radius: f64,
}

/// Threshold, then greedy NMS with one keypoint per cell and the border
/// removed, all in a single descending-score pass.
pub fn extract_from_heatmap(heat: &Heatmap, cfg: &ExtractConfig) -> KeypointSet {
    let excluded = heat.map(|v| v < cfg.threshold);
    let mcfg = MaximizerConfig {
        max_keypoints: usize::MAX,
        nms_radius: cfg.nms_radius,
        cell: cfg.cell,
        border: cfg.border,
        edge_filter: false,
        score_floor: cfg.threshold,
    };
    let rep = RepeatabilityMap::all_valid(heat.clone());
    KeypointSet {
        keypoints: nms_select(&rep, &excluded, &mcfg),
        threshold: cfg.threshold,
        nms_radius: cfg.nms_radius,
    }
}

pub fn extract(params: &DetectorParams, image: &Image, cfg: &ExtractConfig) -> Result<KeypointSet> {
    Ok(extract_from_heatmap(&forward(image, params)?, cfg))
}

/// `count` distinct pixels with depth outside the border, uniformly drawn.
pub fn random_keypoints(view: &CameraView, count: usize, border: usize, seed: u64) -> Vec<Keypoint> {
    let (w, h) = (view.width(), view.height());
    let candidates: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| view.depth.get(x, y) > 0.0 && !in_border(x, y, w, h, border))
        .collect();
    let count = count.min(candidates.len());
    let mut picked: Vec<usize> = sample(&mut seeding::rng(seed, "eval-random", 0), candidates.len(), count).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| Keypoint {
            x: candidates[i].0,
            y: candidates[i].1,
            score: 0.0,
        })
        .collect()
}

/// When a reprojected point counts as visible in the other view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Visibility {
    /// Maximum gap between the reprojected depth and the depth map.
    pub occlusion_tol: f64,
    pub border: usize,
}

impl Visibility {
    pub fn for_extent(extent: f64, border: usize) -> Self {
        Self {
            occlusion_tol: 2.0 * extent,
            border,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RepeatOutcome {
    /// Symmetric mean of both directions; `None` when nothing is covisible.
    pub score: Option<f64>,
    /// Repeated keypoints as (keypoint in A, keypoint in B).
    pub pairs: Vec<(Keypoint, Keypoint)>,
}

struct Direction {
    visible: usize,
    repeated: usize,
    pairs: Vec<(Keypoint, Keypoint)>,
}

fn one_direction(a: &[Keypoint], b: &[Keypoint], va: &CameraView, vb: &CameraView, eps: f64, vis: &Visibility) -> Direction {
    let mut out = Direction {
        visible: 0,
        repeated: 0,
        pairs: Vec::new(),
    };
    let (w, h) = (vb.width(), vb.height());
    for kp in a {
        let Some(p) = va.surface_point(kp.x, kp.y) else { continue };
        let Some(proj) = project(&p, &vb.camera) else { continue };
        let Some((nx, ny)) = nearest_pixel(&proj.pixel, w, h) else { continue };
        if in_border(nx, ny, w, h, vis.border) {
            continue;
        }
        let d = vb.depth.get(nx, ny) as f64;
        if !(d > 0.0) || (d - proj.depth).abs() > vis.occlusion_tol {
            continue;
        }
        out.visible += 1;
        let nearest = b
            .iter()
            .map(|q| (q, (Vector2::new(q.x as f64, q.y as f64) - proj.pixel).norm()))
            .filter(|(_, dist)| *dist <= eps)
            .min_by(|x, y| x.1.total_cmp(&y.1));
        if let Some((q, _)) = nearest {
            out.repeated += 1;
            out.pairs.push((*kp, *q));
        }
    }
    out
}

/// Fraction of A's keypoints visible in B that land within `eps` pixels of
/// a B keypoint after reprojection through ground-truth depth, averaged with
/// the B→A direction.
pub fn repeatability_score(
    a: &[Keypoint],
    b: &[Keypoint],
    va: &CameraView,
    vb: &CameraView,
    eps: f64,
    vis: &Visibility,
) -> RepeatOutcome {
    let ab = one_direction(a, b, va, vb, eps, vis);
    let ba = one_direction(b, a, vb, va, eps, vis);
    let rates: Vec<f64> = [&ab, &ba]
        .iter()
        .filter(|d| d.visible > 0)
        .map(|d| d.repeated as f64 / d.visible as f64)
        .collect();
    let score = (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64);
    let mut pairs = ab.pairs;
    pairs.extend(ba.pairs.into_iter().map(|(q, p)| (p, q)));
    RepeatOutcome { score, pairs }
}

/// 3D distances between the ground-truth surface points of repeated
/// keypoint pairs.
pub fn pair_distances(pairs: &[(Keypoint, Keypoint)], va: &CameraView, vb: &CameraView) -> Vec<f64> {
    pairs
        .iter()
        .filter_map(|(p, q)| Some((va.surface_point(p.x, p.y)? - vb.surface_point(q.x, q.y)?).norm()))
        .collect()
}

/// Mean 3D distance over all repeated pairs of the listed view pairs.
pub fn localization_error_3d(
    keypoints: &[Vec<Keypoint>],
    views: &[CameraView],
    view_pairs: &[(usize, usize)],
    eps: f64,
    vis: &Visibility,
) -> Result<Option<f64>> {
    if views.len() < 2 || keypoints.len() != views.len() {
        return Err(Error::Precondition("need keypoints for at least two views".into()));
    }
    let mut all = Vec::new();
    for &(i, j) in view_pairs {
        let rep = repeatability_score(&keypoints[i], &keypoints[j], &views[i], &views[j], eps, vis);
        all.extend(pair_distances(&rep.pairs, &views[i], &views[j]));
    }
    Ok((!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64))
}

/// Mean-subtracted, L2-normalized square patch (clamped at the image edge);
/// `None` for constant patches.
pub fn patch_descriptor(image: &Image, kp: &Keypoint, patch: usize) -> Option<Vec<f64>> {
    let r = (patch / 2) as isize;
    let (w, h) = (image.width as isize, image.height as isize);
    let mut v: Vec<f64> = Vec::with_capacity(patch * patch);
    for dy in -r..=r {
        for dx in -r..=r {
            let x = (kp.x as isize + dx).clamp(0, w - 1) as usize;
            let y = (kp.y as isize + dy).clamp(0, h - 1) as usize;
            v.push(image.get(x, y) as f64);
        }
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

pub fn descriptor_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

fn nearest(d: &[f64], others: &[Option<Vec<f64>>]) -> Option<(usize, f64)> {
    others
        .iter()
        .enumerate()
        .filter_map(|(j, o)| o.as_ref().map(|o| (j, descriptor_distance(d, o))))
        .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
}

/// Mutual nearest neighbours; entries without a descriptor never match.
pub fn mutual_nn(da: &[Option<Vec<f64>>], db: &[Option<Vec<f64>>]) -> Vec<Match> {
    let back: Vec<Option<usize>> = db
        .iter()
        .map(|d| d.as_ref().and_then(|d| nearest(d, da)).map(|(i, _)| i))
        .collect();
    da.iter()
        .enumerate()
        .filter_map(|(i, d)| {
            let (j, distance) = nearest(d.as_ref()?, db)?;
            (back[j] == Some(i)).then_some(Match { a: i, b: j, distance })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub matches: Vec<Match>,
    /// Accuracy at thresholds `1..=len` pixels.
    pub accuracy: Vec<f64>,
}

/// Match two keypoint sets by descriptor and score the matches against the
/// ground-truth homography from A to B.
pub fn match_pair(
    image_a: &Image,
    kps_a: &[Keypoint],
    image_b: &Image,
    kps_b: &[Keypoint],
    h: &Matrix3<f64>,
    thresholds: usize,
) -> MatchResult {
    let da: Vec<_> = kps_a.iter().map(|k| patch_descriptor(image_a, k, PATCH)).collect();
    let db: Vec<_> = kps_b.iter().map(|k| patch_descriptor(image_b, k, PATCH)).collect();
    let matches = mutual_nn(&da, &db);
    let errors: Vec<f64> = matches
        .iter()
        .map(|m| {
            let pa = Vector2::new(kps_a[m.a].x as f64, kps_a[m.a].y as f64);
            let pb = Vector2::new(kps_b[m.b].x as f64, kps_b[m.b].y as f64);
            warp_homography(&pa, h).map_or(f64::INFINITY, |q| (q - pb).norm())
        })
        .collect();
    let accuracy = (1..=thresholds)
        .map(|t| {
            if errors.is_empty() {
                0.0
            } else {
                errors.iter().filter(|&&e| e <= t as f64).count() as f64 / errors.len() as f64
            }
        })
        .collect();
    MatchResult { matches, accuracy }
}

/// One image pair for MMA with its keypoints.
pub struct MmaPair<'a> {
    pub image_a: &'a Image,
    pub keypoints_a: &'a [Keypoint],
    pub image_b: &'a Image,
    pub keypoints_b: &'a [Keypoint],
    pub homography: Matrix3<f64>,
}

/// Per-threshold accuracy averaged over pairs (each pair weighs the same;
/// a pair without matches counts as zero).
pub fn mma(pairs: &[MmaPair], thresholds: usize) -> Vec<f64> {
    if pairs.is_empty() {
        return vec![0.0; thresholds];
    }
    let per_pair: Vec<MatchResult> = pairs
        .par_iter()
        .map(|p| match_pair(p.image_a, p.keypoints_a, p.image_b, p.keypoints_b, &p.homography, thresholds))
        .collect();
    let mut mean = vec![0.0; thresholds];
    for (i, r) in per_pair.iter().enumerate() {
        if r.matches.is_empty() {
            warn!("event=mma_no_matches pair={i}");
        }
        mean.iter_mut().zip(&r.accuracy).for_each(|(m, a)| *m += a);
    }
    mean.iter_mut().for_each(|m| *m /= pairs.len() as f64);
    mean
}

/// Camera turned by `angle` about its optical axis, and the homography
/// taking the original view's pixels to the turned view's.
pub fn roll_camera(camera: &Camera, angle: f64) -> Result<(Camera, Matrix3<f64>)> {
    let (c, s) = (angle.cos(), angle.sin());
    let rz = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    let pose = Pose::new_loaded(rz * camera.pose.rotation, rz * camera.pose.translation)?;
    let k = &camera.intrinsics;
    let km = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
    let kinv = km.try_inverse().expect("valid intrinsics are invertible");
    Ok((
        Camera {
            intrinsics: camera.intrinsics,
            pose,
        },
        km * rz * kinv,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub extract: ExtractConfig,
    /// Pixel tolerance of the repeatability and localization scores.
    pub eps_px: f64,
    /// View `i` is paired with views `i+1 ..= i+pair_span`.
    pub pair_span: usize,
    pub thresholds: usize,
    pub extent: f64,
    pub rotation_deg: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            extract: ExtractConfig::default(),
            eps_px: 3.0,
            pair_span: 2,
            thresholds: 10,
            extent: GridSpec::DEFAULT_EXTENT,
            rotation_deg: 10.0,
            seed: 0,
        }
    }
}

/// One evaluation scene: its views and, when available, the generating
/// scene for re-rendering.
pub struct SceneData {
    pub name: String,
    pub views: Vec<CameraView>,
    pub record: Option<SceneRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Detector,
    Random,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Detector, Method::Random];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatRow {
    pub scene: String,
    pub view_a: usize,
    pub view_b: usize,
    pub method: Method,
    pub keypoints_a: usize,
    pub keypoints_b: usize,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmaRow {
    pub scene: String,
    pub kind: String,
    pub view: usize,
    pub method: Method,
    pub matches: usize,
    pub accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loc3dRow {
    pub scene: String,
    pub method: Method,
    pub pairs: usize,
    pub mean_error_m: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalResults {
    pub repeatability: Vec<RepeatRow>,
    pub mma: Vec<MmaRow>,
    pub loc3d: Vec<Loc3dRow>,
    /// Named detector heatmaps for dumping.
    pub heatmaps: Vec<(String, Heatmap)>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalResults {
    /// Mean over view pairs with covisible keypoints.
    pub fn mean_repeatability(&self, method: Method) -> Option<f64> {
        mean(self.repeatability.iter().filter(|r| r.method == method).filter_map(|r| r.score))
    }

    /// Per-threshold MMA over all pairs of `kind`.
    pub fn mean_mma(&self, kind: &str, method: Method) -> Option<Vec<f64>> {
        let rows: Vec<&MmaRow> = self.mma.iter().filter(|r| r.kind == kind && r.method == method).collect();
        let first = rows.first()?;
        let mut out = vec![0.0; first.accuracy.len()];
        for r in &rows {
            out.iter_mut().zip(&r.accuracy).for_each(|(o, a)| *o += a);
        }
        out.iter_mut().for_each(|o| *o /= rows.len() as f64);
        Some(out)
    }

    pub fn mean_loc3d(&self, method: Method) -> Option<f64> {
        mean(self.loc3d.iter().filter(|r| r.method == method).filter_map(|r| r.mean_error_m))
    }
}

pub fn view_pairs(n: usize, span: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..=(i + span).min(n.saturating_sub(1))).map(move |j| (i, j)))
        .collect()
}

/// Detector and matched-count random keypoints for every view.
fn keypoints_for(
    views: &[CameraView],
    params: &DetectorParams,
    cfg: &EvalConfig,
    salt: u64,
) -> Result<(Vec<Heatmap>, [Vec<Vec<Keypoint>>; 2])> {
    let heatmaps: Vec<Heatmap> = views
        .par_iter()
        .map(|v| forward(&v.image, params))
        .collect::<Result<_>>()?;
    let det: Vec<Vec<Keypoint>> = heatmaps
        .iter()
        .map(|h| extract_from_heatmap(h, &cfg.extract).keypoints)
        .collect();
    let rnd: Vec<Vec<Keypoint>> = views
        .iter()
        .zip(&det)
        .enumerate()
        .map(|(i, (v, d))| {
            let seed = seeding::derive(cfg.seed, "eval-view", (salt << 24) | i as u64);
            random_keypoints(v, d.len(), cfg.extract.border, seed)
        })
        .collect();
    Ok((heatmaps, [det, rnd]))
}

/// Repeatability and 3D localization only; cheap enough to run every EM
/// iteration.
pub fn evaluate_repeatability(scenes: &[SceneData], params: &DetectorParams, cfg: &EvalConfig) -> Result<EvalResults> {
    let mut results = EvalResults::default();
    let vis = Visibility::for_extent(cfg.extent, cfg.extract.border);
    for (si, scene) in scenes.iter().enumerate() {
        let (heatmaps, kps) = keypoints_for(&scene.views, params, cfg, si as u64)?;
        let pairs = view_pairs(scene.views.len(), cfg.pair_span);
        for (method, kp) in Method::ALL.iter().zip(&kps) {
            let outcomes: Vec<RepeatOutcome> = pairs
                .par_iter()
                .map(|&(i, j)| repeatability_score(&kp[i], &kp[j], &scene.views[i], &scene.views[j], cfg.eps_px, &vis))
                .collect();
            let mut dists = Vec::new();
            for (&(i, j), out) in pairs.iter().zip(&outcomes) {
                dists.extend(pair_distances(&out.pairs, &scene.views[i], &scene.views[j]));
                results.repeatability.push(RepeatRow {
                    scene: scene.name.clone(),
                    view_a: i,
                    view_b: j,
                    method: *method,
                    keypoints_a: kp[i].len(),
                    keypoints_b: kp[j].len(),
                    score: out.score,
                });
            }
            results.loc3d.push(Loc3dRow {
                scene: scene.name.clone(),
                method: *method,
                pairs: dists.len(),
                mean_error_m: mean(dists.into_iter()),
            });
        }
        for (i, h) in heatmaps.into_iter().enumerate() {
            results.heatmaps.push((format!("{}_{i:05}", scene.name), h));
        }
    }
    Ok(results)
}

/// Full benchmark: repeatability, 3D localization, and MMA on
/// same-pose/other-lighting pairs and on camera-roll pairs. The MMA parts
/// need the scene record and are skipped without one.
pub fn evaluate(scenes: &[SceneData], params: &DetectorParams, cfg: &EvalConfig) -> Result<EvalResults> {
    let mut results = evaluate_repeatability(scenes, params, cfg)?;
    for (si, scene) in scenes.iter().enumerate() {
        let Some(record) = &scene.record else {
            warn!("event=mma_skipped scene={} reason=no_scene_record", scene.name);
            continue;
        };
        if record.lighting.len() != scene.views.len() {
            return Err(Error::DimensionMismatch(format!(
                "scene {}: {} lighting entries for {} views",
                scene.name,
                record.lighting.len(),
                scene.views.len()
            )));
        }
        let n_light = record.scene.lightings.len();
        let angle = cfg.rotation_deg.to_radians();
        // Partner views: relit and rolled re-renders of every view.
        let partners: Vec<(CameraView, CameraView, Matrix3<f64>)> = scene
            .views
            .par_iter()
            .zip(record.lighting.par_iter())
            .map(|(v, &l)| {
                let mut relit = render(&record.scene, &v.camera, (l + 1) % n_light);
                relit.image = quantize8(&relit.image);
                let (cam, h) = roll_camera(&v.camera, angle)?;
                let mut rolled = render(&record.scene, &cam, l);
                rolled.image = quantize8(&rolled.image);
                Ok((relit, rolled, h))
            })
            .collect::<Result<_>>()?;
        let base = keypoints_for(&scene.views, params, cfg, si as u64)?.1;
        let relit: Vec<CameraView> = partners.iter().map(|p| p.0.clone()).collect();
        let rolled: Vec<CameraView> = partners.iter().map(|p| p.1.clone()).collect();
        let relit_kp = keypoints_for(&relit, params, cfg, (1 << 16) | si as u64)?.1;
        let rolled_kp = keypoints_for(&rolled, params, cfg, (2 << 16) | si as u64)?.1;
        for (kind, other, other_kp) in [("illumination", &relit, &relit_kp), ("rotation", &rolled, &rolled_kp)] {
            for m in 0..2 {
                let rows: Vec<MmaRow> = (0..scene.views.len())
                    .into_par_iter()
                    .map(|i| {
                        let h = if kind == "illumination" { Matrix3::identity() } else { partners[i].2 };
                        let r = match_pair(
                            &scene.views[i].image,
                            &base[m][i],
                            &other[i].image,
                            &other_kp[m][i],
                            &h,
                            cfg.thresholds,
                        );
                        MmaRow {
                            scene: scene.name.clone(),
                            kind: kind.to_string(),
                            view: i,
                            method: Method::ALL[m],
                            matches: r.matches.len(),
                            accuracy: r.accuracy,
                        }
                    })
                    .collect();
                results.mma.extend(rows);
            }
        }
    }
    for method in Method::ALL {
        info!(
            "event=eval method={method:?} repeatability={:?} loc3d_m={:?} mma_illum_1px={:?}",
            results.mean_repeatability(method),
            results.mean_loc3d(method),
            results.mean_mma("illumination", method).map(|v| v[0])
        );
    }
    Ok(results)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::malformed(path, e.to_string())
}

/// Write `repeatability.csv`, `mma.csv`, `loc3d.csv` and the heatmap dumps
/// under `heatmaps/` (each scaled by its own maximum).
pub fn report(results: &EvalResults, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let path = out_dir.join("repeatability.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["scene", "view_a", "view_b", "method", "keypoints_a", "keypoints_b", "score"])
        .map_err(csv_err(&path))?;
    for r in &results.repeatability {
        w.write_record([
            r.scene.clone(),
            r.view_a.to_string(),
            r.view_b.to_string(),
            method_name(r.method).into(),
            r.keypoints_a.to_string(),
            r.keypoints_b.to_string(),
            opt(r.score),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join("mma.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["scene", "kind", "view", "method", "matches", "threshold_px", "pair_accuracy"])
        .map_err(csv_err(&path))?;
    for r in &results.mma {
        for (t, a) in r.accuracy.iter().enumerate() {
            w.write_record([
                r.scene.clone(),
                r.kind.clone(),
                r.view.to_string(),
                method_name(r.method).into(),
                r.matches.to_string(),
                (t + 1).to_string(),
                a.to_string(),
            ])
            .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join("loc3d.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["scene", "method", "pairs", "mean_error_m"]).map_err(csv_err(&path))?;
    for r in &results.loc3d {
        w.write_record([
            r.scene.clone(),
            method_name(r.method).into(),
            r.pairs.to_string(),
            opt(r.mean_error_m),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    if !results.heatmaps.is_empty() {
        let dir = out_dir.join("heatmaps");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, h) in &results.heatmaps {
            write_pgm(&dir.join(format!("{name}.pgm")), &heatmap_image(h))?;
        }
    }
    Ok(())
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Detector => "detector",
        Method::Random => "random",
    }
}

/// Heatmap scaled to its maximum for viewing.
pub fn heatmap_image(h: &Heatmap) -> Image {
    let max = h.data.iter().cloned().fold(0.0, f64::max);
    let s = if max > 0.0 { 1.0 / max } else { 0.0 };
    Plane::from_fn(h.width, h.height, |x, y| (h.get(x, y) * s) as f32)
}

/// Read back `repeatability.csv` rows.
pub fn read_repeatability_csv(path: &Path) -> Result<Vec<RepeatRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}
