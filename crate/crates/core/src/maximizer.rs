//! Pseudo-label construction: pick the keypoint set that maximizes expected
//! repeatability under a keypoint budget, a suppression radius, one keypoint
//! per cell, an image border and (optionally) edge filtering.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{write_pgm_bytes, Plane};
use crate::voxelrep::RepeatabilityMap;

pub const HARRIS_SIGMA: f64 = 1.5;
pub const HARRIS_K: f64 = 0.06;
/// Responses smaller than this in magnitude count as flat, not edge.
pub const HARRIS_FLAT: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaximizerConfig {
    /// Keypoint budget per image.
    pub max_keypoints: usize,
    pub nms_radius: f64,
    pub cell: usize,
    pub border: usize,
    pub edge_filter: bool,
    pub score_floor: f64,
}

impl Default for MaximizerConfig {
    fn default() -> Self {
        Self {
            max_keypoints: 107,
            nms_radius: 6.0,
            cell: 8,
            border: 4,
            edge_filter: true,
            score_floor: 0.0,
        }
    }
}

impl MaximizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_keypoints < 1 || !(self.nms_radius >= 1.0) || self.cell < 1 {
            return Err(Error::Config(format!("invalid maximizer config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// Binary training target plus the set of pixels that enter the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMask {
    /// `true` at keypoints (the `y_ij = 1` pixels).
    pub labels: Plane<bool>,
    /// `false` where the loss must ignore the pixel (no repeatability data,
    /// image border).
    pub valid: Plane<bool>,
    pub keypoints: Vec<Keypoint>,
}

impl PseudoLabelMask {
    pub fn count(&self) -> usize {
        self.labels.data.iter().filter(|&&b| b).count()
    }

    /// `255` at keypoints, `0` elsewhere.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.labels.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        write_pgm_bytes(path, self.labels.width, self.labels.height, &bytes)
    }
}

#[inline]
pub fn in_border(x: usize, y: usize, width: usize, height: usize, border: usize) -> bool {
    x < border || y < border || x + border >= width || y + border >= height
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution with clamp-to-edge borders.
fn blur(src: &Plane<f64>, kernel: &[f64]) -> Plane<f64> {
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (src.width as isize, src.height as isize);
    let tmp = Plane::from_fn(src.width, src.height, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * src.get((x as isize + i as isize - r).clamp(0, w - 1) as usize, y))
            .sum::<f64>()
    });
    Plane::from_fn(src.width, src.height, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * tmp.get(x, (y as isize + i as isize - r).clamp(0, h - 1) as usize))
            .sum::<f64>()
    })
}

/// Harris response `det(M) − k·tr(M)²` of the structure tensor of the
/// repeatability surface (masked pixels read as 0).
pub fn harris_response(rep: &RepeatabilityMap) -> Plane<f64> {
    let (w, h) = (rep.width(), rep.height());
    let val = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        rep.value(xc, yc).unwrap_or(0.0)
    };
    let mut ixx = Plane::filled(w, h, 0.0);
    let mut iyy = Plane::filled(w, h, 0.0);
    let mut ixy = Plane::filled(w, h, 0.0);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = 0.5 * (val(x + 1, y) - val(x - 1, y));
            let gy = 0.5 * (val(x, y + 1) - val(x, y - 1));
            let (ux, uy) = (x as usize, y as usize);
            ixx.set(ux, uy, gx * gx);
            iyy.set(ux, uy, gy * gy);
            ixy.set(ux, uy, gx * gy);
        }
    }
    let kernel = gaussian_kernel(HARRIS_SIGMA);
    let (sxx, syy, sxy) = (blur(&ixx, &kernel), blur(&iyy, &kernel), blur(&ixy, &kernel));
    Plane::from_fn(w, h, |x, y| {
        let (a, b, c) = (sxx.get(x, y), syy.get(x, y), sxy.get(x, y));
        a * b - c * c - HARRIS_K * (a + b) * (a + b)
    })
}

/// `true` where the repeatability surface is edge-like (negative Harris
/// response) or masked.
pub fn edge_mask(rep: &RepeatabilityMap) -> Plane<bool> {
    let r = harris_response(rep);
    Plane::from_fn(rep.width(), rep.height(), |x, y| {
        let v = r.get(x, y);
        !rep.mask.get(x, y) || (v < 0.0 && v.abs() > HARRIS_FLAT)
    })
}

/// Greedy constrained selection in descending score order; ties go to the
/// earlier pixel in row-major order.
pub fn nms_select(rep: &RepeatabilityMap, excluded: &Plane<bool>, cfg: &MaximizerConfig) -> Vec<Keypoint> {
    assert!(rep.mask.same_shape(excluded), "exclusion map shape mismatch");
    let (w, h) = (rep.width(), rep.height());
    let mut candidates: Vec<Keypoint> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if excluded.get(x, y) || in_border(x, y, w, h, cfg.border) {
                continue;
            }
            if let Some(score) = rep.value(x, y) {
                if score >= cfg.score_floor {
                    candidates.push(Keypoint { x, y, score });
                }
            }
        }
    }
    // stable sort keeps row-major order among equal scores
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));

    let cell = cfg.cell;
    let (cw, ch) = (w.div_ceil(cell), h.div_ceil(cell));
    let mut occupant: Vec<Option<(usize, usize)>> = vec![None; cw * ch];
    let reach = (cfg.nms_radius / cell as f64).ceil() as isize;
    let r2 = cfg.nms_radius * cfg.nms_radius;
    let mut accepted = Vec::new();
    for kp in candidates {
        if accepted.len() >= cfg.max_keypoints {
            break;
        }
        let (cx, cy) = ((kp.x / cell) as isize, (kp.y / cell) as isize);
        if occupant[cy as usize * cw + cx as usize].is_some() {
            continue;
        }
        let mut clear = true;
        'scan: for ny in (cy - reach).max(0)..=(cy + reach).min(ch as isize - 1) {
            for nx in (cx - reach).max(0)..=(cx + reach).min(cw as isize - 1) {
                if let Some((ox, oy)) = occupant[ny as usize * cw + nx as usize] {
                    let dx = ox as f64 - kp.x as f64;
                    let dy = oy as f64 - kp.y as f64;
                    if dx * dx + dy * dy <= r2 {
                        clear = false;
                        break 'scan;
                    }
                }
            }
        }
        if clear {
            occupant[cy as usize * cw + cx as usize] = Some((kp.x, kp.y));
            accepted.push(kp);
        }
    }
    accepted
}

pub fn build_pseudo_gt(rep: &RepeatabilityMap, cfg: &MaximizerConfig) -> PseudoLabelMask {
    let (w, h) = (rep.width(), rep.height());
    let excluded = if cfg.edge_filter {
        edge_mask(rep)
    } else {
        rep.mask.map(|m| !m)
    };
    let keypoints = nms_select(rep, &excluded, cfg);
    let mut labels = Plane::filled(w, h, false);
    for kp in &keypoints {
        labels.set(kp.x, kp.y, true);
    }
    let valid = Plane::from_fn(w, h, |x, y| {
        rep.mask.get(x, y) && !in_border(x, y, w, h, cfg.border)
    });
    PseudoLabelMask {
        labels,
        valid,
        keypoints,
    }
}

/// `schedule[min(iteration / period, len − 1)]`.
pub fn anneal_keypoints(iteration: usize, schedule: &[usize], period: usize) -> usize {
    assert!(!schedule.is_empty() && period >= 1, "empty schedule or zero period");
    schedule[(iteration / period).min(schedule.len() - 1)]
}

/// Scale a keypoint schedule by an image-area ratio, rounding to nearest.
pub fn scale_schedule(schedule: &[usize], from_area: usize, to_area: usize) -> Vec<usize> {
    schedule
        .iter()
        .map(|&l| ((l as f64 * to_area as f64 / from_area as f64).round() as usize).max(1))
        .collect()
}

/// Checks every mask invariant; returns the first violation.
pub fn check_mask_invariants(
    mask: &PseudoLabelMask,
    rep: &RepeatabilityMap,
    cfg: &MaximizerConfig,
) -> std::result::Result<(), String> {
    let (w, h) = (mask.labels.width, mask.labels.height);
    let pts: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.labels.get(x, y))
        .collect();
    if pts.len() > cfg.max_keypoints {
        return Err(format!("{} keypoints exceed budget {}", pts.len(), cfg.max_keypoints));
    }
    for (i, &(x, y)) in pts.iter().enumerate() {
        if in_border(x, y, w, h, cfg.border) {
            return Err(format!("({x},{y}) inside border"));
        }
        if !rep.mask.get(x, y) {
            return Err(format!("({x},{y}) on masked pixel"));
        }
        for &(ox, oy) in &pts[i + 1..] {
            let d2 = (ox as f64 - x as f64).powi(2) + (oy as f64 - y as f64).powi(2);
            if d2 <= cfg.nms_radius * cfg.nms_radius {
                return Err(format!("({x},{y}) and ({ox},{oy}) closer than radius"));
            }
            if ox / cfg.cell == x / cfg.cell && oy / cfg.cell == y / cfg.cell {
                return Err(format!("({x},{y}) and ({ox},{oy}) share a cell"));
            }
        }
    }
    Ok(())
}

pub fn write_mask_pgm(path: &Path, mask: &PseudoLabelMask) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    mask.write_pgm(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rescans the whole map each round for the best admissible pixel.
    fn rescan_oracle(rep: &RepeatabilityMap, excluded: &Plane<bool>, cfg: &MaximizerConfig) -> Vec<(usize, usize)> {
        let (w, h) = (rep.width(), rep.height());
        let mut chosen: Vec<(usize, usize)> = Vec::new();
        while chosen.len() < cfg.max_keypoints {
            let mut best: Option<(f64, usize, usize)> = None;
            for y in 0..h {
                for x in 0..w {
                    if !rep.mask.get(x, y) || excluded.get(x, y) {
                        continue;
                    }
                    if x < cfg.border || y < cfg.border || x >= w - cfg.border || y >= h - cfg.border {
                        continue;
                    }
                    let s = rep.values.get(x, y);
                    if s < cfg.score_floor || chosen.contains(&(x, y)) {
                        continue;
                    }
                    let ok = chosen.iter().all(|&(cx, cy)| {
                        let dx = cx as f64 - x as f64;
                        let dy = cy as f64 - y as f64;
                        dx * dx + dy * dy > cfg.nms_radius * cfg.nms_radius
                            && (cx / cfg.cell, cy / cfg.cell) != (x / cfg.cell, y / cfg.cell)
                    });
                    if ok && best.is_none_or(|(bs, _, _)| s > bs) {
                        best = Some((s, x, y));
                    }
                }
            }
            match best {
                Some((_, x, y)) => chosen.push((x, y)),
                None => break,
            }
        }
        chosen
    }

    fn random_map(seed: u64, size: usize, quantized: bool) -> RepeatabilityMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Plane::from_fn(size, size, |_, _| {
            let v: f64 = rng.gen();
            if quantized {
                (v * 8.0).floor() / 8.0
            } else {
                v
            }
        });
        let mask = Plane::from_fn(size, size, |_, _| rng.gen_bool(0.9));
        RepeatabilityMap { values, mask }
    }

    fn pair_map(dist: usize) -> RepeatabilityMap {
        let mut v = Plane::filled(32, 32, 0.0);
        v.set(10, 12, 0.9);
        v.set(10 + dist, 12, 0.8);
        let mask = v.map(|s| s > 0.0);
        RepeatabilityMap { values: v, mask }
    }

    #[test]
    fn radius_examples() {
        let cfg = MaximizerConfig::default();
        let rep = pair_map(2);
        let none = Plane::filled(32, 32, false);
        let kps = nms_select(&rep, &none, &cfg);
        assert_eq!(kps.len(), 1);
        assert_eq!((kps[0].x, kps[0].y), (10, 12));
        let kps = nms_select(&pair_map(10), &none, &cfg);
        assert_eq!(kps.len(), 2);
    }

    #[test]
    fn greedy_matches_rescan_oracle() {
        for seed in 0..20 {
            let rep = random_map(seed, 64, seed % 2 == 0);
            let excluded = rep.mask.map(|m| !m);
            let cfg = MaximizerConfig {
                max_keypoints: 20,
                ..Default::default()
            };
            let fast: Vec<_> = nms_select(&rep, &excluded, &cfg).iter().map(|k| (k.x, k.y)).collect();
            assert_eq!(fast, rescan_oracle(&rep, &excluded, &cfg), "seed {seed}");
        }
    }

    #[test]
    fn isolated_peak_is_not_edge() {
        let mut v = Plane::filled(21, 21, 0.0);
        v.set(10, 10, 1.0);
        let rep = RepeatabilityMap::all_valid(v);
        assert!(harris_response(&rep).get(10, 10) > 0.0);
        assert!(!edge_mask(&rep).get(10, 10));
    }

    #[test]
    fn ridge_interior_is_edge() {
        let v = Plane::from_fn(31, 31, |_, y| if y == 15 { 1.0 } else { 0.0 });
        let rep = RepeatabilityMap::all_valid(v);
        let r = harris_response(&rep);
        let em = edge_mask(&rep);
        for x in 5..26 {
            // gx vanishes along the ridge, so M = diag(0, b) and R = −k·b²
            assert!(r.get(x, 15) < 0.0);
            assert!(em.get(x, 15), "({x},15)");
        }
    }

    #[test]
    fn constant_map_has_no_edges_but_mask_counts() {
        let rep = RepeatabilityMap::all_valid(Plane::filled(16, 16, 0.4));
        assert!(edge_mask(&rep).data.iter().all(|&e| !e));
        let mut masked = rep.clone();
        masked.mask.set(3, 3, false);
        assert!(edge_mask(&masked).get(3, 3));
    }

    #[test]
    fn pseudo_gt_examples() {
        let cfg = MaximizerConfig::default();
        let empty = RepeatabilityMap {
            values: Plane::filled(32, 32, 0.7),
            mask: Plane::filled(32, 32, false),
        };
        assert_eq!(build_pseudo_gt(&empty, &cfg).count(), 0);

        let rep = random_map(3, 64, false);
        let top1 = MaximizerConfig {
            max_keypoints: 1,
            edge_filter: false,
            ..cfg.clone()
        };
        let m = build_pseudo_gt(&rep, &top1);
        let mut best = (0, 0);
        let mut best_score = f64::NEG_INFINITY;
        for y in 0..64 {
            for x in 0..64 {
                if rep.mask.get(x, y) && !in_border(x, y, 64, 64, 4) && rep.values.get(x, y) > best_score {
                    best_score = rep.values.get(x, y);
                    best = (x, y);
                }
            }
        }
        assert_eq!(m.keypoints.len(), 1);
        assert_eq!((m.keypoints[0].x, m.keypoints[0].y), best);
    }

    #[test]
    fn annealing_schedule() {
        let s = [2000, 1700, 1200];
        assert_eq!(anneal_keypoints(0, &s, 3), 2000);
        assert_eq!(anneal_keypoints(2, &s, 3), 2000);
        assert_eq!(anneal_keypoints(3, &s, 3), 1700);
        assert_eq!(anneal_keypoints(8, &s, 3), 1200);
        assert_eq!(anneal_keypoints(100, &s, 3), 1200);
        assert_eq!(scale_schedule(&s, 480 * 640, 128 * 128), vec![107, 91, 64]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn selection_depends_only_on_ranking(seed in 0u64..10_000) {
            let rep = random_map(seed, 40, false);
            let squared = RepeatabilityMap {
                values: rep.values.map(|v| v * v),
                mask: rep.mask.clone(),
            };
            let none = rep.mask.map(|m| !m);
            let cfg = MaximizerConfig { max_keypoints: 15, ..Default::default() };
            let a: Vec<_> = nms_select(&rep, &none, &cfg).iter().map(|k| (k.x, k.y)).collect();
            let b: Vec<_> = nms_select(&squared, &none, &cfg).iter().map(|k| (k.x, k.y)).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn selection_is_maximal_and_masks_are_valid(seed in 0u64..10_000, budget in 1usize..40) {
            let rep = random_map(seed, 48, seed % 3 == 0);
            let cfg = MaximizerConfig { max_keypoints: budget, ..Default::default() };
            let mask = build_pseudo_gt(&rep, &cfg);
            prop_assert!(check_mask_invariants(&mask, &rep, &cfg).is_ok());
            let again = build_pseudo_gt(&rep, &cfg);
            prop_assert_eq!(&again, &mask);
            if mask.keypoints.len() < budget {
                // nothing admissible was left behind
                let excluded = edge_mask(&rep);
                for y in 0..48 {
                    for x in 0..48 {
                        if excluded.get(x, y) || in_border(x, y, 48, 48, 4) || mask.labels.get(x, y) {
                            continue;
                        }
                        let blocked = mask.keypoints.iter().any(|k| {
                            let d2 = (k.x as f64 - x as f64).powi(2) + (k.y as f64 - y as f64).powi(2);
                            d2 <= 36.0 || (k.x / 8, k.y / 8) == (x / 8, y / 8)
                        });
                        prop_assert!(blocked, "({}, {}) admissible but skipped", x, y);
                    }
                }
            } else {
                let lowest = mask.keypoints.last().unwrap().score;
                let excluded = edge_mask(&rep);
                for y in 0..48 {
                    for x in 0..48 {
                        let Some(s) = rep.value(x, y) else { continue };
                        if s <= lowest || excluded.get(x, y) || in_border(x, y, 48, 48, 4) || mask.labels.get(x, y) {
                            continue;
                        }
                        let blocked = mask.keypoints.iter().any(|k| {
                            let d2 = (k.x as f64 - x as f64).powi(2) + (k.y as f64 - y as f64).powi(2);
                            d2 <= 36.0 || (k.x / 8, k.y / 8) == (x / 8, y / 8)
                        });
                        prop_assert!(blocked);
                    }
                }
            }
        }
    }
}
