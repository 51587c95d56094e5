//! Training-time augmentation: Gaussian blur, additive Gaussian noise,
//! brightness/contrast, and a random affine + perspective warp applied to
//! the image and its labels alike.

use nalgebra::{Matrix3, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camgeom::{nearest_pixel, warp_homography};
use crate::maximizer::{in_border, Keypoint, PseudoLabelMask};
use crate::raster::{Image, Plane};
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub noise_prob: f64,
    pub noise_std: (f64, f64),
    /// Maximum absolute brightness shift.
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub warp_prob: f64,
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    pub translate_px: f64,
    /// Maximum magnitude of the projective row entries (per pixel).
    pub perspective: f64,
    pub border: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            blur_prob: 0.25,
            blur_sigma: (0.3, 1.0),
            noise_prob: 0.5,
            noise_std: (0.0, 0.02),
            brightness: 0.1,
            contrast: (0.8, 1.2),
            warp_prob: 0.5,
            rotation_deg: 10.0,
            scale: (0.9, 1.1),
            translate_px: 4.0,
            perspective: 2e-4,
            border: 4,
        }
    }
}

impl AugmentConfig {
    /// Every operation disabled.
    pub fn identity() -> Self {
        Self {
            blur_prob: 0.0,
            noise_prob: 0.0,
            brightness: 0.0,
            contrast: (1.0, 1.0),
            warp_prob: 0.0,
            ..Default::default()
        }
    }
}

/// A concrete draw of augmentation operations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentOps {
    /// Maps input pixel coordinates to output pixel coordinates.
    pub homography: Option<Matrix3<f64>>,
    pub brightness: f64,
    pub contrast: f64,
    pub blur_sigma: Option<f64>,
    pub noise: Option<(f64, u64)>,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

impl AugmentOps {
    pub fn sample(cfg: &AugmentConfig, width: usize, height: usize, seed: u64) -> Self {
        let mut rng = seeding::rng(seed, "augment", 0);
        let homography = (cfg.warp_prob > 0.0 && rng.gen_bool(cfg.warp_prob.min(1.0))).then(|| {
            let angle = uniform(&mut rng, (-cfg.rotation_deg, cfg.rotation_deg)).to_radians();
            let s = uniform(&mut rng, cfg.scale);
            let tx = uniform(&mut rng, (-cfg.translate_px, cfg.translate_px));
            let ty = uniform(&mut rng, (-cfg.translate_px, cfg.translate_px));
            let px = uniform(&mut rng, (-cfg.perspective, cfg.perspective));
            let py = uniform(&mut rng, (-cfg.perspective, cfg.perspective));
            let (cx, cy) = (0.5 * (width as f64 - 1.0), 0.5 * (height as f64 - 1.0));
            let to_center = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
            let (c, sn) = (angle.cos() * s, angle.sin() * s);
            let similarity = Matrix3::new(c, -sn, 0.0, sn, c, 0.0, 0.0, 0.0, 1.0);
            let projective = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0);
            let back = Matrix3::new(1.0, 0.0, cx + tx, 0.0, 1.0, cy + ty, 0.0, 0.0, 1.0);
            back * projective * similarity * to_center
        });
        let brightness = uniform(&mut rng, (-cfg.brightness, cfg.brightness));
        let contrast = uniform(&mut rng, cfg.contrast);
        let blur_sigma = (cfg.blur_prob > 0.0 && rng.gen_bool(cfg.blur_prob.min(1.0)))
            .then(|| uniform(&mut rng, cfg.blur_sigma));
        let noise = (cfg.noise_prob > 0.0 && rng.gen_bool(cfg.noise_prob.min(1.0)))
            .then(|| (uniform(&mut rng, cfg.noise_std), rng.gen()));
        Self {
            homography,
            brightness,
            contrast,
            blur_sigma,
            noise,
        }
    }
}

fn bilinear(img: &Image, x: f64, y: f64) -> Option<f32> {
    if x < 0.0 || y < 0.0 || x > (img.width - 1) as f64 || y > (img.height - 1) as f64 {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
    let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

fn warp(image: &Image, mask: &PseudoLabelMask, h: &Matrix3<f64>, border: usize) -> (Image, PseudoLabelMask) {
    let (w, ht) = (image.width, image.height);
    let Some(hinv) = h.try_inverse() else {
        return (image.clone(), mask.clone());
    };
    let mut out = Plane::filled(w, ht, 0.0f32);
    let mut valid = Plane::filled(w, ht, false);
    for y in 0..ht {
        for x in 0..w {
            let Ok(src) = warp_homography(&Vector2::new(x as f64, y as f64), &hinv) else {
                continue;
            };
            if let Some(v) = bilinear(image, src.x, src.y) {
                out.set(x, y, v);
            }
            if let Some((sx, sy)) = nearest_pixel(&src, w, ht) {
                valid.set(x, y, mask.valid.get(sx, sy) && !in_border(x, y, w, ht, border));
            }
        }
    }
    let mut labels = Plane::filled(w, ht, false);
    let mut keypoints = Vec::new();
    for kp in &mask.keypoints {
        let Ok(q) = warp_homography(&Vector2::new(kp.x as f64, kp.y as f64), h) else {
            continue;
        };
        if let Some((qx, qy)) = nearest_pixel(&q, w, ht) {
            if !in_border(qx, qy, w, ht, border) && !labels.get(qx, qy) {
                labels.set(qx, qy, true);
                valid.set(qx, qy, true);
                keypoints.push(Keypoint {
                    x: qx,
                    y: qy,
                    score: kp.score,
                });
            }
        }
    }
    (
        out,
        PseudoLabelMask {
            labels,
            valid,
            keypoints,
        },
    )
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (w, h) = (img.width as isize, img.height as isize);
    let tmp = Plane::from_fn(img.width, img.height, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * img.get((x as isize + i as isize - r).clamp(0, w - 1) as usize, y))
            .sum::<f32>()
    });
    Plane::from_fn(img.width, img.height, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * tmp.get(x, (y as isize + i as isize - r).clamp(0, h - 1) as usize))
            .sum::<f32>()
    })
}

/// Apply a concrete set of operations. Photometric steps touch only the
/// image; the warp moves image, labels and validity together.
pub fn apply(image: &Image, mask: &PseudoLabelMask, ops: &AugmentOps, border: usize) -> (Image, PseudoLabelMask) {
    let (mut img, mask) = match &ops.homography {
        Some(h) => warp(image, mask, h, border),
        None => (image.clone(), mask.clone()),
    };
    if ops.contrast != 1.0 || ops.brightness != 0.0 {
        let mean = img.data.iter().sum::<f32>() / img.data.len() as f32;
        let (c, b) = (ops.contrast as f32, ops.brightness as f32);
        img.data
            .iter_mut()
            .for_each(|v| *v = ((*v - mean) * c + mean + b).clamp(0.0, 1.0));
    }
    if let Some(sigma) = ops.blur_sigma {
        if sigma > 0.0 {
            img = gaussian_blur(&img, sigma);
        }
    }
    if let Some((std, seed)) = ops.noise {
        if std > 0.0 {
            let mut rng = seeding::rng(seed, "noise", 0);
            let normal = Normal::new(0.0, std).expect("finite std");
            img.data
                .iter_mut()
                .for_each(|v| *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0));
        }
    }
    (img, mask)
}

/// Draw operations from `cfg` with `seed` and apply them.
pub fn augment(image: &Image, mask: &PseudoLabelMask, seed: u64, cfg: &AugmentConfig) -> (Image, PseudoLabelMask) {
    let ops = AugmentOps::sample(cfg, image.width, image.height, seed);
    apply(image, mask, &ops, cfg.border)
}
