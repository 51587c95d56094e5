//! Minibatch optimization of the detector on (image, pseudo-label) pairs.

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::augment::{augment, AugmentConfig};
use super::loss::{loss, loss_and_grad};
use super::network::{forward_train, BatchPass, DetectorParams};
use crate::error::{Error, Result};
use crate::maximizer::PseudoLabelMask;
use crate::raster::{Heatmap, Image};
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// One forward/backward pass of a batch.
pub struct BatchGradient {
    pub pass: BatchPass,
    /// Per-sample losses.
    pub losses: Vec<f64>,
    /// Gradient of the batch-mean loss w.r.t. every weight.
    pub gradient: Vec<f64>,
}

/// Mean-over-batch loss gradient, with normalization in training mode.
pub fn batch_gradient(images: &[&Image], masks: &[&PseudoLabelMask], params: &DetectorParams) -> Result<BatchGradient> {
    if images.len() != masks.len() {
        return Err(Error::DimensionMismatch(format!("{} images, {} masks", images.len(), masks.len())));
    }
    let pass = forward_train(images, params)?;
    let scale = 1.0 / images.len() as f64;
    let mut grads: Vec<Heatmap> = Vec::with_capacity(images.len());
    let mut losses = Vec::with_capacity(images.len());
    for (heat, mask) in pass.heatmaps.iter().zip(masks) {
        let (l, mut g) = loss_and_grad(heat, mask)?;
        g.data.iter_mut().for_each(|v| *v *= scale);
        losses.push(l);
        grads.push(g);
    }
    let gradient = pass.backward(params, &grads);
    Ok(BatchGradient { pass, losses, gradient })
}

/// Batch-mean loss in training mode, the quantity `batch_gradient` differentiates.
pub fn batch_loss(images: &[&Image], masks: &[&PseudoLabelMask], params: &DetectorParams) -> Result<f64> {
    let pass = forward_train(images, params)?;
    let mut total = 0.0;
    for (heat, mask) in pass.heatmaps.iter().zip(masks) {
        total += loss(heat, mask)?;
    }
    Ok(total / images.len() as f64)
}

/// Train `params` in place. Each epoch reshuffles the samples, each sample
/// draw is augmented with its own sub-seed, and every batch contributes the
/// mean of its per-sample losses.
pub fn train(
    dataset: &[(Image, PseudoLabelMask)],
    params: &mut DetectorParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    cfg.validate()?;
    params.validate()?;
    if state.m.len() != params.weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "optimizer state has {} entries, parameters {}",
            state.m.len(),
            params.weights.len()
        )));
    }
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeding::rng(seed, "shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<(Image, PseudoLabelMask)> = batch
                .par_iter()
                .map(|&i| {
                    let (img, mask) = &dataset[i];
                    let sub = seeding::derive(seed, "augment", ((epoch as u64) << 32) | i as u64);
                    augment(img, mask, sub, &cfg.augment)
                })
                .collect();
            let images: Vec<&Image> = samples.iter().map(|s| &s.0).collect();
            let masks: Vec<&PseudoLabelMask> = samples.iter().map(|s| &s.1).collect();
            let step = batch_gradient(&images, &masks, params)?;
            if let Some(k) = step.losses.iter().position(|l| !l.is_finite()) {
                return Err(Error::NonFinite(format!("loss of sample {} in epoch {}", batch[k], epoch + 1)));
            }
            let batch_loss: f64 = step.losses.iter().sum();
            let (pass, wgrad) = (step.pass, step.gradient);
            let scale = 1.0 / batch.len() as f64;
            pass.update_running(params);
            adam_step(&mut params.weights, &wgrad, state, &cfg.adam)?;
            debug!("epoch={} batch_loss={}", epoch + 1, batch_loss * scale);
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / dataset.len() as f64;
        info!("epoch={} mean_loss={mean}", epoch + 1);
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maximizer::{in_border, Keypoint};
    use crate::raster::Plane;

    fn sample() -> (Image, PseudoLabelMask) {
        let size = 32;
        let img = Plane::from_fn(size, size, |x, y| {
            let v = ((x / 4 + y / 4) % 2) as f32;
            0.2 + 0.6 * v
        });
        let mut labels = Plane::filled(size, size, false);
        let mut keypoints = Vec::new();
        for &(x, y) in &[(8, 8), (16, 12), (20, 24)] {
            labels.set(x, y, true);
            keypoints.push(Keypoint { x, y, score: 1.0 });
        }
        let valid = Plane::from_fn(size, size, |x, y| !in_border(x, y, size, size, 4));
        (img, PseudoLabelMask { labels, valid, keypoints })
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            augment: AugmentConfig::identity(),
        }
    }

    #[test]
    fn overfits_single_sample() {
        let data = vec![sample()];
        let mut params = DetectorParams::init(3);
        let mut state = AdamState::new(params.weights.len());
        let rep = train(&data, &mut params, &mut state, &cfg(200), 1).unwrap();
        let (first, last) = (rep.epoch_losses[0], rep.final_loss().unwrap());
        assert!(last <= 0.5 * first, "loss {first} -> {last}");
    }

    #[test]
    fn repeated_run_is_identical() {
        let data = vec![sample(), sample()];
        let mut c = cfg(3);
        c.augment = AugmentConfig::default();
        c.batch_size = 1;
        let run = || {
            let mut params = DetectorParams::init(5);
            let mut state = AdamState::new(params.weights.len());
            let rep = train(&data, &mut params, &mut state, &c, 11).unwrap();
            (rep, params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn gradient_matches_central_differences() {
        use crate::detector::network::Layout;
        use rand::Rng;
        let (img, mask) = sample();
        let img2 = Plane::from_fn(32, 32, |x, y| ((x * 5 + y * 11) % 13) as f32 / 12.0);
        let images = [&img, &img2];
        let masks = [&mask, &mask];
        let params = DetectorParams::init(8);
        let analytic = batch_gradient(&images, &masks, &params).unwrap().gradient;
        let mut rng = seeding::rng(8, "gradcheck", 0);
        let h = 1e-4;
        for (name, ranges) in Layout::get().layer_groups() {
            let idx: Vec<usize> = ranges.into_iter().flatten().collect();
            for _ in 0..25 {
                let i = idx[rng.gen_range(0..idx.len())];
                let mut p = params.clone();
                p.weights[i] += h;
                let up = batch_loss(&images, &masks, &p).unwrap();
                p.weights[i] -= 2.0 * h;
                let down = batch_loss(&images, &masks, &p).unwrap();
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[i];
                let err = (a - numeric).abs();
                assert!(
                    err < 1e-6 || err / a.abs().max(numeric.abs()) < 1e-3,
                    "{name}[{i}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn no_valid_pixels_gives_zero_gradient() {
        let (img, mut mask) = sample();
        mask.valid.data.fill(false);
        let g = batch_gradient(&[&img], &[&mask], &DetectorParams::init(2)).unwrap();
        assert_eq!(g.losses, vec![0.0]);
        assert!(g.gradient.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_dataset_is_precondition_error() {
        let mut params = DetectorParams::init(0);
        let mut state = AdamState::new(params.weights.len());
        let err = train(&[], &mut params, &mut state, &cfg(1), 0).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }
}
