//! Convolutional heatmap network: three 3×3 stride-2 conv + batch-norm +
//! ReLU blocks, a 1×1 head producing 65 logits per 8×8 cell (64 positions
//! plus a dustbin), a per-cell softmax and depth-to-space.
//!
//! All parameters live in one flat `Vec<f64>` so the optimizer, gradient
//! checks and checkpoints treat them uniformly; [`Layout`] names the slices.

use std::ops::Range;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{Heatmap, Image, Plane};
use crate::seeding;

pub const CELL: usize = 8;
pub const CELL_PIXELS: usize = CELL * CELL;
/// 64 cell positions plus the dustbin.
pub const LOGITS: usize = CELL_PIXELS + 1;
pub const CHANNELS: [usize; 4] = [1, 16, 16, 32];
pub const STRIDE: usize = 2;
pub const BN_EPS: f64 = 1e-5;
/// Weight on the old running statistic.
pub const BN_MOMENTUM: f64 = 0.9;
pub const ARCH_DESCRIPTOR: &str =
    "conv3x3s2-bn-relu[1>16,16>16,16>32];head1x1[32>65];cell8-softmax-d2s;f64";
const HEAD_INIT_STD: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct Layout {
    pub conv: [Range<usize>; 3],
    pub gamma: [Range<usize>; 3],
    pub beta: [Range<usize>; 3],
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub n_weights: usize,
    pub mean: [Range<usize>; 3],
    pub var: [Range<usize>; 3],
    pub n_running: usize,
}

impl Layout {
    pub fn get() -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let mut conv = [0..0, 0..0, 0..0];
        let mut gamma = conv.clone();
        let mut beta = conv.clone();
        for l in 0..3 {
            conv[l] = take(CHANNELS[l + 1] * CHANNELS[l] * 9);
            gamma[l] = take(CHANNELS[l + 1]);
            beta[l] = take(CHANNELS[l + 1]);
        }
        let head_w = take(LOGITS * CHANNELS[3]);
        let head_b = take(LOGITS);
        let n_weights = at;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let mut mean = [0..0, 0..0, 0..0];
        let mut var = mean.clone();
        for l in 0..3 {
            mean[l] = take(CHANNELS[l + 1]);
            var[l] = take(CHANNELS[l + 1]);
        }
        Self {
            conv,
            gamma,
            beta,
            head_w,
            head_b,
            n_weights,
            mean,
            var,
            n_running: at,
        }
    }

    /// Parameter index ranges grouped per layer (encoder blocks, head).
    pub fn layer_groups(&self) -> Vec<(&'static str, Vec<Range<usize>>)> {
        let names = ["block1", "block2", "block3"];
        let mut out: Vec<_> = (0..3)
            .map(|l| {
                (
                    names[l],
                    vec![self.conv[l].clone(), self.gamma[l].clone(), self.beta[l].clone()],
                )
            })
            .collect();
        out.push(("head", vec![self.head_w.clone(), self.head_b.clone()]));
        out
    }
}

/// Trainable weights plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    pub weights: Vec<f64>,
    pub running: Vec<f64>,
}

impl DetectorParams {
    /// All weights zero except unit BN scales; every logit is equal.
    pub fn zeros() -> Self {
        let lay = Layout::get();
        let mut weights = vec![0.0; lay.n_weights];
        for l in 0..3 {
            weights[lay.gamma[l].clone()].fill(1.0);
        }
        Self {
            weights,
            running: Self::fresh_running(&lay),
        }
    }

    fn fresh_running(lay: &Layout) -> Vec<f64> {
        let mut running = vec![0.0; lay.n_running];
        for l in 0..3 {
            running[lay.var[l].clone()].fill(1.0);
        }
        running
    }

    /// He-normal encoder weights, a small-variance head so the initial
    /// heatmap is close to uniform, unit BN scales, zero shifts and biases.
    pub fn init(seed: u64) -> Self {
        let lay = Layout::get();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seeding::derive(seed, "init", 0));
        let mut p = Self::zeros();
        for l in 0..3 {
            let fan_in = (CHANNELS[l] * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            for w in &mut p.weights[lay.conv[l].clone()] {
                *w = normal.sample(&mut rng);
            }
        }
        let normal = Normal::new(0.0, HEAD_INIT_STD).expect("finite std");
        for w in &mut p.weights[lay.head_w.clone()] {
            *w = normal.sample(&mut rng);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let lay = Layout::get();
        if self.weights.len() != lay.n_weights || self.running.len() != lay.n_running {
            return Err(Error::DimensionMismatch("parameter vector sizes".into()));
        }
        if let Some(i) = self.weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite(format!("weight {i}")));
        }
        for l in 0..3 {
            if self.running[lay.var[l].clone()].iter().any(|v| !(*v > 0.0)) {
                return Err(Error::NonFinite(format!("running variance in block {}", l + 1)));
            }
        }
        Ok(())
    }
}

/// Channel-major activation volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Zero mean, unit variance; constant images map to zeros.
pub fn standardize(image: &Image) -> Tensor {
    let n = image.data.len() as f64;
    let mean = image.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
    Tensor {
        c: 1,
        h: image.height,
        w: image.width,
        data: image.data.iter().map(|&v| (v as f64 - mean) * scale).collect(),
    }
}

#[inline]
fn out_len(n: usize) -> usize {
    (n - 1) / STRIDE + 1
}

/// Output columns `ox` whose tap `ox·s + k − 1` lands inside `[0, n)`.
#[inline]
fn tap_range(k: usize, n_in: usize, n_out: usize) -> Range<usize> {
    let lo = if k == 0 { 1 } else { 0 };
    // ox·s + k − 1 ≤ n_in − 1
    let hi = if n_in >= k { ((n_in - k) / STRIDE + 1).min(n_out) } else { 0 };
    lo..hi.max(lo)
}

fn conv_forward(input: &Tensor, weight: &[f64], cout: usize) -> Tensor {
    let (ho, wo) = (out_len(input.h), out_len(input.w));
    let mut out = Tensor::zeros(cout, ho, wo);
    let cin = input.c;
    for co in 0..cout {
        let dst = &mut out.data[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..cin {
            let src = input.plane(ci);
            for ky in 0..3 {
                let ys = tap_range(ky, input.h, ho);
                for kx in 0..3 {
                    let wv = weight[((co * cin + ci) * 3 + ky) * 3 + kx];
                    let xs = tap_range(kx, input.w, wo);
                    for oy in ys.clone() {
                        let row = &src[(oy * STRIDE + ky - 1) * input.w..];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for ox in xs.clone() {
                            drow[ox] += wv * row[ox * STRIDE + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates the weight gradient into `dweight` and, if requested,
/// returns the input gradient.
fn conv_backward(input: &Tensor, weight: &[f64], dout: &Tensor, dweight: &mut [f64], want_dinput: bool) -> Option<Tensor> {
    let (ho, wo) = (dout.h, dout.w);
    let cin = input.c;
    let mut din = want_dinput.then(|| Tensor::zeros(cin, input.h, input.w));
    for co in 0..dout.c {
        let g = dout.plane(co);
        for ci in 0..cin {
            let src = input.plane(ci);
            for ky in 0..3 {
                let ys = tap_range(ky, input.h, ho);
                for kx in 0..3 {
                    let widx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                    let xs = tap_range(kx, input.w, wo);
                    let mut acc = 0.0;
                    for oy in ys.clone() {
                        let row = &src[(oy * STRIDE + ky - 1) * input.w..];
                        let grow = &g[oy * wo..(oy + 1) * wo];
                        for ox in xs.clone() {
                            acc += grow[ox] * row[ox * STRIDE + kx - 1];
                        }
                    }
                    dweight[widx] += acc;
                    if let Some(din) = din.as_mut() {
                        let wv = weight[widx];
                        let plane = &mut din.data[ci * input.h * input.w..(ci + 1) * input.h * input.w];
                        for oy in ys.clone() {
                            let base = (oy * STRIDE + ky - 1) * input.w;
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            for ox in xs.clone() {
                                plane[base + ox * STRIDE + kx - 1] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

fn head_forward(a: &Tensor, weights: &[f64], lay: &Layout) -> Tensor {
    let w = &weights[lay.head_w.clone()];
    let b = &weights[lay.head_b.clone()];
    let n = a.h * a.w;
    let mut out = Tensor::zeros(LOGITS, a.h, a.w);
    for o in 0..LOGITS {
        let dst = &mut out.data[o * n..(o + 1) * n];
        dst.fill(b[o]);
        for c in 0..a.c {
            let wv = w[o * a.c + c];
            for (d, s) in dst.iter_mut().zip(a.plane(c)) {
                *d += wv * s;
            }
        }
    }
    out
}

/// In-place softmax over the 65 channels at every cell.
fn cell_softmax(logits: &mut Tensor) {
    let n = logits.h * logits.w;
    for s in 0..n {
        let max = (0..LOGITS).map(|k| logits.data[k * n + s]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..LOGITS {
            let e = (logits.data[k * n + s] - max).exp();
            logits.data[k * n + s] = e;
            sum += e;
        }
        for k in 0..LOGITS {
            logits.data[k * n + s] /= sum;
        }
        debug_assert!(
            ((0..LOGITS).map(|k| logits.data[k * n + s]).sum::<f64>() - 1.0).abs() < 1e-6,
            "cell {s} off the simplex"
        );
    }
}

/// Drop the dustbin and spread each cell's 64 probabilities over its
/// 8×8 pixels.
pub fn depth_to_space(probs: &Tensor) -> Heatmap {
    let n = probs.h * probs.w;
    Plane::from_fn(probs.w * CELL, probs.h * CELL, |x, y| {
        let k = (y % CELL) * CELL + x % CELL;
        probs.data[k * n + (y / CELL) * probs.w + x / CELL]
    })
}

fn check_dims(image: &Image) -> Result<()> {
    if image.width % CELL != 0 || image.height % CELL != 0 || image.width == 0 || image.height == 0 {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} is not a positive multiple of {CELL}",
            image.width, image.height
        )));
    }
    Ok(())
}

/// Cell probabilities (65 channels at cell resolution) in inference mode.
pub fn forward_probs(image: &Image, params: &DetectorParams) -> Result<Tensor> {
    check_dims(image)?;
    let lay = Layout::get();
    let mut a = standardize(image);
    for l in 0..3 {
        let mut z = conv_forward(&a, &params.weights[lay.conv[l].clone()], CHANNELS[l + 1]);
        let n = z.h * z.w;
        for c in 0..z.c {
            let mean = params.running[lay.mean[l].start + c];
            let inv = 1.0 / (params.running[lay.var[l].start + c] + BN_EPS).sqrt();
            let g = params.weights[lay.gamma[l].start + c];
            let b = params.weights[lay.beta[l].start + c];
            for v in &mut z.data[c * n..(c + 1) * n] {
                *v = (g * (*v - mean) * inv + b).max(0.0);
            }
        }
        a = z;
    }
    let mut logits = head_forward(&a, &params.weights, &lay);
    cell_softmax(&mut logits);
    Ok(logits)
}

/// Inference-mode heatmap (running batch-norm statistics).
pub fn forward(image: &Image, params: &DetectorParams) -> Result<Heatmap> {
    forward_probs(image, params).map(|p| depth_to_space(&p))
}

pub fn forward_many(images: &[&Image], params: &DetectorParams) -> Result<Vec<Heatmap>> {
    images.par_iter().map(|img| forward(img, params)).collect()
}

struct BlockCache {
    /// Normalized pre-activation per sample.
    xhat: Vec<Tensor>,
    /// Post-ReLU output per sample.
    out: Vec<Tensor>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Training-mode forward pass over a batch, keeping what backward needs.
pub struct BatchPass {
    inputs: Vec<Tensor>,
    blocks: Vec<BlockCache>,
    pub probs: Vec<Tensor>,
    pub heatmaps: Vec<Heatmap>,
}

pub fn forward_train(images: &[&Image], params: &DetectorParams) -> Result<BatchPass> {
    if images.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    for img in images {
        check_dims(img)?;
    }
    let lay = Layout::get();
    let inputs: Vec<Tensor> = images.iter().map(|img| standardize(img)).collect();
    let mut blocks: Vec<BlockCache> = Vec::with_capacity(3);
    for l in 0..3 {
        let prev = if l == 0 { &inputs } else { &blocks[l - 1].out };
        let w = &params.weights[lay.conv[l].clone()];
        let cout = CHANNELS[l + 1];
        let zs: Vec<Tensor> = prev.par_iter().map(|a| conv_forward(a, w, cout)).collect();
        let n = zs[0].h * zs[0].w;
        let m = (n * zs.len()) as f64;
        let mut mean = vec![0.0; cout];
        let mut var = vec![0.0; cout];
        for c in 0..cout {
            mean[c] = zs.iter().map(|z| z.plane(c).iter().sum::<f64>()).sum::<f64>() / m;
            var[c] = zs
                .iter()
                .map(|z| z.plane(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>())
                .sum::<f64>()
                / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gamma = &params.weights[lay.gamma[l].clone()];
        let beta = &params.weights[lay.beta[l].clone()];
        let (xhat, out): (Vec<Tensor>, Vec<Tensor>) = zs
            .into_par_iter()
            .map(|mut z| {
                let mut o = z.clone();
                for c in 0..cout {
                    for (xv, ov) in z.data[c * n..(c + 1) * n]
                        .iter_mut()
                        .zip(&mut o.data[c * n..(c + 1) * n])
                    {
                        *xv = (*xv - mean[c]) * inv_std[c];
                        *ov = (gamma[c] * *xv + beta[c]).max(0.0);
                    }
                }
                (z, o)
            })
            .unzip();
        blocks.push(BlockCache {
            xhat,
            out,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        });
    }
    let probs: Vec<Tensor> = blocks[2]
        .out
        .par_iter()
        .map(|a| {
            let mut t = head_forward(a, &params.weights, &lay);
            cell_softmax(&mut t);
            t
        })
        .collect();
    let heatmaps = probs.iter().map(depth_to_space).collect();
    Ok(BatchPass {
        inputs,
        blocks,
        probs,
        heatmaps,
    })
}

impl BatchPass {
    /// On/off state of every ReLU in the pass, block by block.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.out.iter().flat_map(|t| t.data.iter().map(|&v| v > 0.0)))
            .collect()
    }
}

/// Gradient w.r.t. the 65 logits of every cell given the gradient w.r.t.
/// the heatmap (the dustbin receives no direct gradient).
pub fn logit_gradient(probs: &Tensor, dheat: &Heatmap) -> Tensor {
    let n = probs.h * probs.w;
    let mut d = Tensor::zeros(LOGITS, probs.h, probs.w);
    for cy in 0..probs.h {
        for cx in 0..probs.w {
            let s = cy * probs.w + cx;
            let g = |k: usize| {
                if k < CELL_PIXELS {
                    dheat.get(cx * CELL + k % CELL, cy * CELL + k / CELL)
                } else {
                    0.0
                }
            };
            let dot: f64 = (0..LOGITS).map(|k| probs.data[k * n + s] * g(k)).sum();
            for k in 0..LOGITS {
                d.data[k * n + s] = probs.data[k * n + s] * (g(k) - dot);
            }
        }
    }
    d
}

impl BatchPass {
    pub fn batch_size(&self) -> usize {
        self.inputs.len()
    }

    /// Reverse pass given per-sample heatmap gradients; returns the
    /// gradient of the (already-weighted) objective w.r.t. every weight.
    pub fn backward(&self, params: &DetectorParams, dheat: &[Heatmap]) -> Vec<f64> {
        let lay = Layout::get();
        let mut grad = vec![0.0; lay.n_weights];
        let cin = CHANNELS[3];
        let head_w = &params.weights[lay.head_w.clone()];

        // head: per-sample partial gradients, reduced in sample order
        let per_sample: Vec<(Vec<f64>, Tensor)> = (0..self.batch_size())
            .into_par_iter()
            .map(|b| {
                let dl = logit_gradient(&self.probs[b], &dheat[b]);
                let a = &self.blocks[2].out[b];
                let n = a.h * a.w;
                let mut g = vec![0.0; LOGITS * cin + LOGITS];
                let mut da = Tensor::zeros(cin, a.h, a.w);
                for o in 0..LOGITS {
                    let dlo = dl.plane(o);
                    g[LOGITS * cin + o] = dlo.iter().sum();
                    for c in 0..cin {
                        let ap = a.plane(c);
                        g[o * cin + c] = dlo.iter().zip(ap).map(|(x, y)| x * y).sum();
                        let wv = head_w[o * cin + c];
                        for (d, x) in da.data[c * n..(c + 1) * n].iter_mut().zip(dlo) {
                            *d += wv * x;
                        }
                    }
                }
                (g, da)
            })
            .collect();
        let mut da: Vec<Tensor> = Vec::with_capacity(self.batch_size());
        for (g, d) in per_sample {
            for (dst, v) in grad[lay.head_w.start..lay.head_b.end].iter_mut().zip(&g) {
                *dst += v;
            }
            da.push(d);
        }

        for l in (0..3).rev() {
            let blk = &self.blocks[l];
            let cout = CHANNELS[l + 1];
            let n = blk.out[0].h * blk.out[0].w;
            let m = (n * self.batch_size()) as f64;
            // ReLU gate
            for (d, o) in da.iter_mut().zip(&blk.out) {
                for (dv, ov) in d.data.iter_mut().zip(&o.data) {
                    if *ov <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            let mut sum_dy = vec![0.0; cout];
            let mut sum_dyx = vec![0.0; cout];
            for (d, xh) in da.iter().zip(&blk.xhat) {
                for c in 0..cout {
                    sum_dy[c] += d.plane(c).iter().sum::<f64>();
                    sum_dyx[c] += d.plane(c).iter().zip(xh.plane(c)).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            for c in 0..cout {
                grad[lay.gamma[l].start + c] += sum_dyx[c];
                grad[lay.beta[l].start + c] += sum_dy[c];
            }
            let gamma = &params.weights[lay.gamma[l].clone()];
            for (d, xh) in da.iter_mut().zip(&blk.xhat) {
                for c in 0..cout {
                    let k = gamma[c] * blk.inv_std[c] / m;
                    for (dv, xv) in d.data[c * n..(c + 1) * n].iter_mut().zip(xh.plane(c)) {
                        *dv = k * (m * *dv - sum_dy[c] - xv * sum_dyx[c]);
                    }
                }
            }
            let inputs = if l == 0 { &self.inputs } else { &self.blocks[l - 1].out };
            let w = &params.weights[lay.conv[l].clone()];
            let results: Vec<(Vec<f64>, Option<Tensor>)> = da
                .par_iter()
                .zip(inputs.par_iter())
                .map(|(dz, input)| {
                    let mut dw = vec![0.0; w.len()];
                    let din = conv_backward(input, w, dz, &mut dw, l > 0);
                    (dw, din)
                })
                .collect();
            let mut next = Vec::with_capacity(results.len());
            for (dw, din) in results {
                for (dst, v) in grad[lay.conv[l].clone()].iter_mut().zip(&dw) {
                    *dst += v;
                }
                if let Some(din) = din {
                    next.push(din);
                }
            }
            da = next;
        }
        grad
    }

    /// Blend this batch's statistics into the running estimates.
    pub fn update_running(&self, params: &mut DetectorParams) {
        let lay = Layout::get();
        for (l, blk) in self.blocks.iter().enumerate() {
            let n = blk.out[0].h * blk.out[0].w;
            let m = (n * self.batch_size()) as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for c in 0..blk.batch_mean.len() {
                let rm = &mut params.running[lay.mean[l].start + c];
                *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * blk.batch_mean[c];
                let rv = &mut params.running[lay.var[l].start + c];
                *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * blk.batch_var[c] * unbias;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(w: usize, h: usize, seed: u64) -> Image {
        Plane::from_fn(w, h, |x, y| {
            let v = seeding::derive(seed, "img", (y * w + x) as u64);
            (v >> 40) as f32 / (1u64 << 24) as f32
        })
    }

    fn assert_cell_simplex(probs: &Tensor) {
        let n = probs.h * probs.w;
        for s in 0..n {
            let total: f64 = (0..LOGITS).map(|k| probs.data[k * n + s]).sum();
            assert!((total - 1.0).abs() < 1e-6);
            let pix: f64 = (0..CELL_PIXELS).map(|k| probs.data[k * n + s]).sum();
            assert!((0.0..=1.0).contains(&pix));
        }
    }

    #[test]
    fn layout_is_contiguous() {
        let lay = Layout::get();
        assert_eq!(lay.conv[0].len(), 144);
        assert_eq!(lay.head_w.len(), 65 * 32);
        assert_eq!(lay.head_b.end, lay.n_weights);
        assert_eq!(lay.var[2].end, lay.n_running);
    }

    #[test]
    fn zero_params_give_uniform_heatmap() {
        let h = forward(&test_image(32, 24, 1), &DetectorParams::zeros()).unwrap();
        assert_eq!((h.width, h.height), (32, 24));
        for &v in &h.data {
            assert!((v - 1.0 / 65.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_multiple_of_cell() {
        let img = test_image(30, 24, 0);
        assert!(matches!(
            forward(&img, &DetectorParams::zeros()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn forward_is_reproducible_and_on_simplex() {
        let p = DetectorParams::init(3);
        let img = test_image(64, 48, 2);
        let a = forward_probs(&img, &p).unwrap();
        let b = forward_probs(&img, &p).unwrap();
        assert_eq!(a, b);
        assert_cell_simplex(&a);
        let pass = forward_train(&[&img, &test_image(64, 48, 9)], &p).unwrap();
        for probs in &pass.probs {
            assert_cell_simplex(probs);
        }
    }

    #[test]
    fn fresh_init_is_near_uniform() {
        for seed in 0..3 {
            let h = forward(&test_image(128, 128, seed), &DetectorParams::init(seed)).unwrap();
            let max = h.data.iter().cloned().fold(0.0, f64::max);
            let min = h.data.iter().cloned().fold(1.0, f64::min);
            assert!(max / min < 50.0, "ratio {}", max / min);
        }
    }

    #[test]
    fn logit_gradient_sums_to_zero_per_cell() {
        let p = DetectorParams::init(4);
        let probs = forward_probs(&test_image(32, 32, 4), &p).unwrap();
        let dheat = Plane::from_fn(32, 32, |x, y| ((x * 7 + y * 3) % 11) as f64 - 5.0);
        let d = logit_gradient(&probs, &dheat);
        let n = d.h * d.w;
        for s in 0..n {
            let total: f64 = (0..LOGITS).map(|k| d.data[k * n + s]).sum();
            assert!(total.abs() < 1e-12);
        }
    }

    #[test]
    fn tap_range_matches_bounds_check() {
        for n_in in 1..20 {
            let n_out = out_len(n_in);
            for k in 0..3 {
                let expect: Vec<usize> = (0..n_out)
                    .filter(|&o| {
                        let i = (o * STRIDE + k) as isize - 1;
                        i >= 0 && (i as usize) < n_in
                    })
                    .collect();
                let got: Vec<usize> = tap_range(k, n_in, n_out).collect();
                assert_eq!(got, expect, "n_in={n_in} k={k}");
            }
        }
    }
}
