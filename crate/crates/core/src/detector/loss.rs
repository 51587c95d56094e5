use crate::error::{Error, Result};
use crate::maximizer::PseudoLabelMask;
use crate::raster::{Heatmap, Plane};

/// Heatmap values are clamped to `[ε, 1 − ε]` inside the logarithms.
pub const LOSS_EPS: f64 = 1e-7;

fn check(x: &Heatmap, y: &PseudoLabelMask) -> Result<()> {
    if !x.same_shape(&y.labels) || !x.same_shape(&y.valid) {
        return Err(Error::DimensionMismatch(format!(
            "heatmap {}x{} vs labels {}x{}",
            x.width, x.height, y.labels.width, y.labels.height
        )));
    }
    Ok(())
}

/// Binary cross entropy summed over the label's valid pixels:
/// `−Σ [y·log x + (1 − y)·log(1 − x)]`.
pub fn loss(x: &Heatmap, y: &PseudoLabelMask) -> Result<f64> {
    check(x, y)?;
    let mut total = 0.0;
    for ((&xv, &label), &valid) in x.data.iter().zip(&y.labels.data).zip(&y.valid.data) {
        if !valid {
            continue;
        }
        let xc = xv.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
        total -= if label { xc.ln() } else { (1.0 - xc).ln() };
    }
    Ok(total)
}

/// Loss and its gradient w.r.t. every heatmap pixel (zero where clamped or
/// excluded).
pub fn loss_and_grad(x: &Heatmap, y: &PseudoLabelMask) -> Result<(f64, Heatmap)> {
    let value = loss(x, y)?;
    let mut grad = Plane::filled(x.width, x.height, 0.0);
    for (i, g) in grad.data.iter_mut().enumerate() {
        if !y.valid.data[i] {
            continue;
        }
        let xv = x.data[i];
        if xv <= LOSS_EPS || xv >= 1.0 - LOSS_EPS {
            continue;
        }
        *g = if y.labels.data[i] { -1.0 / xv } else { 1.0 / (1.0 - xv) };
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn mask(labels: Plane<bool>, valid: Plane<bool>) -> PseudoLabelMask {
        PseudoLabelMask {
            labels,
            valid,
            keypoints: vec![],
        }
    }

    #[test]
    fn single_pixel_half() {
        let x = Plane::filled(1, 1, 0.5);
        let y = mask(Plane::filled(1, 1, true), Plane::filled(1, 1, true));
        assert!((loss(&x, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let labels = Plane::from_fn(8, 8, |x, y| x == y);
        let x = labels.map(|b| if b { 1.0 } else { 0.0 });
        let y = mask(labels, Plane::filled(8, 8, true));
        let l = loss(&x, &y).unwrap();
        let expect = -64.0 * (1.0 - LOSS_EPS).ln();
        assert!((l - expect).abs() < 1e-12 && l < 1e-4);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Plane::from_fn(16, 16, |_, _| rng.gen::<f64>());
        let labels = Plane::from_fn(16, 16, |_, _| rng.gen_bool(0.2));
        let valid = Plane::from_fn(16, 16, |_, _| rng.gen_bool(0.8));
        let y = mask(labels.clone(), valid.clone());
        let mut oracle = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                if !valid.get(j, i) {
                    continue;
                }
                let xv = x.get(j, i).max(1e-7).min(1.0 - 1e-7);
                let yv = if labels.get(j, i) { 1.0 } else { 0.0 };
                oracle += -(yv * xv.ln() + (1.0 - yv) * (1.0 - xv).ln());
            }
        }
        assert!((loss(&x, &y).unwrap() - oracle).abs() < 1e-10);
        let (_, g) = loss_and_grad(&x, &y).unwrap();
        // finite difference on one pixel
        let (px, py) = (3, 5);
        assert!(valid.get(px, py) || g.get(px, py) == 0.0);
        let h = 1e-6;
        let mut xp = x.clone();
        xp.set(px, py, x.get(px, py) + h);
        let mut xm = x.clone();
        xm.set(px, py, x.get(px, py) - h);
        let fd = (loss(&xp, &y).unwrap() - loss(&xm, &y).unwrap()) / (2.0 * h);
        assert!((fd - g.get(px, py)).abs() < 1e-5 * fd.abs().max(1.0));
    }

    #[test]
    fn shape_mismatch() {
        let x = Plane::filled(4, 4, 0.5);
        let y = mask(Plane::filled(4, 3, false), Plane::filled(4, 3, true));
        assert!(matches!(loss(&x, &y), Err(Error::DimensionMismatch(_))));
    }
}
