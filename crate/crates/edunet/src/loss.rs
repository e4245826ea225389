//! Soft Dice segmentation loss and the weighted dual-branch combination.

use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One-hot encode labels into a constant [N,C,H,W] tensor.
pub fn one_hot<T: Scalar>(mask: &[u8], n: usize, c: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if mask.len() != n * h * w {
        return Err(Error::Shape(format!(
            "one_hot: {} labels for {n}x{h}x{w}",
            mask.len()
        )));
    }
    if let Some(l) = mask.iter().find(|l| **l as usize >= c) {
        return Err(Error::Data(format!("one_hot: label {l} >= num_classes {c}")));
    }
    let mut data = vec![T::zero(); n * c * h * w];
    for (pos, l) in mask.iter().enumerate() {
        let (img, pix) = (pos / (h * w), pos % (h * w));
        data[(img * c + *l as usize) * h * w + pix] = T::one();
    }
    Tensor::constant(data, &[n, c, h, w])
}

/// Soft Dice loss on softmax probabilities against integer labels, averaged
/// over the selected classes (foreground only unless `include_bg`). Class
/// sums pool over the whole batch.
pub fn dice_loss<T: Scalar>(
    logits: &Tensor<T>,
    mask: &[u8],
    smooth: f64,
    include_bg: bool,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = logits.dims4()?;
    let target = one_hot::<T>(mask, n, c, h, w)?;
    let p = logits.softmax_channels()?;
    let inter = p.mul(&target)?.sum_per_channel()?;
    let psum = p.sum_per_channel()?;
    let tsum = target.sum_per_channel()?;
    // d_c = (2 inter + s) / (psum + tsum + s), per class
    let num = inter.affine(2.0, smooth)?;
    let den = psum.add(&tsum)?.affine(1.0, smooth)?;
    let d = num.div(&den)?;
    let start = if include_bg { 0 } else { 1 };
    if start >= c {
        return Err(Error::Invalid(
            "dice_loss: no foreground classes to score".into(),
        ));
    }
    let k = c - start;
    let mut weights = vec![T::zero(); c];
    for wv in weights.iter_mut().skip(start) {
        *wv = T::from_f64(1.0 / k as f64);
    }
    let wt = Tensor::constant(weights, &[c])?;
    d.mul(&wt)?.sum_all()?.affine(-1.0, 1.0)
}

/// Eq.-style weighted sum: alpha * global Dice + beta * local Dice, with a
/// disabled branch contributing zero.
pub fn combined_loss<T: Scalar>(
    out: &ModelOutput<T>,
    mask: &[u8],
    alpha: f64,
    beta: f64,
    smooth: f64,
    include_bg: bool,
) -> Result<Tensor<T>> {
    let mut total: Option<Tensor<T>> = None;
    let mut add_term = |logits: &Option<Tensor<T>>, weight: f64| -> Result<()> {
        if let Some(lg) = logits {
            let term = dice_loss(lg, mask, smooth, include_bg)?.affine(weight, 0.0)?;
            total = Some(match total.take() {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
        Ok(())
    };
    add_term(&out.logits_global, alpha)?;
    add_term(&out.logits_local, beta)?;
    total.ok_or_else(|| Error::Invalid("combined_loss: no branch outputs".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_match_with_smooth_one_is_zero() {
        // 64-pixel map, all pixels class 1, prediction saturated at class 1:
        // d = (2*64 + 1) / (64 + 64 + 1) = 1, loss = 0
        let mut logits = vec![0.0f64; 2 * 64];
        for pix in 0..64 {
            logits[64 + pix] = 60.0; // softmax ~ exactly 1 after saturation
        }
        let lg = Tensor::leaf(logits, &[1, 2, 8, 8], false).unwrap();
        let mask = vec![1u8; 64];
        let loss = dice_loss(&lg, &mask, 1.0, false).unwrap();
        assert!(loss.item().abs() < 1e-9, "loss {}", loss.item());
    }

    #[test]
    fn uniform_prediction_arithmetic_oracle() {
        // uniform 1/2 over C=2, truth all-foreground, 4 pixels, smooth 0:
        // d_fg = (2 * 2) / (2 + 4) = 2/3, loss = 1/3
        let lg = Tensor::leaf(vec![0.0f64; 8], &[1, 2, 2, 2], false).unwrap();
        let loss = dice_loss(&lg, &[1, 1, 1, 1], 0.0, false).unwrap();
        assert!((loss.item() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn loss_in_unit_interval_and_label_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let data: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let lg = Tensor::leaf(data, &[1, 3, 4, 4], false).unwrap();
            let mask: Vec<u8> = (0..16).map(|_| rng.gen_range(0..3)).collect();
            let loss = dice_loss(&lg, &mask, 1.0, true).unwrap();
            assert!((0.0..=1.0).contains(&loss.item()));
        }
        let lg = Tensor::leaf(vec![0.0f64; 8], &[1, 2, 2, 2], false).unwrap();
        assert!(dice_loss(&lg, &[0, 1, 2, 0], 1.0, false).is_err());
    }

    #[test]
    fn dice_gradient_passes_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = [2usize, 3, 4, 4];
        let data: Vec<f64> = (0..96).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mask: Vec<u8> = (0..32).map(|_| rng.gen_range(0..3)).collect();
        let report = grad_check(
            &|inputs: &[Tensor<f64>]| dice_loss(&inputs[0], &mask, 1.0, false),
            &[(data, shape.to_vec())],
            40,
            1e-5,
            &mut rng,
        )
        .unwrap();
        assert!(report.passes(1e-5), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn combined_loss_linearity_and_single_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lg = Tensor::leaf(data, &[1, 2, 4, 4], false).unwrap();
        let mask: Vec<u8> = (0..16).map(|_| rng.gen_range(0..2)).collect();
        let single = dice_loss(&lg, &mask, 1.0, false).unwrap().item();
        let out = ModelOutput {
            logits_global: Some(lg.clone()),
            logits_local: Some(lg.clone()),
            fused_prob: lg.softmax_channels().unwrap(),
        };
        // identical branch logits, alpha = beta = 1 -> twice the single loss
        let both = combined_loss(&out, &mask, 1.0, 1.0, 1.0, false).unwrap().item();
        assert!((both - 2.0 * single).abs() < 1e-12);
        // beta = 0 -> alpha * global only; doubling alpha doubles the term
        let g1 = combined_loss(&out, &mask, 1.0, 0.0, 1.0, false).unwrap().item();
        let g2 = combined_loss(&out, &mask, 2.0, 0.0, 1.0, false).unwrap().item();
        assert!((g1 - single).abs() < 1e-12);
        assert!((g2 - 2.0 * g1).abs() < 1e-12);
    }
}
