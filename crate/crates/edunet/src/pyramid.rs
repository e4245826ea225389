//! High-frequency edge-evidence pyramid: difference-of-Gaussian level 0,
//! average-pooled deeper levels, and bilinear edge-attention resizing.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BLUR_SIGMA: f64 = 1.0;
pub const BLUR_KSIZE: usize = 5;

/// Stack of single-channel high-frequency maps, level i at 1/2^i of the
/// working resolution (ceil at odd extents).
pub struct HighFreqPyramid<T: Scalar> {
    pub levels: Vec<Tensor<T>>,
    pub blur_sigma: f64,
    pub blur_kernel_size: usize,
}

/// level 0 = I - G(I), computed with compensated subtraction so that
/// level0 + G(I) reproduces I bit-exactly; level i = 2x2 average pooling of
/// level i-1. Differentiable: levels stay attached to I's graph.
pub fn build_pyramid<T: Scalar>(
    image: &Tensor<T>,
    num_levels: usize,
    sigma: f64,
    ksize: usize,
) -> Result<HighFreqPyramid<T>> {
    let (_, c, h, w) = image.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!(
            "build_pyramid: expected single-channel image, got {c} channels"
        )));
    }
    if num_levels < 1 {
        return Err(Error::Invalid("build_pyramid: num_levels must be >= 1".into()));
    }
    let min_extent = 1usize << (num_levels - 1);
    if h < min_extent || w < min_extent {
        return Err(Error::Invalid(format!(
            "build_pyramid: {h}x{w} image too small for {num_levels} levels"
        )));
    }
    let blurred = image.gaussian_blur(sigma, ksize)?;
    let mut levels = Vec::with_capacity(num_levels);
    levels.push(image.sub_exact(&blurred)?);
    for i in 1..num_levels {
        levels.push(levels[i - 1].avg_pool_2x2()?);
    }
    Ok(HighFreqPyramid {
        levels,
        blur_sigma: sigma,
        blur_kernel_size: ksize,
    })
}

/// Resize one pyramid level to an encoder feature resolution (Eq. "A_edge").
pub fn edge_attention<T: Scalar>(level: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    level.interpolate_bilinear(h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
        let data: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::leaf(data, &[1, 1, h, w], false).unwrap()
    }

    #[test]
    fn reconstruction_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (h, w) in [(16, 16), (17, 23), (32, 8)] {
            let img = rand_image(&mut rng, h, w);
            let pyr = build_pyramid(&img, 3, BLUR_SIGMA, BLUR_KSIZE).unwrap();
            let blurred = img.gaussian_blur(BLUR_SIGMA, BLUR_KSIZE).unwrap();
            for (a, (b, c)) in img
                .data()
                .iter()
                .zip(pyr.levels[0].data().iter().zip(blurred.data()))
            {
                assert_eq!(*a, b + c, "level0 + blur must reproduce the image exactly");
            }
        }
    }

    #[test]
    fn constant_image_all_levels_null() {
        let img = Tensor::<f32>::full(&[1, 1, 20, 20], 0.37);
        let pyr = build_pyramid(&img, 4, BLUR_SIGMA, BLUR_KSIZE).unwrap();
        for (i, lvl) in pyr.levels.iter().enumerate() {
            for v in lvl.data() {
                assert!(v.abs() < 1e-7, "level {i}: residual {v}");
            }
        }
    }

    #[test]
    fn level_shapes_halve_with_ceil() {
        let img = Tensor::<f32>::zeros(&[2, 1, 21, 13]);
        let pyr = build_pyramid(&img, 4, BLUR_SIGMA, BLUR_KSIZE).unwrap();
        let shapes: Vec<&[usize]> = pyr.levels.iter().map(|l| l.shape()).collect();
        assert_eq!(shapes[0], &[2, 1, 21, 13]);
        assert_eq!(shapes[1], &[2, 1, 11, 7]);
        assert_eq!(shapes[2], &[2, 1, 6, 4]);
        assert_eq!(shapes[3], &[2, 1, 3, 2]);
    }

    #[test]
    fn too_small_image_rejected() {
        let img = Tensor::<f32>::zeros(&[1, 1, 6, 6]);
        assert!(build_pyramid(&img, 4, BLUR_SIGMA, BLUR_KSIZE).is_err());
        assert!(build_pyramid(&img, 0, BLUR_SIGMA, BLUR_KSIZE).is_err());
    }

    #[test]
    fn multi_channel_rejected() {
        let img = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        assert!(build_pyramid(&img, 2, BLUR_SIGMA, BLUR_KSIZE).is_err());
    }

    #[test]
    fn step_edge_response_localized() {
        // vertical step at column 16: left half 0, right half 1
        let (h, w) = (8usize, 32usize);
        let mut data = vec![0.0f64; h * w];
        for i in 0..h {
            for j in 16..w {
                data[i * w + j] = 1.0;
            }
        }
        let img = Tensor::leaf(data, &[1, 1, h, w], false).unwrap();
        let pyr = build_pyramid(&img, 1, BLUR_SIGMA, BLUR_KSIZE).unwrap();
        let row = &pyr.levels[0].data()[3 * w..4 * w];
        let peak_col = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap()
            .0;
        assert!(
            (peak_col as i64 - 16).abs() <= 1,
            "peak at column {peak_col}, expected near 16"
        );
        for (j, v) in row.iter().enumerate() {
            let dist = (j as i64 - 16).unsigned_abs() as usize;
            if dist >= BLUR_KSIZE {
                assert!(v.abs() < 1e-9, "column {j}: response {v} far from edge");
            }
        }
    }

    #[test]
    fn natural_statistics_mean_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // smooth-ish random image: blurred noise, offset into [0,1]
        let noise = rand_image(&mut rng, 48, 48);
        let img = noise.gaussian_blur(1.5, 7).unwrap();
        let pyr = build_pyramid(&img.detach(), 3, BLUR_SIGMA, BLUR_KSIZE).unwrap();
        for lvl in &pyr.levels {
            let mean: f32 =
                lvl.data().iter().sum::<f32>() / lvl.numel() as f32;
            assert!(mean.abs() < 0.02, "level mean {mean}");
        }
    }

    #[test]
    fn pyramid_is_differentiable() {
        let img = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let data: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::leaf(data, &[1, 1, 8, 8], true).unwrap()
        };
        let pyr = build_pyramid(&img, 2, BLUR_SIGMA, BLUR_KSIZE).unwrap();
        let att = edge_attention(&pyr.levels[1], 8, 8).unwrap();
        att.sum_all().unwrap().backward().unwrap();
        let g = img.grad().expect("image grad");
        assert!(g.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn edge_attention_identity_and_zero() {
        let lvl = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let up = edge_attention(&lvl, 8, 8).unwrap();
        assert_eq!(up.shape(), &[1, 1, 8, 8]);
        assert!(up.data().iter().all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lvl = rand_image(&mut rng, 5, 5);
        let same = edge_attention(&lvl, 5, 5).unwrap();
        assert_eq!(same.data(), lvl.data());
    }
}
