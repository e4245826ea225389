//! Bilinear resizing, half-pixel-center convention (align_corners = false).

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Source coordinate and interpolation weights for one output index.
/// Returns (lo, hi, weight of hi).
fn src_taps(dst: usize, scale: f64, in_extent: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) * scale - 0.5;
    let floor = src.floor();
    let frac = src - floor;
    let lo = (floor.max(0.0) as usize).min(in_extent - 1);
    let hi = (lo + 1).min(in_extent - 1);
    // Clamp outside-image coordinates onto the border pixel.
    let w_hi = if floor < 0.0 {
        0.0
    } else if floor as usize >= in_extent - 1 {
        0.0
    } else {
        frac
    };
    (lo, hi, w_hi)
}

impl<T: Scalar> Tensor<T> {
    /// Resize [N,C,H,W] to [N,C,out_h,out_w] with bilinear interpolation.
    pub fn interpolate_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Invalid("interpolate_bilinear: zero-size target".into()));
        }
        if (out_h, out_w) == (h, w) {
            // Identity resize, pure pass-through.
            return Tensor::from_op(
                self.data().to_vec(),
                self.shape(),
                vec![self.clone()],
                Box::new(|g| vec![g.to_vec()]),
                "interpolate_bilinear",
            );
        }
        let scale_h = h as f64 / out_h as f64;
        let scale_w = w as f64 / out_w as f64;
        let rows: Vec<(usize, usize, f64)> =
            (0..out_h).map(|i| src_taps(i, scale_h, h)).collect();
        let cols: Vec<(usize, usize, f64)> =
            (0..out_w).map(|j| src_taps(j, scale_w, w)).collect();

        let mut out = vec![T::zero(); n * c * out_h * out_w];
        for nc in 0..n * c {
            let base = nc * h * w;
            let obase = nc * out_h * out_w;
            for (oi, &(h0, h1, wh)) in rows.iter().enumerate() {
                for (oj, &(w0, w1, ww)) in cols.iter().enumerate() {
                    let v00 = self.data()[base + h0 * w + w0].as_f64();
                    let v01 = self.data()[base + h0 * w + w1].as_f64();
                    let v10 = self.data()[base + h1 * w + w0].as_f64();
                    let v11 = self.data()[base + h1 * w + w1].as_f64();
                    let top = v00 * (1.0 - ww) + v01 * ww;
                    let bot = v10 * (1.0 - ww) + v11 * ww;
                    out[obase + oi * out_w + oj] = T::from_f64(top * (1.0 - wh) + bot * wh);
                }
            }
        }
        let shape = [n, c, out_h, out_w];
        Tensor::from_op(
            out,
            &shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0f64; n * c * h * w];
                for nc in 0..n * c {
                    let base = nc * h * w;
                    let obase = nc * out_h * out_w;
                    for (oi, &(h0, h1, wh)) in rows.iter().enumerate() {
                        for (oj, &(w0, w1, ww)) in cols.iter().enumerate() {
                            let gv = g[obase + oi * out_w + oj].as_f64();
                            dx[base + h0 * w + w0] += gv * (1.0 - wh) * (1.0 - ww);
                            dx[base + h0 * w + w1] += gv * (1.0 - wh) * ww;
                            dx[base + h1 * w + w0] += gv * wh * (1.0 - ww);
                            dx[base + h1 * w + w1] += gv * wh * ww;
                        }
                    }
                }
                vec![dx.into_iter().map(T::from_f64).collect()]
            }),
            "interpolate_bilinear",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize() {
        let x = Tensor::leaf(vec![1.0f64, 2.0, 3.0, 4.0], &[1, 1, 2, 2], false).unwrap();
        let y = x.interpolate_bilinear(2, 2).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::leaf(vec![0.7f64; 9], &[1, 1, 3, 3], false).unwrap();
        for (oh, ow) in [(1, 1), (5, 7), (6, 2)] {
            let y = x.interpolate_bilinear(oh, ow).unwrap();
            for v in y.data() {
                assert!((v - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_zero_target() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(x.interpolate_bilinear(0, 2).is_err());
    }

    #[test]
    fn matches_half_pixel_formula_2x2_to_4x4() {
        let x = Tensor::leaf(vec![0.0f64, 2.0, 4.0, 6.0], &[1, 1, 2, 2], false).unwrap();
        let y = x.interpolate_bilinear(4, 4).unwrap();
        // direct evaluation of the half-pixel formula per output pixel
        let xv = [[0.0, 2.0], [4.0, 6.0]];
        for oi in 0..4usize {
            for oj in 0..4usize {
                let sh = (oi as f64 + 0.5) * 0.5 - 0.5;
                let sw = (oj as f64 + 0.5) * 0.5 - 0.5;
                let h0 = sh.floor().clamp(0.0, 1.0) as usize;
                let w0 = sw.floor().clamp(0.0, 1.0) as usize;
                let h1 = (h0 + 1).min(1);
                let w1 = (w0 + 1).min(1);
                let fh = if sh < 0.0 || sh.floor() >= 1.0 { 0.0 } else { sh - sh.floor() };
                let fw = if sw < 0.0 || sw.floor() >= 1.0 { 0.0 } else { sw - sw.floor() };
                let expect = xv[h0][w0] * (1.0 - fh) * (1.0 - fw)
                    + xv[h0][w1] * (1.0 - fh) * fw
                    + xv[h1][w0] * fh * (1.0 - fw)
                    + xv[h1][w1] * fh * fw;
                let got = y.data()[oi * 4 + oj];
                assert!((got - expect).abs() < 1e-12, "({oi},{oj}): {got} vs {expect}");
            }
        }
        // corner stays on the corner pixel
        assert_eq!(y.data()[0], 0.0);
    }
}
