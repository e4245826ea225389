//! Direct convolution kernels: grouped conv2d, transposed conv2d,
//! reflect padding and separable Gaussian blur.
//!
//! All accumulation runs in f64 regardless of the tensor dtype; every
//! output element is written by exactly one (deterministic) reduction, so
//! the rayon parallelism cannot change results.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn out_extent(input: usize, pad: usize, k: usize, stride: usize, what: &str) -> Result<usize> {
    let span = input + 2 * pad;
    if span < k {
        return Err(Error::Shape(format!(
            "{what}: kernel {k} larger than padded extent {span}"
        )));
    }
    if (span - k) % stride != 0 {
        return Err(Error::Shape(format!(
            "{what}: non-integer output extent ({input} + 2*{pad} - {k}) / {stride}"
        )));
    }
    Ok((span - k) / stride + 1)
}

/// Output-column range [lo, hi) for which `ow * stride + k - padding` stays
/// inside [0, in_extent); hoists the bounds checks out of the inner loops.
#[inline]
fn col_bounds(
    k: usize,
    padding: usize,
    stride: usize,
    in_extent: usize,
    out_extent: usize,
) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let max_num = in_extent + padding;
    if k >= max_num {
        return (0, 0);
    }
    let hi = ((max_num - k - 1) / stride + 1).min(out_extent);
    (lo, hi.max(lo))
}

impl<T: Scalar> Tensor<T> {
    /// Grouped 2-d convolution (cross-correlation), zero padding.
    ///
    /// x: [N,Cin,H,W], weight: [Cout,Cin/groups,kH,kW], bias: [Cout].
    /// `groups == Cin` with Cout == Cin gives a depthwise convolution.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        let (n, cin, h, w) = self.dims4()?;
        let (cout, cpg, kh, kw) = weight.dims4()?;
        if stride == 0 || groups == 0 {
            return Err(Error::Invalid("conv2d: stride and groups must be >= 1".into()));
        }
        if cin % groups != 0 || cout % groups != 0 || cpg != cin / groups {
            return Err(Error::Shape(format!(
                "conv2d: Cin {cin}, Cout {cout}, groups {groups}, weight per-group {cpg}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::Shape(format!(
                    "conv2d bias shape {:?}, expected [{cout}]",
                    b.shape()
                )));
            }
        }
        let ho = out_extent(h, padding, kh, stride, "conv2d")?;
        let wo = out_extent(w, padding, kw, stride, "conv2d")?;
        let ocpg = cout / groups;

        let x = self.data();
        let wd = weight.data();
        let bd: Option<&[T]> = bias.map(|b| b.data());
        let mut out = vec![T::zero(); n * cout * ho * wo];
        out.par_chunks_mut(ho * wo)
            .enumerate()
            .for_each(|(idx, chunk)| {
                let ni = idx / cout;
                let oc = idx % cout;
                let ci0 = (oc / ocpg) * cpg;
                let bias_v = bd.map(|b| b[oc].as_f64()).unwrap_or(0.0);
                let mut accrow = vec![0.0f64; wo];
                for oh in 0..ho {
                    accrow.iter_mut().for_each(|a| *a = bias_v);
                    for icg in 0..cpg {
                        let xin = (ni * cin + ci0 + icg) * h * w;
                        let wbase = (oc * cpg + icg) * kh * kw;
                        for ki in 0..kh {
                            let ih = (oh * stride + ki) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let row = xin + ih as usize * w;
                            let wrow = wbase + ki * kw;
                            for kj in 0..kw {
                                let wv = wd[wrow + kj].as_f64();
                                let (lo, hi) = col_bounds(kj, padding, stride, w, wo);
                                if hi <= lo {
                                    continue;
                                }
                                let iw0 = row + lo * stride + kj - padding;
                                if stride == 1 {
                                    for (a, xv) in accrow[lo..hi]
                                        .iter_mut()
                                        .zip(&x[iw0..iw0 + (hi - lo)])
                                    {
                                        *a += xv.as_f64() * wv;
                                    }
                                } else {
                                    let mut iw = iw0;
                                    for a in accrow[lo..hi].iter_mut() {
                                        *a += x[iw].as_f64() * wv;
                                        iw += stride;
                                    }
                                }
                            }
                        }
                    }
                    for (c, a) in chunk[oh * wo..(oh + 1) * wo].iter_mut().zip(&accrow) {
                        *c = T::from_f64(*a);
                    }
                }
            });

        let xv = x.to_vec();
        let wv = wd.to_vec();
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            out,
            &[n, cout, ho, wo],
            parents,
            Box::new(move |g| {
                // dx: gather over output positions hitting each input pixel.
                let mut dx = vec![T::zero(); n * cin * h * w];
                dx.par_chunks_mut(h * w).enumerate().for_each(|(idx, chunk)| {
                    let ni = idx / cin;
                    let ci = idx % cin;
                    let gi = ci / cpg;
                    let icg = ci % cpg;
                    // scatter into an f64 plane: each chunk is private, so
                    // the accumulation order stays fixed
                    let mut plane = vec![0.0f64; h * w];
                    for ocg in 0..ocpg {
                        let oc = gi * ocpg + ocg;
                        let gbase = (ni * cout + oc) * ho * wo;
                        let wbase = (oc * cpg + icg) * kh * kw;
                        for ki in 0..kh {
                            for oh in 0..ho {
                                let ih = (oh * stride + ki) as isize - padding as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let prow = ih as usize * w;
                                let grow = gbase + oh * wo;
                                for kj in 0..kw {
                                    let wt = wv[wbase + ki * kw + kj].as_f64();
                                    let (lo, hi) = col_bounds(kj, padding, stride, w, wo);
                                    if hi <= lo {
                                        continue;
                                    }
                                    let iw0 = prow + lo * stride + kj - padding;
                                    if stride == 1 {
                                        for (p, gg) in plane[iw0..iw0 + (hi - lo)]
                                            .iter_mut()
                                            .zip(&g[grow + lo..grow + hi])
                                        {
                                            *p += gg.as_f64() * wt;
                                        }
                                    } else {
                                        let mut iw = iw0;
                                        for gg in &g[grow + lo..grow + hi] {
                                            plane[iw] += gg.as_f64() * wt;
                                            iw += stride;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    for (c, p) in chunk.iter_mut().zip(&plane) {
                        *c = T::from_f64(*p);
                    }
                });

                // dw: gather over batch and output positions per filter tap.
                let mut dw = vec![T::zero(); cout * cpg * kh * kw];
                dw.par_chunks_mut(cpg * kh * kw)
                    .enumerate()
                    .for_each(|(oc, chunk)| {
                        let ci0 = (oc / ocpg) * cpg;
                        for icg in 0..cpg {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let (lo, hi) = col_bounds(kj, padding, stride, w, wo);
                                    let mut acc = 0.0f64;
                                    for ni in 0..n {
                                        if hi <= lo {
                                            break;
                                        }
                                        let gbase = (ni * cout + oc) * ho * wo;
                                        let xin = (ni * cin + ci0 + icg) * h * w;
                                        for oh in 0..ho {
                                            let ih =
                                                (oh * stride + ki) as isize - padding as isize;
                                            if ih < 0 || ih >= h as isize {
                                                continue;
                                            }
                                            let row = xin + ih as usize * w;
                                            let grow = gbase + oh * wo;
                                            let iw0 = row + lo * stride + kj - padding;
                                            if stride == 1 {
                                                for (xs, gg) in xv[iw0..iw0 + (hi - lo)]
                                                    .iter()
                                                    .zip(&g[grow + lo..grow + hi])
                                                {
                                                    acc += xs.as_f64() * gg.as_f64();
                                                }
                                            } else {
                                                let mut iw = iw0;
                                                for gg in &g[grow + lo..grow + hi] {
                                                    acc += xv[iw].as_f64() * gg.as_f64();
                                                    iw += stride;
                                                }
                                            }
                                        }
                                    }
                                    chunk[(icg * kh + ki) * kw + kj] = T::from_f64(acc);
                                }
                            }
                        }
                    });

                let mut grads = vec![dx, dw];
                if has_bias {
                    let mut db = vec![T::zero(); cout];
                    for (oc, slot) in db.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for ni in 0..n {
                            let gbase = (ni * cout + oc) * ho * wo;
                            for s in 0..ho * wo {
                                acc += g[gbase + s].as_f64();
                            }
                        }
                        *slot = T::from_f64(acc);
                    }
                    grads.push(db);
                }
                grads
            }),
            "conv2d",
        )
    }

    /// Transposed 2-d convolution (adjoint of conv2d with the same stride,
    /// no padding). x: [N,Cin,H,W], weight: [Cin,Cout,kH,kW].
    /// Output extent: (H-1)*stride + kH.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
    ) -> Result<Tensor<T>> {
        let (n, cin, h, w) = self.dims4()?;
        let (wcin, cout, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv_transpose2d: input Cin {cin} vs weight Cin {wcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv_transpose2d: stride must be >= 1".into()));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::Shape(format!(
                    "conv_transpose2d bias shape {:?}, expected [{cout}]",
                    b.shape()
                )));
            }
        }
        let ho = (h - 1) * stride + kh;
        let wo = (w - 1) * stride + kw;

        let x = self.data();
        let wd = weight.data();
        let bd: Option<&[T]> = bias.map(|b| b.data());
        let mut out = vec![T::zero(); n * cout * ho * wo];
        out.par_chunks_mut(ho * wo)
            .enumerate()
            .for_each(|(idx, chunk)| {
                let ni = idx / cout;
                let oc = idx % cout;
                let bias_v = bd.map(|b| b[oc].as_f64()).unwrap_or(0.0);
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0f64;
                        for ki in 0..kh {
                            if oh < ki || (oh - ki) % stride != 0 {
                                continue;
                            }
                            let ih = (oh - ki) / stride;
                            if ih >= h {
                                continue;
                            }
                            for kj in 0..kw {
                                if ow < kj || (ow - kj) % stride != 0 {
                                    continue;
                                }
                                let iw = (ow - kj) / stride;
                                if iw >= w {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x[((ni * cin + ci) * h + ih) * w + iw].as_f64()
                                        * wd[((ci * cout + oc) * kh + ki) * kw + kj].as_f64();
                                }
                            }
                        }
                        chunk[oh * wo + ow] = T::from_f64(acc + bias_v);
                    }
                }
            });

        let xv = x.to_vec();
        let wv = wd.to_vec();
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            out,
            &[n, cout, ho, wo],
            parents,
            Box::new(move |g| {
                // dx is a plain strided correlation of dy with the kernel.
                let mut dx = vec![T::zero(); n * cin * h * w];
                dx.par_chunks_mut(h * w).enumerate().for_each(|(idx, chunk)| {
                    let ni = idx / cin;
                    let ci = idx % cin;
                    for ih in 0..h {
                        for iw in 0..w {
                            let mut acc = 0.0f64;
                            for oc in 0..cout {
                                let gbase = (ni * cout + oc) * ho * wo;
                                let wbase = (ci * cout + oc) * kh * kw;
                                for ki in 0..kh {
                                    let oh = ih * stride + ki;
                                    for kj in 0..kw {
                                        let ow = iw * stride + kj;
                                        acc += g[gbase + oh * wo + ow].as_f64()
                                            * wv[wbase + ki * kw + kj].as_f64();
                                    }
                                }
                            }
                            chunk[ih * w + iw] = T::from_f64(acc);
                        }
                    }
                });

                let mut dw = vec![T::zero(); cin * cout * kh * kw];
                dw.par_chunks_mut(cout * kh * kw)
                    .enumerate()
                    .for_each(|(ci, chunk)| {
                        for oc in 0..cout {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let mut acc = 0.0f64;
                                    for ni in 0..n {
                                        let gbase = (ni * cout + oc) * ho * wo;
                                        let xin = (ni * cin + ci) * h * w;
                                        for ih in 0..h {
                                            let oh = ih * stride + ki;
                                            for iw in 0..w {
                                                let ow = iw * stride + kj;
                                                acc += xv[xin + ih * w + iw].as_f64()
                                                    * g[gbase + oh * wo + ow].as_f64();
                                            }
                                        }
                                    }
                                    chunk[(oc * kh + ki) * kw + kj] = T::from_f64(acc);
                                }
                            }
                        }
                    });

                let mut grads = vec![dx, dw];
                if has_bias {
                    let mut db = vec![T::zero(); cout];
                    for (oc, slot) in db.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for ni in 0..n {
                            let gbase = (ni * cout + oc) * ho * wo;
                            for s in 0..ho * wo {
                                acc += g[gbase + s].as_f64();
                            }
                        }
                        *slot = T::from_f64(acc);
                    }
                    grads.push(db);
                }
                grads
            }),
            "conv_transpose2d",
        )
    }

    /// Asymmetric zero padding, e.g. for TF-style "same" stride-2 convs.
    pub fn pad_zero(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let oh = h + top + bottom;
        let ow = w + left + right;
        let mut out = vec![T::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            for i in 0..h {
                let src = nc * h * w + i * w;
                let dst = nc * oh * ow + (i + top) * ow + left;
                out[dst..dst + w].copy_from_slice(&self.data()[src..src + w]);
            }
        }
        Tensor::from_op(
            out,
            &[n, c, oh, ow],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    for i in 0..h {
                        let dst = nc * h * w + i * w;
                        let src = nc * oh * ow + (i + top) * ow + left;
                        dx[dst..dst + w].copy_from_slice(&g[src..src + w]);
                    }
                }
                vec![dx]
            }),
            "pad_zero",
        )
    }

    /// Reflect padding (edge pixel not repeated), pad < extent required.
    pub fn pad_reflect(&self, pad: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if pad >= h || pad >= w {
            return Err(Error::Invalid(format!(
                "pad_reflect: pad {pad} too large for {h}x{w}"
            )));
        }
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let reflect = |i: isize, extent: usize| -> usize {
            let e = extent as isize;
            let mut v = i;
            if v < 0 {
                v = -v;
            }
            if v >= e {
                v = 2 * e - 2 - v;
            }
            v as usize
        };
        let mut out = vec![T::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            let xin = nc * h * w;
            let obase = nc * ho * wo;
            for oh in 0..ho {
                let ih = reflect(oh as isize - pad as isize, h);
                for ow in 0..wo {
                    let iw = reflect(ow as isize - pad as isize, w);
                    out[obase + oh * wo + ow] = self.data()[xin + ih * w + iw];
                }
            }
        }
        Tensor::from_op(
            out,
            &[n, c, ho, wo],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let xin = nc * h * w;
                    let obase = nc * ho * wo;
                    for oh in 0..ho {
                        let ih = reflect(oh as isize - pad as isize, h);
                        for ow in 0..wo {
                            let iw = reflect(ow as isize - pad as isize, w);
                            dx[xin + ih * w + iw] += g[obase + oh * wo + ow];
                        }
                    }
                }
                vec![dx]
            }),
            "pad_reflect",
        )
    }

    /// Separable Gaussian blur with reflect borders. The 1-d kernel is
    /// normalized so its f64 sum is exactly 1, which keeps constant images
    /// fixed points of the blur.
    pub fn gaussian_blur(&self, sigma: f64, ksize: usize) -> Result<Tensor<T>> {
        let (_, _, h, w) = self.dims4()?;
        if ksize % 2 == 0 || ksize == 0 {
            return Err(Error::Invalid(format!("gaussian_blur: ksize {ksize} must be odd")));
        }
        if sigma <= 0.0 {
            return Err(Error::Invalid(format!("gaussian_blur: sigma {sigma} must be > 0")));
        }
        let half = ksize / 2;
        if half >= h || half >= w {
            return Err(Error::Invalid(format!(
                "gaussian_blur: kernel {ksize} too large for {h}x{w}"
            )));
        }
        let kernel = gaussian_kernel_1d(sigma, ksize);
        let a = self.blur_pass(&kernel, true)?;
        a.blur_pass(&kernel, false)
    }

    /// One horizontal or vertical blur pass with reflect indexing.
    fn blur_pass(&self, kernel: &[f64], horizontal: bool) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let half = kernel.len() / 2;
        let extent = if horizontal { w } else { h };
        let reflect = move |i: isize| -> usize {
            let e = extent as isize;
            let mut v = i;
            if v < 0 {
                v = -v;
            }
            if v >= e {
                v = 2 * e - 2 - v;
            }
            v as usize
        };
        let mut out = vec![T::zero(); n * c * h * w];
        for nc in 0..n * c {
            let base = nc * h * w;
            for ih in 0..h {
                for iw in 0..w {
                    let mut acc = 0.0f64;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let off = k as isize - half as isize;
                        let src = if horizontal {
                            base + ih * w + reflect(iw as isize + off)
                        } else {
                            base + reflect(ih as isize + off) * w + iw
                        };
                        acc += self.data()[src].as_f64() * kv;
                    }
                    out[base + ih * w + iw] = T::from_f64(acc);
                }
            }
        }
        let kv = kernel.to_vec();
        Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0f64; g.len()];
                for nc in 0..n * c {
                    let base = nc * h * w;
                    for ih in 0..h {
                        for iw in 0..w {
                            let gv = g[base + ih * w + iw].as_f64();
                            for (k, &kw_) in kv.iter().enumerate() {
                                let off = k as isize - half as isize;
                                let dst = if horizontal {
                                    base + ih * w + reflect(iw as isize + off)
                                } else {
                                    base + reflect(ih as isize + off) * w + iw
                                };
                                dx[dst] += gv * kw_;
                            }
                        }
                    }
                }
                vec![dx.into_iter().map(T::from_f64).collect()]
            }),
            "gaussian_blur",
        )
    }
}

/// Normalized 1-d Gaussian taps; the center tap absorbs the normalization
/// residual so the f64 sum is exactly 1.
pub fn gaussian_kernel_1d(sigma: f64, ksize: usize) -> Vec<f64> {
    let half = (ksize / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    let resid: f64 = 1.0 - k.iter().sum::<f64>();
    k[ksize / 2] += resid;
    k
}
