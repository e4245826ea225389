//! Pooling: global average/max and 2x2 average (pyramid downsample).

use super::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    GlobalAvg,
    GlobalMax,
    Avg2x2,
}

impl<T: Scalar> Tensor<T> {
    pub fn pool(&self, kind: PoolKind) -> Result<Tensor<T>> {
        match kind {
            PoolKind::GlobalAvg => self.global_avg_pool(),
            PoolKind::GlobalMax => self.global_max_pool(),
            PoolKind::Avg2x2 => self.avg_pool_2x2(),
        }
    }

    /// [N,C,H,W] -> [N,C,1,1] mean.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let mut out = vec![T::zero(); n * c];
        for nc in 0..n * c {
            let base = nc * hw;
            let mut acc = 0.0f64;
            for s in 0..hw {
                acc += self.data()[base + s].as_f64();
            }
            out[nc] = T::from_f64(acc / hw as f64);
        }
        Tensor::from_op(
            out,
            &[n, c, 1, 1],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * c * hw];
                let inv = T::from_f64(1.0 / hw as f64);
                for nc in 0..n * c {
                    let gv = g[nc] * inv;
                    for s in 0..hw {
                        dx[nc * hw + s] = gv;
                    }
                }
                vec![dx]
            }),
            "global_avg_pool",
        )
    }

    /// [N,C,H,W] -> [N,C,1,1] max; gradient routes to the first argmax.
    pub fn global_max_pool(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let mut out = vec![T::zero(); n * c];
        let mut arg = vec![0usize; n * c];
        for nc in 0..n * c {
            let base = nc * hw;
            let mut best = self.data()[base];
            let mut bi = 0usize;
            for s in 1..hw {
                let v = self.data()[base + s];
                if v > best {
                    best = v;
                    bi = s;
                }
            }
            out[nc] = best;
            arg[nc] = bi;
        }
        Tensor::from_op(
            out,
            &[n, c, 1, 1],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * c * hw];
                for nc in 0..n * c {
                    dx[nc * hw + arg[nc]] = g[nc];
                }
                vec![dx]
            }),
            "global_max_pool",
        )
    }

    /// 2x2 average pooling with ceil output extents; edge windows average
    /// over the elements actually present, so constants are preserved.
    pub fn avg_pool_2x2(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let ho = h.div_ceil(2);
        let wo = w.div_ceil(2);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            let base = nc * h * w;
            let obase = nc * ho * wo;
            for oh in 0..ho {
                let rows = if 2 * oh + 1 < h { 2 } else { 1 };
                for ow in 0..wo {
                    let cols = if 2 * ow + 1 < w { 2 } else { 1 };
                    let mut acc = 0.0f64;
                    for di in 0..rows {
                        for dj in 0..cols {
                            acc += self.data()[base + (2 * oh + di) * w + 2 * ow + dj].as_f64();
                        }
                    }
                    out[obase + oh * wo + ow] = T::from_f64(acc / (rows * cols) as f64);
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
                    let base = nc * h * w;
                    let obase = nc * ho * wo;
                    for oh in 0..ho {
                        let rows = if 2 * oh + 1 < h { 2 } else { 1 };
                        for ow in 0..wo {
                            let cols = if 2 * ow + 1 < w { 2 } else { 1 };
                            let gv = g[obase + oh * wo + ow].as_f64() / (rows * cols) as f64;
                            for di in 0..rows {
                                for dj in 0..cols {
                                    dx[base + (2 * oh + di) * w + 2 * ow + dj] += T::from_f64(gv);
                                }
                            }
                        }
                    }
                }
                vec![dx]
            }),
            "avg_pool_2x2",
        )
    }
}
