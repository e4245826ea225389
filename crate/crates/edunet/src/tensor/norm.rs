//! Batch and layer normalization with full backward rules.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Updated running statistics emitted by a training-mode batch norm.
pub struct RunningStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Batch normalization over (N,H,W) per channel.
    ///
    /// Training mode normalizes with the batch statistics and returns the
    /// updated running stats (unbiased variance, momentum blend); eval mode
    /// normalizes with the provided running stats.
    pub fn batch_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running_mean: &[T],
        running_var: &[T],
        training: bool,
        eps: f64,
        momentum: f64,
    ) -> Result<(Tensor<T>, Option<RunningStats<T>>)> {
        let (n, c, h, w) = self.dims4()?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "batch_norm: gamma/beta must be [{c}], got {:?}/{:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm: running stats must have length {c}"
            )));
        }
        let hw = h * w;
        let m = (n * hw) as f64;

        // Per-channel mean/var used for normalization.
        let (mean, var) = if training {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ci in 0..c {
                let mut acc = 0.0f64;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for s in 0..hw {
                        acc += self.data()[base + s].as_f64();
                    }
                }
                mean[ci] = acc / m;
                let mut vacc = 0.0f64;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for s in 0..hw {
                        let d = self.data()[base + s].as_f64() - mean[ci];
                        vacc += d * d;
                    }
                }
                var[ci] = vacc / m;
            }
            (mean, var)
        } else {
            (
                running_mean.iter().map(|v| v.as_f64()).collect(),
                running_var.iter().map(|v| v.as_f64()).collect(),
            )
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![T::zero(); self.numel()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let g = gamma.data()[ci].as_f64();
                let b = beta.data()[ci].as_f64();
                for s in 0..hw {
                    let xhat = (self.data()[base + s].as_f64() - mean[ci]) * inv_std[ci];
                    out[base + s] = T::from_f64(g * xhat + b);
                }
            }
        }

        let updated = if training {
            let mut rm = Vec::with_capacity(c);
            let mut rv = Vec::with_capacity(c);
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ci in 0..c {
                rm.push(T::from_f64(
                    (1.0 - momentum) * running_mean[ci].as_f64() + momentum * mean[ci],
                ));
                rv.push(T::from_f64(
                    (1.0 - momentum) * running_var[ci].as_f64() + momentum * var[ci] * unbias,
                ));
            }
            Some(RunningStats { mean: rm, var: rv })
        } else {
            None
        };

        let x = self.data().to_vec();
        let gv = gamma.data().to_vec();
        let out_t = Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |gr| {
                let mut dx = vec![T::zero(); x.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ci in 0..c {
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for s in 0..hw {
                            let dy = gr[base + s].as_f64();
                            let xhat = (x[base + s].as_f64() - mean[ci]) * inv_std[ci];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                    }
                    dgamma[ci] = T::from_f64(sum_dy_xhat);
                    dbeta[ci] = T::from_f64(sum_dy);
                    let gs = gv[ci].as_f64() * inv_std[ci];
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for s in 0..hw {
                            let dy = gr[base + s].as_f64();
                            let xhat = (x[base + s].as_f64() - mean[ci]) * inv_std[ci];
                            let v = if training {
                                gs * (dy - sum_dy / m - xhat * sum_dy_xhat / m)
                            } else {
                                gs * dy
                            };
                            dx[base + s] = T::from_f64(v);
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            }),
            "batch_norm",
        )?;
        Ok((out_t, updated))
    }

    /// Layer normalization over the channel axis per spatial position.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "layer_norm: gamma/beta must be [{c}], got {:?}/{:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let hw = h * w;
        let m = c as f64;
        let pos = n * hw;
        let mut mean = vec![0.0f64; pos];
        let mut inv_std = vec![0.0f64; pos];
        let mut out = vec![T::zero(); self.numel()];
        for ni in 0..n {
            for s in 0..hw {
                let p = ni * hw + s;
                let at = |ci: usize| (ni * c + ci) * hw + s;
                let mut acc = 0.0f64;
                for ci in 0..c {
                    acc += self.data()[at(ci)].as_f64();
                }
                let mu = acc / m;
                let mut vacc = 0.0f64;
                for ci in 0..c {
                    let d = self.data()[at(ci)].as_f64() - mu;
                    vacc += d * d;
                }
                mean[p] = mu;
                inv_std[p] = 1.0 / (vacc / m + eps).sqrt();
                for ci in 0..c {
                    let xhat = (self.data()[at(ci)].as_f64() - mu) * inv_std[p];
                    out[at(ci)] =
                        T::from_f64(gamma.data()[ci].as_f64() * xhat + beta.data()[ci].as_f64());
                }
            }
        }
        let x = self.data().to_vec();
        let gv = gamma.data().to_vec();
        Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |gr| {
                let mut dx = vec![T::zero(); x.len()];
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for ni in 0..n {
                    for s in 0..hw {
                        let p = ni * hw + s;
                        let at = |ci: usize| (ni * c + ci) * hw + s;
                        let mut sum_dyg = 0.0f64;
                        let mut sum_dyg_xhat = 0.0f64;
                        for ci in 0..c {
                            let dy = gr[at(ci)].as_f64();
                            let xhat = (x[at(ci)].as_f64() - mean[p]) * inv_std[p];
                            dgamma[ci] += dy * xhat;
                            dbeta[ci] += dy;
                            let dyg = dy * gv[ci].as_f64();
                            sum_dyg += dyg;
                            sum_dyg_xhat += dyg * xhat;
                        }
                        for ci in 0..c {
                            let dyg = gr[at(ci)].as_f64() * gv[ci].as_f64();
                            let xhat = (x[at(ci)].as_f64() - mean[p]) * inv_std[p];
                            dx[at(ci)] = T::from_f64(
                                inv_std[p] * (dyg - sum_dyg / m - xhat * sum_dyg_xhat / m),
                            );
                        }
                    }
                }
                vec![
                    dx,
                    dgamma.into_iter().map(T::from_f64).collect(),
                    dbeta.into_iter().map(T::from_f64).collect(),
                ]
            }),
            "layer_norm",
        )
    }
}
