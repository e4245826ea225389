//! Central finite-difference verification of backward rules.

use rand::seq::index::sample;
use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug)]
pub struct GradCheckReport {
    /// Max relative error observed per input tensor.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences.
///
/// `f` must build its graph from the given leaves. At most
/// `max_samples_per_input` coordinates per input are probed (all of them if
/// the input is small enough); this is the independent oracle, it never goes
/// through `backward`.
pub fn grad_check<T, F>(
    f: &F,
    inputs: &[(Vec<T>, Vec<usize>)],
    max_samples_per_input: usize,
    step: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    let leaves: Vec<Tensor<T>> = inputs
        .iter()
        .map(|(d, s)| Tensor::leaf(d.clone(), s, true))
        .collect::<Result<_>>()?;
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::Invalid(format!(
            "grad_check: function output must be scalar, got {:?}",
            out.shape()
        )));
    }
    out.backward()?;
    let analytic: Vec<Vec<T>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![T::zero(); l.numel()]))
        .collect();

    let eval = |probe: usize, idx: usize, delta: f64| -> Result<f64> {
        let leaves: Vec<Tensor<T>> = inputs
            .iter()
            .enumerate()
            .map(|(k, (d, s))| {
                let mut d = d.clone();
                if k == probe {
                    d[idx] = T::from_f64(d[idx].as_f64() + delta);
                }
                Tensor::leaf(d, s, false)
            })
            .collect::<Result<_>>()?;
        Ok(f(&leaves)?.item().as_f64())
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    for (k, (d, _)) in inputs.iter().enumerate() {
        let idxs: Vec<usize> = if d.len() <= max_samples_per_input {
            (0..d.len()).collect()
        } else {
            sample(rng, d.len(), max_samples_per_input).into_vec()
        };
        let mut worst = 0.0f64;
        for idx in idxs {
            let fp = eval(k, idx, step)?;
            let fm = eval(k, idx, -step)?;
            let fd = (fp - fm) / (2.0 * step);
            let a = analytic[k][idx].as_f64();
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_err,
    })
}
