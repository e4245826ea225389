//! Adam optimizer over a ParamStore and a reduce-on-plateau lr schedule.

use indexmap::IndexMap;

use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Bias-corrected first/second moments, keyed by parameter name. Moments are
/// held in f64 so update arithmetic is identical for f32 and f64 stores.
pub struct AdamState {
    pub step: u64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

/// One Adam update over every parameter in the store. A parameter without a
/// gradient this step is treated as having zero gradient (moments decay).
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let names: Vec<String> = store.params().map(|(n, _)| n.clone()).collect();
    for name in names {
        let p = store.get(&name)?;
        let n = p.numel();
        let grad = p.grad();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let mut data: Vec<T> = p.data().to_vec();
        for i in 0..n {
            let g = grad.as_ref().map_or(0.0, |g| g[i].as_f64());
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            data[i] = T::from_f64(data[i].as_f64() - update);
        }
        store.set_param(&name, data)?;
    }
    Ok(())
}

/// Reduce-on-plateau (mode min, relative threshold): after `patience`
/// consecutive epochs without relative improvement, multiply lr by `factor`,
/// floored at `min_lr`.
#[derive(Debug, Clone)]
pub struct PlateauState {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauState {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64, threshold: f64) -> Self {
        PlateauState {
            lr,
            factor,
            patience,
            min_lr,
            threshold,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Feed one validation loss; returns the lr to use next.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => val_loss < best * (1.0 - self.threshold),
        };
        if improved {
            self.best = Some(val_loss);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(data: Vec<f32>) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let n = data.len();
        s.add_param("w", data, &[n]).unwrap();
        s
    }

    fn run_loss(store: &ParamStore<f32>) -> Tensor<f32> {
        // loss = sum(w * w) / 2, grad = w
        let w = store.get("w").unwrap();
        w.mul(&w).unwrap().sum_all().unwrap().affine(0.5, 0.0).unwrap()
    }

    #[test]
    fn fresh_state_zero_grad_is_noop_and_step_increments() {
        let mut store = store_with(vec![1.5, -2.0]);
        let mut st = AdamState::new();
        // no backward run: no grads anywhere
        adam_step(&mut store, &mut st, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(st.step, 1);
        assert_eq!(store.get("w").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn lr_zero_is_noop_even_with_grads() {
        let mut store = store_with(vec![0.3, 0.7, -1.1]);
        run_loss(&store).backward().unwrap();
        let before = store.get("w").unwrap().data().to_vec();
        let mut st = AdamState::new();
        adam_step(&mut store, &mut st, 0.0, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &before[..]);
    }

    #[test]
    fn constant_grad_update_approaches_lr_sign() {
        // drive with a fixed gradient; after bias correction the update
        // magnitude tends to lr * |g| / sqrt(g^2) = lr
        let mut store = store_with(vec![0.0]);
        let mut st = AdamState::new();
        let lr = 1e-2;
        let mut prev = 0.0f32;
        let mut last_delta = 0.0f64;
        for _ in 0..200 {
            let w = store.get("w").unwrap();
            // loss = 3 * w -> grad = 3 everywhere
            w.affine(3.0, 0.0).unwrap().sum_all().unwrap().backward().unwrap();
            adam_step(&mut store, &mut st, lr, 0.9, 0.999, 1e-8).unwrap();
            let cur = store.get("w").unwrap().data()[0];
            last_delta = (cur - prev) as f64;
            prev = cur;
        }
        assert!(
            (last_delta.abs() - lr).abs() < 1e-4,
            "asymptotic step {last_delta} vs lr {lr}"
        );
        assert!(last_delta < 0.0, "positive grad must decrease the param");
        assert_eq!(st.step, 200);
    }

    #[test]
    fn gradient_descent_reduces_quadratic() {
        let mut store = store_with(vec![1.0, -0.8, 0.5]);
        let mut st = AdamState::new();
        let first = run_loss(&store).item();
        for _ in 0..50 {
            run_loss(&store).backward().unwrap();
            adam_step(&mut store, &mut st, 5e-2, 0.9, 0.999, 1e-8).unwrap();
        }
        let last = run_loss(&store).item();
        assert!(last < first * 0.1, "loss {first} -> {last}");
    }

    #[test]
    fn plateau_improving_losses_keep_lr() {
        let mut p = PlateauState::new(1e-4, 0.5, 5, 1e-6, 1e-4);
        for i in 0..20 {
            let lr = p.step(1.0 / (i as f64 + 1.0));
            assert_eq!(lr, 1e-4);
        }
    }

    #[test]
    fn flat_losses_halve_once_after_patience() {
        let mut p = PlateauState::new(1e-4, 0.5, 5, 1e-6, 1e-4);
        // first epoch sets the best, then five flat epochs exhaust patience
        for _ in 0..6 {
            p.step(0.5);
        }
        assert_eq!(p.lr, 5e-5);
        // counter resets: the very next flat epoch must not halve again
        p.step(0.5);
        assert_eq!(p.lr, 5e-5);
    }

    #[test]
    fn lr_floored_at_min() {
        let mut p = PlateauState::new(1e-5, 0.1, 1, 1e-6, 1e-4);
        for _ in 0..50 {
            p.step(1.0);
        }
        assert_eq!(p.lr, 1e-6);
    }

    #[test]
    fn tiny_relative_improvement_counts_as_plateau() {
        let mut p = PlateauState::new(1e-4, 0.5, 2, 1e-6, 1e-4);
        p.step(1.0);
        // 1e-6 relative improvement is below the 1e-4 threshold
        p.step(1.0 - 1e-6);
        p.step(1.0 - 2e-6);
        assert_eq!(p.lr, 5e-5);
    }
}
