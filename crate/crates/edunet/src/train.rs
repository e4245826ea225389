//! Training loop, cross-validated evaluation, and the training log.

use serde::{Deserialize, Serialize};

use crate::blocks::Fwd;
use crate::checkpoint::Checkpoint;
use crate::data::{augment, AugmentConfig, FoldSpec, Sample};
use crate::error::{Error, Result};
use crate::loss::combined_loss;
use crate::metrics::{argmax_mask, evaluate_masks, MetricsReport};
use crate::model::{edunet_forward, init_edunet, EDUNetConfig};
use crate::optim::{adam_step, AdamState, PlateauState};
use crate::params::ParamStore;
use crate::rng::derive_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub sched_factor: f64,
    pub sched_patience: usize,
    pub sched_min_lr: f64,
    pub sched_threshold: f64,
    pub seed: u64,
    pub dice_smooth: f64,
    pub include_background_in_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 1.0,
            lr: 1e-4,
            batch_size: 4,
            max_epochs: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            sched_factor: 0.5,
            sched_patience: 5,
            sched_min_lr: 1e-6,
            sched_threshold: 1e-4,
            seed: 0,
            dice_smooth: 1.0,
            include_background_in_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &EDUNetConfig) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if model.use_global && model.use_local && self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config(
                "alpha and beta cannot both be zero with both branches enabled".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Loss weight for a branch: 0 when the branch is disabled.
    fn weights(&self, model: &EDUNetConfig) -> (f64, f64) {
        (
            if model.use_global { self.alpha } else { 0.0 },
            if model.use_local { self.beta } else { 0.0 },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.8},{:.8},{:.8}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr
        ));
    }
    out
}

pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Stack samples into a [B,1,H,W] image tensor plus flat labels.
pub fn batch_tensors(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let (h, w) = (samples[0].height, samples[0].width);
    let mut image = Vec::with_capacity(samples.len() * h * w);
    let mut mask = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Data(format!(
                "batch mixes extents: `{}` is {}x{}, expected {h}x{w}",
                s.id, s.height, s.width
            )));
        }
        image.extend_from_slice(&s.image);
        mask.extend_from_slice(&s.mask);
    }
    let img = Tensor::leaf(image, &[samples.len(), 1, h, w], false)?;
    Ok((img, mask))
}

fn epoch_loss(
    store: &mut ParamStore<f32>,
    samples: &[&Sample],
    model: &EDUNetConfig,
    cfg: &TrainConfig,
    seed_epoch: u64,
    training: bool,
    lr: f64,
    opt: Option<&mut AdamState>,
) -> Result<f64> {
    let (alpha, beta) = cfg.weights(model);
    let mut opt = opt;
    let mut total = 0.0f64;
    let mut batches = 0usize;
    // detached copy for validation: no backward state gets recorded
    let mut frozen = if training { None } else { Some(store.frozen()) };
    for (bi, chunk) in samples.chunks(cfg.batch_size).enumerate() {
        let (img, mask) = batch_tensors(chunk)?;
        let mut droppath = derive_rng(cfg.seed, "droppath", seed_epoch, bi as u64);
        let loss = {
            let active: &mut ParamStore<f32> = match frozen.as_mut() {
                Some(f) => f,
                None => store,
            };
            let mut ctx = Fwd::new(active, training, &mut droppath);
            let out = edunet_forward(&mut ctx, &img, model)?;
            combined_loss(
                &out,
                &mask,
                alpha,
                beta,
                cfg.dice_smooth,
                cfg.include_background_in_loss,
            )?
        };
        let v = loss.item() as f64;
        if !v.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss {v} at epoch {seed_epoch}, batch {bi}"
            )));
        }
        if training {
            loss.backward()?;
            let opt = opt.as_deref_mut().expect("optimizer required in training");
            adam_step(store, opt, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)?;
        }
        total += v;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Seeded training with plateau scheduling; keeps the checkpoint with the
/// best validation combined loss.
pub fn train(
    train_samples: &[Sample],
    val_samples: &[Sample],
    model: &EDUNetConfig,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
) -> Result<TrainResult> {
    model.validate()?;
    cfg.validate(model)?;
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::Data("empty training or validation fold".into()));
    }
    for s in train_samples.iter().chain(val_samples) {
        s.validate(model.num_classes)?;
    }
    let mut store = ParamStore::<f32>::new();
    let mut init_rng = derive_rng(cfg.seed, "init", 0, 0);
    init_edunet(&mut store, model, &mut init_rng)?;

    let mut opt = AdamState::new();
    let mut sched = PlateauState::new(
        cfg.lr,
        cfg.sched_factor,
        cfg.sched_patience,
        cfg.sched_min_lr,
        cfg.sched_threshold,
    );
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut lr = cfg.lr;

    for epoch in 0..cfg.max_epochs {
        // seeded shuffle + per-sample augmentation streams
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut shuffle_rng = derive_rng(cfg.seed, "shuffle", epoch as u64, 0);
            order.shuffle(&mut shuffle_rng);
        }
        let augmented: Vec<Sample> = order
            .iter()
            .map(|&i| {
                let mut arng = derive_rng(cfg.seed, "augment", epoch as u64, i as u64);
                augment(&train_samples[i], aug, &mut arng)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Sample> = augmented.iter().collect();
        let train_loss = epoch_loss(
            &mut store,
            &refs,
            model,
            cfg,
            epoch as u64,
            true,
            lr,
            Some(&mut opt),
        )?;

        let val_refs: Vec<&Sample> = val_samples.iter().collect();
        let val_loss = epoch_loss(
            &mut store,
            &val_refs,
            model,
            cfg,
            epoch as u64,
            false,
            lr,
            None,
        )?;

        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            let rng_snapshot = derive_rng(cfg.seed, "resume", epoch as u64, 0);
            best = Some((
                epoch,
                val_loss,
                Checkpoint::capture(model, &store, &opt, epoch, &rng_snapshot),
            ));
        }
        log.push(LogRow {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        lr = sched.step(val_loss);
    }

    let (best_epoch, best_val_loss, checkpoint) = match best {
        Some(b) => b,
        // max_epochs = 0: hand back the initialized model, empty log
        None => (
            0,
            f64::INFINITY,
            Checkpoint::capture(model, &store, &opt, 0, &derive_rng(cfg.seed, "resume", 0, 0)),
        ),
    };
    Ok(TrainResult {
        checkpoint,
        log,
        best_epoch,
        best_val_loss,
    })
}

/// Predicted masks for a set of samples under a restored model (eval mode).
pub fn predict_masks(
    store: &mut ParamStore<f32>,
    model: &EDUNetConfig,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<Vec<u8>>> {
    let mut preds = Vec::with_capacity(samples.len());
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut frozen = store.frozen();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (img, _) = batch_tensors(chunk)?;
        let mut rng = derive_rng(0, "eval", 0, 0);
        let mut ctx = Fwd::new(&mut frozen, false, &mut rng);
        let out = edunet_forward(&mut ctx, &img, model)?;
        let labels = argmax_mask(&out.fused_prob)?;
        let per = labels.len() / chunk.len();
        for i in 0..chunk.len() {
            preds.push(labels[i * per..(i + 1) * per].to_vec());
        }
    }
    Ok(preds)
}

pub struct FoldOutcome {
    pub fold: usize,
    pub report: MetricsReport,
    pub result: TrainResult,
}

/// Train one model per fold and score it on the held-out fold. With k = 1
/// this degenerates to train-on-all / eval-on-all (flagged by the caller).
pub fn cross_validate(
    samples: &[Sample],
    folds: &FoldSpec,
    model: &EDUNetConfig,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    pooled: bool,
) -> Result<Vec<FoldOutcome>> {
    let by_id = |ids: &[String]| -> Vec<Sample> {
        samples
            .iter()
            .filter(|s| ids.contains(&s.id))
            .cloned()
            .collect()
    };
    let mut outcomes = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        let val = by_id(&folds.fold_ids(fold));
        let train_set = if folds.k == 1 {
            val.clone()
        } else {
            by_id(&folds.train_ids(fold))
        };
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = cfg.seed.wrapping_add(fold as u64);
        let result = train(&train_set, &val, model, &fold_cfg, aug)?;

        let mut store = ParamStore::<f32>::new();
        let mut rng = derive_rng(fold_cfg.seed, "init", 0, 0);
        init_edunet(&mut store, model, &mut rng)?;
        result.checkpoint.restore_model(&mut store)?;
        let preds = predict_masks(&mut store, model, &val, cfg.batch_size)?;
        let truths: Vec<Vec<u8>> = val.iter().map(|s| s.mask.clone()).collect();
        let report = evaluate_masks(&preds, &truths, model.num_classes, pooled)?;
        outcomes.push(FoldOutcome {
            fold,
            report,
            result,
        });
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn quick_cfg() -> (EDUNetConfig, TrainConfig) {
        let model = EDUNetConfig::tiny(3, 32);
        let cfg = TrainConfig {
            max_epochs: 2,
            batch_size: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        (model, cfg)
    }

    #[test]
    fn zero_epochs_yields_initial_checkpoint_and_empty_log() {
        let samples = synth_generate(2, 32, 1, 3).unwrap();
        let (model, mut cfg) = quick_cfg();
        cfg.max_epochs = 0;
        let r = train(&samples, &samples, &model, &cfg, &AugmentConfig::identity()).unwrap();
        assert!(r.log.is_empty());
        assert!(!r.checkpoint.tensors.is_empty());
    }

    #[test]
    fn empty_fold_rejected() {
        let samples = synth_generate(2, 32, 1, 3).unwrap();
        let (model, cfg) = quick_cfg();
        assert!(train(&[], &samples, &model, &cfg, &AugmentConfig::identity()).is_err());
        assert!(train(&samples, &[], &model, &cfg, &AugmentConfig::identity()).is_err());
    }

    #[test]
    fn same_seed_gives_identical_logs_and_params() {
        let samples = synth_generate(4, 32, 2, 3).unwrap();
        let (model, cfg) = quick_cfg();
        let aug = AugmentConfig::default();
        let a = train(&samples, &samples, &model, &cfg, &aug).unwrap();
        let b = train(&samples, &samples, &model, &cfg, &aug).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint.tensors, b.checkpoint.tensors);
        // a different seed must actually change the trajectory
        let mut cfg2 = cfg.clone();
        cfg2.seed = 1;
        let c = train(&samples, &samples, &model, &cfg2, &aug).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn training_reduces_loss_on_tiny_problem() {
        let samples = synth_generate(4, 32, 3, 3).unwrap();
        let (model, mut cfg) = quick_cfg();
        cfg.max_epochs = 8;
        cfg.lr = 3e-3;
        let r = train(&samples, &samples, &model, &cfg, &AugmentConfig::identity()).unwrap();
        let first = r.log.first().unwrap().train_loss;
        let last = r.log.last().unwrap().train_loss;
        assert!(last < first, "loss did not fall: {first} -> {last}");
    }

    #[test]
    fn weight_validation() {
        let (model, mut cfg) = quick_cfg();
        cfg.alpha = 0.0;
        cfg.beta = 0.0;
        assert!(cfg.validate(&model).is_err());
        cfg.beta = 1.0;
        assert!(cfg.validate(&model).is_ok());
        cfg.lr = 0.0;
        assert!(cfg.validate(&model).is_err());
    }

    #[test]
    fn log_csv_format() {
        let rows = vec![LogRow {
            epoch: 0,
            train_loss: 0.5,
            val_loss: 0.25,
            lr: 1e-4,
        }];
        let csv = log_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,train_loss,val_loss,lr");
        assert_eq!(lines.next().unwrap(), "0,0.50000000,0.25000000,0.00010000");
    }
}
