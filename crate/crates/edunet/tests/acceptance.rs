//! End-to-end acceptance gate. Each criterion prints one pass/fail line;
//! run with `--nocapture` to see them on success.

use std::sync::OnceLock;

use rand::Rng;

use edunet::blocks::Fwd;
use edunet::checkpoint::Checkpoint;
use edunet::data::{synth_generate, AugmentConfig, Sample};
use edunet::gradcam::gradcam;
use edunet::gradcheck_suite::{run_suite, suite_names};
use edunet::loss::combined_loss;
use edunet::metrics::{evaluate_masks, metrics_csv};
use edunet::model::{
    attention_maps, edunet_forward, init_edunet, EDUNetConfig, FgMode,
};
use edunet::optim::{adam_step, AdamState};
use edunet::params::ParamStore;
use edunet::pyramid::{build_pyramid, BLUR_KSIZE, BLUR_SIGMA};
use edunet::rng::derive_rng;
use edunet::tensor::Tensor;
use edunet::train::{batch_tensors, log_csv, predict_masks, train, TrainConfig};

fn report(criterion: usize, label: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion} ({label}): {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({label}) failed: {detail}");
}

// ---- 1: gradient integrity -------------------------------------------------

#[test]
fn criterion_1_gradient_integrity() {
    let start = std::time::Instant::now();
    let results = run_suite(&suite_names(), 0).unwrap();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    let all_pass = results.iter().all(|r| r.passed);
    report(
        1,
        "gradient integrity",
        all_pass && start.elapsed().as_secs() < 300,
        &format!(
            "{} checks, worst {} at {:.3e}, {:?}",
            results.len(),
            worst.name,
            worst.max_rel_err,
            start.elapsed()
        ),
    );
}

// ---- 2: metric oracle equivalence ------------------------------------------

fn oracle_counts(pred: &[u8], truth: &[u8], class: u8) -> (u64, u64, u64) {
    let mut tp = 0u64;
    let mut fn_ = 0u64;
    let mut fp = 0u64;
    for i in 0..pred.len() {
        if truth[i] == class {
            if pred[i] == class {
                tp += 1;
            } else {
                fn_ += 1;
            }
        } else if pred[i] == class {
            fp += 1;
        }
    }
    (tp, fn_, fp)
}

#[test]
fn criterion_2_metric_oracle() {
    let mut rng = derive_rng(2, "acceptance", 0, 0);
    let mut checked = 0usize;
    for trial in 0..50 {
        let h = rng.gen_range(1..=32usize);
        let w = rng.gen_range(1..=32usize);
        let c = rng.gen_range(2..=4usize);
        let pred: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c as u8)).collect();
        let truth: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c as u8)).collect();
        let rep = evaluate_masks(&[pred.clone()], &[truth.clone()], c, false).unwrap();
        for cs in &rep.per_class {
            let (tp, fn_, fp) = oracle_counts(&pred, &truth, cs.class as u8);
            assert_eq!(
                (cs.counts.tp, cs.counts.fn_, cs.counts.fp),
                (tp, fn_, fp),
                "trial {trial} class {} counts",
                cs.class
            );
            let denom = 2 * tp + fn_ + fp;
            let want_dsc = if denom == 0 {
                None
            } else {
                Some(2.0 * tp as f64 / denom as f64)
            };
            let want_sens = if tp + fn_ == 0 {
                None
            } else {
                Some(tp as f64 / (tp + fn_) as f64)
            };
            match (cs.dsc, want_dsc) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (a, b) => assert_eq!(a, b),
            }
            match (cs.sensitivity, want_sens) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (a, b) => assert_eq!(a, b),
            }
            checked += 1;
        }
    }
    // pooled mode: two images, single ratio over summed counts
    let preds = vec![vec![0u8, 1, 1, 2], vec![1u8, 1, 0, 0]];
    let truths = vec![vec![1u8, 1, 2, 2], vec![1u8, 0, 0, 2]];
    let rep = evaluate_masks(&preds, &truths, 3, true).unwrap();
    for cs in &rep.per_class {
        let (mut tp, mut fn_, mut fp) = (0, 0, 0);
        for (p, t) in preds.iter().zip(&truths) {
            let (a, b, c) = oracle_counts(p, t, cs.class as u8);
            tp += a;
            fn_ += b;
            fp += c;
        }
        let want = 2.0 * tp as f64 / (2 * tp + fn_ + fp) as f64;
        assert!((cs.dsc.unwrap() - want).abs() < 1e-9, "pooled class {}", cs.class);
        checked += 1;
    }
    report(2, "metric oracle", true, &format!("{checked} class comparisons"));
}

// ---- 3: pyramid identities -------------------------------------------------

#[test]
fn criterion_3_pyramid_identities() {
    let mut rng = derive_rng(3, "acceptance", 0, 0);
    for trial in 0..20 {
        let h = 2 * rng.gen_range(8..=24usize);
        let w = 2 * rng.gen_range(8..=24usize);
        let data: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Tensor::leaf(data, &[1, 1, h, w], false).unwrap();
        let blurred = img.gaussian_blur(BLUR_SIGMA, BLUR_KSIZE).unwrap();
        let pyr = build_pyramid(&img, 2, BLUR_SIGMA, BLUR_KSIZE).unwrap();
        let rebuilt = blurred.add(&pyr.levels[0]).unwrap();
        for (a, b) in img.data().iter().zip(rebuilt.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "trial {trial}: not bit-exact");
        }
    }
    // constant input: every level must vanish
    let img = Tensor::full(&[1, 1, 32, 32], 0.37f32);
    let pyr = build_pyramid(&img, 3, BLUR_SIGMA, BLUR_KSIZE).unwrap();
    let max = pyr
        .levels
        .iter()
        .flat_map(|l| l.data().iter().map(|v| v.abs()))
        .fold(0.0f32, f32::max);
    report(
        3,
        "pyramid identities",
        max < 1e-7,
        &format!("constant-image residual {max:.3e}"),
    );
}

// ---- 4: attention normalization --------------------------------------------

#[test]
fn criterion_4_attention_normalization() {
    let mut rng = derive_rng(4, "acceptance", 0, 0);
    let mut worst = 0.0f64;
    for c in 2..=4usize {
        let logits: Vec<f32> = (0..c * 16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let f_pred = Tensor::leaf(logits, &[1, c, 4, 4], false).unwrap();
        let (a_bg, a_fg) = attention_maps(&f_pred, 8, 8, FgMode::Mean).unwrap();
        for (b, f) in a_bg.data().iter().zip(a_fg.data()) {
            let total = *b as f64 + (c - 1) as f64 * *f as f64;
            worst = worst.max((total - 1.0).abs());
        }
        if c == 2 {
            let (_, alt) = attention_maps(&f_pred, 8, 8, FgMode::OneMinusBg).unwrap();
            for (a, b) in a_fg.data().iter().zip(alt.data()) {
                worst = worst.max((*a as f64 - *b as f64).abs());
            }
        }
    }
    report(
        4,
        "attention normalization",
        worst < 1e-6,
        &format!("max deviation {worst:.3e}"),
    );
}

// ---- 5 + 9: synthetic overfit and Grad-CAM ---------------------------------

// Tensors are Rc-backed, so the shared fit keeps raw weight vectors and each
// criterion rebuilds a store from them.
struct Overfit {
    samples: Vec<Sample>,
    params: Vec<(String, Vec<f32>)>,
    buffers: Vec<(String, Vec<f32>)>,
    model: EDUNetConfig,
    epochs: usize,
    mean_fg_dsc: f64,
    elapsed: std::time::Duration,
}

impl Overfit {
    /// Fresh store with the trained weights as live leaves (Grad-CAM needs a
    /// graph, so `frozen()` is not enough here).
    fn store(&self) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let mut rng = derive_rng(0, "init", 0, 0);
        init_edunet(&mut s, &self.model, &mut rng).unwrap();
        for (n, v) in &self.params {
            s.set_param(n, v.clone()).unwrap();
        }
        for (n, v) in &self.buffers {
            s.set_buffer(n, v.clone()).unwrap();
        }
        s
    }
}

fn mean_fg_dsc(preds: &[Vec<u8>], samples: &[Sample], classes: usize) -> f64 {
    let truths: Vec<Vec<u8>> = samples.iter().map(|s| s.mask.clone()).collect();
    let rep = evaluate_masks(preds, &truths, classes, false).unwrap();
    let ds: Vec<f64> = rep.per_class.iter().filter_map(|c| c.dsc).collect();
    ds.iter().sum::<f64>() / ds.len() as f64
}

fn overfit() -> &'static Overfit {
    static CELL: OnceLock<Overfit> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = std::time::Instant::now();
        let samples = synth_generate(8, 64, 42, 3).unwrap();
        let model = EDUNetConfig::tiny(3, 64);
        let mut store = ParamStore::<f32>::new();
        let mut init_rng = derive_rng(42, "init", 0, 0);
        init_edunet(&mut store, &model, &mut init_rng).unwrap();
        let mut opt = AdamState::new();
        let refs: Vec<&Sample> = samples.iter().collect();
        let (img, mask) = batch_tensors(&refs).unwrap();

        let mut epochs = 0usize;
        let mut dsc = 0.0f64;
        for epoch in 0..300u64 {
            // warm lr, then decay: full-batch Adam stalls at a flat 1e-2
            let lr = match epoch {
                0..=19 => 1e-2,
                20..=39 => 5e-3,
                _ => 2.5e-3,
            };
            let mut drng = derive_rng(42, "droppath", epoch, 0);
            let loss = {
                let mut ctx = Fwd::new(&mut store, true, &mut drng);
                let out = edunet_forward(&mut ctx, &img, &model).unwrap();
                combined_loss(&out, &mask, 1.0, 1.0, 1.0, false).unwrap()
            };
            assert!(loss.item().is_finite(), "loss diverged at epoch {epoch}");
            loss.backward().unwrap();
            adam_step(&mut store, &mut opt, lr, 0.9, 0.999, 1e-8).unwrap();
            epochs = epoch as usize + 1;
            if epochs % 10 == 0 {
                let preds = predict_masks(&mut store, &model, &samples, 8).unwrap();
                dsc = mean_fg_dsc(&preds, &samples, model.num_classes);
                if dsc >= 0.93 {
                    break;
                }
            }
        }
        Overfit {
            samples,
            params: store
                .params()
                .map(|(n, t)| (n.clone(), t.data().to_vec()))
                .collect(),
            buffers: store
                .buffers()
                .map(|(n, t)| (n.clone(), t.data().to_vec()))
                .collect(),
            model,
            epochs,
            mean_fg_dsc: dsc,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_5_synthetic_overfit() {
    let fit = overfit();

    // fused vs single-branch masks on the same eval forward (reported only)
    let mut frozen = fit.store().frozen();
    let refs: Vec<&Sample> = fit.samples.iter().collect();
    let (img, _) = batch_tensors(&refs).unwrap();
    let mut rng = derive_rng(0, "eval", 0, 0);
    let mut ctx = Fwd::new(&mut frozen, false, &mut rng);
    let out = edunet_forward(&mut ctx, &img, &fit.model).unwrap();
    let per_image = |prob: &Tensor<f32>| -> f64 {
        let labels = edunet::metrics::argmax_mask(prob).unwrap();
        let per = labels.len() / fit.samples.len();
        let preds: Vec<Vec<u8>> = (0..fit.samples.len())
            .map(|i| labels[i * per..(i + 1) * per].to_vec())
            .collect();
        mean_fg_dsc(&preds, &fit.samples, fit.model.num_classes)
    };
    let fused = per_image(&out.fused_prob);
    let global = per_image(&out.logits_global.as_ref().unwrap().softmax_channels().unwrap());
    let local = per_image(&out.logits_local.as_ref().unwrap().softmax_channels().unwrap());
    println!(
        "criterion 5 fusion echo: fused {fused:.4}, global {global:.4}, local {local:.4}, \
         fused >= worse branch: {}",
        fused >= global.min(local)
    );

    report(
        5,
        "synthetic overfit",
        fit.mean_fg_dsc >= 0.90 && fit.elapsed.as_secs() < 900,
        &format!(
            "mean foreground DSC {:.4} after {} epochs in {:?}",
            fit.mean_fg_dsc, fit.epochs, fit.elapsed
        ),
    );
}

#[test]
fn criterion_9_gradcam_sanity() {
    let fit = overfit();
    let mut store = fit.store();
    let (h, w) = (64usize, 64usize);
    let mut hits = 0usize;
    let mut ious = Vec::new();
    for s in &fit.samples {
        let img = Tensor::leaf(s.image.clone(), &[1, 1, h, w], false).unwrap();
        let heat = gradcam(&mut store, &fit.model, &img, "local.dec3").unwrap();
        // top-decile heat region vs true lesion pixels
        let mut sorted = heat.clone();
        sorted.sort_by(f32::total_cmp);
        let thresh = sorted[(sorted.len() * 9) / 10];
        let mut inter = 0usize;
        let mut union = 0usize;
        for i in 0..h * w {
            let hot = heat[i] >= thresh && heat[i] > 0.0;
            let fg = s.mask[i] > 0;
            if hot && fg {
                inter += 1;
            }
            if hot || fg {
                union += 1;
            }
        }
        let iou = if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        };
        if iou > 0.05 {
            hits += 1;
        }
        ious.push(iou);
    }
    report(
        9,
        "gradcam sanity",
        hits >= 6,
        &format!("{hits}/8 samples with IoU > 0.05 ({ious:.3?})"),
    );
}

// ---- 6: ablation closure ----------------------------------------------------

#[test]
fn criterion_6_ablation_closure() {
    // 32x32 set keeps five 20-epoch runs inside a sane CPU budget
    let samples = synth_generate(6, 32, 7, 3).unwrap();
    let rows: [(&str, bool, bool, bool); 5] = [
        ("global_only", true, false, false),
        ("local_only", false, true, false),
        ("global_local", true, true, false),
        ("global_mcega", true, false, true),
        ("full", true, true, true),
    ];
    let mut reports = Vec::new();
    for (i, (name, g, l, m)) in rows.iter().enumerate() {
        let mut model = EDUNetConfig::tiny(3, 32);
        model.use_global = *g;
        model.use_local = *l;
        model.use_mcega = *m;
        let cfg = TrainConfig {
            max_epochs: 20,
            batch_size: 6,
            lr: 1e-3,
            seed: 100 + i as u64,
            ..TrainConfig::default()
        };
        let result = train(&samples, &samples, &model, &cfg, &AugmentConfig::identity())
            .unwrap_or_else(|e| panic!("ablation row {name}: {e}"));
        assert_eq!(result.log.len(), 20, "{name}: incomplete run");
        for row in &result.log {
            assert!(
                row.train_loss.is_finite() && row.val_loss.is_finite(),
                "{name}: non-finite loss at epoch {}",
                row.epoch
            );
        }
        // score the best checkpoint so every row emits a well-formed report
        let mut store = ParamStore::new();
        let mut rng = derive_rng(cfg.seed, "init", 0, 0);
        init_edunet(&mut store, &model, &mut rng).unwrap();
        result.checkpoint.restore_model(&mut store).unwrap();
        let preds = predict_masks(&mut store, &model, &samples, 6).unwrap();
        let truths: Vec<Vec<u8>> = samples.iter().map(|s| s.mask.clone()).collect();
        let rep = evaluate_masks(&preds, &truths, 3, false).unwrap();
        reports.push((i, rep));
    }
    let csv = metrics_csv("ablation", &reports);
    let lines = csv.lines().count();
    report(
        6,
        "ablation closure",
        lines == 1 + 5 * 2 + 2,
        &format!("5 rows trained, report has {lines} lines"),
    );
}

// ---- 7: determinism & persistence -------------------------------------------

#[test]
fn criterion_7_determinism_and_persistence() {
    let samples = synth_generate(4, 32, 11, 3).unwrap();
    let model = EDUNetConfig::tiny(3, 32);
    let cfg = TrainConfig {
        max_epochs: 3,
        batch_size: 2,
        lr: 1e-3,
        seed: 9,
        ..TrainConfig::default()
    };
    let aug = AugmentConfig::identity();
    let a = train(&samples, &samples, &model, &cfg, &aug).unwrap();
    let b = train(&samples, &samples, &model, &cfg, &aug).unwrap();
    let logs_equal = log_csv(&a.log) == log_csv(&b.log);

    let dir = tempfile::tempdir().unwrap();
    let pa = dir.path().join("a.ckpt");
    let pb = dir.path().join("b.ckpt");
    a.checkpoint.save(&pa).unwrap();
    b.checkpoint.save(&pb).unwrap();
    let ckpts_equal = std::fs::read(&pa).unwrap() == std::fs::read(&pb).unwrap();

    // save -> load -> forward must match the pre-save forward bit for bit
    let mut store = ParamStore::new();
    let mut rng = derive_rng(cfg.seed, "init", 0, 0);
    init_edunet(&mut store, &model, &mut rng).unwrap();
    a.checkpoint.restore_model(&mut store).unwrap();
    let refs: Vec<&Sample> = samples.iter().collect();
    let (img, _) = batch_tensors(&refs).unwrap();
    let forward = |st: &ParamStore<f32>| -> Vec<f32> {
        let mut frozen = st.frozen();
        let mut r = derive_rng(0, "eval", 0, 0);
        let mut ctx = Fwd::new(&mut frozen, false, &mut r);
        edunet_forward(&mut ctx, &img, &model)
            .unwrap()
            .fused_prob
            .data()
            .to_vec()
    };
    let before = forward(&store);
    let loaded = Checkpoint::load(&pa).unwrap();
    let mut store2 = ParamStore::new();
    let mut rng2 = derive_rng(777, "init", 0, 0); // different init, then restore
    init_edunet(&mut store2, &model, &mut rng2).unwrap();
    loaded.restore_model(&mut store2).unwrap();
    let after = forward(&store2);
    let roundtrip_equal = before.len() == after.len()
        && before
            .iter()
            .zip(&after)
            .all(|(x, y)| x.to_bits() == y.to_bits());

    report(
        7,
        "determinism & persistence",
        logs_equal && ckpts_equal && roundtrip_equal,
        &format!("logs {logs_equal}, checkpoints {ckpts_equal}, round-trip {roundtrip_equal}"),
    );
}

// ---- 8: shape contract -------------------------------------------------------

#[test]
fn criterion_8_shape_contract() {
    let cases = [(EDUNetConfig::b0(3, 512), 512usize), (EDUNetConfig::tiny(3, 64), 64)];
    for (model, size) in cases {
        let mut store = ParamStore::<f32>::new();
        let mut rng = derive_rng(8, "init", 0, 0);
        init_edunet(&mut store, &model, &mut rng).unwrap();
        let mut frozen = store.frozen();
        drop(store);
        let data: Vec<f32> = (0..size * size).map(|i| (i % 97) as f32 / 97.0).collect();
        let img = Tensor::leaf(data, &[1, 1, size, size], false).unwrap();
        let mut r = derive_rng(0, "eval", 0, 0);
        let mut ctx = Fwd::new(&mut frozen, false, &mut r);
        let out = edunet_forward(&mut ctx, &img, &model).unwrap();
        let want = [1usize, 3, size, size];
        assert_eq!(out.logits_global.as_ref().unwrap().shape(), want);
        assert_eq!(out.logits_local.as_ref().unwrap().shape(), want);
        assert_eq!(out.fused_prob.shape(), want);
    }
    report(8, "shape contract", true, "b0@512 and tiny@64 logits match input extents");
}
