//! Segmentation metrics: per-class Dice coefficient and sensitivity from
//! pixel counts, with per-image or pooled aggregation and fold-level
//! mean/std summaries.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Argmax over channels of a probability/logit map: [N,C,H,W] -> N*H*W labels.
pub fn argmax_mask<T: Scalar>(prob: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, c, h, w) = prob.dims4()?;
    if c > u8::MAX as usize {
        return Err(Error::Invalid(format!("argmax_mask: {c} classes exceed u8")));
    }
    let mut out = vec![0u8; n * h * w];
    let data = prob.data();
    for img in 0..n {
        for pix in 0..h * w {
            let mut best = 0usize;
            let mut best_v = data[img * c * h * w + pix];
            for ch in 1..c {
                let v = data[(img * c + ch) * h * w + pix];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            out[img * h * w + pix] = best as u8;
        }
    }
    Ok(out)
}

/// Pixel counts for one class over one mask pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
}

impl ClassCounts {
    pub fn absent(&self) -> bool {
        self.tp + self.fn_ + self.fp == 0
    }

    pub fn dsc(&self) -> Option<f64> {
        if self.absent() {
            None
        } else {
            Some(2.0 * self.tp as f64 / (2 * self.tp + self.fn_ + self.fp) as f64)
        }
    }

    pub fn sensitivity(&self) -> Option<f64> {
        if self.tp + self.fn_ == 0 {
            None
        } else {
            Some(self.tp as f64 / (self.tp + self.fn_) as f64)
        }
    }

    pub fn merge(&mut self, other: &ClassCounts) {
        self.tp += other.tp;
        self.fn_ += other.fn_;
        self.fp += other.fp;
    }
}

pub fn count_class(pred: &[u8], truth: &[u8], class: u8) -> Result<ClassCounts> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "count_class: {} pred vs {} truth pixels",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ClassCounts::default();
    for (p, t) in pred.iter().zip(truth) {
        match (*p == class, *t == class) {
            (true, true) => c.tp += 1,
            (false, true) => c.fn_ += 1,
            (true, false) => c.fp += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// Per-class evaluation over one set of mask pairs.
#[derive(Debug, Clone)]
pub struct ClassStats {
    pub class: usize,
    /// None when the class was absent from every pred/truth pair.
    pub dsc: Option<f64>,
    pub sensitivity: Option<f64>,
    /// Samples contributing to the DSC average (class present somewhere).
    pub n_scored: usize,
    pub counts: ClassCounts,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub per_class: Vec<ClassStats>,
    pub pooled: bool,
}

/// Score foreground classes (1..C). Per-image mode averages each sample's
/// ratio, excluding samples where the class is absent from both masks;
/// pooled mode sums counts first and takes a single ratio.
pub fn evaluate_masks(
    preds: &[Vec<u8>],
    truths: &[Vec<u8>],
    num_classes: usize,
    pooled: bool,
) -> Result<MetricsReport> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!(
            "evaluate_masks: {} preds vs {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let mut per_class = Vec::new();
    for class in 1..num_classes {
        let mut total = ClassCounts::default();
        let mut dscs = Vec::new();
        let mut senss = Vec::new();
        for (p, t) in preds.iter().zip(truths) {
            let c = count_class(p, t, class as u8)?;
            total.merge(&c);
            if let Some(d) = c.dsc() {
                dscs.push(d);
            }
            if let Some(s) = c.sensitivity() {
                senss.push(s);
            }
        }
        let (dsc, sensitivity) = if pooled {
            (total.dsc(), total.sensitivity())
        } else {
            (mean(&dscs), mean(&senss))
        };
        per_class.push(ClassStats {
            class,
            dsc,
            sensitivity,
            n_scored: dscs.len(),
            counts: total,
        });
    }
    Ok(MetricsReport { per_class, pooled })
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Sample standard deviation (n-1); None for fewer than two values.
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    let m = match mean(xs) {
        Some(m) => m,
        None => return (None, None),
    };
    if xs.len() < 2 {
        return (Some(m), None);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (Some(m), Some(var.sqrt()))
}

/// One CSV row per (fold, class) plus aggregate mean/std rows per class.
/// Header: `dataset,fold,class,dsc,sensitivity,tp,fn,fp`.
pub fn metrics_csv(dataset: &str, per_fold: &[(usize, MetricsReport)]) -> String {
    let mut out = String::from("dataset,fold,class,dsc,sensitivity,tp,fn,fp\n");
    let fmt = |v: Option<f64>| match v {
        Some(v) => format!("{v:.6}"),
        None => "n/a".to_string(),
    };
    let mut classes: Vec<usize> = Vec::new();
    for (fold, report) in per_fold {
        for cs in &report.per_class {
            if !classes.contains(&cs.class) {
                classes.push(cs.class);
            }
            out.push_str(&format!(
                "{dataset},{fold},{class},{dsc},{sens},{tp},{fn_},{fp}\n",
                class = cs.class,
                dsc = fmt(cs.dsc),
                sens = fmt(cs.sensitivity),
                tp = cs.counts.tp,
                fn_ = cs.counts.fn_,
                fp = cs.counts.fp,
            ));
        }
    }
    for class in classes {
        let collect = |f: &dyn Fn(&ClassStats) -> Option<f64>| -> Vec<f64> {
            per_fold
                .iter()
                .flat_map(|(_, r)| r.per_class.iter())
                .filter(|cs| cs.class == class)
                .filter_map(f)
                .collect()
        };
        let dscs = collect(&|cs| cs.dsc);
        let senss = collect(&|cs| cs.sensitivity);
        let agg = |xs: &[f64]| -> String {
            match mean_std(xs) {
                (Some(m), Some(s)) => format!("{m:.6}\u{b1}{s:.6}"),
                (Some(m), None) => format!("{m:.6}"),
                _ => "n/a".to_string(),
            }
        };
        out.push_str(&format!(
            "{dataset},aggregate,{class},{},{},,,\n",
            agg(&dscs),
            agg(&senss)
        ));
    }
    out
}
