//! Named finite-difference gradient checks over every differentiable op and
//! composite block, runnable from the CLI and from the acceptance tests.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    cbam, init_cbam, init_lkec, init_mbconv, init_se, lkec_block, mbconv, se_block, BlockConfig,
    Fwd,
};
use crate::error::{Error, Result};
use crate::loss::dice_loss;
use crate::model::{edunet_forward, init_edunet, init_mc_ega, mc_ega, EDUNetConfig, FgMode};
use crate::params::{ParamBuilder, ParamStore};
use crate::pyramid::{build_pyramid, BLUR_KSIZE, BLUR_SIGMA};
use crate::rng::derive_rng;
use crate::tensor::{concat_channels, grad_check, ActKind, PoolKind, Tensor};

pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub max_rel_err: f64,
}

const TOL: f64 = 1e-5;
const STEP: f64 = 1e-5;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

type CheckFn = fn(&mut ChaCha8Rng) -> Result<f64>;

fn check_unary(
    rng: &mut ChaCha8Rng,
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<f64> {
    let data = rand_vec(rng, 2 * 3 * 4 * 4, -2.0, 2.0);
    let report = grad_check(
        &|inp: &[Tensor<f64>]| f(&inp[0])?.sum_all(),
        &[(data, vec![2, 3, 4, 4])],
        24,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}

fn check_binary(
    rng: &mut ChaCha8Rng,
    f: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
    positive_rhs: bool,
) -> Result<f64> {
    let a = rand_vec(rng, 48, -2.0, 2.0);
    let b = if positive_rhs {
        rand_vec(rng, 48, 0.5, 2.5)
    } else {
        rand_vec(rng, 48, -2.0, 2.0)
    };
    let report = grad_check(
        &|inp: &[Tensor<f64>]| f(&inp[0], &inp[1])?.sum_all(),
        &[(a, vec![1, 3, 4, 4]), (b, vec![1, 3, 4, 4])],
        16,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}

/// Weighted readout so softmax-style outputs keep a non-trivial gradient.
fn readout(t: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let w = Tensor::constant(rand_vec(rng, t.numel(), -1.0, 1.0), t.shape())?;
    t.mul(&w)?.sum_all()
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_unary(rng, |x| x.activation(ActKind::Relu))
}
fn check_gelu(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_unary(rng, |x| x.activation(ActKind::Gelu))
}
fn check_swish(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_unary(rng, |x| x.activation(ActKind::Swish))
}
fn check_sigmoid(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_unary(rng, |x| x.activation(ActKind::Sigmoid))
}
fn check_add(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_binary(rng, |a, b| a.add(b), false)
}
fn check_sub(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_binary(rng, |a, b| a.sub(b), false)
}
fn check_mul(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_binary(rng, |a, b| a.mul(b), false)
}
fn check_div(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_binary(rng, |a, b| a.div(b), true)
}
fn check_affine(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_unary(rng, |x| x.affine(1.7, -0.3))
}
fn check_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let data = rand_vec(rng, 3 * 16, -3.0, 3.0);
    let seed = rng.clone();
    let report = grad_check(
        &|inp: &[Tensor<f64>]| readout(&inp[0].softmax_channels()?, &mut seed.clone()),
        &[(data, vec![1, 3, 4, 4])],
        24,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}
fn check_linear(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = rand_vec(rng, 2 * 5, -1.0, 1.0);
    let w = rand_vec(rng, 3 * 5, -1.0, 1.0);
    let b = rand_vec(rng, 3, -1.0, 1.0);
    let report = grad_check(
        &|inp: &[Tensor<f64>]| inp[0].linear(&inp[1], Some(&inp[2]))?.sum_all(),
        &[(x, vec![2, 5]), (w, vec![3, 5]), (b, vec![3])],
        16,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}
fn check_conv2d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = rand_vec(rng, 2 * 3 * 6 * 6, -1.0, 1.0);
    let w = rand_vec(rng, 4 * 3 * 3 * 3, -1.0, 1.0);
    let b = rand_vec(rng, 4, -1.0, 1.0);
    let report = grad_check(
        &|inp: &[Tensor<f64>]| inp[0].conv2d(&inp[1], Some(&inp[2]), 1, 1, 1)?.sum_all(),
        &[
            (x, vec![2, 3, 6, 6]),
            (w, vec![4, 3, 3, 3]),
            (b, vec![4]),
        ],
        20,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}
fn check_conv_depthwise(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = rand_vec(rng, 3 * 6 * 6, -1.0, 1.0);
    let w = rand_vec(rng, 3 * 3 * 3, -1.0, 1.0);
    let report = grad_check(
        &|inp: &[Tensor<f64>]| inp[0].conv2d(&inp[1], None, 1, 1, 3)?.sum_all(),
        &[(x, vec![1, 3, 6, 6]), (w, vec![3, 1, 3, 3])],
        20,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}
fn check_conv_transpose2d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = rand_vec(rng, 3 * 4 * 4, -1.0, 1.0);
    let w = rand_vec(rng, 3 * 2 * 2 * 2, -1.0, 1.0);
    let report = grad_check(
        &|inp: &[Tensor<f64>]| inp[0].conv_transpose2d(&inp[1], None, 2)?.sum_all(),
        &[(x, vec![1, 3, 4, 4]), (w, vec![3, 2, 2, 2])],
        20,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}
fn check_batch_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = rand_vec(rng, 2 * 3 * 4 * 4, -1.0, 1.0);
    let g = rand_vec(rng, 3, 0.5, 1.5);
    let b = rand_vec(rng, 3, -0.5, 0.5);
    let seed = rng.clone();
    let report = grad_check(
        &|inp: &[Tensor<f64>]| {
            let zeros = [0.0f64; 3];
            let ones = [1.0f64; 3];
            let (y, _) = inp[0].batch_norm(&inp[1], &inp[2], &zeros, &ones, true, 1e-5, 0.1)?;
            // spatially varying readout: channel sums are invariant under BN
            readout(&y, &mut seed.clone())
        },
        &[(x, vec![2, 3, 4, 4]), (g, vec![3]), (b, vec![3])],
        24,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}
fn check_layer_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = rand_vec(rng, 2 * 3 * 4 * 4, -1.0, 1.0);
    let g = rand_vec(rng, 3, 0.5, 1.5);
    let b = rand_vec(rng, 3, -0.5, 0.5);
    let seed = rng.clone();
    let report = grad_check(
        &|inp: &[Tensor<f64>]| {
            readout(&inp[0].layer_norm(&inp[1], &inp[2], 1e-6)?, &mut seed.clone())
        },
        &[(x, vec![2, 3, 4, 4]), (g, vec![3]), (b, vec![3])],
        24,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}
fn check_pools(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = check_unary(rng, |x| x.pool(PoolKind::GlobalAvg))?;
    let b = check_unary(rng, |x| x.pool(PoolKind::GlobalMax))?;
    let c = check_unary(rng, |x| x.avg_pool_2x2())?;
    Ok(a.max(b).max(c))
}
fn check_channel_stats(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = check_unary(rng, |x| x.mean_channels())?;
    let b = check_unary(rng, |x| x.max_channels())?;
    let c = check_unary(rng, |x| x.sum_per_channel())?;
    Ok(a.max(b).max(c))
}
fn check_resize(rng: &mut ChaCha8Rng) -> Result<f64> {
    let up = check_unary(rng, |x| x.interpolate_bilinear(7, 9))?;
    let down = check_unary(rng, |x| x.interpolate_bilinear(3, 2))?;
    Ok(up.max(down))
}
fn check_pad(rng: &mut ChaCha8Rng) -> Result<f64> {
    let z = check_unary(rng, |x| x.pad_zero(1, 0, 2, 1))?;
    let r = check_unary(rng, |x| x.pad_reflect(2))?;
    Ok(z.max(r))
}
fn check_gaussian_blur(rng: &mut ChaCha8Rng) -> Result<f64> {
    let data = rand_vec(rng, 6 * 6, -1.0, 1.0);
    let report = grad_check(
        &|inp: &[Tensor<f64>]| inp[0].gaussian_blur(1.0, 5)?.sum_all(),
        &[(data, vec![1, 1, 6, 6])],
        24,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}
fn check_pyramid(rng: &mut ChaCha8Rng) -> Result<f64> {
    let data = rand_vec(rng, 8 * 8, 0.0, 1.0);
    let report = grad_check(
        &|inp: &[Tensor<f64>]| {
            let pyr = build_pyramid(&inp[0], 3, BLUR_SIGMA, BLUR_KSIZE)?;
            // plain sums nearly cancel (the blur kernel is normalized), so
            // weight each level to keep the gradient away from zero
            let mut wrng = derive_rng(1, "suite", 0, 0);
            let mut total = readout(&pyr.levels[0], &mut wrng)?;
            for l in &pyr.levels[1..] {
                total = total.add(&readout(l, &mut wrng)?)?;
            }
            Ok(total)
        },
        &[(data, vec![1, 1, 8, 8])],
        24,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}
fn check_concat(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = rand_vec(rng, 2 * 16, -1.0, 1.0);
    let b = rand_vec(rng, 3 * 16, -1.0, 1.0);
    let report = grad_check(
        &|inp: &[Tensor<f64>]| {
            concat_channels(&[inp[0].clone(), inp[1].clone()])?
                .activation(ActKind::Swish)?
                .sum_all()
        },
        &[(a, vec![1, 2, 4, 4]), (b, vec![1, 3, 4, 4])],
        16,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}

fn check_with_store(
    rng: &mut ChaCha8Rng,
    init: impl FnOnce(&mut ParamBuilder<f64, ChaCha8Rng>) -> Result<()>,
    forward: impl Fn(&mut Fwd<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: Vec<(Vec<f64>, Vec<usize>)>,
) -> Result<f64> {
    let mut store = ParamStore::<f64>::new();
    let mut init_rng = rng.clone();
    {
        let mut b = ParamBuilder::new(&mut store, &mut init_rng);
        init(&mut b)?;
    }
    let store = RefCell::new(store);
    let seed = rng.clone();
    let report = grad_check(
        &|inp: &[Tensor<f64>]| {
            let mut st = store.borrow_mut();
            let mut drng = derive_rng(0, "suite", 0, 0);
            let mut ctx = Fwd::new(&mut st, false, &mut drng);
            readout(&forward(&mut ctx, inp)?, &mut seed.clone())
        },
        &inputs,
        20,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}

fn check_se(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = rand_vec(rng, 2 * 4 * 4 * 4, -1.0, 1.0);
    check_with_store(
        rng,
        |b| init_se(b, "se", 4, 2),
        |ctx, inp| se_block(ctx, &inp[0], "se"),
        vec![(x, vec![2, 4, 4, 4])],
    )
}

fn check_mbconv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = BlockConfig {
        in_channels: 4,
        out_channels: 4,
        kernel: 3,
        expand_ratio: 2,
        stride: 1,
        se_ratio: 0.25,
        drop_path_prob: 0.0,
        layer_scale_init: 0.0,
    };
    let x = rand_vec(rng, 4 * 6 * 6, -1.0, 1.0);
    check_with_store(
        rng,
        |b| init_mbconv(b, "mb", &cfg),
        move |ctx, inp| mbconv(ctx, &inp[0], "mb", &cfg),
        vec![(x, vec![1, 4, 6, 6])],
    )
}

fn check_lkec(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = rand_vec(rng, 4 * 8 * 8, -1.0, 1.0);
    check_with_store(
        rng,
        |b| init_lkec(b, "lk", 4, 1e-2),
        |ctx, inp| lkec_block(ctx, &inp[0], "lk", 0.0),
        vec![(x, vec![1, 4, 8, 8])],
    )
}

fn check_cbam(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = rand_vec(rng, 4 * 8 * 8, -1.0, 1.0);
    check_with_store(
        rng,
        |b| init_cbam(b, "cb", 4),
        |ctx, inp| cbam(ctx, &inp[0], "cb"),
        vec![(x, vec![1, 4, 8, 8])],
    )
}

fn check_mc_ega(rng: &mut ChaCha8Rng) -> Result<f64> {
    let f_e = rand_vec(rng, 4 * 8 * 8, -1.0, 1.0);
    let f_hf = rand_vec(rng, 8 * 8, -0.5, 0.5);
    let f_pred = rand_vec(rng, 3 * 4 * 4, -2.0, 2.0);
    check_with_store(
        rng,
        |b| init_mc_ega(b, "att", 4),
        |ctx, inp| mc_ega(ctx, &inp[0], &inp[1], &inp[2], "att", FgMode::Mean, 3),
        vec![
            (f_e, vec![1, 4, 8, 8]),
            (f_hf, vec![1, 1, 8, 8]),
            (f_pred, vec![1, 3, 4, 4]),
        ],
    )
}

fn check_dice_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let data = rand_vec(rng, 3 * 16, -2.0, 2.0);
    let mask: Vec<u8> = (0..16).map(|_| rng.gen_range(0..3)).collect();
    let report = grad_check(
        &|inp: &[Tensor<f64>]| dice_loss(&inp[0], &mask, 1.0, false),
        &[(data, vec![1, 3, 4, 4])],
        24,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}

fn check_edunet(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = EDUNetConfig::tiny(2, 16);
    let mut store = ParamStore::<f64>::new();
    let mut init_rng = rng.clone();
    init_edunet(&mut store, &cfg, &mut init_rng)?;
    let store = RefCell::new(store);
    let seed = rng.clone();
    let image = rand_vec(rng, 16 * 16, 0.0, 1.0);
    let report = grad_check(
        &|inp: &[Tensor<f64>]| {
            let mut st = store.borrow_mut();
            let mut drng = derive_rng(0, "suite", 0, 0);
            let mut ctx = Fwd::new(&mut st, false, &mut drng);
            let out = edunet_forward(&mut ctx, &inp[0], &cfg)?;
            readout(&out.fused_prob, &mut seed.clone())
        },
        &[(image, vec![1, 1, 16, 16])],
        12,
        STEP,
        rng,
    )?;
    Ok(report.max_rel_err)
}

const SUITE: &[(&str, CheckFn)] = &[
    ("relu", check_relu),
    ("gelu", check_gelu),
    ("swish", check_swish),
    ("sigmoid", check_sigmoid),
    ("add", check_add),
    ("sub", check_sub),
    ("mul", check_mul),
    ("div", check_div),
    ("affine", check_affine),
    ("softmax", check_softmax),
    ("linear", check_linear),
    ("conv2d", check_conv2d),
    ("conv_depthwise", check_conv_depthwise),
    ("conv_transpose2d", check_conv_transpose2d),
    ("batch_norm", check_batch_norm),
    ("layer_norm", check_layer_norm),
    ("pools", check_pools),
    ("channel_stats", check_channel_stats),
    ("resize", check_resize),
    ("pad", check_pad),
    ("gaussian_blur", check_gaussian_blur),
    ("pyramid", check_pyramid),
    ("concat", check_concat),
    ("se", check_se),
    ("mbconv", check_mbconv),
    ("lkec", check_lkec),
    ("cbam", check_cbam),
    ("mc_ega", check_mc_ega),
    ("dice_loss", check_dice_loss),
    ("edunet", check_edunet),
];

pub fn suite_names() -> Vec<String> {
    SUITE.iter().map(|(n, _)| n.to_string()).collect()
}

pub fn run_suite(names: &[String], seed: u64) -> Result<Vec<SuiteResult>> {
    let mut results = Vec::new();
    for name in names {
        let (_, f) = SUITE
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown op `{name}`; available: {}",
                    suite_names().join(", ")
                ))
            })?;
        let mut rng = derive_rng(seed, "gradcheck", 0, 0);
        let max_rel_err = f(&mut rng)?;
        results.push(SuiteResult {
            name: name.clone(),
            passed: max_rel_err < TOL,
            max_rel_err,
        });
    }
    Ok(results)
}
