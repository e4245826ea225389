//! Composite network blocks: SE, MBConv, LKEC, CBAM, double-conv, DropPath.
//!
//! A block is a pure function of (input, params, rng); parameters live in a
//! [`ParamStore`] under the block's dotted prefix. Forward passes take the
//! store mutably because training-mode batch norm refreshes its running
//! statistics in place.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, ActKind, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

/// Shared forward-pass context: parameters, mode, rng stream for DropPath,
/// and an optional activation trace for Grad-CAM.
pub struct Fwd<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub training: bool,
    pub rng: &'a mut dyn RngCore,
    pub capture: bool,
    pub trace: Vec<(String, Tensor<T>)>,
}

impl<'a, T: Scalar> Fwd<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, training: bool, rng: &'a mut dyn RngCore) -> Self {
        Fwd {
            store,
            training,
            rng,
            capture: false,
            trace: Vec::new(),
        }
    }

    pub fn record(&mut self, name: &str, t: &Tensor<T>) {
        if self.capture {
            self.trace.push((name.to_string(), t.clone()));
        }
    }
}

/// Shape plan of one MBConv block.
#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub expand_ratio: usize,
    pub stride: usize,
    pub se_ratio: f64,
    pub drop_path_prob: f64,
    pub layer_scale_init: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.expand_ratio < 1 {
            return Err(Error::Invalid("expand_ratio must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_prob) {
            return Err(Error::Invalid("drop_path_prob must be in [0,1)".into()));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Invalid("stride must be 1 or 2".into()));
        }
        Ok(())
    }

    pub fn expanded(&self) -> usize {
        self.in_channels * self.expand_ratio
    }

    pub fn se_reduced(&self) -> usize {
        ((self.in_channels as f64 * self.se_ratio).round() as usize).max(1)
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

// ---- batch norm with buffer refresh --------------------------------------

pub fn bn_forward<T: Scalar>(ctx: &mut Fwd<T>, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
    let gamma = ctx.store.get(&format!("{prefix}.gamma"))?;
    let beta = ctx.store.get(&format!("{prefix}.beta"))?;
    let rm = ctx.store.get_buffer(&format!("{prefix}.running_mean"))?;
    let rv = ctx.store.get_buffer(&format!("{prefix}.running_var"))?;
    let (y, stats) = x.batch_norm(
        &gamma,
        &beta,
        rm.data(),
        rv.data(),
        ctx.training,
        BN_EPS,
        BN_MOMENTUM,
    )?;
    if let Some(stats) = stats {
        ctx.store
            .set_buffer(&format!("{prefix}.running_mean"), stats.mean)?;
        ctx.store
            .set_buffer(&format!("{prefix}.running_var"), stats.var)?;
    }
    Ok(y)
}

pub fn ln_forward<T: Scalar>(ctx: &mut Fwd<T>, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
    let gamma = ctx.store.get(&format!("{prefix}.gamma"))?;
    let beta = ctx.store.get(&format!("{prefix}.beta"))?;
    x.layer_norm(&gamma, &beta, LN_EPS)
}

/// Per-axis "same" padding: output extent = ceil(in/stride). For stride 2
/// with an odd kernel the total is odd, so the split is asymmetric
/// (smaller amount first), matching the EfficientNet convention.
fn same_pad(extent: usize, k: usize, s: usize) -> (usize, usize) {
    let out = extent.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(extent);
    (total / 2, total - total / 2)
}

/// conv2d -> BN -> optional activation, params under `{prefix}.conv` / `{prefix}.bn`.
/// Uses "same" padding so spatial extents shrink exactly by the stride.
pub fn conv_bn_act<T: Scalar>(
    ctx: &mut Fwd<T>,
    x: &Tensor<T>,
    prefix: &str,
    stride: usize,
    groups: usize,
    act: Option<ActKind>,
) -> Result<Tensor<T>> {
    let w = ctx.store.get(&format!("{prefix}.conv.weight"))?;
    let k = w.shape()[2];
    let (_, _, h, wid) = x.dims4()?;
    let (pt, pb) = same_pad(h, k, stride);
    let (pl, pr) = same_pad(wid, k, stride);
    let y = if pt == pb && pl == pr && pt == pl {
        x.conv2d(&w, None, stride, pt, groups)?
    } else {
        x.pad_zero(pt, pb, pl, pr)?.conv2d(&w, None, stride, 0, groups)?
    };
    let y = bn_forward(ctx, &y, &format!("{prefix}.bn"))?;
    match act {
        Some(kind) => y.activation(kind),
        None => Ok(y),
    }
}

pub fn init_conv_bn<T: Scalar, R: Rng>(
    b: &mut ParamBuilder<T, R>,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    groups: usize,
) -> Result<()> {
    b.conv2d(&format!("{prefix}.conv"), cin, cout, k, groups, false)?;
    b.batch_norm(&format!("{prefix}.bn"), cout)
}

// ---- DropPath ------------------------------------------------------------

/// Stochastic depth: per-sample Bernoulli drop of the whole tensor with
/// keep-rescale 1/(1-prob) during training; identity in eval mode.
pub fn drop_path<T: Scalar>(
    x: &Tensor<T>,
    prob: f64,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<Tensor<T>> {
    if !training || prob == 0.0 {
        return Ok(x.clone());
    }
    if !(0.0..1.0).contains(&prob) {
        return Err(Error::Invalid(format!("drop_path prob {prob} out of [0,1)")));
    }
    let (n, _, _, _) = x.dims4()?;
    let scale = T::from_f64(1.0 / (1.0 - prob));
    let mask: Vec<T> = (0..n)
        .map(|_| {
            if rng.gen_range(0.0..1.0) < prob {
                T::zero()
            } else {
                scale
            }
        })
        .collect();
    let mask = Tensor::constant(mask, &[n, 1, 1, 1])?;
    x.mul_bc(&mask)
}

/// drop_path with probability 1: branch always dropped (training only).
/// Kept separate because prob=1 makes the keep-rescale undefined.
pub fn drop_branch<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.affine(0.0, 0.0)
}

// ---- SE ------------------------------------------------------------------

pub fn init_se<T: Scalar, R: Rng>(
    b: &mut ParamBuilder<T, R>,
    prefix: &str,
    channels: usize,
    reduced: usize,
) -> Result<()> {
    b.linear(&format!("{prefix}.fc1"), channels, reduced, true)?;
    b.linear(&format!("{prefix}.fc2"), reduced, channels, true)
}

/// Squeeze-and-excitation channel gate:
/// x * sigmoid(FC2(swish(FC1(GAP(x))))).
pub fn se_block<T: Scalar>(ctx: &mut Fwd<T>, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
    let (n, c, _, _) = x.dims4()?;
    let w1 = ctx.store.get(&format!("{prefix}.fc1.weight"))?;
    let b1 = ctx.store.get(&format!("{prefix}.fc1.bias"))?;
    let w2 = ctx.store.get(&format!("{prefix}.fc2.weight"))?;
    let b2 = ctx.store.get(&format!("{prefix}.fc2.bias"))?;
    let squeezed = x.global_avg_pool()?.reshape(&[n, c])?;
    let gate = squeezed
        .linear(&w1, Some(&b1))?
        .activation(ActKind::Swish)?
        .linear(&w2, Some(&b2))?
        .activation(ActKind::Sigmoid)?
        .reshape(&[n, c, 1, 1])?;
    x.mul_bc(&gate)
}

// ---- MBConv --------------------------------------------------------------

pub fn init_mbconv<T: Scalar, R: Rng>(
    b: &mut ParamBuilder<T, R>,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<()> {
    cfg.validate()?;
    let mid = cfg.expanded();
    if cfg.expand_ratio > 1 {
        init_conv_bn(b, &format!("{prefix}.expand"), cfg.in_channels, mid, 1, 1)?;
    }
    init_conv_bn(b, &format!("{prefix}.dw"), mid, mid, cfg.kernel, mid)?;
    init_se(b, &format!("{prefix}.se"), mid, cfg.se_reduced())?;
    init_conv_bn(b, &format!("{prefix}.project"), mid, cfg.out_channels, 1, 1)
}

/// Mobile inverted bottleneck: 1x1 expand -> kxk depthwise -> SE -> 1x1
/// project, inverted residual (through DropPath) when shapes allow.
pub fn mbconv<T: Scalar>(
    ctx: &mut Fwd<T>,
    x: &Tensor<T>,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (_, cin, _, _) = x.dims4()?;
    if cin != cfg.in_channels {
        return Err(Error::Shape(format!(
            "mbconv `{prefix}`: input has {cin} channels, config says {}",
            cfg.in_channels
        )));
    }
    let mid = cfg.expanded();
    let mut h = x.clone();
    if cfg.expand_ratio > 1 {
        h = conv_bn_act(ctx, &h, &format!("{prefix}.expand"), 1, 1, Some(ActKind::Swish))?;
    }
    h = conv_bn_act(
        ctx,
        &h,
        &format!("{prefix}.dw"),
        cfg.stride,
        mid,
        Some(ActKind::Swish),
    )?;
    h = se_block(ctx, &h, &format!("{prefix}.se"))?;
    h = conv_bn_act(ctx, &h, &format!("{prefix}.project"), 1, 1, None)?;
    if cfg.has_residual() {
        let branch = if cfg.drop_path_prob >= 1.0 {
            drop_branch(&h)?
        } else {
            drop_path(&h, cfg.drop_path_prob, ctx.training, ctx.rng)?
        };
        branch.add(x)
    } else {
        Ok(h)
    }
}

// ---- LKEC ----------------------------------------------------------------

pub fn init_lkec<T: Scalar, R: Rng>(
    b: &mut ParamBuilder<T, R>,
    prefix: &str,
    channels: usize,
    layer_scale_init: f64,
) -> Result<()> {
    b.conv2d(&format!("{prefix}.dw"), channels, channels, 7, channels, true)?;
    b.layer_norm(&format!("{prefix}.ln"), channels)?;
    b.conv2d(&format!("{prefix}.pw1"), channels, channels * 4, 1, 1, true)?;
    b.conv2d(&format!("{prefix}.pw2"), channels * 4, channels, 1, 1, true)?;
    b.layer_scale(prefix, channels, layer_scale_init)
}

/// Large-kernel efficient convolution block:
/// y = x + DropPath(layer_scale * PW2(GELU(PW1(LN(DW7x7(x)))))).
pub fn lkec_block<T: Scalar>(
    ctx: &mut Fwd<T>,
    x: &Tensor<T>,
    prefix: &str,
    drop_path_prob: f64,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4()?;
    let dw_w = ctx.store.get(&format!("{prefix}.dw.weight"))?;
    let dw_b = ctx.store.get(&format!("{prefix}.dw.bias"))?;
    let pw1_w = ctx.store.get(&format!("{prefix}.pw1.weight"))?;
    let pw1_b = ctx.store.get(&format!("{prefix}.pw1.bias"))?;
    let pw2_w = ctx.store.get(&format!("{prefix}.pw2.weight"))?;
    let pw2_b = ctx.store.get(&format!("{prefix}.pw2.bias"))?;
    let scale = ctx.store.get(&format!("{prefix}.layer_scale"))?;

    let h = x.conv2d(&dw_w, Some(&dw_b), 1, 3, c)?;
    let h = ln_forward(ctx, &h, &format!("{prefix}.ln"))?;
    let h = h
        .conv2d(&pw1_w, Some(&pw1_b), 1, 0, 1)?
        .activation(ActKind::Gelu)?
        .conv2d(&pw2_w, Some(&pw2_b), 1, 0, 1)?;
    let h = h.mul_bc(&scale.reshape(&[1, c, 1, 1])?)?;
    let branch = if drop_path_prob >= 1.0 && ctx.training {
        drop_branch(&h)?
    } else {
        drop_path(&h, drop_path_prob.min(1.0 - 1e-9), ctx.training, ctx.rng)?
    };
    branch.add(x)
}

// ---- CBAM ----------------------------------------------------------------

pub fn init_cbam<T: Scalar, R: Rng>(
    b: &mut ParamBuilder<T, R>,
    prefix: &str,
    channels: usize,
) -> Result<()> {
    let reduced = (channels / 16).max(1);
    b.linear(&format!("{prefix}.mlp_fc1"), channels, reduced, true)?;
    b.linear(&format!("{prefix}.mlp_fc2"), reduced, channels, true)?;
    b.conv2d(&format!("{prefix}.spatial"), 2, 1, 7, 1, true)
}

/// Convolutional block attention: channel gate from pooled descriptors
/// through a shared MLP, then a 7x7 spatial gate.
pub fn cbam<T: Scalar>(ctx: &mut Fwd<T>, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
    let (n, c, _, _) = x.dims4()?;
    let w1 = ctx.store.get(&format!("{prefix}.mlp_fc1.weight"))?;
    let b1 = ctx.store.get(&format!("{prefix}.mlp_fc1.bias"))?;
    let w2 = ctx.store.get(&format!("{prefix}.mlp_fc2.weight"))?;
    let b2 = ctx.store.get(&format!("{prefix}.mlp_fc2.bias"))?;
    let mlp = |v: &Tensor<T>| -> Result<Tensor<T>> {
        v.reshape(&[n, c])?
            .linear(&w1, Some(&b1))?
            .activation(ActKind::Relu)?
            .linear(&w2, Some(&b2))
    };
    let avg = mlp(&x.global_avg_pool()?)?;
    let max = mlp(&x.global_max_pool()?)?;
    let chan_gate = avg
        .add(&max)?
        .activation(ActKind::Sigmoid)?
        .reshape(&[n, c, 1, 1])?;
    let x1 = x.mul_bc(&chan_gate)?;

    let sw = ctx.store.get(&format!("{prefix}.spatial.weight"))?;
    let sb = ctx.store.get(&format!("{prefix}.spatial.bias"))?;
    let desc = concat_channels(&[x1.mean_channels()?, x1.max_channels()?])?;
    let spat_gate = desc
        .conv2d(&sw, Some(&sb), 1, 3, 1)?
        .activation(ActKind::Sigmoid)?;
    x1.mul_bc(&spat_gate)
}

// ---- double conv ---------------------------------------------------------

pub fn init_double_conv<T: Scalar, R: Rng>(
    b: &mut ParamBuilder<T, R>,
    prefix: &str,
    cin: usize,
    cout: usize,
) -> Result<()> {
    init_conv_bn(b, &format!("{prefix}.c1"), cin, cout, 3, 1)?;
    init_conv_bn(b, &format!("{prefix}.c2"), cout, cout, 3, 1)
}

/// Two 3x3 conv + BN + ReLU stages (the U-Net fusion unit).
pub fn double_conv<T: Scalar>(ctx: &mut Fwd<T>, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
    let h = conv_bn_act(ctx, x, &format!("{prefix}.c1"), 1, 1, Some(ActKind::Relu))?;
    conv_bn_act(ctx, &h, &format!("{prefix}.c2"), 1, 1, Some(ActKind::Relu))
}
