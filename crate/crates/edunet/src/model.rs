//! Full network assembly: local branch (MBConv encoder + U-Net decoder),
//! global branch (large-kernel encoder + edge-guided decoder), coarse heads,
//! multi-category edge-guided attention, and dual-output fusion.

use serde::{Deserialize, Serialize};

use crate::blocks::{
    bn_forward, cbam, conv_bn_act, double_conv, init_cbam, init_conv_bn, init_double_conv,
    init_lkec, init_mbconv, lkec_block, ln_forward, mbconv, BlockConfig, Fwd,
};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamStore};
use crate::pyramid::{build_pyramid, edge_attention, HighFreqPyramid, BLUR_KSIZE, BLUR_SIGMA};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, ActKind, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Tiny,
    B0,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "b0" => Ok(Profile::B0),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FgMode {
    Mean,
    OneMinusBg,
}

impl std::str::FromStr for FgMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(FgMode::Mean),
            "one_minus_bg" => Ok(FgMode::OneMinusBg),
            other => Err(Error::Config(format!("unknown fg_attention_mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    AvgProb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EDUNetConfig {
    pub num_classes: usize,
    pub input_size: (usize, usize),
    pub profile: Profile,
    pub global_channels: Vec<usize>,
    pub lkec_blocks: Vec<usize>,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub fg_attention_mode: FgMode,
    pub use_global: bool,
    pub use_local: bool,
    pub use_mcega: bool,
    pub fusion_mode: FusionMode,
}

impl EDUNetConfig {
    pub fn tiny(num_classes: usize, input: usize) -> Self {
        EDUNetConfig {
            num_classes,
            input_size: (input, input),
            profile: Profile::Tiny,
            global_channels: vec![24, 48, 96, 192],
            lkec_blocks: vec![1, 1, 1, 1],
            stem_kernel: 4,
            stem_stride: 2,
            fg_attention_mode: FgMode::Mean,
            use_global: true,
            use_local: true,
            use_mcega: true,
            fusion_mode: FusionMode::AvgProb,
        }
    }

    pub fn b0(num_classes: usize, input: usize) -> Self {
        EDUNetConfig {
            global_channels: vec![64, 128, 256, 512],
            lkec_blocks: vec![3, 3, 9, 3],
            profile: Profile::B0,
            ..EDUNetConfig::tiny(num_classes, input)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if !self.use_global && !self.use_local {
            return Err(Error::Config("at least one branch must be enabled".into()));
        }
        if self.global_channels.is_empty() || self.global_channels.len() != self.lkec_blocks.len() {
            return Err(Error::Config(
                "global_channels and lkec_blocks must be equal-length and non-empty".into(),
            ));
        }
        if !matches!(self.stem_stride, 2 | 4) {
            return Err(Error::Config("stem_stride must be 2 or 4".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.global_channels.len()
    }

    pub fn log2_stem_stride(&self) -> usize {
        self.stem_stride.trailing_zeros() as usize
    }

    /// Pyramid depth needed so stage i aligns with level i + log2(stem_stride).
    pub fn pyramid_levels(&self) -> usize {
        self.stages() + self.log2_stem_stride()
    }

    /// Total downsample factor of the local branch (input divisibility).
    pub fn local_factor(&self) -> usize {
        1 << local_plan(self.profile).skip_channels().len()
    }

    /// Input divisibility required by the global branch.
    pub fn global_factor(&self) -> usize {
        self.stem_stride << (self.stages() - 1)
    }

    /// Linear DropPath ramp across global-branch LKEC depth (0 for tiny).
    pub fn drop_path_probs(&self) -> Vec<f64> {
        let total: usize = self.lkec_blocks.iter().sum();
        let top = match self.profile {
            Profile::Tiny => 0.0,
            Profile::B0 => 0.1,
        };
        (0..total)
            .map(|i| {
                if total <= 1 {
                    0.0
                } else {
                    top * i as f64 / (total - 1) as f64
                }
            })
            .collect()
    }
}

// ---- local branch (MBConv encoder + U-Net decoder) -----------------------

#[derive(Debug, Clone, Copy)]
pub struct StagePlan {
    pub expand: usize,
    pub kernel: usize,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

pub struct LocalPlan {
    pub stem_channels: usize,
    pub stages: Vec<StagePlan>,
}

impl LocalPlan {
    /// Channels of the features the decoder consumes, shallow to deep; the
    /// last entry is the bottleneck. One entry per downsampling.
    pub fn skip_channels(&self) -> Vec<usize> {
        let mut skips = Vec::new();
        let mut cur = self.stem_channels;
        for st in &self.stages {
            if st.stride == 2 {
                skips.push(cur);
            }
            cur = st.channels;
        }
        skips.push(cur);
        skips
    }
}

pub fn local_plan(profile: Profile) -> LocalPlan {
    let full: [(usize, usize, usize, usize, usize); 7] = [
        (1, 3, 16, 1, 1),
        (6, 3, 24, 2, 2),
        (6, 5, 40, 2, 2),
        (6, 3, 80, 3, 2),
        (6, 5, 112, 3, 1),
        (6, 5, 192, 4, 2),
        (6, 3, 320, 1, 1),
    ];
    let (stem_channels, rows): (usize, Vec<_>) = match profile {
        Profile::B0 => (32, full.to_vec()),
        // desk-scale profile: first five stages, channels / 4, single repeats
        Profile::Tiny => (
            8,
            full[..5]
                .iter()
                .map(|&(e, k, c, _, s)| (e, k, c / 4, 1, s))
                .collect(),
        ),
    };
    LocalPlan {
        stem_channels,
        stages: rows
            .into_iter()
            .map(|(expand, kernel, channels, repeats, stride)| StagePlan {
                expand,
                kernel,
                channels,
                repeats,
                stride,
            })
            .collect(),
    }
}

fn local_block_cfg(plan: &StagePlan, cin: usize, stride: usize) -> BlockConfig {
    BlockConfig {
        in_channels: cin,
        out_channels: plan.channels,
        kernel: plan.kernel,
        expand_ratio: plan.expand,
        stride,
        se_ratio: 0.25,
        drop_path_prob: 0.0,
        layer_scale_init: 0.0,
    }
}

fn init_local<T: Scalar, R: rand::Rng>(b: &mut ParamBuilder<T, R>, cfg: &EDUNetConfig) -> Result<()> {
    let plan = local_plan(cfg.profile);
    init_conv_bn(b, "local.stem", 1, plan.stem_channels, 3, 1)?;
    let mut cin = plan.stem_channels;
    for (si, st) in plan.stages.iter().enumerate() {
        for r in 0..st.repeats {
            let stride = if r == 0 { st.stride } else { 1 };
            let bc = local_block_cfg(st, cin, stride);
            init_mbconv(b, &format!("local.s{si}.b{r}"), &bc)?;
            cin = st.channels;
        }
    }
    // decoder: transpose-conv up, concat skip, double conv; final 1x1 head
    let skips = plan.skip_channels();
    let k = skips.len();
    let mut cur = skips[k - 1];
    for t in 0..k {
        let (target, has_skip) = if t < k - 1 {
            (skips[k - 2 - t], true)
        } else {
            (skips[0], false)
        };
        b.conv_transpose2d(&format!("local.up{t}"), cur, target, 2, false)?;
        b.batch_norm(&format!("local.up{t}.bn"), target)?;
        let dc_in = if has_skip { 2 * target } else { target };
        init_double_conv(b, &format!("local.dec{t}"), dc_in, target)?;
        cur = target;
    }
    b.conv2d("local.final", skips[0], cfg.num_classes, 1, 1, true)
}

/// U-shaped local branch. Returns full-resolution class logits and the
/// encoder features the decoder fused (shallow to deep, bottleneck last).
pub fn local_branch_forward<T: Scalar>(
    ctx: &mut Fwd<T>,
    image: &Tensor<T>,
    cfg: &EDUNetConfig,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let (_, c, h, w) = image.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("local branch expects 1 channel, got {c}")));
    }
    let factor = cfg.local_factor();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "local branch: {h}x{w} input not divisible by {factor}"
        )));
    }
    let plan = local_plan(cfg.profile);
    let mut x = conv_bn_act(ctx, image, "local.stem", 2, 1, Some(ActKind::Swish))?;
    ctx.record("local.stem", &x);
    let mut skips: Vec<Tensor<T>> = Vec::new();
    let mut cin = plan.stem_channels;
    for (si, st) in plan.stages.iter().enumerate() {
        for r in 0..st.repeats {
            let stride = if r == 0 { st.stride } else { 1 };
            if stride == 2 {
                // x is the last feature at the current resolution
                skips.push(x.clone());
            }
            let bc = local_block_cfg(st, cin, stride);
            x = mbconv(ctx, &x, &format!("local.s{si}.b{r}"), &bc)?;
            cin = st.channels;
        }
        ctx.record(&format!("local.s{si}"), &x);
    }
    skips.push(x.clone());
    ctx.record("local.bottleneck", &x);

    let k = skips.len();
    let mut d = skips[k - 1].clone();
    for t in 0..k {
        let wt = ctx.store.get(&format!("local.up{t}.weight"))?;
        d = d.conv_transpose2d(&wt, None, 2)?;
        d = bn_forward(ctx, &d, &format!("local.up{t}.bn"))?;
        d = d.activation(ActKind::Relu)?;
        if t < k - 1 {
            d = concat_channels(&[d, skips[k - 2 - t].clone()])?;
        }
        d = double_conv(ctx, &d, &format!("local.dec{t}"))?;
        ctx.record(&format!("local.dec{t}"), &d);
    }
    let fw = ctx.store.get("local.final.weight")?;
    let fb = ctx.store.get("local.final.bias")?;
    let logits = d.conv2d(&fw, Some(&fb), 1, 0, 1)?;
    Ok((logits, skips))
}

// ---- global branch -------------------------------------------------------

fn init_global_encoder<T: Scalar, R: rand::Rng>(
    b: &mut ParamBuilder<T, R>,
    cfg: &EDUNetConfig,
) -> Result<()> {
    let g = &cfg.global_channels;
    b.conv2d("global.stem.conv", 1, g[0], cfg.stem_kernel, 1, true)?;
    b.layer_norm("global.stem.ln", g[0])?;
    for i in 0..cfg.stages() {
        if i > 0 {
            b.conv2d(&format!("global.down{i}.conv"), g[i - 1], g[i], 2, 1, true)?;
            b.layer_norm(&format!("global.down{i}.ln"), g[i])?;
        }
        for j in 0..cfg.lkec_blocks[i] {
            init_lkec(b, &format!("global.s{i}.b{j}"), g[i], 1e-6)?;
        }
    }
    Ok(())
}

/// Large-kernel encoder: strided stem + LN, then per stage a stack of LKEC
/// blocks with 2x2/2 downsampling convs between stages. Returns one feature
/// per stage, shallow to deep.
pub fn global_encoder_forward<T: Scalar>(
    ctx: &mut Fwd<T>,
    image: &Tensor<T>,
    cfg: &EDUNetConfig,
) -> Result<Vec<Tensor<T>>> {
    let (_, c, h, w) = image.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("global branch expects 1 channel, got {c}")));
    }
    let factor = cfg.global_factor();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "global branch: {h}x{w} input not divisible by {factor}"
        )));
    }
    let sw = ctx.store.get("global.stem.conv.weight")?;
    let sb = ctx.store.get("global.stem.conv.bias")?;
    let pad = if cfg.stem_stride == cfg.stem_kernel { 0 } else { 1 };
    let mut x = image.conv2d(&sw, Some(&sb), cfg.stem_stride, pad, 1)?;
    x = ln_forward(ctx, &x, "global.stem.ln")?;
    ctx.record("global.stem", &x);

    let probs = cfg.drop_path_probs();
    let mut block_idx = 0usize;
    let mut feats = Vec::with_capacity(cfg.stages());
    for i in 0..cfg.stages() {
        if i > 0 {
            let dw = ctx.store.get(&format!("global.down{i}.conv.weight"))?;
            let db = ctx.store.get(&format!("global.down{i}.conv.bias"))?;
            x = x.conv2d(&dw, Some(&db), 2, 0, 1)?;
            x = ln_forward(ctx, &x, &format!("global.down{i}.ln"))?;
        }
        for j in 0..cfg.lkec_blocks[i] {
            x = lkec_block(ctx, &x, &format!("global.s{i}.b{j}"), probs[block_idx])?;
            block_idx += 1;
        }
        ctx.record(&format!("global.s{i}"), &x);
        feats.push(x.clone());
    }
    Ok(feats)
}

// ---- coarse head ---------------------------------------------------------

pub fn init_coarse_head<T: Scalar, R: rand::Rng>(
    b: &mut ParamBuilder<T, R>,
    prefix: &str,
    channels: usize,
    num_classes: usize,
) -> Result<()> {
    b.conv2d(&format!("{prefix}.c3"), channels, channels, 3, 1, true)?;
    b.conv2d(&format!("{prefix}.c1"), channels, num_classes, 1, 1, true)
}

/// Coarse classification map: 3x3 conv then 1x1 conv to class logits.
pub fn coarse_head<T: Scalar>(ctx: &mut Fwd<T>, f: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
    let w3 = ctx.store.get(&format!("{prefix}.c3.weight"))?;
    let b3 = ctx.store.get(&format!("{prefix}.c3.bias"))?;
    let w1 = ctx.store.get(&format!("{prefix}.c1.weight"))?;
    let b1 = ctx.store.get(&format!("{prefix}.c1.bias"))?;
    f.conv2d(&w3, Some(&b3), 1, 1, 1)?.conv2d(&w1, Some(&b1), 1, 0, 1)
}

// ---- MC-EGA --------------------------------------------------------------

/// Background/foreground attention maps from coarse class logits, resized to
/// (h, w). Foreground is the mean of the non-background softmax channels, or
/// 1 - background.
pub fn attention_maps<T: Scalar>(
    f_pred: &Tensor<T>,
    h: usize,
    w: usize,
    fg_mode: FgMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, c, _, _) = f_pred.dims4()?;
    let p = f_pred.interpolate_bilinear(h, w)?.softmax_channels()?;
    let a_bg = p.slice_channels(0, 1)?;
    let a_fg = match fg_mode {
        FgMode::Mean => p.slice_channels(1, c)?.mean_channels()?,
        FgMode::OneMinusBg => a_bg.affine(-1.0, 1.0)?,
    };
    Ok((a_bg, a_fg))
}

pub fn init_mc_ega<T: Scalar, R: rand::Rng>(
    b: &mut ParamBuilder<T, R>,
    prefix: &str,
    channels: usize,
) -> Result<()> {
    b.conv2d(&format!("{prefix}.mask"), 3 * channels, channels, 3, 1, true)?;
    b.conv2d(&format!("{prefix}.fuse"), 3 * channels, channels, 1, 1, true)?;
    init_cbam(b, &format!("{prefix}.cbam"), channels)
}

/// Multi-category edge-guided attention. Gates the encoder feature with
/// background, foreground, and edge evidence, fuses the three gated copies
/// through a sigmoid-masked convolution, adds the result back residually,
/// and recalibrates with CBAM.
pub fn mc_ega<T: Scalar>(
    ctx: &mut Fwd<T>,
    f_e: &Tensor<T>,
    f_hf: &Tensor<T>,
    f_pred: &Tensor<T>,
    prefix: &str,
    fg_mode: FgMode,
    num_classes: usize,
) -> Result<Tensor<T>> {
    let (_, _, h, w) = f_e.dims4()?;
    let (_, c, _, _) = f_pred.dims4()?;
    if c != num_classes {
        return Err(Error::Shape(format!(
            "mc_ega: coarse logits have {c} channels, expected {num_classes}"
        )));
    }
    let (a_bg, a_fg) = attention_maps(f_pred, h, w, fg_mode)?;
    let a_edge = edge_attention(f_hf, h, w)?;
    let x = concat_channels(&[
        f_e.mul_bc(&a_bg)?,
        f_e.mul_bc(&a_fg)?,
        f_e.mul_bc(&a_edge)?,
    ])?;
    let mw = ctx.store.get(&format!("{prefix}.mask.weight"))?;
    let mb = ctx.store.get(&format!("{prefix}.mask.bias"))?;
    let fw = ctx.store.get(&format!("{prefix}.fuse.weight"))?;
    let fb = ctx.store.get(&format!("{prefix}.fuse.bias"))?;
    let mask = x.conv2d(&mw, Some(&mb), 1, 1, 1)?.activation(ActKind::Sigmoid)?;
    let g = mask.mul(&x.conv2d(&fw, Some(&fb), 1, 0, 1)?)?;
    let f_a = f_e.add(&g)?;
    cbam(ctx, &f_a, &format!("{prefix}.cbam"))
}

// ---- global decoder ------------------------------------------------------

fn init_global_decoder<T: Scalar, R: rand::Rng>(
    b: &mut ParamBuilder<T, R>,
    cfg: &EDUNetConfig,
) -> Result<()> {
    let g = &cfg.global_channels;
    let s = cfg.stages();
    if cfg.use_mcega {
        init_coarse_head(b, "gdec.headb", g[s - 1], cfg.num_classes)?;
    }
    let mut cur = g[s - 1];
    for i in (0..s).rev() {
        if cfg.use_mcega {
            init_mc_ega(b, &format!("gdec.mcega{i}"), g[i])?;
        }
        let out = if i > 0 { g[i - 1] } else { g[0] };
        init_conv_bn(b, &format!("gdec.conv{i}"), cur + g[i], out, 3, 1)?;
        if cfg.use_mcega && i > 0 {
            init_coarse_head(b, &format!("gdec.head{i}"), out, cfg.num_classes)?;
        }
        cur = out;
    }
    b.conv2d("gdec.final", g[0], cfg.num_classes, 1, 1, true)
}

/// Edge-guided decoder over the global encoder features. The deepest coarse
/// head seeds the first class prediction; each level gates its encoder
/// feature with MC-EGA (or passes it through when disabled), concatenates
/// with the running decoder feature, upsamples by 2, and refines with
/// conv + BN + GELU, emitting a fresh coarse prediction for the next level.
pub fn global_decoder_forward<T: Scalar>(
    ctx: &mut Fwd<T>,
    features: &[Tensor<T>],
    pyramid: Option<&HighFreqPyramid<T>>,
    out_hw: (usize, usize),
    cfg: &EDUNetConfig,
) -> Result<Tensor<T>> {
    let s = cfg.stages();
    if features.len() != s {
        return Err(Error::Shape(format!(
            "global decoder: {} features for {s} stages",
            features.len()
        )));
    }
    let shift = cfg.log2_stem_stride();
    if cfg.use_mcega {
        let pyr = pyramid.ok_or_else(|| Error::Invalid("MC-EGA requires a pyramid".into()))?;
        if pyr.levels.len() < s + shift {
            return Err(Error::Shape(format!(
                "global decoder: pyramid has {} levels, need {}",
                pyr.levels.len(),
                s + shift
            )));
        }
    }
    let mut f_pred = if cfg.use_mcega {
        Some(coarse_head(ctx, &features[s - 1], "gdec.headb")?)
    } else {
        None
    };
    let mut d = features[s - 1].clone();
    for i in (0..s).rev() {
        let a = if cfg.use_mcega {
            mc_ega(
                ctx,
                &features[i],
                &pyramid.unwrap().levels[i + shift],
                f_pred.as_ref().unwrap(),
                &format!("gdec.mcega{i}"),
                cfg.fg_attention_mode,
                cfg.num_classes,
            )?
        } else {
            features[i].clone()
        };
        ctx.record(&format!("global.mcega{i}"), &a);
        let x = concat_channels(&[d, a])?;
        let (_, _, hh, ww) = x.dims4()?;
        let x = x.interpolate_bilinear(hh * 2, ww * 2)?;
        d = conv_bn_act(ctx, &x, &format!("gdec.conv{i}"), 1, 1, Some(ActKind::Gelu))?;
        ctx.record(&format!("global.dec{i}"), &d);
        if cfg.use_mcega && i > 0 {
            f_pred = Some(coarse_head(ctx, &d, &format!("gdec.head{i}"))?);
        }
    }
    let d = d.interpolate_bilinear(out_hw.0, out_hw.1)?;
    let fw = ctx.store.get("gdec.final.weight")?;
    let fb = ctx.store.get("gdec.final.bias")?;
    d.conv2d(&fw, Some(&fb), 1, 0, 1)
}

// ---- whole model ---------------------------------------------------------

pub struct ModelOutput<T: Scalar> {
    pub logits_global: Option<Tensor<T>>,
    pub logits_local: Option<Tensor<T>>,
    pub fused_prob: Tensor<T>,
}

/// Register every parameter the active configuration needs.
pub fn init_edunet<T: Scalar, R: rand::Rng>(
    store: &mut ParamStore<T>,
    cfg: &EDUNetConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let mut b = ParamBuilder::new(store, rng);
    if cfg.use_local {
        init_local(&mut b, cfg)?;
    }
    if cfg.use_global {
        init_global_encoder(&mut b, cfg)?;
        init_global_decoder(&mut b, cfg)?;
    }
    Ok(())
}

/// Run the enabled branches and fuse: mean of the per-branch softmax maps.
/// Argmax over channels of `fused_prob` gives the predicted mask.
pub fn edunet_forward<T: Scalar>(
    ctx: &mut Fwd<T>,
    image: &Tensor<T>,
    cfg: &EDUNetConfig,
) -> Result<ModelOutput<T>> {
    cfg.validate()?;
    let (_, _, h, w) = image.dims4()?;
    let mut probs: Vec<Tensor<T>> = Vec::new();
    let logits_local = if cfg.use_local {
        let (lg, _) = local_branch_forward(ctx, image, cfg)?;
        probs.push(lg.softmax_channels()?);
        Some(lg)
    } else {
        None
    };
    let logits_global = if cfg.use_global {
        let feats = global_encoder_forward(ctx, image, cfg)?;
        let pyr = if cfg.use_mcega {
            Some(build_pyramid(image, cfg.pyramid_levels(), BLUR_SIGMA, BLUR_KSIZE)?)
        } else {
            None
        };
        let lg = global_decoder_forward(ctx, &feats, pyr.as_ref(), (h, w), cfg)?;
        probs.push(lg.softmax_channels()?);
        Some(lg)
    } else {
        None
    };
    let fused_prob = match probs.len() {
        1 => probs.pop().unwrap(),
        2 => probs[0].add(&probs[1])?.affine(0.5, 0.0)?,
        _ => unreachable!("validate() guarantees 1 or 2 branches"),
    };
    Ok(ModelOutput {
        logits_global,
        logits_local,
        fused_prob,
    })
}
