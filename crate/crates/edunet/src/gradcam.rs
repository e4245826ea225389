//! Grad-CAM heatmaps: gradient-weighted channel averages of a captured
//! intermediate activation, upsampled to the input resolution.

use std::path::Path;

use crate::blocks::Fwd;
use crate::error::{Error, Result};
use crate::model::{edunet_forward, EDUNetConfig};
use crate::params::ParamStore;
use crate::rng::derive_rng;
use crate::tensor::Tensor;

/// Heatmap for one image: run the model with activation capture, take the sum
/// of all foreground logits of the fused view as the target, and weight the
/// chosen layer's channels by the spatial mean of its gradient. Returns
/// values in [0, 1] at the input resolution.
pub fn gradcam(
    store: &mut ParamStore<f32>,
    model: &EDUNetConfig,
    image: &Tensor<f32>,
    layer: &str,
) -> Result<Vec<f32>> {
    let (n, _, h, w) = image.dims4()?;
    if n != 1 {
        return Err(Error::Invalid(format!("gradcam expects one image, got {n}")));
    }
    let mut rng = derive_rng(0, "gradcam", 0, 0);
    let mut ctx = Fwd::new(store, false, &mut rng);
    ctx.capture = true;
    let out = edunet_forward(&mut ctx, image, model)?;
    let trace = std::mem::take(&mut ctx.trace);
    let act = match trace.iter().find(|(name, _)| name == layer) {
        Some((_, t)) => t.clone(),
        None => {
            let mut names: Vec<&str> = trace.iter().map(|(n, _)| n.as_str()).collect();
            names.sort();
            return Err(Error::Invalid(format!(
                "unknown layer `{layer}`; available: {}",
                names.join(", ")
            )));
        }
    };

    // target: total foreground evidence of the fused prediction
    let c = out.fused_prob.dims4()?.1;
    let target = out.fused_prob.slice_channels(1, c)?.sum_all()?;
    target.backward()?;

    let grad = act
        .grad()
        .ok_or_else(|| Error::Backward(format!("layer `{layer}` received no gradient")))?;
    let (_, ac, ah, aw) = act.dims4()?;
    let plane = ah * aw;
    let data = act.data();
    // channel weight = spatial mean of the gradient, then ReLU(sum_c w_c A_c)
    let mut heat = vec![0.0f32; plane];
    for ch in 0..ac {
        let wc: f32 = grad[ch * plane..(ch + 1) * plane].iter().sum::<f32>() / plane as f32;
        for p in 0..plane {
            heat[p] += wc * data[ch * plane + p];
        }
    }
    for v in heat.iter_mut() {
        *v = v.max(0.0);
    }
    let max = heat.iter().cloned().fold(0.0f32, f32::max);
    if max > 0.0 {
        for v in heat.iter_mut() {
            *v /= max;
        }
    }
    let t = Tensor::constant(heat, &[1, 1, ah, aw])?;
    Ok(t.interpolate_bilinear(h, w)?.data().to_vec())
}

/// Names a heatmap can be requested for under this configuration.
pub fn capture_layers(model: &EDUNetConfig) -> Vec<String> {
    let mut names = Vec::new();
    if model.use_local {
        let plan = crate::model::local_plan(model.profile);
        names.push("local.stem".to_string());
        for s in 0..plan.stages.len() {
            names.push(format!("local.s{s}"));
        }
        names.push("local.bottleneck".to_string());
        for t in 0..plan.skip_channels().len() {
            names.push(format!("local.dec{t}"));
        }
    }
    if model.use_global {
        names.push("global.stem".to_string());
        for s in 0..model.global_channels.len() {
            names.push(format!("global.s{s}"));
        }
        for i in (0..model.global_channels.len()).rev() {
            names.push(format!("global.mcega{i}"));
            names.push(format!("global.dec{i}"));
        }
    }
    names
}

/// Save a heatmap as an 8-bit grayscale PNG.
pub fn save_heatmap(path: &Path, heat: &[f32], h: usize, w: usize) -> Result<()> {
    if heat.len() != h * w {
        return Err(Error::Shape(format!(
            "heatmap has {} values for {h}x{w}",
            heat.len()
        )));
    }
    let bytes: Vec<u8> = heat
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Invalid("heatmap buffer mismatch".into()))?;
    img.save(path)?;
    Ok(())
}
