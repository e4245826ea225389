//! Dataset I/O, preprocessing, augmentation, fold splitting, and a synthetic
//! OCT-like generator for tests and demos.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::distributions::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// One image/mask pair. Image values in [0,1]; mask holds class labels
/// (0 background, 1 IRF, 2 SRF, 3 PED), row-major, same extents as image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl Sample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.image.len() != self.height * self.width || self.mask.len() != self.image.len() {
            return Err(Error::Data(format!(
                "sample `{}`: buffer sizes do not match {}x{}",
                self.id, self.height, self.width
            )));
        }
        if self.image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("sample `{}`: non-finite pixel", self.id)));
        }
        if let Some(l) = self.mask.iter().find(|l| **l as usize >= num_classes) {
            return Err(Error::Data(format!(
                "sample `{}`: mask label {l} >= num_classes {num_classes}",
                self.id
            )));
        }
        Ok(())
    }
}

// ---- I/O ------------------------------------------------------------------

pub fn load_sample(
    image_path: &Path,
    mask_path: &Path,
    num_classes: usize,
) -> Result<Sample> {
    let img = image::open(image_path)
        .map_err(|e| Error::Data(format!("{}: {e}", image_path.display())))?
        .to_luma8();
    let msk = image::open(mask_path)
        .map_err(|e| Error::Data(format!("{}: {e}", mask_path.display())))?
        .to_luma8();
    if img.dimensions() != msk.dimensions() {
        return Err(Error::Data(format!(
            "{}: image {:?} vs mask {:?}",
            image_path.display(),
            img.dimensions(),
            msk.dimensions()
        )));
    }
    let (w, h) = img.dimensions();
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let sample = Sample {
        id,
        image: img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        mask: msk.into_raw(),
        height: h as usize,
        width: w as usize,
    };
    sample.validate(num_classes)?;
    Ok(sample)
}

/// Write `<root>/images/<id>.png` and `<root>/masks/<id>.png`.
pub fn save_sample(root: &Path, sample: &Sample) -> Result<()> {
    let idir = root.join("images");
    let mdir = root.join("masks");
    std::fs::create_dir_all(&idir)?;
    std::fs::create_dir_all(&mdir)?;
    let (w, h) = (sample.width as u32, sample.height as u32);
    let img_bytes: Vec<u8> = sample
        .image
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = GrayImage::from_raw(w, h, img_bytes)
        .ok_or_else(|| Error::Data("image buffer size mismatch".into()))?;
    img.save(idir.join(format!("{}.png", sample.id)))
        ?;
    let msk = GrayImage::from_raw(w, h, sample.mask.clone())
        .ok_or_else(|| Error::Data("mask buffer size mismatch".into()))?;
    msk.save(mdir.join(format!("{}.png", sample.id)))
        ?;
    Ok(())
}

/// Sorted sample ids under `<root>/images/*.png`.
pub fn scan_dataset(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("images");
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
    {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn sample_paths(root: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        root.join("images").join(format!("{id}.png")),
        root.join("masks").join(format!("{id}.png")),
    )
}

/// Plain-text `id,split` manifest for fixed splits.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, split) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected `id,split`", path.display(), ln + 1))
        })?;
        rows.push((id.trim().to_string(), split.trim().to_string()));
    }
    Ok(rows)
}

// ---- preprocessing --------------------------------------------------------

fn bilinear_at(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y0 = (y.floor().max(0.0) as usize).min(h - 1);
    let x0 = (x.floor().max(0.0) as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = if y.floor() < 0.0 || y.floor() as usize >= h - 1 { 0.0 } else { y - y.floor() };
    let fx = if x.floor() < 0.0 || x.floor() as usize >= w - 1 { 0.0 } else { x - x.floor() };
    let top = src[y0 * w + x0] as f64 * (1.0 - fx) + src[y0 * w + x1] as f64 * fx;
    let bot = src[y1 * w + x0] as f64 * (1.0 - fx) + src[y1 * w + x1] as f64 * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

fn nearest_at(src: &[u8], h: usize, w: usize, y: f64, x: f64) -> u8 {
    let yi = (y.round().max(0.0) as usize).min(h - 1);
    let xi = (x.round().max(0.0) as usize).min(w - 1);
    src[yi * w + xi]
}

/// Crop the centered square of side min(H, W), then resize to `target`:
/// bilinear for the image, nearest for the mask (half-pixel centers).
pub fn center_crop_resize(sample: &Sample, target: (usize, usize)) -> Result<Sample> {
    let (h, w) = (sample.height, sample.width);
    let (th, tw) = target;
    if h == 0 || w == 0 || th == 0 || tw == 0 {
        return Err(Error::Data("center_crop_resize: degenerate extents".into()));
    }
    if h == w && (h, w) == (th, tw) {
        return Ok(sample.clone());
    }
    let side = h.min(w);
    let oy = (h - side) / 2;
    let ox = (w - side) / 2;
    let mut crop_img = vec![0.0f32; side * side];
    let mut crop_msk = vec![0u8; side * side];
    for i in 0..side {
        for j in 0..side {
            crop_img[i * side + j] = sample.image[(i + oy) * w + (j + ox)];
            crop_msk[i * side + j] = sample.mask[(i + oy) * w + (j + ox)];
        }
    }
    let mut image = vec![0.0f32; th * tw];
    let mut mask = vec![0u8; th * tw];
    let sy = side as f64 / th as f64;
    let sx = side as f64 / tw as f64;
    for i in 0..th {
        for j in 0..tw {
            let y = (i as f64 + 0.5) * sy - 0.5;
            let x = (j as f64 + 0.5) * sx - 0.5;
            image[i * tw + j] = bilinear_at(&crop_img, side, side, y, x);
            mask[i * tw + j] = nearest_at(&crop_msk, side, side, y, x);
        }
    }
    Ok(Sample {
        id: sample.id.clone(),
        image,
        mask,
        height: th,
        width: tw,
    })
}

// ---- augmentation ---------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub rotate_prob: f64,
    pub rotate_max_deg: f64,
    pub brightness_prob: f64,
    pub brightness_delta: f64,
    pub contrast_prob: f64,
    pub contrast_delta: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            rotate_prob: 0.5,
            rotate_max_deg: 15.0,
            brightness_prob: 0.5,
            brightness_delta: 0.2,
            contrast_prob: 0.5,
            contrast_delta: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            hflip_prob: 0.0,
            rotate_prob: 0.0,
            rotate_max_deg: 0.0,
            brightness_prob: 0.0,
            brightness_delta: 0.0,
            contrast_prob: 0.0,
            contrast_delta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [
            self.hflip_prob,
            self.rotate_prob,
            self.brightness_prob,
            self.contrast_prob,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment probability {p} out of [0,1]")));
            }
        }
        if self.rotate_max_deg < 0.0 {
            return Err(Error::Config("rotate_max_deg must be >= 0".into()));
        }
        Ok(())
    }
}

fn hflip(sample: &mut Sample) {
    let w = sample.width;
    for row in sample.image.chunks_mut(w) {
        row.reverse();
    }
    for row in sample.mask.chunks_mut(w) {
        row.reverse();
    }
}

/// Rotate about the image center; bilinear for the image, nearest for the
/// mask, zero fill (background) outside the source.
fn rotate(sample: &Sample, degrees: f64) -> Sample {
    let (h, w) = (sample.height, sample.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let mut image = vec![0.0f32; h * w];
    let mut mask = vec![0u8; h * w];
    for i in 0..h {
        for j in 0..w {
            // inverse mapping: destination pixel pulled from the source
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let sy = cy + dy * cos - dx * sin;
            let sx = cx + dy * sin + dx * cos;
            if sy >= -0.5 && sy <= h as f64 - 0.5 && sx >= -0.5 && sx <= w as f64 - 0.5 {
                image[i * w + j] = bilinear_at(&sample.image, h, w, sy, sx);
                mask[i * w + j] = nearest_at(&sample.mask, h, w, sy, sx);
            }
        }
    }
    Sample {
        id: sample.id.clone(),
        image,
        mask,
        height: h,
        width: w,
    }
}

/// Geometric transforms hit image and mask identically; photometric
/// transforms hit the image only, which is re-clamped to [0,1].
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    cfg.validate()?;
    let mut out = sample.clone();
    if rng.gen_range(0.0..1.0) < cfg.hflip_prob {
        hflip(&mut out);
    }
    if rng.gen_range(0.0..1.0) < cfg.rotate_prob {
        let deg = rng.gen_range(-cfg.rotate_max_deg..=cfg.rotate_max_deg);
        out = rotate(&out, deg);
    }
    if rng.gen_range(0.0..1.0) < cfg.brightness_prob {
        let delta = rng.gen_range(-cfg.brightness_delta..=cfg.brightness_delta) as f32;
        for v in &mut out.image {
            *v += delta;
        }
    }
    if rng.gen_range(0.0..1.0) < cfg.contrast_prob {
        let factor = (1.0 + rng.gen_range(-cfg.contrast_delta..=cfg.contrast_delta)) as f32;
        for v in &mut out.image {
            *v = (*v - 0.5) * factor + 0.5;
        }
    }
    for v in &mut out.image {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

// ---- folds ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FoldSpec {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSpec {
    pub fn fold_ids(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Seeded shuffle then round-robin: a partition with fold sizes differing by
/// at most one.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldSpec> {
    if k == 0 {
        return Err(Error::Config("fold count must be >= 1".into()));
    }
    let mut shuffled: Vec<&String> = ids.iter().collect();
    let mut rng = derive_rng(seed, "folds", 0, 0);
    use rand::seq::SliceRandom;
    shuffled.shuffle(&mut rng);
    let assignment = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i % k))
        .collect();
    Ok(FoldSpec { k, seed, assignment })
}

// ---- synthetic generator --------------------------------------------------

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    label: u8,
    intensity: f32,
}

impl Ellipse {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 - self.cy) / self.ry;
        let dx = (x as f64 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

/// OCT-like phantoms: curved bright retinal bands over a dark background,
/// multiplicative speckle, and fluid lesions painted as dark regions whose
/// geometry also defines the mask. IRF: several small cysts inside the bands
/// (label 1). SRF: one larger lens beneath the bands (label 2). PED: a dome
/// at the deepest band (label 3, only when class_count is 4).
pub fn synth_generate(
    n: usize,
    size: usize,
    seed: u64,
    class_count: usize,
) -> Result<Vec<Sample>> {
    if size < 32 {
        return Err(Error::Config(format!(
            "synthetic size {size} too small for the lesion templates (min 32)"
        )));
    }
    if !(2..=4).contains(&class_count) {
        return Err(Error::Config("class_count must be in 2..=4".into()));
    }
    (0..n)
        .map(|idx| {
            let mut rng = derive_rng(seed, "synth", 0, idx as u64);
            Ok(generate_one(idx, size, class_count, &mut rng))
        })
        .collect()
}

fn generate_one(idx: usize, size: usize, class_count: usize, rng: &mut ChaCha8Rng) -> Sample {
    let s = size as f64;
    // band geometry: retina occupies roughly the middle third, boundaries
    // bowed by a low-frequency sine
    let top = s * rng.gen_range(0.25..0.35);
    let thickness = s * rng.gen_range(0.28..0.38);
    let amp = s * rng.gen_range(0.01..0.04);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let band_levels: Vec<f32> = (0..4)
        .map(|_| rng.gen_range(0.45..0.85))
        .collect();

    let boundary = |x: usize| top + amp * (std::f64::consts::TAU * x as f64 / s + phase).sin();

    let mut lesions: Vec<Ellipse> = Vec::new();
    // IRF: several small cysts inside the band stack
    for _ in 0..rng.gen_range(2..=4usize) {
        let r = rng.gen_range(s / 24.0..s / 14.0);
        lesions.push(Ellipse {
            cy: top + rng.gen_range(0.25..0.75) * thickness,
            cx: rng.gen_range(0.15 * s..0.85 * s),
            ry: r,
            rx: r * rng.gen_range(0.8..1.4),
            label: 1,
            intensity: 0.08,
        });
    }
    if class_count >= 3 {
        // SRF: a single wide lens just under the band stack
        lesions.push(Ellipse {
            cy: top + thickness * rng.gen_range(0.95..1.05),
            cx: rng.gen_range(0.3 * s..0.7 * s),
            ry: rng.gen_range(s / 12.0..s / 8.0),
            rx: rng.gen_range(s / 6.0..s / 4.0),
            label: 2,
            intensity: 0.10,
        });
    }
    if class_count == 4 {
        // PED: a dome sitting on the deepest band
        lesions.push(Ellipse {
            cy: top + thickness * rng.gen_range(1.15..1.25),
            cx: rng.gen_range(0.25 * s..0.75 * s),
            ry: rng.gen_range(s / 14.0..s / 10.0),
            rx: rng.gen_range(s / 8.0..s / 5.0),
            label: 3,
            intensity: 0.15,
        });
    }

    let mut image = vec![0.0f32; size * size];
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let b = boundary(x);
            let base = if (y as f64) < b {
                0.05 // vitreous
            } else if (y as f64) < b + thickness {
                // banded retina: pick the sub-band level
                let frac = (y as f64 - b) / thickness;
                band_levels[((frac * band_levels.len() as f64) as usize)
                    .min(band_levels.len() - 1)]
            } else {
                0.22 // choroid
            };
            let mut v = base;
            // first matching lesion wins; later entries are deeper structures
            for e in &lesions {
                if e.contains(y, x) {
                    v = e.intensity;
                    mask[y * size + x] = e.label;
                    break;
                }
            }
            image[y * size + x] = v;
        }
    }
    // multiplicative speckle on the image only; the mask stays exact
    let normal = BoxMuller;
    for v in &mut image {
        let nvar: f64 = normal.sample(rng);
        *v = (*v * (1.0 + 0.15 * nvar as f32)).clamp(0.0, 1.0);
    }
    Sample {
        id: format!("synth{idx:04}"),
        image,
        mask,
        height: size,
        width: size,
    }
}

/// Standard normal via Box-Muller on the uniform stream (keeps rand's
/// distribution internals out of the reproducibility contract).
struct BoxMuller;

impl Distribution<f64> for BoxMuller {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
