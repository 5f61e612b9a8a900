//! Texture perturbations: low-frequency amplitude transplant and soft-tissue
//! patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::curriculum::blur_image;
use crate::error::{Error, Result};
use crate::pipeline::BoundingBox;
use crate::plane::Plane;

use super::LabeledImage;

/// In-place 2-D DFT of a row-major `w x h` grid. The inverse is scaled by
/// `1 / (w h)`.
pub(crate) fn fft2(data: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(data);
    let mut column = vec![Complex::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
    if inverse {
        let s = 1.0 / (w * h) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

pub(crate) fn spectrum(p: &Plane) -> Vec<Complex<f64>> {
    let mut d: Vec<Complex<f64>> = p.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut d, p.width(), p.height(), false);
    d
}

/// Signed frequency of DFT bin `i` out of `n`.
pub(crate) fn signed_freq(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Half-width of the swapped window: `floor(beta * min(H, W))`.
pub fn swap_radius(width: usize, height: usize, beta: f64) -> i64 {
    (beta * width.min(height) as f64).floor() as i64
}

/// Whether bin `(u, v)` lies inside the swapped low-frequency square.
pub fn in_swap_window(u: usize, v: usize, width: usize, height: usize, b: i64) -> bool {
    signed_freq(u, width).abs() < b && signed_freq(v, height).abs() < b
}

/// Replaces the target's amplitude spectrum with the source's at every
/// frequency `(fu, fv)` with `|fu|, |fv| < floor(beta * min(H, W))`, keeps the
/// target's phase everywhere and transforms back. No clamping.
pub fn low_freq_swap_unclamped(target: &Plane, source: &Plane, beta: f64) -> Result<Plane> {
    if (target.width(), target.height()) != (source.width(), source.height()) {
        return Err(Error::shape(format!(
            "low_freq_swap: target is {}x{}, source is {}x{}",
            target.width(),
            target.height(),
            source.width(),
            source.height()
        )));
    }
    if !(0.0..=0.5).contains(&beta) {
        return Err(Error::arg(format!("beta must lie in [0, 0.5], got {beta}")));
    }
    if target.is_empty() {
        return Err(Error::arg("low_freq_swap on an empty image"));
    }
    let (w, h) = (target.width(), target.height());
    let b = swap_radius(w, h, beta);
    let mut t = spectrum(target);
    let s = spectrum(source);
    for v in 0..h {
        for u in 0..w {
            if in_swap_window(u, v, w, h, b) {
                let i = v * w + u;
                t[i] = Complex::from_polar(s[i].norm(), t[i].arg());
            }
        }
    }
    fft2(&mut t, w, h, true);
    Plane::new(w, h, t.iter().map(|c| c.re).collect())
}

/// [`low_freq_swap_unclamped`] followed by clamping to `[0, 255]`.
pub fn low_freq_swap(target: &Plane, source: &Plane, beta: f64) -> Result<Plane> {
    let mut out = low_freq_swap_unclamped(target, source, beta)?;
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(0.0, 255.0));
    Ok(out)
}

pub const TISSUE_SMOOTHING: f64 = 1.5;
pub const TISSUE_CONTRAST: f64 = 40.0;

/// Gaussian-smoothed speckle with the given mean and standard deviation,
/// before clamping.
pub(crate) fn tissue_texture(
    width: usize,
    height: usize,
    mean: f64,
    contrast: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Plane> {
    let noise = Plane::from_fn(width, height, |_, _| rng.sample::<f64, _>(StandardNormal));
    let smooth = blur_image(&noise, TISSUE_SMOOTHING)?;
    let m = smooth.mean();
    let sd = (smooth.data().iter().map(|v| (v - m).powi(2)).sum::<f64>()
        / smooth.data().len() as f64)
        .sqrt()
        .max(1e-12);
    Ok(Plane::from_fn(width, height, |x, y| {
        mean + contrast * (smooth.get(x, y) - m) / sd
    }))
}

/// Fills `bbox` with smoothed speckle whose mean is the image's mean
/// intensity; every other pixel is left untouched.
pub fn add_tissue_patch(img: &Plane, bbox: &BoundingBox, seed: u64) -> Result<Plane> {
    bbox.validate()?;
    if bbox.x_min < 0
        || bbox.y_min < 0
        || bbox.x_max > img.width() as i64
        || bbox.y_max > img.height() as i64
    {
        return Err(Error::arg(format!(
            "patch box {bbox:?} exceeds the {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = tissue_texture(
        bbox.width() as usize,
        bbox.height() as usize,
        img.mean(),
        TISSUE_CONTRAST,
        &mut rng,
    )?;
    let mut out = img.clone();
    for y in 0..tex.height() {
        for x in 0..tex.width() {
            out.set(
                bbox.x_min as usize + x,
                bbox.y_min as usize + y,
                tex.get(x, y).clamp(0.0, 255.0),
            );
        }
    }
    Ok(out)
}

/// Square patch in one corner of `roi`, with side a quarter of the ROI's
/// shorter side (at least 2 pixels).
pub fn corner_patch(roi: &BoundingBox, corner: usize) -> BoundingBox {
    let side = (roi.width().min(roi.height()) / 4).max(2);
    let (x0, y0) = match corner % 4 {
        0 => (roi.x_min, roi.y_min),
        1 => (roi.x_max - side, roi.y_min),
        2 => (roi.x_min, roi.y_max - side),
        _ => (roi.x_max - side, roi.y_max - side),
    };
    BoundingBox {
        x_min: x0,
        y_min: y0,
        x_max: x0 + side,
        y_max: y0 + side,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub beta: f64,
    pub swap: bool,
    pub patch: bool,
    pub seed: u64,
    /// Inserted before the extension of every altered image path.
    pub suffix: String,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            swap: true,
            patch: true,
            seed: 0,
            suffix: "_perturbed".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "operation", rename_all = "snake_case")]
pub enum Operation {
    LowFreqSwap { beta: f64, source: String },
    AddTissuePatch { bbox: BoundingBox, seed: u64 },
}

/// Sidecar entry for one altered image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub image: String,
    pub original: String,
    pub operations: Vec<Operation>,
}

fn suffixed(id: &str, suffix: &str) -> String {
    match id.rfind('.') {
        Some(dot) if !id[dot..].contains('/') => format!("{}{suffix}{}", &id[..dot], &id[dot..]),
        _ => format!("{id}{suffix}"),
    }
}

/// Perturbed twin of `records`: every non-malignant image gets the
/// amplitude spectrum of a randomly chosen malignant image from `sources`
/// and a tissue patch in a corner of its first ROI (the whole image when it
/// has none). Malignant records are copied unchanged. Labels and boxes are
/// never modified.
pub fn perturb_dataset(
    records: &[LabeledImage],
    sources: &[LabeledImage],
    config: &PerturbConfig,
) -> Result<(Vec<LabeledImage>, Vec<Provenance>)> {
    let pool: Vec<&LabeledImage> = sources.iter().filter(|r| r.label.is_malignant()).collect();
    if config.swap && pool.is_empty() {
        return Err(Error::arg(
            "low-frequency swap needs at least one malignant source",
        ));
    }
    let mut out = Vec::with_capacity(records.len());
    let mut provenance = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if r.label.is_malignant() {
            out.push(r.clone());
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        let mut img = r.plane();
        let mut ops = Vec::new();
        if config.swap {
            let src = pool[rng.random_range(0..pool.len())];
            let sp = src.plane().resize_bilinear(img.width(), img.height())?;
            img = low_freq_swap(&img, &sp, config.beta)?;
            ops.push(Operation::LowFreqSwap {
                beta: config.beta,
                source: src.id.clone(),
            });
        }
        if config.patch {
            let roi = r
                .boxes
                .first()
                .and_then(|b| b.clamp(img.width(), img.height()))
                .unwrap_or_else(|| BoundingBox::whole(img.width(), img.height()));
            let bbox = corner_patch(&roi, rng.random_range(0..4));
            let seed = rng.random();
            img = add_tissue_patch(&img, &bbox, seed)?;
            ops.push(Operation::AddTissuePatch { bbox, seed });
        }
        let id = suffixed(&r.id, &config.suffix);
        provenance.push(Provenance {
            image: id.clone(),
            original: r.id.clone(),
            operations: ops,
        });
        out.push(LabeledImage {
            id,
            image: img.to_gray(),
            ..r.clone()
        });
    }
    Ok((out, provenance))
}
