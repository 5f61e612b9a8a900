//! Desk-scale shape-versus-texture benchmark.
//!
//! Every image shows a dark elliptical lumen inside a bright wall on a
//! speckled background. The class is carried by geometry only:
//!
//! * normal: closed, thin wall;
//! * benign: closed, thick wall and a bright stone inside the lumen;
//! * malignant: irregular wall with one or two gaps and an adjacent mass.
//!
//! The mass is filled with high-contrast tissue speckle, which gives a
//! texture shortcut correlated with the malignant class.

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::blur_image;
use crate::error::{Error, Result};
use crate::label::Label;
use crate::pipeline::BoundingBox;
use crate::plane::Plane;

use super::perturb::{add_tissue_patch, corner_patch, tissue_texture, TISSUE_CONTRAST};
use super::LabeledImage;

const BACKGROUND: f64 = 85.0;
const LUMEN: f64 = 25.0;
const WALL: f64 = 185.0;
const STONE: f64 = 215.0;
/// Reference resolution for all pixel-valued geometry.
const REFERENCE: f64 = 128.0;
pub const MIN_SIZE: usize = 48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    pub normal: usize,
    pub benign: usize,
    pub malignant: usize,
    /// Probability that an image of any class receives a tissue patch in a
    /// corner of its ROI.
    pub distractor_prob: f64,
    /// Contrast of the background speckle.
    pub noise: f64,
    /// Contrast of the speckle filling the malignant mass.
    pub mass_contrast: f64,
    pub images_per_patient: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 128,
            normal: 10,
            benign: 10,
            malignant: 10,
            distractor_prob: 0.1,
            noise: 12.0,
            mass_contrast: TISSUE_CONTRAST,
            images_per_patient: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_SIZE {
            return Err(Error::config(
                "size",
                format!(
                    "{} is too small for the shapes (minimum {MIN_SIZE})",
                    self.size
                ),
            ));
        }
        if self.total() == 0 {
            return Err(Error::config("counts", "at least one image is required"));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::config("distractor_prob", "must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0 && self.mass_contrast >= 0.0) {
            return Err(Error::config("noise", "contrasts must be non-negative"));
        }
        if self.images_per_patient == 0 {
            return Err(Error::config("images_per_patient", "must be at least 1"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.normal + self.benign + self.malignant
    }
}

/// Generator parameters of one image, in pixels and radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub label: Label,
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub wall: f64,
    /// `(start angle, width)` of each missing wall segment.
    pub gaps: Vec<(f64, f64)>,
    /// Relative radius modulation `amp * sin(freq * phi + phase)` terms.
    pub wobble: Vec<(f64, f64, f64)>,
    /// `(x, y, radius)`.
    pub stone: Option<(f64, f64, f64)>,
    pub mass: Option<(f64, f64, f64)>,
    pub roi: BoundingBox,
    pub distractor: Option<BoundingBox>,
}

impl ShapeParams {
    fn frame(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        (dx * c + dy * s, -dx * s + dy * c)
    }

    /// Ellipse radius in direction `phi` (ellipse frame).
    fn nominal_radius(&self, phi: f64) -> f64 {
        let (s, c) = phi.sin_cos();
        self.a * self.b / ((self.b * c).powi(2) + (self.a * s).powi(2)).sqrt()
    }

    fn radius(&self, phi: f64) -> f64 {
        let m: f64 = self
            .wobble
            .iter()
            .map(|&(amp, f, ph)| amp * (f * phi + ph).sin())
            .sum();
        self.nominal_radius(phi) * (1.0 + m)
    }

    fn in_gap(&self, phi: f64) -> bool {
        self.gaps
            .iter()
            .any(|&(start, width)| (phi - start).rem_euclid(TAU) < width)
    }

    fn to_image(&self, phi: f64, r: f64) -> (f64, f64) {
        let (u, v) = (r * phi.cos(), r * phi.sin());
        let (s, c) = self.theta.sin_cos();
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }
}

fn sample_shape(label: Label, size: usize, rng: &mut ChaCha8Rng) -> ShapeParams {
    let s = size as f64;
    let f = s / REFERENCE;
    let cx = s * rng.random_range(0.45..0.55);
    let cy = s * rng.random_range(0.45..0.55);
    let a = s * rng.random_range(0.15..0.21);
    let b = s * rng.random_range(0.10..0.14);
    let theta = rng.random_range(0.0..PI);
    let mut p = ShapeParams {
        label,
        cx,
        cy,
        a,
        b,
        theta,
        wall: 2.0 * f,
        gaps: Vec::new(),
        wobble: Vec::new(),
        stone: None,
        mass: None,
        roi: BoundingBox::whole(size, size),
        distractor: None,
    };
    match label {
        Label::Normal => {}
        Label::Benign => {
            p.wall = 5.0 * f;
            let r = (0.05 * s).min(0.35 * b);
            let ang = rng.random_range(0.0..TAU);
            let (x, y) = p.to_image(ang, 0.2 * b);
            p.stone = Some((x, y, r));
        }
        Label::Malignant => {
            p.wall = 3.0 * f;
            p.wobble = vec![
                (
                    rng.random_range(0.06..0.10),
                    3.0,
                    rng.random_range(0.0..TAU),
                ),
                (
                    rng.random_range(0.02..0.05),
                    5.0,
                    rng.random_range(0.0..TAU),
                ),
            ];
            let n_gaps = rng.random_range(1..=2);
            let first = rng.random_range(0.0..TAU);
            for g in 0..n_gaps {
                let width = rng.random_range(50.0f64..80.0).to_radians();
                p.gaps
                    .push(((first + g as f64 * PI).rem_euclid(TAU), width));
            }
            let (start, width) = p.gaps[0];
            let phi = start + width / 2.0;
            let rm = 0.07 * s;
            let (x, y) = p.to_image(phi, p.radius(phi) + 0.6 * rm);
            p.mass = Some((x, y, rm));
        }
    }
    // axis-aligned extent of the rotated shape plus a wide margin
    let grow = 1.0 + p.wobble.iter().map(|w| w.0).sum::<f64>();
    let (st, ct) = theta.sin_cos();
    let ex = ((a * ct).powi(2) + (b * st).powi(2)).sqrt() * grow + p.wall;
    let ey = ((a * st).powi(2) + (b * ct).powi(2)).sqrt() * grow + p.wall;
    let m = 0.75 * a.max(b);
    p.roi = BoundingBox {
        x_min: (cx - ex - m).floor() as i64,
        y_min: (cy - ey - m).floor() as i64,
        x_max: (cx + ex + m).ceil() as i64,
        y_max: (cy + ey + m).ceil() as i64,
    }
    .clamp(size, size)
    .expect("shape lies inside the image");
    p
}

/// Noise-free rendering of the geometry.
fn render_shape(p: &ShapeParams, size: usize) -> Plane {
    let img = Plane::from_fn(size, size, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (u, v) = p.frame(px, py);
        let phi = v.atan2(u);
        let d = (u * u + v * v).sqrt() - p.radius(phi);
        let mut val = if d < 0.0 {
            LUMEN
        } else if d < p.wall && !p.in_gap(phi.rem_euclid(TAU)) {
            WALL
        } else {
            BACKGROUND
        };
        if let Some((sx, sy, r)) = p.stone {
            if (px - sx).hypot(py - sy) < r {
                val = STONE;
            }
        }
        val
    });
    blur_image(&img, 0.6 * size as f64 / REFERENCE).expect("nonempty")
}

fn render(p: &ShapeParams, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Plane> {
    let size = config.size;
    let clean = render_shape(p, size);
    let speckle = tissue_texture(size, size, 0.0, config.noise, rng)?;
    let mut img = Plane::from_fn(size, size, |x, y| {
        let v = clean.get(x, y);
        // the fluid-filled lumen is nearly anechoic
        let k = if v < (LUMEN + BACKGROUND) / 2.0 {
            0.3
        } else {
            1.0
        };
        v + k * speckle.get(x, y)
    });
    if let Some((mx, my, r)) = p.mass {
        let tex = tissue_texture(size, size, BACKGROUND, config.mass_contrast, rng)?;
        for y in 0..size {
            for x in 0..size {
                let d = (x as f64 + 0.5 - mx).hypot(y as f64 + 0.5 - my);
                let w = ((r - d) / 1.5).clamp(0.0, 1.0);
                if w > 0.0 {
                    let (u, v) = p.frame(x as f64 + 0.5, y as f64 + 0.5);
                    // the mass abuts the wall from outside
                    if (u * u + v * v).sqrt() >= p.radius(v.atan2(u)) {
                        img.set(x, y, img.get(x, y) * (1.0 - w) + tex.get(x, y) * w);
                    }
                }
            }
        }
    }
    if let Some(bbox) = p.distractor {
        img = add_tissue_patch(&img, &bbox, rng.random())?;
    }
    img.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.round().clamp(0.0, 255.0));
    Ok(img)
}

/// Generates the dataset together with each image's generator parameters.
pub fn generate_with_shapes(config: &SynthConfig) -> Result<Vec<(LabeledImage, ShapeParams)>> {
    config.validate()?;
    let mut plan: Vec<(Label, String)> = Vec::with_capacity(config.total());
    let mut patient = 0usize;
    for (label, n) in [
        (Label::Normal, config.normal),
        (Label::Benign, config.benign),
        (Label::Malignant, config.malignant),
    ] {
        for i in 0..n {
            if i % config.images_per_patient == 0 {
                patient += 1;
            }
            plan.push((label, format!("patient_{patient:04}")));
        }
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(u64::MAX);
    plan.shuffle(&mut order_rng);

    plan.into_iter()
        .enumerate()
        .map(|(i, (label, patient_id))| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let mut shape = sample_shape(label, config.size, &mut rng);
            if rng.random_bool(config.distractor_prob) {
                shape.distractor = Some(corner_patch(&shape.roi, rng.random_range(0..4)));
            }
            let img = render(&shape, config, &mut rng)?;
            let rec = LabeledImage {
                id: format!("images/synth_{i:05}.png"),
                image: img.to_gray(),
                label,
                patient_id,
                boxes: vec![shape.roi],
            };
            Ok((rec, shape))
        })
        .collect()
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<LabeledImage>> {
    Ok(generate_with_shapes(config)?
        .into_iter()
        .map(|(r, _)| r)
        .collect())
}

/// Rule-based reader that knows where the shape is (but not its class):
/// it scans radially across the nominal wall position and measures how
/// much of the wall is present and how thick it is.
pub fn rule_oracle(img: &Plane, p: &ShapeParams) -> Label {
    let f = img.width().min(img.height()) as f64 / REFERENCE;
    let threshold = (WALL + BACKGROUND) / 2.0;
    let steps = 180;
    let (mut complete, mut thickness) = (0usize, 0.0);
    for k in 0..steps {
        let phi = TAU * k as f64 / steps as f64;
        let r0 = p.nominal_radius(phi);
        let mut wall = 0.0;
        let mut t = 0.75 * r0;
        while t < 1.25 * r0 + 6.0 * f {
            let (x, y) = p.to_image(phi, t);
            let (xi, yi) = (x.floor(), y.floor());
            if xi >= 0.0
                && yi >= 0.0
                && (xi as usize) < img.width()
                && (yi as usize) < img.height()
                && img.get(xi as usize, yi as usize) > threshold
            {
                wall += 0.25;
            }
            t += 0.25;
        }
        if wall >= f {
            complete += 1;
            thickness += wall;
        }
    }
    if (complete as f64) < 0.9 * steps as f64 {
        Label::Malignant
    } else if thickness / complete as f64 > 3.5 * f {
        Label::Benign
    } else {
        Label::Normal
    }
}
