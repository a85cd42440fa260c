//! Synthetic dataset generator.
//!
//! Each generated image holds exactly one salient object on a gray noise
//! background. A class fixes the object's *kind* — its hue band, its shape
//! (rectangle, disk, or diamond), and the orientation of a faint stripe
//! texture — while every instance draws its own position, size, aspect,
//! exact hue, brightness, and noise. That within-class variation is what
//! makes the images worth contrasting: if all instances of a class were
//! identical, telling images apart (the training signal) would require
//! nothing beyond memorizing one template.
//!
//! Guarantees, enforced by construction:
//!
//! * the object covers at least 15% of the image (the rasterizer grows the
//!   shape until it does);
//! * the saliency mask and the label map equal the rasterized shape exactly;
//! * classes are separable by pixel statistics (hue bands are disjoint);
//! * byte-identical output for equal `(images, classes, size, seed)`.

use std::path::Path;

use maskcontrast_core::error::{Error, Result};
use maskcontrast_core::rng::{self, stream};
use rand::Rng as _;

use crate::netpbm::{write_pgm, write_ppm};

/// Generator parameters; see [`generate`].
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub images: usize,
    pub classes: usize,
    /// Square image side in pixels.
    pub size: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.images == 0 {
            return Err(Error::Config("need at least 1 image".into()));
        }
        if self.size < 8 {
            return Err(Error::Config(format!(
                "image side must be at least 8 pixels, got {}",
                self.size
            )));
        }
        Ok(())
    }
}

/// The three object silhouettes, assigned to classes round-robin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Rectangle,
    Disk,
    Diamond,
}

impl Shape {
    fn for_class(class: usize) -> Shape {
        match class % 3 {
            0 => Shape::Rectangle,
            1 => Shape::Disk,
            _ => Shape::Diamond,
        }
    }
}

/// Geometry of one object instance: center plus half-extents.
#[derive(Debug, Clone, Copy)]
struct Placement {
    cy: usize,
    cx: usize,
    half_h: usize,
    half_w: usize,
}

fn inside(shape: Shape, p: Placement, y: usize, x: usize) -> bool {
    let dy = y as f64 - p.cy as f64;
    let dx = x as f64 - p.cx as f64;
    let (hh, hw) = (p.half_h as f64, p.half_w as f64);
    match shape {
        Shape::Rectangle => dy.abs() <= hh && dx.abs() <= hw,
        Shape::Disk => (dy / hh).powi(2) + (dx / hw).powi(2) <= 1.0,
        Shape::Diamond => dy.abs() / hh + dx.abs() / hw <= 1.0,
    }
}

fn rasterize(shape: Shape, p: Placement, size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            mask[y * size + x] = inside(shape, p, y, x);
        }
    }
    mask
}

/// Standard HSV to RGB conversion; all components in `[0, 1]`.
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = (h6.floor() as usize) % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One generated image with its exact masks.
struct SynthImage {
    rgb: Vec<u8>,
    mask: Vec<u8>,
    labels: Vec<u8>,
}

/// Renders image `index`. All randomness comes from a dedicated stream, so
/// any image can be regenerated independently of the others.
fn render_image(config: &SynthConfig, index: usize) -> SynthImage {
    let size = config.size;
    let class = index % config.classes;
    let shape = Shape::for_class(class);
    let mut r = rng::stream_rng(config.seed, &[stream::SYNTH, index as u64]);

    // Instance geometry: target area 17%..28% of the image, mild aspect
    // jitter, uniform position among the placements that keep the shape
    // fully inside.
    let area_fraction: f64 = r.gen_range(0.17..0.28);
    let aspect: f64 = r.gen_range(0.75..1.35);
    let base = match shape {
        Shape::Rectangle => size as f64 * area_fraction.sqrt() / 2.0,
        Shape::Disk => size as f64 * (area_fraction / std::f64::consts::PI).sqrt(),
        Shape::Diamond => size as f64 * (area_fraction / 2.0).sqrt(),
    };
    let max_half = (size - 1) / 2;
    let clamp_half = |v: f64| (v.round() as usize).clamp(2, max_half);
    let mut half_h = clamp_half(base / aspect.sqrt());
    let mut half_w = clamp_half(base * aspect.sqrt());
    let mut cy = r.gen_range(half_h..size - half_h);
    let mut cx = r.gen_range(half_w..size - half_w);

    // Grow until the rasterized object reaches the 15% floor (rounding can
    // undershoot the analytic area). Each step enlarges both extents and
    // re-clamps the center, so the loop terminates with the shape still
    // fully inside the image.
    let min_pixels = (0.15 * (size * size) as f64).ceil() as usize;
    let mut mask = rasterize(shape, Placement { cy, cx, half_h, half_w }, size);
    while mask.iter().filter(|&&m| m).count() < min_pixels {
        half_h = (half_h + 1).min(max_half);
        half_w = (half_w + 1).min(max_half);
        cy = cy.clamp(half_h, size - 1 - half_h);
        cx = cx.clamp(half_w, size - 1 - half_w);
        mask = rasterize(shape, Placement { cy, cx, half_h, half_w }, size);
    }

    // Appearance: each class owns an evenly spaced hue band; the instance
    // jitters inside it and picks its own brightness. Stripes run
    // horizontally for even classes, vertically for odd ones.
    let hue = class as f64 / config.classes as f64 + r.gen_range(-0.06..0.06);
    let saturation = r.gen_range(0.65..0.85);
    let value = r.gen_range(0.70..0.95);
    let base_rgb = hsv_to_rgb(hue, saturation, value);
    let stripe_phase: f64 = r.gen_range(0.0..std::f64::consts::TAU);
    let horizontal_stripes = class % 2 == 0;

    let mut rgb = vec![0u8; size * size * 3];
    let mut mask_bytes = vec![0u8; size * size];
    let mut labels = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let px = if mask[i] {
                let along = if horizontal_stripes { y } else { x } as f64;
                let stripe = 0.05 * (along * std::f64::consts::TAU / 4.0 + stripe_phase).sin();
                let noise: f64 = r.gen_range(-0.05..0.05);
                mask_bytes[i] = 255;
                labels[i] = (class + 1) as u8;
                [
                    base_rgb[0] + stripe + noise,
                    base_rgb[1] + stripe + noise,
                    base_rgb[2] + stripe + noise,
                ]
            } else {
                let g = 0.32 + r.gen_range(-0.07..0.07);
                [g, g, g]
            };
            for (c, &v) in px.iter().enumerate() {
                rgb[i * 3 + c] = quantize(v);
            }
        }
    }
    SynthImage {
        rgb,
        mask: mask_bytes,
        labels,
    }
}

/// Generates `images` triples under `out`: `images/img_NNNN.ppm`,
/// `saliency/img_NNNN.pgm`, and `labels/img_NNNN.pgm`. Class ids in the
/// label maps start at 1; 0 is the background.
pub fn generate(out: impl AsRef<Path>, config: &SynthConfig) -> Result<()> {
    config.validate()?;
    let out = out.as_ref();
    for sub in ["images", "saliency", "labels"] {
        std::fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }
    if config.classes > 254 {
        return Err(Error::Config(format!(
            "at most 254 classes fit the 8-bit label maps, got {}",
            config.classes
        )));
    }
    for index in 0..config.images {
        let image = render_image(config, index);
        let stem = format!("img_{index:04}");
        let s = config.size;
        write_ppm(out.join("images").join(format!("{stem}.ppm")), s, s, &image.rgb)?;
        write_pgm(out.join("saliency").join(format!("{stem}.pgm")), s, s, &image.mask)?;
        write_pgm(out.join("labels").join(format!("{stem}.pgm")), s, s, &image.labels)?;
    }
    log::info!(
        "wrote {} {}x{} images across {} classes to {}",
        config.images,
        config.size,
        config.size,
        config.classes,
        out.display()
    );
    Ok(())
}
