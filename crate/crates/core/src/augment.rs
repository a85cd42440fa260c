//! Stochastic two-view augmentation.
//!
//! Each training image yields two independently augmented views. Geometric
//! transforms (random resized crop, horizontal flip) are applied identically
//! to the image and its object mask; photometric transforms (channel-affine
//! color jitter, random grayscale) touch only the image. A view is accepted
//! only if the object still covers more than `min_object_area` of it, so
//! both views always contain a usable part of the object.
//!
//! Everything here is a pure function of (input, RNG state): equal seeds
//! reproduce bit-identical views, and images can be augmented in parallel
//! from independent streams.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::maskcontrast::ObjectMask;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Augmentation hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Smallest crop area, as a fraction of the source image.
    pub scale_min: f64,
    /// Largest crop area, as a fraction of the source image.
    pub scale_max: f64,
    /// Probability of a horizontal flip.
    pub flip_prob: f64,
    /// Brightness jitter strength.
    pub brightness: f64,
    /// Contrast jitter strength.
    pub contrast: f64,
    /// Saturation jitter strength.
    pub saturation: f64,
    /// Probability of converting the view to grayscale.
    pub grayscale_prob: f64,
    /// A view is accepted only if the object covers more than this fraction.
    pub min_object_area: f64,
    /// Crop attempts before falling back to the object's bounding box.
    pub max_retries: usize,
    /// Base seed for the per-(epoch, image) streams.
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_min: 0.5,
            scale_max: 1.0,
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.2,
            min_object_area: 0.10,
            max_retries: 10,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_object_area > 0.0 && self.min_object_area < 1.0) {
            return Err(Error::Config(format!(
                "min_object_area must lie in (0, 1), got {}",
                self.min_object_area
            )));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale range must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=0.4).contains(&s) {
                return Err(Error::Config(format!(
                    "{name} jitter strength must lie in [0, 0.4], got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Rectangular crop region in source-image coordinates.
#[derive(Debug, Clone, Copy)]
struct Region {
    y0: usize,
    x0: usize,
    height: usize,
    width: usize,
}

/// One augmented view: the transformed image and the mask moved with it.
pub type View = (Tensor<f32>, ObjectMask);

/// Draws one augmented view of `(image, mask)`, resized to
/// `out_height x out_width`.
///
/// Crop candidates are drawn until the resampled mask keeps more than
/// `min_object_area` of the view; after `max_retries` failures the crop
/// falls back to the object's minimal bounding box, which always contains
/// the object. The RNG draw order is fixed (crop candidates, then flip,
/// then jitter factors, then grayscale), so a given stream state always
/// produces the same view.
pub fn sample_view(
    image: &Tensor<f32>,
    mask: &ObjectMask,
    config: &AugmentConfig,
    out_height: usize,
    out_width: usize,
    rng: &mut Rng,
) -> Result<View> {
    config.validate()?;
    let (height, width) = check_image(image, mask)?;
    if mask.is_empty() {
        return Err(Error::Data("cannot augment an image with an empty mask".into()));
    }
    if out_height == 0 || out_width == 0 {
        return Err(Error::Shape("output dimensions must be positive".into()));
    }

    // Geometric part: find an area-preserving crop that keeps the object.
    let mut chosen: Option<(Region, ObjectMask)> = None;
    for _ in 0..config.max_retries {
        let area = rng.gen_range(config.scale_min..=config.scale_max);
        let side = area.sqrt();
        let crop_h = ((height as f64 * side).round() as usize).clamp(1, height);
        let crop_w = ((width as f64 * side).round() as usize).clamp(1, width);
        let y0 = rng.gen_range(0..=height - crop_h);
        let x0 = rng.gen_range(0..=width - crop_w);
        let region = Region { y0, x0, height: crop_h, width: crop_w };
        let view_mask = resize_mask_nearest(mask, region, out_height, out_width);
        if view_mask.foreground_fraction() > config.min_object_area {
            chosen = Some((region, view_mask));
            break;
        }
    }
    let (region, mut view_mask) = match chosen {
        Some(c) => c,
        None => {
            let region = bounding_box(mask);
            let view_mask = resize_mask_nearest(mask, region, out_height, out_width);
            (region, view_mask)
        }
    };
    let mut view = resize_image_bilinear(image, region, out_height, out_width);

    if rng.gen_range(0.0..1.0) < config.flip_prob {
        view = hflip_image(&view);
        view_mask = hflip_mask(&view_mask);
    }

    // Photometric part: image only, factors drawn even at zero strength so
    // the stream advances identically regardless of configuration.
    let b = rng.gen_range(1.0 - config.brightness..=1.0 + config.brightness);
    let c = rng.gen_range(1.0 - config.contrast..=1.0 + config.contrast);
    let s = rng.gen_range(1.0 - config.saturation..=1.0 + config.saturation);
    apply_brightness(&mut view, b);
    apply_contrast(&mut view, c);
    apply_saturation(&mut view, s);
    if rng.gen_range(0.0..1.0) < config.grayscale_prob {
        apply_grayscale(&mut view);
    }

    Ok((view, view_mask))
}

/// Draws the two views of one image from a single stream.
pub fn sample_view_pair(
    image: &Tensor<f32>,
    mask: &ObjectMask,
    config: &AugmentConfig,
    out_height: usize,
    out_width: usize,
    rng: &mut Rng,
) -> Result<(View, View)> {
    let query = sample_view(image, mask, config, out_height, out_width, rng)?;
    let key = sample_view(image, mask, config, out_height, out_width, rng)?;
    Ok((query, key))
}

/// Flattens a batch of view masks into per-salient-pixel classification
/// targets: every foreground pixel of image `n` (raster order, images in
/// batch order) is labeled `n`; background pixels contribute nothing.
pub fn remap(batch_masks: &[ObjectMask]) -> Vec<usize> {
    let mut targets = Vec::new();
    for (n, mask) in batch_masks.iter().enumerate() {
        targets.extend(std::iter::repeat_n(n, mask.foreground_count()));
    }
    targets
}

fn check_image(image: &Tensor<f32>, mask: &ObjectMask) -> Result<(usize, usize)> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!(
            "image must be [3, H, W], got {shape:?}"
        )));
    }
    let (height, width) = (shape[1], shape[2]);
    if (mask.height(), mask.width()) != (height, width) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {height}x{width}",
            mask.height(),
            mask.width()
        )));
    }
    Ok((height, width))
}

/// Minimal axis-aligned rectangle containing every foreground pixel.
fn bounding_box(mask: &ObjectMask) -> Region {
    let (mut y_min, mut y_max, mut x_min, mut x_max) =
        (usize::MAX, 0usize, usize::MAX, 0usize);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.is_foreground(y, x) {
                y_min = y_min.min(y);
                y_max = y_max.max(y);
                x_min = x_min.min(x);
                x_max = x_max.max(x);
            }
        }
    }
    Region {
        y0: y_min,
        x0: x_min,
        height: y_max - y_min + 1,
        width: x_max - x_min + 1,
    }
}

/// Nearest-neighbor resample of a crop region — mask values stay in {0, 1}.
fn resize_mask_nearest(
    mask: &ObjectMask,
    region: Region,
    out_height: usize,
    out_width: usize,
) -> ObjectMask {
    let mut bits = Vec::with_capacity(out_height * out_width);
    for oy in 0..out_height {
        let sy = nearest_index(oy, out_height, region.height) + region.y0;
        for ox in 0..out_width {
            let sx = nearest_index(ox, out_width, region.width) + region.x0;
            bits.push(u8::from(mask.is_foreground(sy, sx)));
        }
    }
    ObjectMask::new(out_width, out_height, bits).expect("resampled bits are 0/1")
}

fn nearest_index(out: usize, out_len: usize, src_len: usize) -> usize {
    let center = (out as f64 + 0.5) * src_len as f64 / out_len as f64;
    (center.floor() as usize).min(src_len - 1)
}

/// Bilinear resample of a crop region with half-pixel centers.
fn resize_image_bilinear(
    image: &Tensor<f32>,
    region: Region,
    out_height: usize,
    out_width: usize,
) -> Tensor<f32> {
    let (height, width) = (image.shape()[1], image.shape()[2]);
    let y_taps = linear_taps(out_height, region.height, region.y0);
    let x_taps = linear_taps(out_width, region.width, region.x0);
    let data = image.data();
    let mut out = Vec::with_capacity(3 * out_height * out_width);
    for ch in 0..3 {
        let plane = &data[ch * height * width..(ch + 1) * height * width];
        for &(y0, y1, fy) in &y_taps {
            for &(x0, x1, fx) in &x_taps {
                let top = plane[y0 * width + x0] as f64 * (1.0 - fx)
                    + plane[y0 * width + x1] as f64 * fx;
                let bottom = plane[y1 * width + x0] as f64 * (1.0 - fx)
                    + plane[y1 * width + x1] as f64 * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Tensor::from_vec(&[3, out_height, out_width], out).expect("valid view shape")
}

/// Source taps (low index, high index, blend fraction) per output position.
fn linear_taps(out_len: usize, src_len: usize, offset: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * src_len as f64 / out_len as f64 - 0.5;
            let clamped = center.clamp(0.0, (src_len - 1) as f64);
            let low = clamped.floor() as usize;
            let high = (low + 1).min(src_len - 1);
            (low + offset, high + offset, clamped - low as f64)
        })
        .collect()
}

fn hflip_image(image: &Tensor<f32>) -> Tensor<f32> {
    let (height, width) = (image.shape()[1], image.shape()[2]);
    let data = image.data();
    let mut out = Vec::with_capacity(data.len());
    for ch in 0..3 {
        let plane = &data[ch * height * width..(ch + 1) * height * width];
        for y in 0..height {
            let row = &plane[y * width..(y + 1) * width];
            out.extend(row.iter().rev());
        }
    }
    Tensor::from_vec(image.shape(), out).expect("flip preserves shape")
}

fn hflip_mask(mask: &ObjectMask) -> ObjectMask {
    let mut bits = Vec::with_capacity(mask.width() * mask.height());
    for y in 0..mask.height() {
        for x in (0..mask.width()).rev() {
            bits.push(u8::from(mask.is_foreground(y, x)));
        }
    }
    ObjectMask::new(mask.width(), mask.height(), bits).expect("flip preserves bits")
}

fn apply_brightness(image: &mut Tensor<f32>, factor: f64) {
    for v in image.data_mut() {
        *v = (*v as f64 * factor).clamp(0.0, 1.0) as f32;
    }
}

/// Blends towards the view's mean luminance.
fn apply_contrast(image: &mut Tensor<f32>, factor: f64) {
    let mean = luminance(image).iter().map(|&g| g).sum::<f64>()
        / (image.numel() / 3) as f64;
    for v in image.data_mut() {
        *v = (mean + factor * (*v as f64 - mean)).clamp(0.0, 1.0) as f32;
    }
}

/// Blends each pixel towards its own luminance.
fn apply_saturation(image: &mut Tensor<f32>, factor: f64) {
    let gray = luminance(image);
    let pixels = gray.len();
    let data = image.data_mut();
    for ch in 0..3 {
        for (i, &g) in gray.iter().enumerate() {
            let v = &mut data[ch * pixels + i];
            *v = (g + factor * (*v as f64 - g)).clamp(0.0, 1.0) as f32;
        }
    }
}

fn apply_grayscale(image: &mut Tensor<f32>) {
    let gray = luminance(image);
    let pixels = gray.len();
    let data = image.data_mut();
    for ch in 0..3 {
        for (i, &g) in gray.iter().enumerate() {
            data[ch * pixels + i] = g as f32;
        }
    }
}

/// Rec. 601 luma per pixel.
fn luminance(image: &Tensor<f32>) -> Vec<f64> {
    let pixels = image.numel() / 3;
    let data = image.data();
    (0..pixels)
        .map(|i| {
            0.299 * data[i] as f64
                + 0.587 * data[pixels + i] as f64
                + 0.114 * data[2 * pixels + i] as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, stream_rng};

    fn disk_mask(size: usize, cy: f64, cx: f64, radius: f64) -> ObjectMask {
        ObjectMask::from_fn(size, size, |y, x| {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            (dy * dy + dx * dx).sqrt() <= radius
        })
    }

    fn random_image(size: usize, seed: u64) -> Tensor<f32> {
        let mut r = stream_rng(seed, &[stream::AUGMENT, 99]);
        Tensor::from_fn(&[3, size, size], |_| r.gen_range(0.0..1.0))
    }

    fn identity_config() -> AugmentConfig {
        AugmentConfig {
            scale_min: 1.0,
            scale_max: 1.0,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
            ..AugmentConfig::default()
        }
    }

    #[test]
    fn identity_settings_return_the_input_unchanged() {
        let image = random_image(16, 1);
        let mask = disk_mask(16, 8.0, 8.0, 5.0);
        let mut rng = stream_rng(0, &[stream::AUGMENT, 0, 0]);
        let (view, view_mask) =
            sample_view(&image, &mask, &identity_config(), 16, 16, &mut rng).unwrap();
        assert_eq!(view.data(), image.data());
        assert_eq!(view_mask, mask);
    }

    #[test]
    fn hflip_is_an_involution() {
        let image = random_image(9, 2);
        let mask = disk_mask(9, 3.0, 5.0, 2.5);
        assert_eq!(hflip_image(&hflip_image(&image)).data(), image.data());
        assert_eq!(hflip_mask(&hflip_mask(&mask)), mask);
        // A flip moves content: the mask is off-center, so it must change.
        assert_ne!(hflip_mask(&mask), mask);
    }

    #[test]
    fn config_validation_rejects_out_of_range_fields() {
        let mut c = AugmentConfig::default();
        c.min_object_area = 0.0;
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.min_object_area = 1.0;
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.scale_min = 0.8;
        c.scale_max = 0.5;
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.brightness = 0.5;
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.flip_prob = 1.2;
        assert!(c.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }

    #[test]
    fn thousand_views_all_clear_the_area_floor() {
        // Object covers ~12% of the frame; every accepted view must keep
        // more than 10%.
        let size = 32;
        let mask = disk_mask(size, 16.0, 16.0, 6.2);
        let frac = mask.foreground_fraction();
        assert!(
            (0.11..0.13).contains(&frac),
            "fixture object covers {frac:.3}, wanted about 0.12"
        );
        let image = random_image(size, 3);
        let config = AugmentConfig::default();
        let mut rng = stream_rng(7, &[stream::AUGMENT, 0]);
        for i in 0..1000 {
            let (_, view_mask) =
                sample_view(&image, &mask, &config, size, size, &mut rng).unwrap();
            assert!(
                view_mask.foreground_fraction() > config.min_object_area,
                "view {i} kept only {:.3} of the object",
                view_mask.foreground_fraction()
            );
        }
    }

    #[test]
    fn equal_seeds_reproduce_bit_identical_view_pairs() {
        let image = random_image(24, 4);
        let mask = disk_mask(24, 12.0, 10.0, 7.0);
        let config = AugmentConfig::default();
        let draw = || {
            let mut rng = stream_rng(config.seed, &[stream::AUGMENT, 5, 17]);
            sample_view_pair(&image, &mask, &config, 16, 16, &mut rng).unwrap()
        };
        let ((q1, qm1), (k1, km1)) = draw();
        let ((q2, qm2), (k2, km2)) = draw();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&q1), bits(&q2));
        assert_eq!(bits(&k1), bits(&k2));
        assert_eq!(qm1, qm2);
        assert_eq!(km1, km2);
        // The two views of the pair differ from each other.
        assert!(bits(&q1) != bits(&k1) || qm1 != km1);
    }

    #[test]
    fn photometric_transforms_never_touch_the_mask() {
        let image = random_image(20, 5);
        let mask = disk_mask(20, 10.0, 10.0, 6.0);
        let plain = AugmentConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
            ..AugmentConfig::default()
        };
        let jittered = AugmentConfig {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 1.0,
            ..AugmentConfig::default()
        };
        for tag in 0..20 {
            let mut r1 = stream_rng(9, &[stream::AUGMENT, tag]);
            let mut r2 = stream_rng(9, &[stream::AUGMENT, tag]);
            let (v1, m1) = sample_view(&image, &mask, &plain, 16, 16, &mut r1).unwrap();
            let (v2, m2) = sample_view(&image, &mask, &jittered, 16, 16, &mut r2).unwrap();
            assert_eq!(m1, m2, "geometry must be shared, photometrics mask-blind");
            assert_ne!(v1.data(), v2.data(), "jitter must actually change the image");
        }
    }

    #[test]
    fn impossible_area_falls_back_to_the_bounding_box() {
        // A small solid square: random crops can never reach 60% coverage,
        // but its bounding box is entirely foreground.
        let size = 32;
        let mask = ObjectMask::from_fn(size, size, |y, x| (10..16).contains(&y) && (12..18).contains(&x));
        let image = random_image(size, 6);
        let config = AugmentConfig {
            min_object_area: 0.6,
            max_retries: 5,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
            ..AugmentConfig::default()
        };
        let mut rng = stream_rng(11, &[stream::AUGMENT, 1]);
        let (view, view_mask) = sample_view(&image, &mask, &config, 16, 16, &mut rng).unwrap();
        assert!((view_mask.foreground_fraction() - 1.0).abs() < 1e-12);
        // The view is the resized bounding-box crop of the image.
        let expect = resize_image_bilinear(
            &image,
            Region { y0: 10, x0: 12, height: 6, width: 6 },
            16,
            16,
        );
        assert_eq!(view.data(), expect.data());
    }

    #[test]
    fn jitter_output_stays_in_unit_interval() {
        let mut extreme = Tensor::<f32>::zeros(&[3, 4, 4]);
        for (i, v) in extreme.data_mut().iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.0 } else { 1.0 };
        }
        let mask = ObjectMask::from_fn(4, 4, |_, _| true);
        let config = AugmentConfig {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.5,
            ..AugmentConfig::default()
        };
        for tag in 0..50 {
            let mut rng = stream_rng(13, &[stream::AUGMENT, tag]);
            let (view, _) = sample_view(&extreme, &mask, &config, 4, 4, &mut rng).unwrap();
            for &v in view.data() {
                assert!((0.0..=1.0).contains(&v), "value {v} escaped [0, 1]");
            }
        }
    }

    #[test]
    fn resampled_masks_stay_binary_and_empty_mask_is_rejected() {
        let image = random_image(17, 8);
        let mask = disk_mask(17, 8.0, 8.0, 4.4);
        let mut rng = stream_rng(15, &[stream::AUGMENT, 2]);
        for _ in 0..50 {
            // ObjectMask construction inside resampling enforces {0,1}; reaching
            // here means every view mask was valid.
            let (_, view_mask) =
                sample_view(&image, &mask, &AugmentConfig::default(), 13, 11, &mut rng).unwrap();
            assert_eq!(view_mask.height(), 13);
            assert_eq!(view_mask.width(), 11);
        }
        let empty = ObjectMask::new(17, 17, vec![0; 17 * 17]).unwrap();
        assert!(sample_view(&image, &empty, &AugmentConfig::default(), 8, 8, &mut rng).is_err());
    }

    #[test]
    fn remap_labels_pixels_by_image_order() {
        let m0 = ObjectMask::new(3, 2, vec![1, 1, 0, 1, 1, 1]).unwrap(); // 5 px
        let m1 = ObjectMask::new(3, 2, vec![0, 1, 0, 1, 0, 1]).unwrap(); // 3 px
        let m2 = ObjectMask::new(2, 1, vec![1, 0]).unwrap(); // 1 px

        // Three images: targets drawn from {0, 1, 2} in image order.
        let targets = remap(&[m0.clone(), m1.clone(), m2]);
        assert_eq!(targets, vec![0, 0, 0, 0, 0, 1, 1, 1, 2]);

        // Single image: all zero.
        assert_eq!(remap(&[m1.clone()]), vec![0, 0, 0]);

        // Known pixel counts [5, 3] → multiset {0 x5, 1 x3}.
        let counts = remap(&[m0, m1]);
        assert_eq!(counts.iter().filter(|&&t| t == 0).count(), 5);
        assert_eq!(counts.iter().filter(|&&t| t == 1).count(), 3);
    }
}
