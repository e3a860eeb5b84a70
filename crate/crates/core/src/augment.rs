//! View generation: the stochastic pretraining augmentation and the fixed
//! evaluation transform.
//!
//! Pretraining views are produced by random resized crop, optional horizontal
//! flip, color jitter, optional grayscale and a final resize, in that order.
//! Every call is a pure function of `(patch, policy, seed)`.

use image::imageops::{self, FilterType};
use image::{Rgb, Rgb32FImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Square RGB patch with channel values in `[0, 1]`.
pub type Patch = Rgb32FImage;

const MAX_CROP_ATTEMPTS: u64 = 32;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation policy: {0}")]
    Policy(String),
    #[error("patch must be square with side >= 1, got {width}x{height}")]
    NotSquare { width: u32, height: u32 },
    #[error("no valid crop window after {0} attempts")]
    DegenerateCrop(u64),
    #[error("invalid evaluation transform: {0}")]
    Transform(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub target_size: u32,
    /// Crop area as a fraction of the patch area.
    pub crop_scale: [f64; 2],
    /// Crop aspect ratio range, sampled log-uniformly.
    pub crop_ratio: [f64; 2],
    pub flip_prob: f64,
    /// Probability that color jitter is applied at all.
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift bound as a fraction of the color wheel, at most 0.5.
    pub hue: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            target_size: 128,
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |msg: &str| Err(AugmentError::Policy(msg.to_string()));
        if self.target_size == 0 {
            return bad("target_size must be positive");
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("crop_scale must satisfy 0 < lo <= hi <= 1");
        }
        let [rlo, rhi] = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad("crop_ratio must satisfy 0 < lo <= hi");
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::Policy(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(AugmentError::Policy(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return bad("hue must lie in [0, 0.5]");
        }
        Ok(())
    }
}

/// Integer crop window inside a square patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

fn square_side(patch: &Patch) -> Result<u32, AugmentError> {
    let (width, height) = patch.dimensions();
    if width != height || width == 0 {
        return Err(AugmentError::NotSquare { width, height });
    }
    Ok(width)
}

/// Samples a random resized crop window. Each attempt draws from its own
/// sub-seed; windows that round to zero or exceed the patch are rejected.
pub fn sample_crop(side: u32, policy: &AugmentPolicy, seed: u64) -> Result<CropWindow, AugmentError> {
    let area = f64::from(side) * f64::from(side);
    let (log_lo, log_hi) = (policy.crop_ratio[0].ln(), policy.crop_ratio[1].ln());
    for attempt in 0..MAX_CROP_ATTEMPTS {
        let mut rng = seed::rng(seed, &[0xC0, attempt]);
        let target = area * rng.random_range(policy.crop_scale[0]..=policy.crop_scale[1]);
        let ratio = if log_hi > log_lo {
            rng.random_range(log_lo..log_hi).exp()
        } else {
            log_lo.exp()
        };
        let w = (target * ratio).sqrt().round();
        let h = (target / ratio).sqrt().round();
        if w < 1.0 || h < 1.0 || w > f64::from(side) || h > f64::from(side) {
            continue;
        }
        let (w, h) = (w as u32, h as u32);
        let x = rng.random_range(0..=side - w);
        let y = rng.random_range(0..=side - h);
        return Ok(CropWindow { x, y, width: w, height: h });
    }
    Err(AugmentError::DegenerateCrop(MAX_CROP_ATTEMPTS))
}

pub fn crop(patch: &Patch, w: CropWindow) -> Patch {
    imageops::crop_imm(patch, w.x, w.y, w.width, w.height).to_image()
}

pub fn hflip(img: &Patch) -> Patch {
    imageops::flip_horizontal(img)
}

fn luma(p: &Rgb<f32>) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn clamp_unit(img: &mut Patch) {
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

pub fn adjust_brightness(img: &mut Patch, factor: f32) {
    for v in img.iter_mut() {
        *v *= factor;
    }
    clamp_unit(img);
}

pub fn adjust_contrast(img: &mut Patch, factor: f32) {
    let n = (img.width() * img.height()).max(1) as f32;
    let mean = img.pixels().map(luma).sum::<f32>() / n;
    for v in img.iter_mut() {
        *v = (*v - mean) * factor + mean;
    }
    clamp_unit(img);
}

pub fn adjust_saturation(img: &mut Patch, factor: f32) {
    for p in img.pixels_mut() {
        let g = luma(p);
        for c in 0..3 {
            p[c] = ((p[c] - g) * factor + g).clamp(0.0, 1.0);
        }
    }
}

/// Rotates every pixel's hue by `shift` turns of the color wheel, keeping
/// value and HSV saturation.
pub fn adjust_hue(img: &mut Patch, shift: f32) {
    for p in img.pixels_mut() {
        let [r, g, b] = p.0;
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let chroma = max - min;
        if chroma <= 0.0 {
            continue;
        }
        let sector = if max == r {
            ((g - b) / chroma).rem_euclid(6.0)
        } else if max == g {
            (b - r) / chroma + 2.0
        } else {
            (r - g) / chroma + 4.0
        };
        let h = (sector + 6.0 * shift).rem_euclid(6.0);
        let x = chroma * (1.0 - ((h % 2.0) - 1.0).abs());
        let (r1, g1, b1) = match h as u32 {
            0 => (chroma, x, 0.0),
            1 => (x, chroma, 0.0),
            2 => (0.0, chroma, x),
            3 => (0.0, x, chroma),
            4 => (x, 0.0, chroma),
            _ => (chroma, 0.0, x),
        };
        *p = Rgb([r1 + min, g1 + min, b1 + min].map(|c| c.clamp(0.0, 1.0)));
    }
}

pub fn to_grayscale(img: &mut Patch) {
    for p in img.pixels_mut() {
        let g = luma(p).clamp(0.0, 1.0);
        *p = Rgb([g, g, g]);
    }
}

fn resize(img: &Patch, size: u32) -> Patch {
    if img.dimensions() == (size, size) {
        return img.clone();
    }
    let mut out = imageops::resize(img, size, size, FilterType::Triangle);
    clamp_unit(&mut out);
    out
}

fn jitter_factor(rng: &mut impl Rng, strength: f64) -> f32 {
    if strength == 0.0 {
        1.0
    } else {
        rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength) as f32
    }
}

/// One stochastic pretraining view of `patch`, `policy.target_size` square.
pub fn make_view(patch: &Patch, policy: &AugmentPolicy, seed: u64) -> Result<Patch, AugmentError> {
    policy.validate()?;
    let side = square_side(patch)?;
    let window = sample_crop(side, policy, seed)?;
    let mut view = crop(patch, window);

    let mut rng = seed::rng(seed, &[0xA1]);
    if rng.random_bool(policy.flip_prob) {
        view = hflip(&view);
    }
    if rng.random_bool(policy.jitter_prob) {
        let b = jitter_factor(&mut rng, policy.brightness);
        let c = jitter_factor(&mut rng, policy.contrast);
        let s = jitter_factor(&mut rng, policy.saturation);
        let h = if policy.hue > 0.0 { rng.random_range(-policy.hue..=policy.hue) as f32 } else { 0.0 };
        adjust_brightness(&mut view, b);
        adjust_contrast(&mut view, c);
        adjust_saturation(&mut view, s);
        adjust_hue(&mut view, h);
    }
    if rng.random_bool(policy.grayscale_prob) {
        to_grayscale(&mut view);
    }
    Ok(resize(&view, policy.target_size))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalTransform {
    pub resize_size: u32,
    pub crop_size: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for EvalTransform {
    fn default() -> Self {
        Self {
            resize_size: 256,
            crop_size: 224,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl EvalTransform {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.crop_size == 0 || self.crop_size > self.resize_size {
            return Err(AugmentError::Transform(format!(
                "need 0 < crop_size <= resize_size, got crop {} resize {}",
                self.crop_size, self.resize_size
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(AugmentError::Transform("std must be positive".into()));
        }
        Ok(())
    }

    /// Pixels trimmed from each side by the center crop.
    pub fn crop_offset(&self) -> u32 {
        (self.resize_size - self.crop_size) / 2
    }
}

/// Per-channel `(x - mean) / std`, in place.
pub fn normalize(img: &mut Patch, mean: &[f32; 3], std: &[f32; 3]) {
    for p in img.pixels_mut() {
        for c in 0..3 {
            p[c] = (p[c] - mean[c]) / std[c];
        }
    }
}

/// Deterministic evaluation view: resize, center crop, normalize.
pub fn eval_view(patch: &Patch, t: &EvalTransform) -> Result<Patch, AugmentError> {
    t.validate()?;
    square_side(patch)?;
    let resized = resize(patch, t.resize_size);
    let off = t.crop_offset();
    let mut out = imageops::crop_imm(&resized, off, off, t.crop_size, t.crop_size).to_image();
    normalize(&mut out, &t.mean, &t.std);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_patch(side: u32, seed: u64) -> Patch {
        let mut rng = seed::rng(seed, &[]);
        Patch::from_fn(side, side, |_, _| {
            Rgb([rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()])
        })
    }

    #[test]
    fn same_seed_same_view() {
        let p = noise_patch(64, 1);
        let policy = AugmentPolicy::default();
        assert_eq!(make_view(&p, &policy, 9).unwrap(), make_view(&p, &policy, 9).unwrap());
    }

    #[test]
    fn default_view_is_128_square() {
        let p = noise_patch(96, 2);
        let v = make_view(&p, &AugmentPolicy::default(), 3).unwrap();
        assert_eq!(v.dimensions(), (128, 128));
    }

    #[test]
    fn flip_twice_restores_crop() {
        let p = noise_patch(40, 3);
        let w = sample_crop(40, &AugmentPolicy::default(), 17).unwrap();
        let c = crop(&p, w);
        assert_ne!(hflip(&c), c);
        assert_eq!(hflip(&hflip(&c)), c);
    }

    #[test]
    fn hue_rotation_moves_primaries_and_spares_grays() {
        let mut img = Patch::from_fn(3, 1, |x, _| match x {
            0 => Rgb([1.0, 0.0, 0.0]),
            1 => Rgb([0.2, 0.6, 0.4]),
            _ => Rgb([0.5, 0.5, 0.5]),
        });
        let original = img.clone();
        adjust_hue(&mut img, 1.0 / 3.0);
        let close = |a: [f32; 3], b: [f32; 3]| a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6);
        assert!(close(img.get_pixel(0, 0).0, [0.0, 1.0, 0.0]));
        assert!(close(img.get_pixel(1, 0).0, [0.4, 0.2, 0.6]));
        assert_eq!(img.get_pixel(2, 0), original.get_pixel(2, 0));
        adjust_hue(&mut img, 2.0 / 3.0);
        for x in 0..3 {
            assert!(close(img.get_pixel(x, 0).0, original.get_pixel(x, 0).0));
        }
    }

    #[test]
    fn views_stay_in_color_range() {
        let policy = AugmentPolicy {
            target_size: 24,
            jitter_prob: 1.0,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.5,
            ..AugmentPolicy::default()
        };
        for s in 0..50 {
            let v = make_view(&noise_patch(32, s), &policy, s).unwrap();
            assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn independent_seeds_give_different_views() {
        let policy = AugmentPolicy { target_size: 16, ..AugmentPolicy::default() };
        let differing = (0..100)
            .filter(|&i| {
                let p = noise_patch(32, 1000 + i);
                make_view(&p, &policy, 2 * i).unwrap() != make_view(&p, &policy, 2 * i + 1).unwrap()
            })
            .count();
        assert_eq!(differing, 100);
    }

    #[test]
    fn crop_windows_fit_even_for_tiny_patches() {
        let policy = AugmentPolicy::default();
        for s in 0..200 {
            let w = sample_crop(1, &policy, s).unwrap();
            assert_eq!((w.x, w.y, w.width, w.height), (0, 0, 1, 1));
            let w = sample_crop(7, &policy, s).unwrap();
            assert!(w.x + w.width <= 7 && w.y + w.height <= 7);
        }
    }

    #[test]
    fn impossible_crop_is_an_error() {
        // 1-pixel patch with every window rounding to zero.
        let policy = AugmentPolicy { crop_scale: [0.01, 0.05], ..AugmentPolicy::default() };
        assert_eq!(sample_crop(1, &policy, 0), Err(AugmentError::DegenerateCrop(MAX_CROP_ATTEMPTS)));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = Patch::new(8, 9);
        assert!(matches!(
            make_view(&p, &AugmentPolicy::default(), 0),
            Err(AugmentError::NotSquare { .. })
        ));
        let bad = AugmentPolicy { flip_prob: 1.5, ..AugmentPolicy::default() };
        assert!(matches!(bad.validate(), Err(AugmentError::Policy(_))));
        let t = EvalTransform { crop_size: 300, ..EvalTransform::default() };
        assert!(t.validate().is_err());
    }

    #[test]
    fn constant_image_normalizes_to_zero() {
        let p = Patch::from_pixel(300, 300, Rgb([0.3, 0.6, 0.9]));
        let t = EvalTransform { mean: [0.3, 0.6, 0.9], std: [1.0; 3], ..EvalTransform::default() };
        let out = eval_view(&p, &t).unwrap();
        assert_eq!(out.dimensions(), (224, 224));
        assert!(out.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn center_crop_offset_is_exact() {
        let t = EvalTransform::default();
        assert_eq!(t.crop_offset(), 16);
        // Patch already at resize size: output pixel (0,0) is input (16,16).
        let p = Patch::from_fn(256, 256, |x, y| Rgb([x as f32 / 255.0, y as f32 / 255.0, 0.0]));
        let t = EvalTransform { mean: [0.0; 3], std: [1.0; 3], ..t };
        let out = eval_view(&p, &t).unwrap();
        assert_eq!(out.get_pixel(0, 0), p.get_pixel(16, 16));
        assert_eq!(out.get_pixel(223, 223), p.get_pixel(239, 239));
        assert_eq!(eval_view(&p, &t).unwrap(), out);
    }
}
