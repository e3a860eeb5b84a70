//! Procedural slides: a warped Voronoi partition into tissue classes, each
//! class painted with its own texture in a per-slide stain.
//!
//! Texture scales are expressed in patch units so a corpus rendered at patch
//! size 64 looks like a downscaled version of one at 512. Class 0 is
//! near-white background; classes 1.. cycle through five texture families
//! (fibers, dense nuclei, speckle, fat cells, large nuclei) with the
//! frequency stretched on each further cycle.

use image::Rgb;
use rand::Rng;

use super::{CorpusConfig, CorpusError, SlideImage};
use crate::augment::Patch;
use crate::seed;

fn hash2(ix: i64, iy: i64, salt: u64) -> u64 {
    seed::derive(salt, &[ix as u64, iy as u64])
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise on an integer lattice, in `[0, 1)`.
fn value_noise(x: f64, y: f64, salt: u64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let v = |dx, dy| unit(hash2(ix + dx, iy + dy, salt));
    let top = v(0, 0) + (v(1, 0) - v(0, 0)) * tx;
    let bottom = v(0, 1) + (v(1, 1) - v(0, 1)) * tx;
    top + (bottom - top) * ty
}

/// Two-octave value noise, in `[0, 1)`.
fn fractal_noise(x: f64, y: f64, salt: u64) -> f64 {
    (2.0 * value_noise(x, y, salt) + value_noise(2.0 * x, 2.0 * y, salt ^ 0x55)) / 3.0
}

/// Jittered-grid blobs: returns `(distance to nearest blob center / radius)`
/// for blobs on a lattice of the given cell size.
fn blob_distance(x: f64, y: f64, radius: f64, radius_jitter: f64, salt: u64) -> f64 {
    let (cx, cy) = (x.floor() as i64, y.floor() as i64);
    let mut best = f64::INFINITY;
    for dy in -1..=1 {
        for dx in -1..=1 {
            let h = hash2(cx + dx, cy + dy, salt);
            let px = (cx + dx) as f64 + 0.15 + 0.7 * unit(h);
            let py = (cy + dy) as f64 + 0.15 + 0.7 * unit(h.rotate_left(21));
            let r = radius * (1.0 - radius_jitter + 2.0 * radius_jitter * unit(h.rotate_left(42)));
            let d = ((x - px).powi(2) + (y - py).powi(2)).sqrt() / r;
            best = best.min(d);
        }
    }
    best
}

/// Worley cell-edge distance `F2 - F1` for a jittered lattice.
fn cell_edge(x: f64, y: f64, salt: u64) -> f64 {
    let (cx, cy) = (x.floor() as i64, y.floor() as i64);
    let (mut f1, mut f2) = (f64::INFINITY, f64::INFINITY);
    for dy in -1..=1 {
        for dx in -1..=1 {
            let h = hash2(cx + dx, cy + dy, salt);
            let px = (cx + dx) as f64 + unit(h);
            let py = (cy + dy) as f64 + unit(h.rotate_left(29));
            let d = ((x - px).powi(2) + (y - py).powi(2)).sqrt();
            if d < f1 {
                f2 = f1;
                f1 = d;
            } else if d < f2 {
                f2 = d;
            }
        }
    }
    f2 - f1
}

/// Stain colors for one slide: eosin (pink) and hematoxylin (purple) plus a
/// brightness factor.
#[derive(Debug, Clone, Copy)]
struct Stain {
    eosin: [f64; 3],
    hematoxylin: [f64; 3],
    brightness: f64,
}

impl Stain {
    fn sample(rng: &mut impl Rng, shift: f64) -> Self {
        let mut jitter = |base: [f64; 3]| base.map(|v: f64| (v + rng.random_range(-shift..=shift)).clamp(0.0, 1.0));
        let eosin = jitter([0.91, 0.56, 0.72]);
        let hematoxylin = jitter([0.36, 0.22, 0.56]);
        Self { eosin, hematoxylin, brightness: rng.random_range(0.92..=1.05) }
    }

    /// Color for hematoxylin density `d` on an eosin background of
    /// strength `e` (0 = white, 1 = full eosin).
    fn mix(&self, e: f64, d: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            let bg = 1.0 + (self.eosin[c] - 1.0) * e;
            out[c] = (bg + (self.hematoxylin[c] - bg) * d) * self.brightness;
        }
        out
    }
}

/// Texture of class `class` at slide position `(u, v)` in patch units.
/// Returns `(eosin strength, hematoxylin density)`.
fn texture(class: u8, u: f64, v: f64, salt: u64) -> (f64, f64) {
    if class == 0 {
        return (0.02 + 0.04 * value_noise(u * 4.0, v * 4.0, salt), 0.0);
    }
    let family = (class - 1) % 5;
    let stretch = 1.35f64.powi(i32::from((class - 1) / 5));
    let salt = salt ^ u64::from(class) << 32;
    match family {
        // Wavy collagen fibers.
        0 => {
            let f = 5.0 * stretch;
            let warp = 1.6 * fractal_noise(u * 1.5, v * 1.5, salt);
            let phase = std::f64::consts::TAU * f * (u * 0.8 + v * 0.6) + 2.0 * std::f64::consts::PI * warp;
            let fiber = 0.5 + 0.5 * phase.sin();
            (0.45 + 0.55 * fiber, 0.12 + 0.18 * fiber)
        }
        // Densely packed small nuclei.
        1 => {
            let s = 9.0 * stretch;
            let d = blob_distance(u * s, v * s, 0.3, 0.15, salt);
            let inside = 1.0 - smooth(((d - 0.8) / 0.4).clamp(0.0, 1.0));
            (0.7, 0.18 + 0.62 * inside)
        }
        // Blotchy speckle.
        2 => {
            let n = fractal_noise(u * 11.0 * stretch, v * 11.0 * stretch, salt);
            let blot = smooth(((n - 0.4) / 0.2).clamp(0.0, 1.0));
            (0.55 + 0.35 * blot, 0.2 + 0.45 * blot)
        }
        // Fat cells: pale interiors with thin membranes.
        3 => {
            let s = 3.2 * stretch;
            let e = cell_edge(u * s, v * s, salt);
            let membrane = 1.0 - smooth((e / 0.12).clamp(0.0, 1.0));
            (0.2 + 0.75 * membrane, 0.1 + 0.35 * membrane)
        }
        // Large, irregular nuclei.
        _ => {
            let s = 5.0 * stretch;
            let d = blob_distance(u * s, v * s, 0.42, 0.35, salt);
            let inside = 1.0 - smooth(((d - 0.75) / 0.5).clamp(0.0, 1.0));
            (0.75, 0.25 + 0.6 * inside)
        }
    }
}

/// Renders one synthetic slide. Pure in `(config, seed)`.
pub fn generate_synthetic_slide(
    config: &CorpusConfig,
    slide_id: &str,
    seed: u64,
) -> Result<SlideImage, CorpusError> {
    config.validate()?;
    let size = config.slide_size;
    let ps = f64::from(config.patch_size);
    let grid = f64::from(size / config.patch_size);
    let k = config.classes;
    let mut rng = seed::rng(seed, &[0x511DE]);

    let regions = ((grid * grid) / (config.region_scale * config.region_scale)).round() as usize;
    let sites = regions.max(2 * usize::from(k));
    let mut classes: Vec<u8> = (0..sites).map(|i| (i % usize::from(k)) as u8).collect();
    for i in (1..classes.len()).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }
    let points: Vec<(f64, f64)> = (0..sites)
        .map(|_| (rng.random_range(0.0..f64::from(size)), rng.random_range(0.0..f64::from(size))))
        .collect();
    // Per-region eosin gain, hematoxylin gain and texture frequency.
    let var = config.region_variation;
    let looks: Vec<[f64; 3]> =
        (0..sites).map(|_| [(); 3].map(|_| 1.0 + var * rng.random_range(-1.0..=1.0))).collect();
    let stain = Stain::sample(&mut rng, config.stain_shift);
    let warp_salt: u64 = rng.random();
    let texture_salt: u64 = rng.random();
    let noise_salt: u64 = rng.random();
    let warp_amp = 0.35 * ps;
    let warp_scale = 1.0 / (1.5 * ps);

    let n = size as usize;
    let mut mask = vec![0u8; n * n];
    let mut pixels = Patch::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            let wx = fx + warp_amp * (2.0 * value_noise(fx * warp_scale, fy * warp_scale, warp_salt) - 1.0);
            let wy = fy + warp_amp * (2.0 * value_noise(fx * warp_scale, fy * warp_scale, !warp_salt) - 1.0);
            let mut best = (f64::INFINITY, 0usize);
            for (site, &(px, py)) in points.iter().enumerate() {
                let d = (wx - px).powi(2) + (wy - py).powi(2);
                if d < best.0 {
                    best = (d, site);
                }
            }
            let (class, [e_gain, d_gain, freq]) = (classes[best.1], looks[best.1]);
            mask[y as usize * n + x as usize] = class;
            let (u, v) = (freq * fx / ps, freq * fy / ps);
            let (e, d) = texture(class, u, v, texture_salt);
            let (e, d) = ((e * e_gain).min(1.0), (d * d_gain).min(1.0));
            let rgb = if class == 0 { [1.0 - e * 0.5; 3] } else { stain.mix(e, d) };
            let grain = (unit(hash2(i64::from(x), i64::from(y), noise_salt)) - 0.5) * 2.0 * config.pixel_noise;
            // Quantized to 8-bit levels so PNG storage is lossless.
            let level = |c: f64| ((c + grain).clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0;
            pixels.put_pixel(x, y, Rgb(rgb.map(level)));
        }
    }
    Ok(SlideImage { slide_id: slide_id.to_string(), width: size, height: size, pixels, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_bounded_and_deterministic() {
        for i in 0..500 {
            let (x, y) = (i as f64 * 0.37, i as f64 * 0.91);
            let v = value_noise(x, y, 3);
            assert!((0.0..1.0).contains(&v));
            assert_eq!(v, value_noise(x, y, 3));
            assert!(cell_edge(x, y, 1) >= 0.0);
        }
    }
}
