//! Corpus construction: synthetic slides with class masks, center/nearby
//! group extraction for the unlabeled sets, labeled grid patches for the
//! train/test splits, and the manifest that ties records to patch files.
//!
//! Externally prepared data enters only through a manifest plus a directory
//! of patch images named `<slide>_<group>_<role>.png`.

mod extract;
mod manifest;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use extract::{extract_labeled_patches, extract_unlabeled_groups, majority_label, neighbor_offset, unlabeled_quota};
pub use manifest::{read_manifest, write_manifest, Manifest, ManifestHeader, MANIFEST_VERSION};
pub use synth::generate_synthetic_slide;

use crate::augment::Patch;
use crate::batcher::MAX_NEARBY;
use crate::seed;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("extraction: {0}")]
    Extraction(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    fn image(path: &Path, source: image::ImageError) -> Self {
        Self::Image { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub unlabeled_slides: usize,
    pub train_slides: usize,
    pub test_slides: usize,
    /// Side of every (square) slide in pixels.
    pub slide_size: u32,
    pub patch_size: u32,
    /// Number of classes `K`, background included.
    pub classes: u8,
    /// Patches per unlabeled slide; each N-variant takes
    /// `budget / (N + 1)` centers.
    pub unlabeled_budget: usize,
    /// N values for which an unlabeled set is built.
    pub nearby_values: Vec<usize>,
    /// Fraction of the disjoint patch grid taken from each train/test slide.
    pub labeled_fraction: f64,
    /// Mean tissue region side, in patches.
    pub region_scale: f64,
    /// Per-slide perturbation of the stain colors.
    pub stain_shift: f64,
    /// Per-region relative spread of stain intensity and texture scale.
    pub region_variation: f64,
    /// Amplitude of per-pixel noise.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            unlabeled_slides: 8,
            train_slides: 2,
            test_slides: 2,
            slide_size: 1536,
            patch_size: 512,
            classes: 6,
            unlabeled_budget: 1000,
            nearby_values: vec![0, 1, 2, 4, 8],
            labeled_fraction: 1.0,
            region_scale: 1.5,
            stain_shift: 0.06,
            region_variation: 0.0,
            pixel_noise: 0.03,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: String| Err(CorpusError::Config(m));
        if self.patch_size < 8 {
            return fail(format!("patch_size must be >= 8, got {}", self.patch_size));
        }
        if self.slide_size < 3 * self.patch_size {
            return fail(format!(
                "slide_size {} must be at least 3 * patch_size {}",
                self.slide_size, self.patch_size
            ));
        }
        if self.slide_size % self.patch_size != 0 {
            return fail(format!(
                "slide_size {} is not a multiple of patch_size {}",
                self.slide_size, self.patch_size
            ));
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.unlabeled_budget == 0 {
            return fail("unlabeled_budget must be positive".into());
        }
        if let Some(&n) = self.nearby_values.iter().find(|&&n| n > MAX_NEARBY) {
            return fail(format!("nearby value {n} exceeds the {MAX_NEARBY}-cell neighborhood"));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return fail(format!("labeled_fraction must be in (0, 1], got {}", self.labeled_fraction));
        }
        if !(self.region_scale > 0.0 && self.region_scale.is_finite()) {
            return fail(format!("region_scale must be positive, got {}", self.region_scale));
        }
        if !(0.0..=0.8).contains(&self.region_variation) {
            return fail(format!("region_variation must be in [0, 0.8], got {}", self.region_variation));
        }
        for (name, v) in [("stain_shift", self.stain_shift), ("pixel_noise", self.pixel_noise)] {
            if !(0.0..=0.5).contains(&v) {
                return fail(format!("{name} must be in [0, 0.5], got {v}"));
            }
        }
        Ok(())
    }

    /// Patch-grid side of a slide.
    pub fn grid(&self) -> u32 {
        self.slide_size / self.patch_size
    }

    pub fn slide_ids(&self, split: Split) -> Vec<String> {
        let (prefix, count) = match split {
            Split::Unlabeled => ("unl", self.unlabeled_slides),
            Split::Train => ("train", self.train_slides),
            Split::Test => ("test", self.test_slides),
        };
        (0..count).map(|i| format!("{prefix}-{i:02}")).collect()
    }

    /// Seed of the slide named `slide_id`.
    pub fn slide_seed(&self, slide_id: &str) -> u64 {
        seed::derive(self.seed, &[seed::hash_str(slide_id)])
    }
}

/// A rendered slide and its per-pixel class mask (row major).
#[derive(Debug, Clone, PartialEq)]
pub struct SlideImage {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub pixels: Patch,
    pub mask: Vec<u8>,
}

impl SlideImage {
    pub fn class_at(&self, x: u32, y: u32) -> u8 {
        self.mask[y as usize * self.width as usize + x as usize]
    }

    /// Copies the `size`-square patch with top-left corner `(x, y)`.
    pub fn crop(&self, x: u32, y: u32, size: u32) -> Patch {
        image::imageops::crop_imm(&self.pixels, x, y, size, size).to_image()
    }

    pub fn mask_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width, self.height, self.mask.clone()).expect("mask covers the slide")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Center,
    /// Neighbor `k` in row-major order of the 8-neighborhood.
    Nearby(u8),
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Center => f.write_str("center"),
            Role::Nearby(k) => write!(f, "nearby{k}"),
        }
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "center" {
            return Ok(Role::Center);
        }
        match s.strip_prefix("nearby").and_then(|k| k.parse::<u8>().ok()) {
            Some(k) if usize::from(k) < MAX_NEARBY && s.len() == 7 => Ok(Role::Nearby(k)),
            _ => Err(format!("unknown role `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Unlabeled,
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Unlabeled => "unlabeled",
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unlabeled" => Ok(Split::Unlabeled),
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRecord {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub role: Role,
    pub group_id: u64,
    pub label: Option<u8>,
    pub split: Split,
}

impl PatchRecord {
    /// File name of the patch image.
    pub fn file_name(&self) -> String {
        format!("{}_{}_{}.png", self.slide_id, self.group_id, self.role)
    }
}

/// Slide ids may only use characters that keep patch file names unambiguous.
pub fn valid_slide_id(id: &str) -> bool {
    !id.is_empty() && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'.')
}

/// Everything produced for one corpus: slides, one unlabeled manifest per N
/// and the labeled train/test manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub slides: Vec<SlideImage>,
    pub unlabeled: BTreeMap<usize, Manifest>,
    pub labeled: Manifest,
}

impl Corpus {
    pub fn slide(&self, id: &str) -> Option<&SlideImage> {
        self.slides.iter().find(|s| s.slide_id == id)
    }
}

/// Generates every slide and extracts all unlabeled and labeled sets.
pub fn build_corpus(config: &CorpusConfig) -> Result<Corpus, CorpusError> {
    config.validate()?;
    let mut slides = Vec::new();
    for split in [Split::Unlabeled, Split::Train, Split::Test] {
        for id in config.slide_ids(split) {
            slides.push(generate_synthetic_slide(config, &id, config.slide_seed(&id))?);
        }
    }
    let header = |nearby| ManifestHeader {
        patch_size: config.patch_size,
        nearby,
        classes: config.classes,
        seed: config.seed,
    };

    let mut unlabeled = BTreeMap::new();
    let mut nearby_values = config.nearby_values.clone();
    nearby_values.sort_unstable();
    nearby_values.dedup();
    for &n in &nearby_values {
        let quota = unlabeled_quota(config.unlabeled_budget, n);
        let mut records = Vec::new();
        let mut next_group = 0;
        for slide in slides.iter().filter(|s| s.slide_id.starts_with("unl-")) {
            let seed = seed::derive(config.slide_seed(&slide.slide_id), &[0xE17, n as u64]);
            let recs = extract_unlabeled_groups(slide, config.patch_size, n, quota, seed, next_group)?;
            next_group += quota as u64;
            records.extend(recs);
        }
        unlabeled.insert(n, Manifest::new(header(n), records)?);
    }

    let cells = (config.grid() * config.grid()) as usize;
    let count = ((cells as f64 * config.labeled_fraction).floor() as usize).max(1);
    let mut records = Vec::new();
    let mut next_group = 0;
    for split in [Split::Train, Split::Test] {
        for id in config.slide_ids(split) {
            let slide = slides.iter().find(|s| s.slide_id == id).expect("generated above");
            let seed = seed::derive(config.slide_seed(&id), &[0x1AB]);
            let recs = extract_labeled_patches(slide, config.patch_size, count, seed, split, next_group)?;
            next_group += recs.len() as u64;
            records.extend(recs);
        }
    }
    let labeled = Manifest::new(header(0), records)?;
    Ok(Corpus { slides, unlabeled, labeled })
}

fn to_rgb8(img: &Patch) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        Rgb(p.0.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

fn from_rgb8(img: &RgbImage) -> Patch {
    Patch::from_fn(img.width(), img.height(), |x, y| Rgb(img.get_pixel(x, y).0.map(|c| f32::from(c) / 255.0)))
}

/// Writes an image as 8-bit PNG. Slides are quantized to 8-bit levels when
/// generated, so this is lossless for every patch cut from them.
pub fn save_png(path: &Path, img: &Patch) -> Result<(), CorpusError> {
    to_rgb8(img).save(path).map_err(|e| CorpusError::image(path, e))
}

pub fn load_png(path: &Path) -> Result<Patch, CorpusError> {
    let img = image::open(path).map_err(|e| CorpusError::image(path, e))?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn save_slide(dir: &Path, slide: &SlideImage) -> Result<(), CorpusError> {
    save_png(&dir.join(format!("{}.png", slide.slide_id)), &slide.pixels)?;
    let mask_path = dir.join(format!("{}_mask.png", slide.slide_id));
    slide.mask_image().save(&mask_path).map_err(|e| CorpusError::image(&mask_path, e))
}

pub fn load_slide(dir: &Path, slide_id: &str) -> Result<SlideImage, CorpusError> {
    let pixels = load_png(&dir.join(format!("{slide_id}.png")))?;
    let mask_path = dir.join(format!("{slide_id}_mask.png"));
    let mask = image::open(&mask_path).map_err(|e| CorpusError::image(&mask_path, e))?.to_luma8();
    if mask.dimensions() != pixels.dimensions() {
        return Err(CorpusError::Extraction(format!("{slide_id}: mask and slide sizes differ")));
    }
    Ok(SlideImage {
        slide_id: slide_id.to_string(),
        width: pixels.width(),
        height: pixels.height(),
        pixels,
        mask: mask.into_raw(),
    })
}

/// Writes one PNG per record of `manifest`, cut from the matching slide.
pub fn write_patches(dir: &Path, manifest: &Manifest, slides: &[SlideImage]) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    let by_id: HashMap<&str, &SlideImage> = slides.iter().map(|s| (s.slide_id.as_str(), s)).collect();
    for r in &manifest.records {
        let slide = by_id
            .get(r.slide_id.as_str())
            .ok_or_else(|| CorpusError::Extraction(format!("no slide `{}`", r.slide_id)))?;
        save_png(&dir.join(r.file_name()), &slide.crop(r.x, r.y, r.size))?;
    }
    Ok(())
}

/// Loads the patch image of `record` from `dir`, checking its size.
pub fn load_patch(dir: &Path, record: &PatchRecord) -> Result<Patch, CorpusError> {
    let path = dir.join(record.file_name());
    let img = load_png(&path)?;
    if img.dimensions() != (record.size, record.size) {
        return Err(CorpusError::Extraction(format!(
            "{}: expected {}x{} pixels, got {}x{}",
            path.display(),
            record.size,
            record.size,
            img.width(),
            img.height()
        )));
    }
    Ok(img)
}

/// Patch groups of an unlabeled manifest, each center first, read from `dir`.
pub fn load_groups(manifest: &Manifest, dir: &Path) -> Result<Vec<Vec<Patch>>, CorpusError> {
    manifest
        .groups()
        .into_iter()
        .map(|g| g.into_iter().map(|r| load_patch(dir, r)).collect())
        .collect()
}

/// Same as [`load_groups`] but cut directly from in-memory slides.
pub fn crop_groups(manifest: &Manifest, slides: &[SlideImage]) -> Result<Vec<Vec<Patch>>, CorpusError> {
    let by_id: HashMap<&str, &SlideImage> = slides.iter().map(|s| (s.slide_id.as_str(), s)).collect();
    manifest
        .groups()
        .into_iter()
        .map(|g| {
            g.into_iter()
                .map(|r| {
                    by_id
                        .get(r.slide_id.as_str())
                        .map(|s| s.crop(r.x, r.y, r.size))
                        .ok_or_else(|| CorpusError::Extraction(format!("no slide `{}`", r.slide_id)))
                })
                .collect()
        })
        .collect()
}

/// Labeled patches of one split with their class ids, in manifest order.
pub fn load_labeled(manifest: &Manifest, dir: &Path, split: Split) -> Result<(Vec<Patch>, Vec<usize>), CorpusError> {
    let mut patches = Vec::new();
    let mut labels = Vec::new();
    for r in manifest.records.iter().filter(|r| r.split == split) {
        let label = r.label.ok_or_else(|| CorpusError::Extraction(format!("{} has no label", r.file_name())))?;
        patches.push(load_patch(dir, r)?);
        labels.push(usize::from(label));
    }
    Ok((patches, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> CorpusConfig {
        CorpusConfig {
            unlabeled_slides: 2,
            train_slides: 1,
            test_slides: 1,
            slide_size: 256,
            patch_size: 32,
            unlabeled_budget: 20,
            nearby_values: vec![0, 4],
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn roles_and_splits_parse_back() {
        for role in [Role::Center, Role::Nearby(0), Role::Nearby(7)] {
            assert_eq!(role.to_string().parse::<Role>().unwrap(), role);
        }
        assert!("nearby8".parse::<Role>().is_err());
        assert!("nearby01".parse::<Role>().is_err());
        for split in [Split::Unlabeled, Split::Train, Split::Test] {
            assert_eq!(split.to_string().parse::<Split>().unwrap(), split);
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = [
            CorpusConfig { slide_size: 1000, ..CorpusConfig::default() },
            CorpusConfig { slide_size: 1024, ..CorpusConfig::default() },
            CorpusConfig { classes: 1, ..CorpusConfig::default() },
            CorpusConfig { nearby_values: vec![9], ..CorpusConfig::default() },
            CorpusConfig { labeled_fraction: 0.0, ..CorpusConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(CorpusError::Config(_))), "{cfg:?}");
        }
        CorpusConfig::default().validate().unwrap();
    }

    #[test]
    fn corpus_quotas_follow_the_budget() {
        let cfg = small_config();
        let corpus = build_corpus(&cfg).unwrap();
        assert_eq!(corpus.slides.len(), 4);
        let n0 = &corpus.unlabeled[&0];
        let n4 = &corpus.unlabeled[&4];
        assert_eq!(n0.records.len(), 2 * 20);
        assert_eq!(n4.records.len(), 2 * 4 * 5);
        assert_eq!(corpus.labeled.records.len(), 2 * 64);
        let test_ids: Vec<_> = corpus.labeled.records.iter().filter(|r| r.split == Split::Test).map(|r| &r.slide_id).collect();
        assert!(test_ids.iter().all(|id| id.starts_with("test-")));
    }

    #[test]
    fn patches_round_trip_through_png() {
        let cfg = small_config();
        let corpus = build_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = &corpus.unlabeled[&4];
        write_patches(dir.path(), manifest, &corpus.slides).unwrap();
        let from_disk = load_groups(manifest, dir.path()).unwrap();
        let in_memory = crop_groups(manifest, &corpus.slides).unwrap();
        assert_eq!(from_disk, in_memory);

        save_slide(dir.path(), &corpus.slides[0]).unwrap();
        assert_eq!(load_slide(dir.path(), &corpus.slides[0].slide_id).unwrap(), corpus.slides[0]);
    }
}
