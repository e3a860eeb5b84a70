//! Patch extraction: random center/nearby groups for the unlabeled sets and
//! disjoint grid cells for the labeled splits.

use rand::seq::index;
use rand::Rng;

use super::{CorpusError, PatchRecord, Role, SlideImage, Split};
use crate::batcher::MAX_NEARBY;
use crate::seed;

/// Centers per slide for a patch budget shared by every N, so that
/// `centers * (N + 1)` stays within the budget. The shortfall for N that do
/// not divide the budget is not padded.
pub fn unlabeled_quota(budget: usize, nearby: usize) -> usize {
    budget / (nearby + 1)
}

/// Offset of neighbor `k` in units of the patch size, row major over the
/// 8-neighborhood: `(-1,-1) (0,-1) (1,-1) (-1,0) (1,0) (-1,1) (0,1) (1,1)`.
pub fn neighbor_offset(k: u8) -> (i64, i64) {
    const OFFSETS: [(i64, i64); MAX_NEARBY] =
        [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];
    OFFSETS[usize::from(k)]
}

/// Samples `count` groups of one center plus `nearby` distinct neighbors.
///
/// Centers are drawn uniformly from positions whose whole 8-neighborhood
/// lies inside the slide; centers of different groups may overlap. Group ids
/// run from `first_group` upwards.
pub fn extract_unlabeled_groups(
    slide: &SlideImage,
    patch_size: u32,
    nearby: usize,
    count: usize,
    seed: u64,
    first_group: u64,
) -> Result<Vec<PatchRecord>, CorpusError> {
    if nearby > MAX_NEARBY {
        return Err(CorpusError::Extraction(format!("N = {nearby} exceeds the {MAX_NEARBY}-cell neighborhood")));
    }
    if count == 0 {
        return Err(CorpusError::Extraction("group count must be positive".into()));
    }
    let s = patch_size;
    if slide.width < 3 * s || slide.height < 3 * s {
        return Err(CorpusError::Extraction(format!(
            "slide `{}` ({}x{}) has no room for a {s}-pixel center with all neighbors",
            slide.slide_id, slide.width, slide.height
        )));
    }
    let mut rng = seed::rng(seed, &[]);
    let mut records = Vec::with_capacity(count * (nearby + 1));
    for g in 0..count as u64 {
        let cx = rng.random_range(s..=slide.width - 2 * s);
        let cy = rng.random_range(s..=slide.height - 2 * s);
        let record = |x, y, role| PatchRecord {
            slide_id: slide.slide_id.clone(),
            x,
            y,
            size: s,
            role,
            group_id: first_group + g,
            label: None,
            split: Split::Unlabeled,
        };
        records.push(record(cx, cy, Role::Center));
        let mut ks: Vec<u8> = index::sample(&mut rng, MAX_NEARBY, nearby).into_iter().map(|k| k as u8).collect();
        ks.sort_unstable();
        for k in ks {
            let (dx, dy) = neighbor_offset(k);
            let x = (i64::from(cx) + dx * i64::from(s)) as u32;
            let y = (i64::from(cy) + dy * i64::from(s)) as u32;
            records.push(record(x, y, Role::Nearby(k)));
        }
    }
    Ok(records)
}

/// Most frequent class in the `size`-square at `(x, y)`; ties go to the
/// lowest class id.
pub fn majority_label(slide: &SlideImage, x: u32, y: u32, size: u32) -> u8 {
    let mut counts = [0usize; 256];
    for yy in y..y + size {
        for xx in x..x + size {
            counts[usize::from(slide.class_at(xx, yy))] += 1;
        }
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best as u8
}

/// Draws `count` cells of the disjoint patch grid without replacement and
/// labels each by its mask majority. Records come out in row-major cell
/// order with group ids from `first_group`.
pub fn extract_labeled_patches(
    slide: &SlideImage,
    patch_size: u32,
    count: usize,
    seed: u64,
    split: Split,
    first_group: u64,
) -> Result<Vec<PatchRecord>, CorpusError> {
    if split == Split::Unlabeled {
        return Err(CorpusError::Extraction("labeled patches need the train or test split".into()));
    }
    let (gw, gh) = (slide.width / patch_size, slide.height / patch_size);
    let cells = (gw * gh) as usize;
    if count > cells {
        return Err(CorpusError::Extraction(format!(
            "slide `{}` has {cells} disjoint cells, {count} requested",
            slide.slide_id
        )));
    }
    let mut rng = seed::rng(seed, &[]);
    let mut chosen = index::sample(&mut rng, cells, count).into_vec();
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .zip(first_group..)
        .map(|(cell, group_id)| {
            let x = (cell as u32 % gw) * patch_size;
            let y = (cell as u32 / gw) * patch_size;
            PatchRecord {
                slide_id: slide.slide_id.clone(),
                x,
                y,
                size: patch_size,
                role: Role::Center,
                group_id,
                label: Some(majority_label(slide, x, y, patch_size)),
                split,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Patch;

    fn blank(width: u32, height: u32) -> SlideImage {
        SlideImage {
            slide_id: "s".into(),
            width,
            height,
            pixels: Patch::new(width, height),
            mask: vec![0; (width * height) as usize],
        }
    }

    #[test]
    fn quota_matches_the_equal_budget_table() {
        let quotas: Vec<usize> = [0, 1, 2, 4, 8].iter().map(|&n| unlabeled_quota(1000, n)).collect();
        assert_eq!(quotas, vec![1000, 500, 333, 200, 111]);
    }

    #[test]
    fn full_neighborhood_of_a_fixed_center() {
        // The only admissible center on a 3x3 grid is the middle cell.
        let slide = blank(1536, 1536);
        let recs = extract_unlabeled_groups(&slide, 512, 8, 3, 1, 0).unwrap();
        let group: Vec<_> = recs.iter().filter(|r| r.group_id == 0).collect();
        assert_eq!((group[0].x, group[0].y, group[0].role), (512, 512, Role::Center));
        let pos: Vec<(u32, u32)> = group[1..].iter().map(|r| (r.x, r.y)).collect();
        assert_eq!(
            pos,
            vec![(0, 0), (512, 0), (1024, 0), (0, 512), (1024, 512), (0, 1024), (512, 1024), (1024, 1024)]
        );
    }

    #[test]
    fn group_counts_follow_n() {
        let slide = blank(1536, 1536);
        let n4 = extract_unlabeled_groups(&slide, 512, 4, 200, 3, 0).unwrap();
        assert_eq!(n4.iter().filter(|r| r.role == Role::Center).count(), 200);
        assert_eq!(n4.iter().filter(|r| r.role != Role::Center).count(), 800);
        let n0 = extract_unlabeled_groups(&slide, 512, 0, 1000, 3, 0).unwrap();
        assert_eq!(n0.len(), 1000);
        assert!(n0.iter().all(|r| r.role == Role::Center));
    }

    #[test]
    fn neighbors_are_distinct_and_inside() {
        let slide = blank(640, 512);
        let recs = extract_unlabeled_groups(&slide, 64, 5, 50, 9, 10).unwrap();
        for group in recs.chunks(6) {
            let c = &group[0];
            let mut ks = Vec::new();
            for r in &group[1..] {
                let Role::Nearby(k) = r.role else { panic!("expected nearby") };
                let (dx, dy) = neighbor_offset(k);
                assert_eq!(i64::from(r.x) - i64::from(c.x), dx * 64);
                assert_eq!(i64::from(r.y) - i64::from(c.y), dy * 64);
                assert!(r.x + 64 <= 640 && r.y + 64 <= 512);
                ks.push(k);
            }
            ks.dedup();
            assert_eq!(ks.len(), 5);
        }
        assert_eq!(recs[0].group_id, 10);
    }

    #[test]
    fn extraction_errors() {
        let slide = blank(128, 128);
        assert!(extract_unlabeled_groups(&slide, 64, 1, 1, 0, 0).is_err());
        assert!(extract_unlabeled_groups(&blank(192, 192), 64, 9, 1, 0, 0).is_err());
        assert!(extract_labeled_patches(&blank(1536, 1536), 512, 10, 0, Split::Train, 0).is_err());
        assert_eq!(extract_labeled_patches(&blank(1536, 1536), 512, 9, 0, Split::Test, 0).unwrap().len(), 9);
    }

    #[test]
    fn labels_follow_the_pixel_majority() {
        // Oracle: count pixels of each class directly.
        let mut slide = blank(30, 10);
        for y in 0..10 {
            for x in 0..30 {
                // Cell 0 uniform class 3; cell 1 split 60/40 between 2 and 4;
                // cell 2 split 50/50 between 5 and 1.
                let c = match x {
                    0..=9 => 3,
                    10..=15 => 2,
                    16..=19 => 4,
                    20..=24 => 5,
                    _ => 1,
                };
                slide.mask[y * 30 + x] = c;
            }
        }
        let labels: Vec<u8> = extract_labeled_patches(&slide, 10, 3, 0, Split::Train, 0)
            .unwrap()
            .iter()
            .map(|r| r.label.unwrap())
            .collect();
        assert_eq!(labels, vec![3, 2, 1]);
    }
}
