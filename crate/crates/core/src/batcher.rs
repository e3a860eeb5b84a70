//! Multiviewed batch layout and its index sets.
//!
//! A batch holds `C` groups of one center and `N` nearby patches, i.e.
//! `B = C·(N+1)` patches, each augmented twice into `2B` views. Indices are
//! 0-based and laid out as follows:
//!
//! - first views occupy `0..B`: center `c` at index `c`, the `n`-th nearby
//!   patch (`n = 1..=N`) of center `c` at index `n·C + c`;
//! - the second view of patch `k` sits at `k + B`.
//!
//! With this layout the group of index `i` is `i mod C`, which makes every
//! index set closed-form.

use thiserror::Error;

use crate::augment::{self, AugmentError, AugmentPolicy, Patch};
use crate::seed;

pub const MAX_NEARBY: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum BatchError {
    #[error("a batch needs at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("nearby count {0} exceeds the 8-neighborhood")]
    TooManyNearby(usize),
    #[error("group {group} has {got} patches, expected {expected}")]
    Ragged { group: usize, got: usize, expected: usize },
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub centers: usize,
    pub nearby: usize,
}

impl BatchSpec {
    pub fn new(centers: usize, nearby: usize) -> Result<Self, BatchError> {
        if centers < 2 {
            return Err(BatchError::TooFewGroups(centers));
        }
        if nearby > MAX_NEARBY {
            return Err(BatchError::TooManyNearby(nearby));
        }
        Ok(Self { centers, nearby })
    }

    /// Patches per view, `B = C·(N+1)`.
    pub fn per_view(&self) -> usize {
        self.centers * (self.nearby + 1)
    }

    /// Size of the multiviewed batch, `2B`.
    pub fn views(&self) -> usize {
        2 * self.per_view()
    }

    pub fn group(&self, i: usize) -> usize {
        i % self.centers
    }

    /// Underlying patch of view `i`.
    pub fn patch_id(&self, i: usize) -> usize {
        i % self.per_view()
    }

    /// The other view of the same patch, `j(i)`.
    pub fn twin(&self, i: usize) -> usize {
        debug_assert!(i < self.views());
        (i + self.per_view()) % self.views()
    }

    /// `P(i)`: every other view of `i`'s group. Size `2N+1`.
    pub fn positives(&self, i: usize) -> Vec<usize> {
        debug_assert!(i < self.views());
        let g = self.group(i);
        (g..self.views()).step_by(self.centers).filter(|&k| k != i).collect()
    }

    /// `A(i)`: every view outside `i`'s group. Size `2(N+1)(C-1)`.
    ///
    /// `i` itself is excluded so that self-similarity never enters the loss.
    pub fn negatives(&self, i: usize) -> Vec<usize> {
        debug_assert!(i < self.views());
        let g = self.group(i);
        (0..self.views()).filter(|&k| self.group(k) != g).collect()
    }

    /// Group id of every view, in index order.
    pub fn group_labels(&self) -> Vec<usize> {
        (0..self.views()).map(|i| self.group(i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MultiviewBatch {
    pub spec: BatchSpec,
    pub views: Vec<Patch>,
    pub group: Vec<usize>,
    pub patch_id: Vec<usize>,
}

/// Builds the multiviewed batch for `groups`, each given as its center patch
/// followed by its `N` nearby patches.
///
/// View `k` is augmented with a seed derived from `(seed, k)`, so the two
/// views of a patch are independent draws.
pub fn assemble<G: AsRef<[Patch]>>(
    groups: &[G],
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<MultiviewBatch, BatchError> {
    let first = groups.first().map(|g| g.as_ref().len()).unwrap_or(0);
    let nearby = first.saturating_sub(1);
    let spec = BatchSpec::new(groups.len(), nearby)?;
    for (group, g) in groups.iter().enumerate() {
        let got = g.as_ref().len();
        if got != nearby + 1 {
            return Err(BatchError::Ragged { group, got, expected: nearby + 1 });
        }
    }
    let b = spec.per_view();
    let mut views = Vec::with_capacity(spec.views());
    for i in 0..spec.views() {
        let k = i % b;
        let (n, c) = (k / spec.centers, k % spec.centers);
        let patch = &groups[c].as_ref()[n];
        views.push(augment::make_view(patch, policy, seed::derive(seed, &[i as u64]))?);
    }
    Ok(MultiviewBatch {
        spec,
        views,
        group: spec.group_labels(),
        patch_id: (0..spec.views()).map(|i| spec.patch_id(i)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    #[test]
    fn layout_for_two_centers_one_nearby() {
        let s = BatchSpec::new(2, 1).unwrap();
        assert_eq!(s.views(), 8);
        assert_eq!(s.group_labels(), vec![0, 1, 0, 1, 0, 1, 0, 1]);
        // 1-based P(1)={3,5,7}, A(1)={2,4,6,8}, j(1)=5
        assert_eq!(s.positives(0), vec![2, 4, 6]);
        assert_eq!(s.negatives(0), vec![1, 3, 5, 7]);
        assert_eq!(s.twin(0), 4);
    }

    #[test]
    fn simclr_case_has_only_the_twin() {
        let s = BatchSpec::new(2, 0).unwrap();
        assert_eq!(s.positives(0), vec![s.twin(0)]);
        assert_eq!(s.negatives(0).len(), 2);
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert_eq!(BatchSpec::new(1, 0), Err(BatchError::TooFewGroups(1)));
        assert_eq!(BatchSpec::new(3, 9), Err(BatchError::TooManyNearby(9)));
    }

    proptest! {
        #[test]
        fn index_sets_partition_and_are_symmetric(c in 2usize..=6, n in 0usize..=8) {
            let s = BatchSpec::new(c, n).unwrap();
            let total = s.views();
            for i in 0..total {
                let p = s.positives(i);
                let a = s.negatives(i);
                prop_assert_eq!(p.len(), 2 * n + 1);
                prop_assert_eq!(a.len(), 2 * (n + 1) * (c - 1));
                prop_assert!(p.contains(&s.twin(i)));
                let mut all: Vec<usize> = p.iter().chain(a.iter()).copied().chain([i]).collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..total).collect::<Vec<_>>());
                for &j in &p {
                    prop_assert!(s.positives(j).contains(&i));
                }
            }
        }
    }

    fn groups(c: usize, n: usize) -> Vec<Vec<Patch>> {
        (0..c)
            .map(|g| {
                (0..=n)
                    .map(|k| Patch::from_fn(12, 12, |x, y| Rgb([g as f32 / 8.0, k as f32 / 9.0, (x * y) as f32 / 121.0])))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn assemble_follows_layout() {
        let policy = AugmentPolicy { target_size: 8, ..AugmentPolicy::default() };
        let b = assemble(&groups(3, 0), &policy, 5).unwrap();
        assert_eq!(b.views.len(), 6);
        assert_eq!(b.group, vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(b.patch_id, vec![0, 1, 2, 0, 1, 2]);

        let b = assemble(&groups(4, 3), &policy, 5).unwrap();
        let mut sizes = vec![0; 4];
        for &g in &b.group {
            sizes[g] += 1;
        }
        assert_eq!(sizes, vec![8; 4]);
        let mut per_patch = vec![0; 16];
        for &p in &b.patch_id {
            per_patch[p] += 1;
        }
        assert!(per_patch.iter().all(|&k| k == 2));
    }

    #[test]
    fn assemble_rejects_ragged_groups() {
        let mut g = groups(3, 2);
        g[1].pop();
        let err = assemble(&g, &AugmentPolicy::default(), 0).unwrap_err();
        assert_eq!(err, BatchError::Ragged { group: 1, got: 2, expected: 3 });
    }
}
