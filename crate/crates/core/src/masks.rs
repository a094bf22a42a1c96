//! Rectangular masks and R-covering mask sets.
//!
//! A mask set for a `p`-cell patch is the Cartesian product of two 1-D index
//! sets, each built by sliding an `m = p + s - 1` window with stride `s` and
//! appending a final window flush with the far edge. Masks are kept as
//! rectangles (or unions of rectangles for multi-patch sets), never bitmaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::div_ceil;

/// Axis-aligned rectangle of grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

impl Region {
    pub const fn new(top: usize, left: usize, h: usize, w: usize) -> Self {
        Region { top, left, h, w }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.h
    }

    pub fn right(&self) -> usize {
        self.left + self.w
    }

    pub fn is_empty(&self) -> bool {
        self.h == 0 || self.w == 0
    }

    pub fn fits(&self, grid: (usize, usize)) -> bool {
        self.bottom() <= grid.0 && self.right() <= grid.1
    }

    pub fn contains(&self, other: &Region) -> bool {
        other.is_empty()
            || (self.top <= other.top
                && self.left <= other.left
                && other.bottom() <= self.bottom()
                && other.right() <= self.right())
    }

    pub fn contains_cell(&self, i: usize, j: usize) -> bool {
        i >= self.top && i < self.bottom() && j >= self.left && j < self.right()
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.top..self.bottom()).flat_map(move |i| (self.left..self.right()).map(move |j| (i, j)))
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}@({},{})", self.h, self.w, self.top, self.left)
    }
}

/// A union of rectangles.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mask(pub Vec<Region>);

impl Mask {
    pub fn single(r: Region) -> Self {
        Mask(vec![r])
    }

    pub fn empty() -> Self {
        Mask(Vec::new())
    }

    pub fn regions(&self) -> &[Region] {
        &self.0
    }

    pub fn contains_cell(&self, i: usize, j: usize) -> bool {
        self.0.iter().any(|r| r.contains_cell(i, j))
    }

    /// True iff every cell of `region` lies inside this union.
    pub fn covers(&self, region: &Region) -> bool {
        if self.0.iter().any(|m| m.contains(region)) {
            return true;
        }
        if self.0.len() < 2 {
            return region.is_empty();
        }
        region.cells().all(|(i, j)| self.contains_cell(i, j))
    }

    /// Union without repeated rectangles, so `m.union(&m) == m`.
    pub fn union(&self, other: &Mask) -> Mask {
        let mut v = self.0.clone();
        for r in &other.0 {
            if !v.contains(r) {
                v.push(*r);
            }
        }
        Mask(v)
    }

    pub fn fits(&self, grid: (usize, usize)) -> bool {
        self.0.iter().all(|r| r.fits(grid))
    }

    /// Row-major cell bitmap of the union.
    pub fn bitmap(&self, grid: (usize, usize)) -> Vec<bool> {
        let mut bits = vec![false; grid.0 * grid.1];
        for r in &self.0 {
            for (i, j) in r.cells() {
                if i < grid.0 && j < grid.1 {
                    bits[i * grid.1 + j] = true;
                }
            }
        }
        bits
    }
}

/// Generation parameters recorded with a mask set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskParams {
    pub patch: (usize, usize),
    pub stride: (usize, usize),
    pub mask_size: (usize, usize),
    /// Number of base masks combined into each union.
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub grid: (usize, usize),
    pub params: MaskParams,
    pub masks: Vec<Mask>,
    pub covering_checked: bool,
}

/// Window offsets `{0, s, 2s, ..., floor((n-m)/s)*s} ∪ {n-m}`, sorted and deduplicated.
pub fn mask_indices_1d(n: usize, m: usize, s: usize) -> Result<Vec<usize>> {
    if m == 0 || s == 0 {
        return Err(Error::config("mask size and stride must be >= 1"));
    }
    if m > n {
        return Err(Error::config(format!("mask size {m} exceeds grid size {n}")));
    }
    let last = n - m;
    let mut idx: Vec<usize> = (0..=last / s).map(|i| i * s).collect();
    if *idx.last().expect("at least offset 0") != last {
        idx.push(last);
    }
    Ok(idx)
}

/// `ceil((n - m) / s) + 1`.
pub fn mask_set_size_1d(n: usize, m: usize, s: usize) -> usize {
    div_ceil(n - m, s) + 1
}

impl MaskSet {
    /// Mask set with an explicit mask size, recording `patch` as its target.
    pub fn with_mask_size(
        grid: (usize, usize),
        patch: (usize, usize),
        mask_size: (usize, usize),
        stride: (usize, usize),
    ) -> Result<MaskSet> {
        let rows = mask_indices_1d(grid.0, mask_size.0, stride.0)?;
        let cols = mask_indices_1d(grid.1, mask_size.1, stride.1)?;
        let masks = rows
            .iter()
            .flat_map(|&t| {
                cols.iter()
                    .map(move |&l| Mask::single(Region::new(t, l, mask_size.0, mask_size.1)))
            })
            .collect();
        Ok(MaskSet {
            grid,
            params: MaskParams {
                patch,
                stride,
                mask_size,
                k: 1,
            },
            masks,
            covering_checked: false,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// First patch placement not contained in any mask, scanning row-major
    /// anchors with the given stride (the last anchor per axis is always kept).
    pub fn uncovered_anchor_strided(&self, patch: (usize, usize), stride: (usize, usize)) -> Option<(usize, usize)> {
        if patch.0 > self.grid.0 || patch.1 > self.grid.1 {
            return None;
        }
        let rows = mask_indices_1d(self.grid.0, patch.0, stride.0).ok()?;
        let cols = mask_indices_1d(self.grid.1, patch.1, stride.1).ok()?;
        for &a in &rows {
            for &b in &cols {
                let r = Region::new(a, b, patch.0, patch.1);
                if !self.masks.iter().any(|m| m.covers(&r)) {
                    return Some((a, b));
                }
            }
        }
        None
    }

    /// Exhaustive single-patch search for an uncovered placement.
    pub fn uncovered_anchor(&self, patch: (usize, usize)) -> Option<(usize, usize)> {
        self.uncovered_anchor_strided(patch, (1, 1))
    }

    /// First K-tuple of patch placements (K = `params.k`) whose union no single
    /// mask contains. Placements are enumerated as sorted combinations of
    /// distinct row-major anchors.
    pub fn uncovered_placement(&self, patch: (usize, usize)) -> Option<Vec<(usize, usize)>> {
        let k = self.params.k.max(1);
        if k == 1 {
            return self.uncovered_anchor(patch).map(|a| vec![a]);
        }
        if patch.0 > self.grid.0 || patch.1 > self.grid.1 {
            return None;
        }
        let anchors: Vec<(usize, usize)> = (0..=self.grid.0 - patch.0)
            .flat_map(|a| (0..=self.grid.1 - patch.1).map(move |b| (a, b)))
            .collect();
        let regions: Vec<Region> = anchors.iter().map(|&(a, b)| Region::new(a, b, patch.0, patch.1)).collect();
        let take = k.min(regions.len());
        for combo in Combinations::new(regions.len(), take) {
            let covered = self.masks.iter().any(|m| combo.iter().all(|&i| m.covers(&regions[i])));
            if !covered {
                return Some(combo.iter().map(|&i| anchors[i]).collect());
            }
        }
        None
    }

    /// R-covering check for every placement of `patch` on the grid.
    pub fn verify_covering(&self, patch: (usize, usize)) -> bool {
        self.uncovered_placement(patch).is_none()
    }

    /// True iff every admissible union of `k` distinct regions is inside one mask.
    pub fn covers_regions(&self, regions: &[Region], k: usize) -> bool {
        if regions.iter().any(|r| !r.fits(self.grid)) {
            return false;
        }
        let take = k.max(1).min(regions.len());
        if take == 0 {
            return true;
        }
        Combinations::new(regions.len(), take)
            .all(|combo| self.masks.iter().any(|m| combo.iter().all(|&i| m.covers(&regions[i]))))
    }

    pub fn mark_checked(mut self) -> Self {
        self.covering_checked = self.verify_covering(self.params.patch);
        self
    }
}

/// Mask set for `patch` with mask size `patch + stride - 1` per axis.
pub fn build_mask_set(grid: (usize, usize), patch: (usize, usize), stride: (usize, usize)) -> Result<MaskSet> {
    if patch.0 == 0 || patch.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::config("patch extent and stride must be >= 1"));
    }
    let m = (patch.0 + stride.0 - 1, patch.1 + stride.1 - 1);
    if m.0 > grid.0 || m.1 > grid.1 {
        return Err(Error::config(format!(
            "mask {}x{} (patch {}x{} + stride {}x{} - 1) exceeds the {}x{} grid; use a smaller patch, a smaller stride, or a different split",
            m.0, m.1, patch.0, patch.1, stride.0, stride.1, grid.0, grid.1
        )));
    }
    let mut set = MaskSet::with_mask_size(grid, patch, m, stride)?;
    set.covering_checked = true;
    Ok(set)
}

/// Default cap on the number of union masks generated by [`k_union_mask_set`].
pub const DEFAULT_UNION_CAP: usize = 200_000;

/// All unions of `k` distinct masks of `base`, in lexicographic index order.
pub fn k_union_mask_set(base: &MaskSet, k: usize, cap: usize) -> Result<MaskSet> {
    if k == 0 {
        return Err(Error::config("K must be >= 1"));
    }
    if k == 1 {
        return Ok(base.clone());
    }
    if k > base.len() {
        return Err(Error::config(format!("K={k} exceeds the {} base masks", base.len())));
    }
    let size = binomial(base.len() as u128, k as u128);
    if size > cap as u128 {
        return Err(Error::TooManyMasks { size, cap });
    }
    let masks = Combinations::new(base.len(), k)
        .map(|combo| {
            let mut m = Mask::empty();
            for i in combo {
                m = m.union(&base.masks[i]);
            }
            m
        })
        .collect();
    Ok(MaskSet {
        grid: base.grid,
        params: MaskParams {
            k: base.params.k * k,
            ..base.params
        },
        masks,
        covering_checked: base.covering_checked,
    })
}

pub fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc = 1u128;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Lexicographic k-subsets of `0..n`.
#[derive(Debug, Clone)]
pub struct Combinations {
    n: usize,
    idx: Vec<usize>,
    done: bool,
}

impl Combinations {
    pub fn new(n: usize, k: usize) -> Self {
        Combinations {
            n,
            idx: (0..k).collect(),
            done: k > n,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.clone();
        let k = self.idx.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.idx[i] < self.n - k + i {
                self.idx[i] += 1;
                for j in i + 1..k {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn indices_examples() {
        assert_eq!(mask_indices_1d(10, 4, 3).unwrap(), vec![0, 3, 6]);
        assert_eq!(mask_indices_1d(7, 7, 2).unwrap(), vec![0]);
        assert_eq!(mask_indices_1d(224, 32, 1).unwrap().len(), 193);
        assert_eq!(mask_indices_1d(10, 4, 4).unwrap(), vec![0, 4, 6]);
        assert!(mask_indices_1d(3, 4, 1).is_err());
    }

    #[test]
    fn build_examples() {
        let m = build_mask_set((14, 14), (3, 3), (1, 1)).unwrap();
        assert_eq!(m.len(), 144);
        assert!(m.masks.iter().all(|k| k.0[0].h == 3 && k.0[0].w == 3));
        let full = build_mask_set((14, 14), (14, 14), (1, 1)).unwrap();
        assert_eq!(full.masks, vec![Mask::single(Region::new(0, 0, 14, 14))]);
        assert!(build_mask_set((14, 14), (15, 3), (1, 1)).is_err());
        assert!(build_mask_set((14, 14), (13, 3), (3, 1)).is_err());
    }

    #[test]
    fn large_grid_size_and_subsampled_coverage() {
        let m = build_mask_set((224, 224), (32, 32), (1, 1)).unwrap();
        assert_eq!(m.len(), 193 * 193);
        assert_eq!(m.uncovered_anchor_strided((32, 32), (23, 23)), None);
    }

    #[test]
    fn covering_counterexamples() {
        let m = build_mask_set((12, 12), (3, 3), (2, 2)).unwrap();
        assert!(m.verify_covering((3, 3)));
        // a 4-cell patch slips between stride-2 masks of size 4
        let anchor = m.uncovered_anchor((4, 4)).expect("counterexample");
        let r = Region::new(anchor.0, anchor.1, 4, 4);
        assert!(m.masks.iter().all(|k| !k.covers(&r)));

        let short = MaskSet::with_mask_size((12, 12), (3, 3), (2, 2), (1, 1)).unwrap();
        assert!(!short.verify_covering((3, 3)));
    }

    #[test]
    fn union_sets() {
        let base = build_mask_set((1, 5), (1, 3), (1, 1)).unwrap();
        assert_eq!(base.len(), 3);
        let pairs = k_union_mask_set(&base, 2, 100).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs.params.k, 2);
        assert_eq!(k_union_mask_set(&base, 1, 100).unwrap(), base);
        let big = build_mask_set((20, 20), (1, 1), (1, 1)).unwrap();
        assert!(matches!(k_union_mask_set(&big, 3, 1000), Err(Error::TooManyMasks { .. })));
    }

    #[test]
    fn two_patch_coverage_small_grids() {
        for n in [5, 7] {
            for p in 1..=2 {
                for s in 1..=2 {
                    let base = build_mask_set((n, n), (p, p), (s, s)).unwrap();
                    let pairs = k_union_mask_set(&base, 2, DEFAULT_UNION_CAP).unwrap();
                    assert_eq!(pairs.uncovered_placement((p, p)), None, "n={n} p={p} s={s}");
                }
            }
        }
    }

    #[test]
    fn union_cover_uses_cells() {
        let m = Mask(vec![Region::new(0, 0, 2, 2), Region::new(0, 2, 2, 2)]);
        assert!(m.covers(&Region::new(0, 1, 2, 2)));
        assert!(!m.covers(&Region::new(1, 1, 2, 2)));
    }

    #[test]
    fn combinations_enumerate() {
        let all: Vec<_> = Combinations::new(4, 2).collect();
        assert_eq!(all.len(), 6);
        assert_eq!(all[0], vec![0, 1]);
        assert_eq!(all[5], vec![2, 3]);
        assert_eq!(Combinations::new(3, 0).count(), 1);
        assert_eq!(Combinations::new(2, 3).count(), 0);
        assert_eq!(binomial(25, 2), 300);
    }

    proptest! {
        #[test]
        fn size_law(n in 1usize..=64, m_frac in 0.0f64..1.0, s in 1usize..=64) {
            let m = 1 + ((n - 1) as f64 * m_frac) as usize;
            let s = s.min(n);
            let idx = mask_indices_1d(n, m, s).unwrap();
            prop_assert_eq!(idx.len(), mask_set_size_1d(n, m, s));
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(*idx.last().unwrap(), n - m);
        }

        #[test]
        fn enumeration_is_row_major(n in 4usize..16, p in 1usize..4) {
            let m = build_mask_set((n, n), (p, p), (1, 1)).unwrap();
            let keys: Vec<_> = m.masks.iter().map(|k| (k.0[0].top, k.0[0].left)).collect();
            let mut sorted = keys.clone();
            sorted.sort();
            prop_assert_eq!(keys, sorted);
        }
    }
}
