//! Brute-force references used to check the geometry, coverage, secure
//! operation and certification code. Nothing here calls into the code it
//! checks: coverage uses dense bitmaps, masking uses per-cell loops, and
//! corruption footprints come from running the network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cure::SplitClassifier;
use crate::error::Result;
use crate::masks::{Mask, MaskSet, Region};
use crate::models::{Stack, WeightStore};
use crate::rf::ImageThreat;
use crate::secure::{MaskedClassifier, SecureKind, SecureOpConfig};
use crate::tensor::Tensor3;

/// Threshold above which a feature counts as changed.
pub const TRACE_EPS: f32 = 1e-7;

/// Bounding box of every feature cell that changes when `region` of `x` is
/// overwritten with random values, over `trials` draws. `None` if nothing moved.
pub fn trace_corruption(
    stack: &Stack,
    store: &WeightStore,
    x: &Tensor3,
    region: Region,
    trials: usize,
    seed: u64,
) -> Result<Option<Region>> {
    let clean = stack.forward(x, store, None)?;
    let (fh, fw, fc) = clean.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for _ in 0..trials {
        let mut adv = x.clone();
        for i in region.top..region.top + region.h {
            for j in region.left..region.left + region.w {
                for c in 0..x.c() {
                    adv.set(i, j, c, rng.gen_range(-2.0..3.0));
                }
            }
        }
        let out = stack.forward(&adv, store, None)?;
        for i in 0..fh {
            for j in 0..fw {
                let moved = (0..fc).any(|c| (out.get(i, j, c) - clean.get(i, j, c)).abs() > TRACE_EPS);
                if moved {
                    bbox = Some(match bbox {
                        None => (i, j, i, j),
                        Some((t, l, b, r)) => (t.min(i), l.min(j), b.max(i), r.max(j)),
                    });
                }
            }
        }
    }
    Ok(bbox.map(|(t, l, b, r)| Region::new(t, l, b - t + 1, r - l + 1)))
}

fn paint(f: &Tensor3, mask: &Mask, fill: f32) -> Tensor3 {
    let mut out = f.clone();
    for r in &mask.0 {
        for i in r.top..r.top + r.h {
            for j in r.left..r.left + r.w {
                for c in 0..f.c() {
                    out.set(i, j, c, fill);
                }
            }
        }
    }
    out
}

fn vote(labels: &[usize]) -> usize {
    let top = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; top + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let mut best = 0;
    for l in 0..counts.len() {
        if counts[l] > counts[best] {
            best = l;
        }
    }
    best
}

/// Line-by-line double-masking inference.
pub fn naive_double_mask(f: &Tensor3, clf: &dyn MaskedClassifier, masks: &[Mask], fill: f32) -> usize {
    let mut first = Vec::new();
    for m in masks {
        first.push(clf.predict(&paint(f, m, fill), m));
    }
    let maj = vote(&first);
    if first.iter().all(|&l| l == maj) {
        return maj;
    }
    for i in 0..masks.len() {
        if first[i] == maj {
            continue;
        }
        let mut second = Vec::new();
        for m in masks {
            let mut both = masks[i].0.clone();
            for r in &m.0 {
                if !both.contains(r) {
                    both.push(*r);
                }
            }
            let both = Mask(both);
            second.push(clf.predict(&paint(f, &both, fill), &both));
        }
        if second.iter().all(|&l| l == first[i]) {
            return first[i];
        }
    }
    maj
}

/// Dense-bitmap coverage check: every placement of `k` distinct `patch`
/// rectangles on the grid must lie inside a single mask.
pub fn exhaustive_cover_check(set: &MaskSet, patch: (usize, usize), k: usize) -> bool {
    let (gh, gw) = set.grid;
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 || ph > gh || pw > gw {
        return ph > 0 && pw > 0;
    }
    let anchors: Vec<(usize, usize)> = (0..=gh - ph).flat_map(|a| (0..=gw - pw).map(move |b| (a, b))).collect();
    let words = set.masks.len().div_ceil(64);
    // bit m of covered[a] is set iff mask m contains the patch at anchor a
    let mut covered = vec![vec![0u64; words]; anchors.len()];
    for (m, mask) in set.masks.iter().enumerate() {
        let mut bits = vec![0u32; gh * gw];
        for r in &mask.0 {
            for i in r.top..(r.top + r.h).min(gh) {
                for j in r.left..(r.left + r.w).min(gw) {
                    bits[i * gw + j] = 1;
                }
            }
        }
        // summed-area table with a zero border
        let mut sat = vec![0u32; (gh + 1) * (gw + 1)];
        for i in 0..gh {
            for j in 0..gw {
                sat[(i + 1) * (gw + 1) + j + 1] =
                    bits[i * gw + j] + sat[i * (gw + 1) + j + 1] + sat[(i + 1) * (gw + 1) + j] - sat[i * (gw + 1) + j];
            }
        }
        for (ai, &(a, b)) in anchors.iter().enumerate() {
            let at = |i: usize, j: usize| sat[i * (gw + 1) + j];
            let sum = at(a + ph, b + pw) + at(a, b) - at(a, b + pw) - at(a + ph, b);
            if sum as usize == ph * pw {
                covered[ai][m / 64] |= 1 << (m % 64);
            }
        }
    }
    let k = k.max(1).min(anchors.len());
    let mut acc = vec![u64::MAX; words];
    all_tuples_covered(&covered, 0, k, &mut acc)
}

fn all_tuples_covered(covered: &[Vec<u64>], start: usize, left: usize, acc: &mut Vec<u64>) -> bool {
    if left == 0 {
        return acc.iter().any(|&w| w != 0);
    }
    for a in start..covered.len() {
        let saved = acc.clone();
        for (w, c) in acc.iter_mut().zip(&covered[a]) {
            *w &= c;
        }
        let ok = all_tuples_covered(covered, a + 1, left - 1, acc);
        *acc = saved;
        if !ok {
            return false;
        }
    }
    true
}

/// Mask builder defect: masks one cell short of `patch + stride - 1`.
#[doc(hidden)]
pub fn undersized_mask_set(grid: (usize, usize), patch: (usize, usize), stride: (usize, usize)) -> Result<MaskSet> {
    let m = (patch.0 + stride.0 - 2, patch.1 + stride.1 - 2);
    MaskSet::with_mask_size(grid, patch, m, stride)
}

/// Content written into an attacked region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillKind {
    Uniform,
    Extreme,
    Copied,
    ScaledCopy,
}

const FILLS: [FillKind; 4] = [FillKind::Uniform, FillKind::Extreme, FillKind::Copied, FillKind::ScaledCopy];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    /// Index into the admissible region tuples.
    pub region_index: usize,
    pub regions: Vec<Region>,
    pub trial: usize,
    pub fill: FillKind,
    /// Verdict under attack; `None` is an alert.
    pub label: Option<usize>,
    /// Largest absolute change written into the feature map.
    pub max_abs_diff: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub seed: u64,
    pub trials_per_region: usize,
    pub regions: usize,
    pub counterexample: Option<Counterexample>,
}

fn attacked(
    f: &Tensor3,
    regions: &[Region],
    fill: FillKind,
    donors: &[Tensor3],
    scale: f32,
    rng: &mut ChaCha8Rng,
) -> (Tensor3, f32) {
    let mut out = f.clone();
    let donor = (!donors.is_empty()).then(|| &donors[rng.gen_range(0..donors.len())]);
    let factor = rng.gen_range(2.0..10.0f32) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let mut diff = 0.0f32;
    for r in regions {
        for i in r.top..r.top + r.h {
            for j in r.left..r.left + r.w {
                for c in 0..f.c() {
                    let v = match (fill, donor) {
                        (FillKind::Extreme, _) => {
                            if rng.gen_bool(0.5) {
                                100.0 * scale
                            } else {
                                -100.0 * scale
                            }
                        }
                        (FillKind::Copied, Some(d)) => d.get(i, j, c),
                        (FillKind::ScaledCopy, Some(d)) => factor * d.get(i, j, c),
                        _ => rng.gen_range(-3.0 * scale..3.0 * scale),
                    };
                    diff = diff.max((v - f.get(i, j, c)).abs());
                    out.set(i, j, c, v);
                }
            }
        }
    }
    (out, diff)
}

/// Randomised attack on a feature map: every region tuple gets `trials`
/// fills and the first (lowest region, then trial) verdict change is kept.
/// Double-masking must keep `y`; Minority Reports may also alert.
#[allow(clippy::too_many_arguments)]
pub fn probe_features(
    f: &Tensor3,
    y: usize,
    clf: &dyn MaskedClassifier,
    secure: &SecureOpConfig,
    tuples: &[Vec<Region>],
    donors: &[Tensor3],
    trials: usize,
    seed: u64,
) -> ProbeResult {
    let scale = f.data().iter().fold(1e-3f32, |m, v| m.max(v.abs()));
    let found = tuples
        .par_iter()
        .enumerate()
        .map(|(ri, regions)| {
            (0..trials).find_map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((ri * trials + t) as u64);
                let fill = FILLS[t % FILLS.len()];
                let (adv, diff) = attacked(f, regions, fill, donors, scale, &mut rng);
                let verdict = secure.infer(&adv, clf);
                let broken = match (secure.kind, verdict.label) {
                    (SecureKind::MinorityReports, None) => false,
                    (_, label) => label != Some(y),
                };
                broken.then(|| Counterexample {
                    region_index: ri,
                    regions: regions.clone(),
                    trial: t,
                    fill,
                    label: verdict.label,
                    max_abs_diff: diff,
                })
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .next();
    ProbeResult {
        seed,
        trials_per_region: trials,
        regions: tuples.len(),
        counterexample: found,
    }
}

/// All tuples of `k` distinct regions, lexicographic.
pub fn region_tuples(regions: &[Region], k: usize) -> Vec<Vec<Region>> {
    fn rec(regions: &[Region], start: usize, k: usize, cur: &mut Vec<Region>, out: &mut Vec<Vec<Region>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..regions.len() {
            cur.push(regions[i]);
            rec(regions, i + 1, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(regions, 0, k.max(1).min(regions.len()), &mut Vec::new(), &mut out);
    out
}

/// Attack probe through a split classifier. Donor images supply copied
/// features. `region_limit` keeps an evenly spaced subset of region tuples.
#[allow(clippy::too_many_arguments)]
pub fn attack_probe(
    sc: &SplitClassifier,
    x: &Tensor3,
    y: usize,
    threat: &ImageThreat,
    donors: &[Tensor3],
    trials: usize,
    seed: u64,
    region_limit: Option<usize>,
) -> Result<ProbeResult> {
    let ft = sc.feature_threat(threat)?;
    let f = sc.features(x)?;
    let donor_feats = donors.iter().map(|d| sc.features(d)).collect::<Result<Vec<_>>>()?;
    let mut tuples = region_tuples(&ft.regions, ft.k);
    if let Some(limit) = region_limit.filter(|&l| l > 0 && l < tuples.len()) {
        let n = tuples.len();
        tuples = (0..limit).map(|i| tuples[i * n / limit].clone()).collect();
    }
    Ok(probe_features(&f, y, sc, &sc.secure, &tuples, &donor_feats, trials, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::build_mask_set;
    use crate::secure::{double_mask_certify_mutant, double_mask_infer, CertMutation};
    use crate::rf::FeatureThreat;
    use crate::tensor::{ConvSpec, LayerSpec, Padding};

    fn conv3() -> LayerSpec {
        LayerSpec::Conv(ConvSpec {
            kh: 3,
            kw: 3,
            sh: 1,
            sw: 1,
            pad: Padding::Valid,
            cin: 1,
            cout: 1,
            relu: false,
        })
    }

    #[test]
    fn pointwise_footprint_is_patch() {
        let l = LayerSpec::Conv(ConvSpec {
            kh: 1,
            kw: 1,
            sh: 1,
            sw: 1,
            pad: Padding::Valid,
            cin: 1,
            cout: 2,
            relu: false,
        });
        let spec_layers = [l];
        let stack = Stack::new(0, &spec_layers);
        let store = store_for(&spec_layers);
        let x = Tensor3::filled(8, 8, 1, 0.3);
        let fp = trace_corruption(&stack, &store, &x, Region::new(2, 3, 2, 4), 4, 0).unwrap();
        assert_eq!(fp, Some(Region::new(2, 3, 2, 4)));
    }

    fn store_for(layers: &[LayerSpec]) -> WeightStore {
        let spec = crate::models::ModelSpec {
            name: "t".into(),
            input: (0, 0, 0),
            n_classes: 0,
            stem: layers.to_vec(),
            blocks: vec![],
            head: vec![],
        };
        WeightStore::init(&spec, 3)
    }

    #[test]
    fn two_convs_spread_a_pixel_to_five_by_five() {
        let layers = [conv3(), conv3()];
        let stack = Stack::new(0, &layers);
        let store = store_for(&layers);
        let x = Tensor3::filled(11, 11, 1, 0.5);
        // output cell (i, j) sees input rows i..i+5, so pixel (5, 5) reaches cells 1..=5
        let fp = trace_corruption(&stack, &store, &x, Region::new(5, 5, 1, 1), 4, 1).unwrap();
        assert_eq!(fp, Some(Region::new(1, 1, 5, 5)));
    }

    fn scripted(first: [usize; 3], second: [usize; 3]) -> impl Fn(&Tensor3, &Mask) -> usize + Sync {
        move |_x: &Tensor3, m: &Mask| {
            let cells: Vec<usize> = m.0.iter().map(|r| r.left).collect();
            if cells.len() == 1 {
                first[cells[0]]
            } else {
                second[cells[1]]
            }
        }
    }

    #[test]
    fn naive_double_mask_scripted() {
        let set = build_mask_set((1, 3), (1, 1), (1, 1)).unwrap();
        let f = Tensor3::zeros(1, 3, 1);
        let clf = scripted([5, 5, 7], [7, 7, 7]);
        assert_eq!(naive_double_mask(&f, &clf, &set.masks, 0.0), 7);
        assert_eq!(double_mask_infer(&f, &clf, &set, 0.0).label, Some(7));
        let unanimous = scripted([4, 4, 4], [0, 0, 0]);
        assert_eq!(naive_double_mask(&f, &unanimous, &set.masks, 0.0), 4);
    }

    #[test]
    fn cover_check_edge_cases() {
        let full = MaskSet {
            grid: (5, 5),
            params: build_mask_set((5, 5), (5, 5), (1, 1)).unwrap().params,
            masks: vec![Mask::single(Region::new(0, 0, 5, 5))],
            covering_checked: true,
        };
        for p in 1..=5 {
            assert!(exhaustive_cover_check(&full, (p, p), 1));
        }
        let empty = MaskSet { masks: vec![], ..full };
        for p in 1..=5 {
            assert!(!exhaustive_cover_check(&empty, (p, p), 1));
        }
    }

    #[test]
    fn cover_check_agrees_and_catches_mutant() {
        for n in 3..=9 {
            for p in 1..=n {
                for s in 1..=(n + 1 - p) {
                    let set = build_mask_set((n, n), (p, p), (s, s)).unwrap();
                    assert!(exhaustive_cover_check(&set, (p, p), 1), "n={n} p={p} s={s}");
                    assert!(set.verify_covering((p, p)));
                }
                if p >= 2 {
                    let bad = undersized_mask_set((n, n), (p, p), (1, 1)).unwrap();
                    assert!(!exhaustive_cover_check(&bad, (p, p), 1));
                    assert!(!bad.verify_covering((p, p)));
                }
            }
        }
    }

    // A suffix that answers 1 when a pair of cells is masked or any visible
    // cell is extreme, and 0 otherwise.
    fn fragile(x: &Tensor3, m: &Mask) -> usize {
        let masked: usize = m.0.iter().map(|r| r.h * r.w).sum();
        let loud = (0..x.w()).any(|j| !m.contains_cell(0, j) && x.get(0, j, 0).abs() > 10.0);
        usize::from(masked >= 2 || loud)
    }

    #[test]
    fn probe_catches_skipped_pair_loop() {
        let set = build_mask_set((1, 4), (1, 1), (1, 1)).unwrap();
        let threat = FeatureThreat {
            pf_h: 1,
            pf_w: 1,
            regions: (0..4).map(|j| Region::new(0, j, 1, 1)).collect(),
            k: 1,
            grid: (1, 4),
        };
        let f = Tensor3::filled(1, 4, 1, 1.0);
        let honest = double_mask_certify_mutant(&f, 0, &fragile, &set, &threat, 0.0, None);
        assert!(!honest.certified);
        let broken = double_mask_certify_mutant(&f, 0, &fragile, &set, &threat, 0.0, Some(CertMutation::SkipPairLoop));
        assert!(broken.certified);
        let secure = SecureOpConfig {
            kind: SecureKind::DoubleMasking,
            mask_set: set,
            fill: 0.0,
        };
        let tuples = region_tuples(&threat.regions, 1);
        let res = probe_features(&f, 0, &fragile, &secure, &tuples, &[], 20, 9);
        let cx = res.counterexample.expect("probe breaks the falsely certified sample");
        assert_eq!(cx.label, Some(1));
        // reproducible from the recorded seed
        let again = probe_features(&f, 0, &fragile, &secure, &tuples, &[], 20, 9);
        assert_eq!(again.counterexample, Some(cx));
    }

    #[test]
    fn tuples_are_combinations() {
        let r: Vec<Region> = (0..4).map(|j| Region::new(0, j, 1, 1)).collect();
        assert_eq!(region_tuples(&r, 1).len(), 4);
        assert_eq!(region_tuples(&r, 2).len(), 6);
        assert_eq!(region_tuples(&r, 2)[0], vec![r[0], r[1]]);
    }
}
