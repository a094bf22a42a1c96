//! Masking-based secure operations: double-masking recovery and the
//! Minority Reports detection variant, both usable on images or on
//! intermediate feature maps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{Mask, MaskSet};
use crate::rf::FeatureThreat;
use crate::tensor::Tensor3;

/// A model evaluated on masked inputs.
///
/// `input` already has the masked cells filled; `mask` is passed along for
/// models whose pooling skips masked cells.
pub trait MaskedClassifier: Sync {
    fn predict(&self, input: &Tensor3, mask: &Mask) -> usize;
}

impl<F> MaskedClassifier for F
where
    F: Fn(&Tensor3, &Mask) -> usize + Sync,
{
    fn predict(&self, input: &Tensor3, mask: &Mask) -> usize {
        self(input, mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecureKind {
    DoubleMasking,
    MinorityReports,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecureOpConfig {
    pub kind: SecureKind,
    pub mask_set: MaskSet,
    pub fill: f32,
}

impl SecureOpConfig {
    pub fn infer(&self, f: &Tensor3, clf: &dyn MaskedClassifier) -> SecureVerdict {
        match self.kind {
            SecureKind::DoubleMasking => double_mask_infer(f, clf, &self.mask_set, self.fill),
            SecureKind::MinorityReports => mr_infer(f, clf, &self.mask_set, self.fill),
        }
    }

    pub fn certify(&self, f: &Tensor3, y: usize, clf: &dyn MaskedClassifier, threat: &FeatureThreat) -> CertOutcome {
        match self.kind {
            SecureKind::DoubleMasking => double_mask_certify(f, y, clf, &self.mask_set, threat, self.fill),
            SecureKind::MinorityReports => mr_certify(f, y, clf, &self.mask_set, threat, self.fill),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedOutcome {
    pub mask_id: usize,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    Agreed,
    Disagreer,
    Majority,
    Alert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecureVerdict {
    /// `None` only for [`Case::Alert`].
    pub label: Option<usize>,
    pub case: Case,
    pub calls: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertOutcome {
    pub certified: bool,
    /// False when the mask set does not cover the feature threat.
    pub covering: bool,
    pub calls: usize,
}

/// Copy of `f` with every cell inside `mask` set to `fill` on all channels.
pub fn apply_mask(f: &Tensor3, mask: &Mask, fill: f32) -> Result<Tensor3> {
    let grid = (f.h(), f.w());
    if let Some(bad) = mask.regions().iter().find(|r| !r.fits(grid)) {
        return Err(Error::OutOfGrid {
            region: bad.to_string(),
            grid_h: grid.0,
            grid_w: grid.1,
        });
    }
    let mut out = f.clone();
    for r in mask.regions() {
        for (i, j) in r.cells() {
            out.cell_mut(i, j).fill(fill);
        }
    }
    Ok(out)
}

fn masked_predict(f: &Tensor3, clf: &dyn MaskedClassifier, mask: &Mask, fill: f32) -> usize {
    let masked = apply_mask(f, mask, fill).expect("mask set grid matches the tensor");
    clf.predict(&masked, mask)
}

/// Most frequent label (lowest label wins ties) and the outcomes that disagree
/// with it, in mask order.
pub fn majority(outcomes: &[MaskedOutcome]) -> (usize, Vec<MaskedOutcome>) {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for o in outcomes {
        *counts.entry(o.label).or_default() += 1;
    }
    let mut best = (0usize, 0usize);
    for (&label, &n) in &counts {
        if n > best.1 {
            best = (label, n);
        }
    }
    let dis = outcomes.iter().filter(|o| o.label != best.0).copied().collect();
    (best.0, dis)
}

/// One round of masked predictions over `set`, each mask combined with `base`.
pub fn mask_pred(
    f: &Tensor3,
    clf: &dyn MaskedClassifier,
    set: &MaskSet,
    base: &Mask,
    fill: f32,
) -> (usize, Vec<MaskedOutcome>) {
    let outcomes: Vec<MaskedOutcome> = set
        .masks
        .iter()
        .enumerate()
        .map(|(mask_id, m)| MaskedOutcome {
            mask_id,
            label: masked_predict(f, clf, &base.union(m), fill),
        })
        .collect();
    majority(&outcomes)
}

/// Double-masking inference.
pub fn double_mask_infer(f: &Tensor3, clf: &dyn MaskedClassifier, set: &MaskSet, fill: f32) -> SecureVerdict {
    let n = set.len();
    let (maj, dis) = mask_pred(f, clf, set, &Mask::empty(), fill);
    let mut calls = n;
    if dis.is_empty() {
        return SecureVerdict {
            label: Some(maj),
            case: Case::Agreed,
            calls,
        };
    }
    for d in &dis {
        let (_, second_dis) = mask_pred(f, clf, set, &set.masks[d.mask_id], fill);
        calls += n;
        if second_dis.is_empty() {
            return SecureVerdict {
                label: Some(d.label),
                case: Case::Disagreer,
                calls,
            };
        }
    }
    SecureVerdict {
        label: Some(maj),
        case: Case::Majority,
        calls,
    }
}

/// Deliberate certifier defects used to check that the oracles catch them.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertMutation {
    /// Only check one-mask predictions.
    SkipPairLoop,
    /// Trust the mask set without checking coverage.
    SkipCoverage,
}

/// Double-masking certification: the mask set must cover the threat and every
/// two-mask prediction must equal `y`.
pub fn double_mask_certify(
    f: &Tensor3,
    y: usize,
    clf: &dyn MaskedClassifier,
    set: &MaskSet,
    threat: &FeatureThreat,
    fill: f32,
) -> CertOutcome {
    double_mask_certify_mutant(f, y, clf, set, threat, fill, None)
}

#[doc(hidden)]
pub fn double_mask_certify_mutant(
    f: &Tensor3,
    y: usize,
    clf: &dyn MaskedClassifier,
    set: &MaskSet,
    threat: &FeatureThreat,
    fill: f32,
    mutation: Option<CertMutation>,
) -> CertOutcome {
    let covering = mutation == Some(CertMutation::SkipCoverage) || covers(set, threat);
    if !covering {
        return CertOutcome {
            certified: false,
            covering,
            calls: 0,
        };
    }
    let mut calls = 0;
    for i in 0..set.len() {
        let last = if mutation == Some(CertMutation::SkipPairLoop) {
            i + 1
        } else {
            set.len()
        };
        // unordered pairs; i == j is the one-mask prediction
        for j in i..last {
            let mask = if i == j {
                set.masks[i].clone()
            } else {
                set.masks[i].union(&set.masks[j])
            };
            calls += 1;
            if masked_predict(f, clf, &mask, fill) != y {
                return CertOutcome {
                    certified: false,
                    covering,
                    calls,
                };
            }
        }
    }
    CertOutcome {
        certified: true,
        covering,
        calls,
    }
}

fn covers(set: &MaskSet, threat: &FeatureThreat) -> bool {
    set.grid == threat.grid && set.covers_regions(&threat.regions, threat.k)
}

/// Minority Reports inference: the unanimous label, or an alert.
pub fn mr_infer(f: &Tensor3, clf: &dyn MaskedClassifier, set: &MaskSet, fill: f32) -> SecureVerdict {
    let (maj, dis) = mask_pred(f, clf, set, &Mask::empty(), fill);
    if dis.is_empty() {
        SecureVerdict {
            label: Some(maj),
            case: Case::Agreed,
            calls: set.len(),
        }
    } else {
        SecureVerdict {
            label: None,
            case: Case::Alert,
            calls: set.len(),
        }
    }
}

/// Certified detection: covering set and every one-mask prediction equals `y`.
pub fn mr_certify(
    f: &Tensor3,
    y: usize,
    clf: &dyn MaskedClassifier,
    set: &MaskSet,
    threat: &FeatureThreat,
    fill: f32,
) -> CertOutcome {
    if !covers(set, threat) {
        return CertOutcome {
            certified: false,
            covering: false,
            calls: 0,
        };
    }
    let mut calls = 0;
    for m in &set.masks {
        calls += 1;
        if masked_predict(f, clf, m, fill) != y {
            return CertOutcome {
                certified: false,
                covering: true,
                calls,
            };
        }
    }
    CertOutcome {
        certified: true,
        covering: true,
        calls,
    }
}
