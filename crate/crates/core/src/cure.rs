//! Split a backbone at block `k` into a small receptive-field prefix and a
//! large receptive-field suffix, and run a secure masking operation on the
//! prefix's feature map with the suffix as the masked classifier.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{build_mask_set, k_union_mask_set, Mask, MaskSet, DEFAULT_UNION_CAP};
use crate::models::{to_srf, ModelSpec, Stack, WeightStore};
use crate::rf::{compose_rf, map_threat, FeatureThreat, ImageThreat, RfGeom};
use crate::secure::{Case, MaskedClassifier, SecureKind, SecureOpConfig, SecureVerdict};
use crate::tensor::{LayerSpec, Tensor3};
use crate::util::argmax;

/// How a head-only suffix pools a masked feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Average over unmasked cells only.
    #[default]
    ExcludeMasked,
    /// Fill masked cells and average over all cells.
    FillAndAverage,
}

/// Defense parameters independent of the model weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub k: usize,
    /// Attention sub-group for the prefix; `None` keeps the prefix as built.
    pub group: Option<(usize, usize)>,
    pub kind: SecureKind,
    /// Mask stride on the masked grid. Defaults to 1 on feature maps and to
    /// the patch size on images (`k = 0`).
    pub stride: Option<(usize, usize)>,
    /// Value written into masked cells. Defaults to [`IMAGE_FILL`] on images
    /// and to 0 on feature maps.
    pub fill: Option<f32>,
    pub pool: PoolMode,
    pub union_cap: usize,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            k: 0,
            group: None,
            kind: SecureKind::DoubleMasking,
            stride: None,
            fill: None,
            pool: PoolMode::ExcludeMasked,
            union_cap: DEFAULT_UNION_CAP,
        }
    }
}

/// Mid-gray fill for masked pixels of images in `[0, 1]`.
pub const IMAGE_FILL: f32 = 0.5;

/// A model split for certified inference.
#[derive(Debug, Clone)]
pub struct SplitClassifier {
    /// Base model with the prefix converted; `srf` then `lrf` runs exactly this.
    pub spec: ModelSpec,
    pub store: WeightStore,
    pub srf: Stack,
    pub lrf: Stack,
    pub k: usize,
    pub depth: usize,
    pub srf_geom: RfGeom,
    /// Shape of the prefix output (the masked grid).
    pub feat_dims: (usize, usize, usize),
    pub secure: SecureOpConfig,
    pub config: DefenseConfig,
    /// The threat the mask set was sized for.
    pub threat: ImageThreat,
}

/// Per-sample certification result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertRecord {
    pub id: usize,
    pub truth: usize,
    /// `None` when the secure operation alerts.
    pub predicted: Option<usize>,
    pub case: Case,
    pub certified: bool,
    pub infer_calls: usize,
    pub cert_calls: usize,
}

/// Builds the split classifier.
pub fn construct(spec: &ModelSpec, store: &WeightStore, cfg: &DefenseConfig, threat: &ImageThreat) -> Result<SplitClassifier> {
    spec.validate()?;
    store.check_against(spec)?;
    let cut = spec.split_point(cfg.k)?;
    let layers = spec.layers();
    let prefix = match cfg.group {
        Some(g) => to_srf(&layers[..cut], g)?,
        None => layers[..cut].to_vec(),
    };
    let mut converted = spec.clone();
    convert_in_place(&mut converted, &prefix);
    converted.validate()?;

    let srf = Stack::new(0, &prefix);
    let lrf = Stack::new(cut, &layers[cut..]);
    let srf_geom = compose_rf(&prefix);
    let feat_dims = srf.output_dims(spec.input)?;
    let grid = (feat_dims.0, feat_dims.1);
    let image = (spec.input.0, spec.input.1);

    let ft = map_threat(threat, &srf_geom, image, grid)?;
    let stride = cfg.stride.unwrap_or(if cfg.k == 0 { (threat.p_h, threat.p_w) } else { (1, 1) });
    let base = build_mask_set(grid, (ft.pf_h, ft.pf_w), stride).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{msg} (split k={}, patch {}x{})", cfg.k, threat.p_h, threat.p_w)),
        other => other,
    })?;
    let mask_set = k_union_mask_set(&base, threat.k, cfg.union_cap)?;
    if !mask_set.covers_regions(&ft.regions, threat.k) {
        return Err(Error::config(format!(
            "mask set does not cover the {}x{} feature footprint of the patch",
            ft.pf_h, ft.pf_w
        )));
    }
    Ok(SplitClassifier {
        spec: converted,
        store: store.clone(),
        srf,
        lrf,
        k: cfg.k,
        depth: spec.depth(),
        srf_geom,
        feat_dims,
        secure: SecureOpConfig {
            kind: cfg.kind,
            mask_set,
            fill: cfg.fill.unwrap_or(if cfg.k == 0 { IMAGE_FILL } else { 0.0 }),
        },
        config: cfg.clone(),
        threat: threat.clone(),
    })
}

fn convert_in_place(spec: &mut ModelSpec, prefix: &[LayerSpec]) {
    let mut it = prefix.iter();
    for slot in spec.stem.iter_mut().chain(spec.blocks.iter_mut().flatten()) {
        match it.next() {
            Some(l) => *slot = *l,
            None => break,
        }
    }
}

impl SplitClassifier {
    pub fn mask_set(&self) -> &MaskSet {
        &self.secure.mask_set
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        let want = self.spec.input;
        let got = x.dims();
        for (axis, e, g) in [("height", want.0, got.0), ("width", want.1, got.1), ("channels", want.2, got.2)] {
            if e != g {
                return Err(Error::Shape { axis, expected: e, got: g });
            }
        }
        Ok(())
    }

    /// Prefix features of `x`.
    pub fn features(&self, x: &Tensor3) -> Result<Tensor3> {
        self.check_input(x)?;
        self.srf.forward(x, &self.store, None)
    }

    fn excludes(&self) -> bool {
        self.config.pool == PoolMode::ExcludeMasked && self.lrf.is_head_only()
    }

    /// Suffix scores on an already-filled feature map.
    pub fn lrf_scores(&self, f: &Tensor3, mask: &Mask) -> Result<Vec<f32>> {
        let skip = if self.excludes() && !mask.regions().is_empty() {
            Some(mask.bitmap((f.h(), f.w())))
        } else {
            None
        };
        Ok(self.lrf.forward(f, &self.store, skip.as_deref())?.into_data())
    }

    /// Scores of the converted model without any masking.
    pub fn undefended_scores(&self, x: &Tensor3) -> Result<Vec<f32>> {
        let f = self.features(x)?;
        self.lrf_scores(&f, &Mask::empty())
    }

    pub fn feature_threat(&self, threat: &ImageThreat) -> Result<FeatureThreat> {
        if threat.p_h > self.threat.p_h || threat.p_w > self.threat.p_w || threat.k > self.threat.k {
            return Err(Error::config(format!(
                "threat of {} {}x{} patch(es) exceeds the {} {}x{} the defense was built for; reconstruct it",
                threat.k, threat.p_h, threat.p_w, self.threat.k, self.threat.p_h, self.threat.p_w
            )));
        }
        map_threat(
            threat,
            &self.srf_geom,
            (self.spec.input.0, self.spec.input.1),
            (self.feat_dims.0, self.feat_dims.1),
        )
    }

    /// Multiply-accumulates of one suffix call.
    pub fn lrf_macs(&self) -> u64 {
        self.lrf.macs(self.feat_dims).expect("validated at construction")
    }

    /// Worst-case suffix calls of one certification.
    pub fn cert_calls_bound(&self) -> u64 {
        let n = self.mask_set().len() as u64;
        match self.secure.kind {
            SecureKind::DoubleMasking => n * (n + 1) / 2,
            SecureKind::MinorityReports => n,
        }
    }

    /// Analytic cost proxy: suffix MACs times worst-case certification calls.
    pub fn flop_proxy(&self) -> u64 {
        self.lrf_macs() * self.cert_calls_bound()
    }
}

impl MaskedClassifier for SplitClassifier {
    fn predict(&self, input: &Tensor3, mask: &Mask) -> usize {
        argmax(&self.lrf_scores(input, mask).expect("feature map matches the suffix"))
    }
}

/// Secure inference; the prefix runs exactly once.
pub fn pcure_infer(x: &Tensor3, sc: &SplitClassifier) -> Result<SecureVerdict> {
    let f = sc.features(x)?;
    Ok(sc.secure.infer(&f, sc))
}

/// Inference plus certification against `threat` for ground truth `y`.
pub fn pcure_certify(id: usize, x: &Tensor3, y: usize, sc: &SplitClassifier, threat: &ImageThreat) -> Result<CertRecord> {
    let ft = sc.feature_threat(threat)?;
    let f = sc.features(x)?;
    let verdict = sc.secure.infer(&f, sc);
    let cert = sc.secure.certify(&f, y, sc, &ft);
    Ok(CertRecord {
        id,
        truth: y,
        predicted: verdict.label,
        case: verdict.case,
        certified: cert.certified,
        infer_calls: verdict.calls,
        cert_calls: cert.calls,
    })
}

pub const MANIFEST_VERSION: u32 = 1;

/// Model architecture plus defense settings; weights live in a PCW1 file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelSpec,
    pub defense: DefenseConfig,
    pub threat: ImageThreat,
}

impl Manifest {
    pub fn new(seed: u64, model: ModelSpec, defense: DefenseConfig, threat: ImageThreat) -> Self {
        Manifest {
            schema_version: MANIFEST_VERSION,
            seed,
            model,
            defense,
            threat,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "manifest",
                found,
                supported: MANIFEST_VERSION,
            });
        }
        Ok(serde_json::from_value(raw)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_bagnet_toy, build_vit_srf, forward, VitConfig};
    use crate::rf::corrupted_extent;

    fn vit(depth: usize) -> (ModelSpec, WeightStore) {
        build_vit_srf(
            &VitConfig {
                depth,
                d: 8,
                hidden: 8,
                n_classes: 4,
                ..VitConfig::default()
            },
            5,
        )
        .unwrap()
    }

    fn cfg(k: usize) -> DefenseConfig {
        DefenseConfig {
            k,
            group: Some((6, 1)),
            ..DefenseConfig::default()
        }
    }

    fn image(seed: u32) -> Tensor3 {
        Tensor3::from_fn(48, 48, 3, |i, j, c| ((i * 7 + j * 3 + c + seed as usize) % 11) as f32 / 11.0)
    }

    #[test]
    fn k_zero_masks_pixels() {
        let (spec, store) = vit(2);
        let sc = construct(&spec, &store, &cfg(0), &ImageThreat::square(8)).unwrap();
        assert!(sc.srf.is_empty());
        assert_eq!(sc.mask_set().grid, (48, 48));
        assert_eq!(sc.mask_set().params.mask_size, (15, 15));
        assert_eq!(sc.mask_set().len(), 36);
        assert_eq!(sc.spec, spec);
    }

    #[test]
    fn k_full_leaves_head() {
        let (spec, store) = vit(2);
        let sc = construct(&spec, &store, &cfg(2), &ImageThreat::square(8)).unwrap();
        assert!(sc.lrf.is_head_only());
        assert_eq!(sc.mask_set().grid, (6, 6));
        // full-height columns, two columns wide
        assert_eq!(sc.mask_set().params.mask_size, (6, 2));
        assert_eq!(sc.mask_set().len(), 5);
        assert_eq!(sc.cert_calls_bound(), 15);
    }

    #[test]
    fn partial_split_structure() {
        let (spec, store) = vit(4);
        let sc = construct(
            &spec,
            &store,
            &DefenseConfig {
                group: Some((2, 2)),
                ..cfg(2)
            },
            &ImageThreat::square(8),
        )
        .unwrap();
        let local = |s: &Stack| {
            s.specs()
                .iter()
                .filter(|l| matches!(l, LayerSpec::LocalAttention(a) if (a.gh, a.gw) == (2, 2)))
                .count()
        };
        assert_eq!(local(&sc.srf), 2);
        let global = sc
            .lrf
            .specs()
            .iter()
            .filter(|l| matches!(l, LayerSpec::LocalAttention(a) if (a.gh, a.gw) == (6, 6)))
            .count();
        assert_eq!(global, 2);
        // a group sees 16 px; an 8 px patch can straddle two groups of 2 tokens
        let pf = sc.srf_geom.corrupted(8, 8);
        assert_eq!(corrupted_extent(8, 16, 16), 2);
        assert_eq!(pf, (4, 4));
    }

    #[test]
    fn split_matches_converted_model() {
        let (spec, store) = vit(4);
        let x = image(1);
        for k in 0..=4 {
            let sc = construct(&spec, &store, &cfg(k), &ImageThreat::square(8)).unwrap();
            let whole = forward(&sc.spec, &store, &x).unwrap();
            assert_eq!(sc.undefended_scores(&x).unwrap(), whole, "k={k}");
        }
    }

    #[test]
    fn invalid_split_and_oversize_patch() {
        let (spec, store) = vit(2);
        assert!(construct(&spec, &store, &cfg(3), &ImageThreat::square(8)).is_err());
        let wide = DefenseConfig {
            stride: Some((1, 6)),
            ..cfg(2)
        };
        let err = construct(&spec, &store, &wide, &ImageThreat::square(8)).unwrap_err();
        assert!(err.to_string().contains("smaller patch"), "{err}");
    }

    #[test]
    fn larger_threat_requires_rebuild() {
        let (spec, store) = vit(2);
        let sc = construct(&spec, &store, &cfg(2), &ImageThreat::square(8)).unwrap();
        let x = image(0);
        assert!(pcure_certify(0, &x, 0, &sc, &ImageThreat::square(16)).is_err());
        assert!(pcure_certify(0, &x, 0, &sc, &ImageThreat::square(8).with_patches(2)).is_err());
    }

    #[test]
    fn certified_implies_correct_prediction() {
        let (spec, store) = vit(2);
        let sc = construct(&spec, &store, &cfg(2), &ImageThreat::square(8)).unwrap();
        for s in 0..6 {
            let x = image(s);
            for y in 0..4 {
                let rec = pcure_certify(s as usize, &x, y, &sc, &sc.threat).unwrap();
                if rec.certified {
                    assert_eq!(rec.predicted, Some(y));
                }
            }
        }
    }

    #[test]
    fn bagnet_native_split() {
        let (spec, store) = build_bagnet_toy((48, 48, 3), 9, 4, 4, 2).unwrap();
        let sc = construct(
            &spec,
            &store,
            &DefenseConfig {
                k: 4,
                ..DefenseConfig::default()
            },
            &ImageThreat::square(8),
        )
        .unwrap();
        assert_eq!(sc.feat_dims.0, 10);
        // ceil((8 + 9 - 1) / 4) = 4
        assert_eq!(sc.mask_set().params.patch, (4, 4));
        assert!(pcure_infer(&image(3), &sc).is_ok());
    }

    #[test]
    fn flop_proxy_decreases_with_k() {
        let (spec, store) = vit(4);
        let costs: Vec<u64> = [0, 2, 4]
            .iter()
            .map(|&k| construct(&spec, &store, &cfg(k), &ImageThreat::square(8)).unwrap().flop_proxy())
            .collect();
        assert!(costs[0] > costs[1] && costs[1] > costs[2], "{costs:?}");
    }

    #[test]
    fn manifest_round_trip_and_version() {
        let (spec, _) = vit(2);
        let m = Manifest::new(3, spec, cfg(1), ImageThreat::square(8));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), m);
        let text = std::fs::read_to_string(&p).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(Manifest::load(&p), Err(Error::UnsupportedVersion { found: 9, .. })));
    }
}
