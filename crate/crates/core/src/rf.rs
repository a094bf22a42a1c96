//! Receptive-field arithmetic and the image-to-feature threat mapping.
//!
//! Geometry is tracked per axis. A feature at index `i` sees the input window
//! `[(i - i % tile) * s + off, (i - i % tile) * s + off + r)`; `tile > 1` only
//! arises from sub-group attention, where every token of a group sees the
//! same pixel tile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::Region;
use crate::tensor::LayerSpec;
use crate::util::div_ceil;

/// Receptive field along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisRf {
    pub r: usize,
    pub s: usize,
    pub off: i64,
    pub tile: usize,
}

impl AxisRf {
    pub const IDENTITY: AxisRf = AxisRf {
        r: 1,
        s: 1,
        off: 0,
        tile: 1,
    };

    /// Half-open input window of feature `i`.
    pub fn window(&self, i: usize) -> (i64, i64) {
        let start = ((i - i % self.tile) * self.s) as i64 + self.off;
        (start, start + self.r as i64)
    }

    /// Distance in input pixels between consecutive distinct windows.
    pub fn window_stride(&self) -> usize {
        self.s * self.tile
    }

    /// Upper bound on corrupted features along this axis for a `p`-pixel patch.
    pub fn max_corrupted(&self, p: usize) -> usize {
        corrupted_extent(p, self.r, self.window_stride()) * self.tile
    }

    /// Same windows or wider, expressed with `tile == 1`.
    fn untiled(self) -> AxisRf {
        if self.tile == 1 {
            return self;
        }
        let extra = (self.tile - 1) * self.s;
        AxisRf {
            r: self.r + extra,
            s: self.s,
            off: self.off - extra as i64,
            tile: 1,
        }
    }

    /// Geometry of `layer` (given relative to its own input) seen through `self`.
    fn then(self, layer: AxisRf) -> AxisRf {
        if layer == AxisRf::IDENTITY {
            return self;
        }
        let is_group = layer.s == 1 && layer.off == 0 && layer.r == layer.tile && layer.tile > 1;
        if is_group && self.tile > 1 {
            if layer.tile.is_multiple_of(self.tile) {
                return AxisRf {
                    r: (layer.tile - self.tile) * self.s + self.r,
                    s: self.s,
                    off: self.off,
                    tile: layer.tile,
                };
            }
            if self.tile.is_multiple_of(layer.tile) {
                return self;
            }
        }
        let base = self.untiled();
        AxisRf {
            r: (layer.r - 1) * base.s + base.r,
            s: layer.s * base.s,
            off: layer.off * base.s as i64 + base.off,
            tile: layer.tile,
        }
    }
}

/// Receptive field of a feature grid relative to the input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfGeom {
    pub h: AxisRf,
    pub w: AxisRf,
}

impl RfGeom {
    pub const IDENTITY: RfGeom = RfGeom {
        h: AxisRf::IDENTITY,
        w: AxisRf::IDENTITY,
    };

    pub fn then(self, layer: RfGeom) -> RfGeom {
        RfGeom {
            h: self.h.then(layer.h),
            w: self.w.then(layer.w),
        }
    }

    /// `(pf_h, pf_w)` for a `p_h x p_w` patch.
    pub fn corrupted(&self, p_h: usize, p_w: usize) -> (usize, usize) {
        (self.h.max_corrupted(p_h), self.w.max_corrupted(p_w))
    }
}

/// Geometry of a single layer relative to its input grid.
pub fn layer_rf(layer: &LayerSpec) -> RfGeom {
    let sliding = |k: usize, s: usize, pad: usize| AxisRf {
        r: k,
        s,
        off: -(pad as i64),
        tile: 1,
    };
    match *layer {
        LayerSpec::Conv(c) => RfGeom {
            h: sliding(c.kh, c.sh, c.pad_h()),
            w: sliding(c.kw, c.sw, c.pad_w()),
        },
        LayerSpec::MaxPool(p) => RfGeom {
            h: sliding(p.k, p.s, 0),
            w: sliding(p.k, p.s, 0),
        },
        LayerSpec::PatchEmbed(p) => RfGeom {
            h: sliding(p.ph, p.ph, 0),
            w: sliding(p.pw, p.pw, 0),
        },
        LayerSpec::LocalAttention(a) => {
            let group = |g: usize| AxisRf {
                r: g,
                s: 1,
                off: 0,
                tile: g,
            };
            RfGeom {
                h: group(a.gh),
                w: group(a.gw),
            }
        }
        LayerSpec::LayerNorm { .. } | LayerSpec::Mlp { .. } | LayerSpec::PooledLinearHead { .. } => {
            RfGeom::IDENTITY
        }
    }
}

/// Composed geometry of a layer stack, in input pixels. An empty stack is the
/// identity.
pub fn compose_rf<'a>(stack: impl IntoIterator<Item = &'a LayerSpec>) -> RfGeom {
    stack
        .into_iter()
        .fold(RfGeom::IDENTITY, |acc, layer| acc.then(layer_rf(layer)))
}

/// Maximum number of corrupted features along one axis: `ceil((p + r - 1) / s)`.
pub fn corrupted_extent(p: usize, r: usize, s: usize) -> usize {
    div_ceil(p + r - 1, s)
}

/// Where patches may be placed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchors {
    /// Every `stride`-th top-left position per axis, plus the last valid one.
    Stride { sh: usize, sw: usize },
    Explicit(Vec<(usize, usize)>),
}

impl Default for Anchors {
    fn default() -> Self {
        Anchors::Stride { sh: 1, sw: 1 }
    }
}

/// Image-space patch threat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageThreat {
    pub p_h: usize,
    pub p_w: usize,
    #[serde(default)]
    pub anchors: Anchors,
    /// Number of simultaneous patches.
    #[serde(default = "one")]
    pub k: usize,
}

fn one() -> usize {
    1
}

impl ImageThreat {
    pub fn square(p: usize) -> Self {
        ImageThreat {
            p_h: p,
            p_w: p,
            anchors: Anchors::default(),
            k: 1,
        }
    }

    pub fn with_patches(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_anchor_stride(mut self, sh: usize, sw: usize) -> Self {
        self.anchors = Anchors::Stride { sh, sw };
        self
    }

    /// Top-left positions on an `h x w` image, row-major.
    pub fn anchor_positions(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        if self.p_h == 0 || self.p_w == 0 || self.k == 0 {
            return Err(Error::config("patch extent and patch count must be >= 1"));
        }
        if self.p_h > h || self.p_w > w {
            return Err(Error::config(format!(
                "{}x{} patch does not fit a {h}x{w} image",
                self.p_h, self.p_w
            )));
        }
        match &self.anchors {
            Anchors::Stride { sh, sw } => {
                if *sh == 0 || *sw == 0 {
                    return Err(Error::config("anchor stride must be >= 1"));
                }
                let rows = strided_positions(h - self.p_h, *sh);
                let cols = strided_positions(w - self.p_w, *sw);
                Ok(rows
                    .iter()
                    .flat_map(|&a| cols.iter().map(move |&b| (a, b)))
                    .collect())
            }
            Anchors::Explicit(list) => {
                for &(a, b) in list {
                    if a + self.p_h > h || b + self.p_w > w {
                        return Err(Error::config(format!("anchor ({a}, {b}) puts the patch outside the image")));
                    }
                }
                Ok(list.clone())
            }
        }
    }
}

fn strided_positions(last: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if v.last() != Some(&last) {
        v.push(last);
    }
    v
}

/// Feature-space threat produced by [`map_threat`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureThreat {
    pub pf_h: usize,
    pub pf_w: usize,
    /// Distinct corrupted-feature rectangles, in order of first appearance.
    pub regions: Vec<Region>,
    pub k: usize,
    pub grid: (usize, usize),
}

/// Feature index range `[lo, hi)` whose windows intersect pixels `[a, a + p)`.
fn touched(axis: &AxisRf, a: usize, p: usize, n: usize) -> (usize, usize) {
    let t = axis.window_stride() as i64;
    let r = axis.r as i64;
    let a = a as i64;
    // tile q touches iff q*t + off < a + p and q*t + off + r > a
    let q_lo = (a - axis.off - r).div_euclid(t) + 1;
    let q_hi = (a + p as i64 - axis.off - 1).div_euclid(t);
    let tile = axis.tile as i64;
    let lo = (q_lo * tile).clamp(0, n as i64) as usize;
    let hi = ((q_hi + 1) * tile).clamp(0, n as i64) as usize;
    (lo, hi.max(lo))
}

/// Map an image-space patch threat onto the feature grid.
pub fn map_threat(
    threat: &ImageThreat,
    geom: &RfGeom,
    image: (usize, usize),
    feat: (usize, usize),
) -> Result<FeatureThreat> {
    let anchors = threat.anchor_positions(image.0, image.1)?;
    let (pf_h, pf_w) = geom.corrupted(threat.p_h, threat.p_w);
    let mut regions = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (a, b) in anchors {
        let (r0, r1) = touched(&geom.h, a, threat.p_h, feat.0);
        let (c0, c1) = touched(&geom.w, b, threat.p_w, feat.1);
        if r1 == r0 || c1 == c0 {
            continue;
        }
        let region = Region::new(r0, c0, r1 - r0, c1 - c0);
        if seen.insert(region) {
            regions.push(region);
        }
    }
    Ok(FeatureThreat {
        pf_h: pf_h.min(feat.0),
        pf_w: pf_w.min(feat.1),
        regions,
        k: threat.k,
        grid: feat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{AttentionSpec, ConvSpec, Padding, PatchEmbedSpec};

    fn conv(k: usize, s: usize) -> LayerSpec {
        LayerSpec::Conv(ConvSpec {
            kh: k,
            kw: k,
            sh: s,
            sw: s,
            pad: Padding::Valid,
            cin: 1,
            cout: 1,
            relu: false,
        })
    }

    #[test]
    fn single_layers() {
        let g = layer_rf(&conv(3, 1));
        assert_eq!((g.h.r, g.h.s), (3, 1));
        let g = layer_rf(&LayerSpec::PatchEmbed(PatchEmbedSpec {
            ph: 16,
            pw: 16,
            cin: 3,
            d: 8,
        }));
        assert_eq!((g.h.r, g.h.s, g.w.r, g.w.s), (16, 16, 16, 16));
        assert_eq!(layer_rf(&LayerSpec::LayerNorm { d: 4 }), RfGeom::IDENTITY);
    }

    #[test]
    fn two_convs_make_five() {
        let g = compose_rf(&[conv(3, 1), conv(3, 1)]);
        assert_eq!((g.h.r, g.h.s, g.h.off), (5, 1, 0));
    }

    #[test]
    fn vit_column_pair_groups() {
        let stack = [
            LayerSpec::PatchEmbed(PatchEmbedSpec {
                ph: 16,
                pw: 16,
                cin: 3,
                d: 8,
            }),
            LayerSpec::LayerNorm { d: 8 },
            LayerSpec::LocalAttention(AttentionSpec {
                gh: 14,
                gw: 2,
                heads: 1,
                d: 8,
            }),
            LayerSpec::Mlp { d: 8, hidden: 8 },
            LayerSpec::LocalAttention(AttentionSpec {
                gh: 14,
                gw: 2,
                heads: 1,
                d: 8,
            }),
        ];
        let g = compose_rf(&stack);
        assert_eq!((g.h.r, g.w.r), (224, 32));
        assert_eq!((g.h.tile, g.w.tile), (14, 2));
        assert_eq!(g.w.window(3), (32, 64));
    }

    #[test]
    fn eq2_values() {
        assert_eq!(corrupted_extent(32, 17, 8), 6);
        assert_eq!(corrupted_extent(1, 1, 1), 1);
        assert_eq!(corrupted_extent(32, 32, 32), 2);
        // ViT2x2 tiles over 16-px tokens: two tiles, four tokens
        let axis = AxisRf {
            r: 32,
            s: 16,
            off: 0,
            tile: 2,
        };
        assert_eq!(axis.max_corrupted(32), 4);
    }

    #[test]
    fn one_dimensional_map() {
        // n=12 pixels, valid conv r=5 -> 8 features; patch [4, 7)
        let geom = RfGeom {
            h: AxisRf::IDENTITY,
            w: AxisRf {
                r: 5,
                s: 1,
                off: 0,
                tile: 1,
            },
        };
        let threat = ImageThreat {
            p_h: 1,
            p_w: 3,
            anchors: Anchors::Explicit(vec![(0, 4)]),
            k: 1,
        };
        let ft = map_threat(&threat, &geom, (1, 12), (1, 8)).unwrap();
        assert_eq!(ft.regions, vec![Region::new(0, 0, 1, 7)]);
        assert_eq!(ft.pf_w, 7);
    }

    #[test]
    fn whole_image_patch_covers_grid() {
        let geom = compose_rf(&[conv(3, 2), conv(3, 1)]);
        let ft = map_threat(&ImageThreat::square(20), &geom, (20, 20), (7, 7)).unwrap();
        assert_eq!(ft.regions, vec![Region::new(0, 0, 7, 7)]);
    }

    #[test]
    fn tile_aligned_patch_spans_two_groups() {
        let geom = RfGeom {
            h: AxisRf {
                r: 32,
                s: 16,
                off: 0,
                tile: 2,
            },
            w: AxisRf {
                r: 32,
                s: 16,
                off: 0,
                tile: 2,
            },
        };
        let threat = ImageThreat {
            p_h: 32,
            p_w: 32,
            anchors: Anchors::Explicit(vec![(32, 32), (40, 8)]),
            k: 1,
        };
        let ft = map_threat(&threat, &geom, (96, 96), (6, 6)).unwrap();
        assert_eq!(ft.regions, vec![Region::new(2, 2, 2, 2), Region::new(2, 0, 4, 4)]);
    }

    #[test]
    fn patch_too_large_is_rejected() {
        assert!(map_threat(&ImageThreat::square(9), &RfGeom::IDENTITY, (8, 8), (8, 8)).is_err());
    }

    #[test]
    fn anchor_stride_keeps_last_position() {
        let t = ImageThreat::square(3).with_anchor_stride(4, 4);
        let pos = t.anchor_positions(10, 10).unwrap();
        assert_eq!(pos.len(), 9);
        assert!(pos.contains(&(7, 7)));
    }
}
