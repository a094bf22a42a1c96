//! Shipped model configurations keep the receptive fields they advertise,
//! checked against traced corruption rather than the RF formulas alone.

use patchcure::masks::Region;
use patchcure::models::{build_bagnet_toy, build_vit_srf, to_srf, Stack, VitConfig, BAGNET_RF};
use patchcure::oracles::trace_corruption;
use patchcure::rf::compose_rf;
use patchcure::tensor::Tensor3;

fn probe_image(h: usize, w: usize) -> Tensor3 {
    Tensor3::from_fn(h, w, 3, |i, j, c| ((i * 7 + j * 3 + c) % 11) as f32 / 11.0)
}

#[test]
fn bagnet_rf_matches_trace() {
    for &r in &BAGNET_RF {
        let (spec, store) = build_bagnet_toy((48, 48, 3), r, 4, 4, 3).unwrap();
        let layers = spec.layers();
        let prefix = &layers[..spec.split_point(spec.depth()).unwrap()];
        let geom = compose_rf(prefix);
        assert_eq!((geom.h.r, geom.w.r), (r, r), "target {r}");
        // a single pixel reaches at most ceil(r / s) features per axis
        let stack = Stack::new(0, prefix);
        let fp = trace_corruption(&stack, &store, &probe_image(48, 48), Region::new(20, 20, 1, 1), 8, 1)
            .unwrap()
            .expect("pixel influences no feature");
        assert!(fp.h <= r.div_ceil(geom.h.s) && fp.w <= r.div_ceil(geom.w.s), "r={r}: {fp}");
    }
}

#[test]
fn vit_group_bounds_token_spread() {
    let (spec, store) = build_vit_srf(&VitConfig::default(), 0).unwrap();
    let layers = spec.layers();
    for (group, k) in [((6, 1), 4), ((2, 2), 2), ((1, 1), 3)] {
        let prefix = to_srf(&layers[..spec.split_point(k).unwrap()], group).unwrap();
        let stack = Stack::new(0, &prefix);
        let geom = compose_rf(&prefix);
        // one token's pixels stay inside one attention group
        let fp = trace_corruption(&stack, &store, &probe_image(48, 48), Region::new(17, 25, 2, 2), 8, 2)
            .unwrap()
            .expect("token influences no feature");
        assert!(fp.h <= group.0 && fp.w <= group.1, "group {group:?}: {fp}");
        assert_eq!(geom.corrupted(1, 1), group, "group {group:?}");
    }
}
