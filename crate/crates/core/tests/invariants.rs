use std::collections::BTreeMap;

use layout_attn::blend::{aggregate_masks, blend_step, BlendMode};
use layout_attn::clustering::{adjusted_rand_index, kmeans, match_clusters, ClusterLayout};
use layout_attn::layout::{
    build_cross_condition, region_labels, resample_mask, resolve_overlaps, LayoutSet, Mask, RegionLevel,
    RegionSpec, BACKGROUND,
};
use layout_attn::metrics::attention_mass;
use layout_attn::pipeline::{EditConfig, MaskSource, RegionEdit};
use ndarray::{Array2, Array4};
use proptest::prelude::*;

fn mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

/// Two frames, up to three overlapping instance regions with random priorities.
fn layout_strategy() -> impl Strategy<Value = LayoutSet> {
    (1usize..7, 1usize..7, 1usize..4).prop_flat_map(|(h, w, n)| {
        (
            Just((h, w)),
            prop::collection::vec(-3i32..3, n),
            prop::collection::vec(mask(h, w), 2 * n),
        )
            .prop_map(|((h, w), prios, masks)| {
                let mut l = LayoutSet::new(2, (h, w)).unwrap();
                for (i, p) in prios.iter().enumerate() {
                    let id = i as u32 + 1;
                    l.add_region(RegionSpec::new(id, "blue car", RegionLevel::Instance, *p)).unwrap();
                    l.set_mask(0, id, masks[2 * i].clone()).unwrap();
                    l.set_mask(1, id, masks[2 * i + 1].clone()).unwrap();
                }
                l
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn resolved_areas_tile_the_frame(l in layout_strategy()) {
        let r = resolve_overlaps(&l);
        let (h, w) = l.resolution();
        let labels = region_labels(&r);
        for f in 0..l.frames() {
            let regions: usize = r.regions().iter().map(|s| r.mask(f, s.id).iter().filter(|v| **v).count()).sum();
            let bg = labels.frame(f).iter().filter(|v| **v == BACKGROUND).count();
            prop_assert_eq!(regions + bg, h * w);
        }
        prop_assert_eq!(region_labels(&l), labels);
    }

    #[test]
    fn winner_has_top_priority(l in layout_strategy()) {
        let labels = region_labels(&l);
        let (_, w) = l.resolution();
        for f in 0..l.frames() {
            for (t, &lab) in labels.frame(f).iter().enumerate() {
                let covering: Vec<&RegionSpec> = l.regions().iter().filter(|s| l.mask(f, s.id)[[t / w, t % w]]).collect();
                match covering.iter().map(|s| (s.priority, s.id)).max() {
                    None => prop_assert_eq!(lab, BACKGROUND),
                    Some((_, id)) => prop_assert_eq!(lab, id),
                }
            }
        }
    }

    #[test]
    fn self_condition_is_an_equivalence(l in layout_strategy()) {
        let labels = region_labels(&l);
        let n = labels.tokens_per_frame();
        let all: Vec<(usize, usize)> = (0..labels.frames()).flat_map(|f| (0..n).map(move |x| (f, x))).collect();
        for &(fa, a) in &all {
            prop_assert!(labels.same_region(fa, a, fa, a));
            for &(fb, b) in &all {
                let ab = labels.same_region(fa, a, fb, b);
                prop_assert_eq!(ab, labels.same_region(fb, b, fa, a));
                if !ab {
                    continue;
                }
                for &(fc, c) in &all {
                    if labels.same_region(fb, b, fc, c) {
                        prop_assert!(labels.same_region(fa, a, fc, c));
                    }
                }
            }
        }
    }

    #[test]
    fn cross_condition_matches_brute_force(l in layout_strategy(), extra in 0usize..3) {
        let ids: Vec<u32> = l.regions().iter().map(|s| s.id).collect();
        let spans: BTreeMap<u32, Vec<std::ops::Range<usize>>> =
            ids.iter().enumerate().map(|(i, id)| (*id, vec![1 + 2 * i..3 + 2 * i])).collect();
        let seq = 1 + 2 * ids.len() + extra;
        let map = build_cross_condition(&l, &spans, seq).unwrap();
        let labels = region_labels(&l);
        for f in 0..l.frames() {
            for x in 0..labels.tokens_per_frame() {
                for y in 0..seq {
                    let owner = spans.iter().find(|(_, r)| r.iter().any(|r| r.contains(&y))).map(|(k, _)| *k);
                    let expect = owner.map(|k| labels.label(f, x) == k);
                    prop_assert_eq!(map.entry(f, x, y), expect);
                }
            }
        }
    }

    #[test]
    fn resample_same_resolution_is_identity(m in (1usize..9, 1usize..9).prop_flat_map(|(h, w)| mask(h, w))) {
        let once = resample_mask(&m, m.dim()).unwrap();
        prop_assert_eq!(&once, &m);
        prop_assert_eq!(resample_mask(&once, m.dim()).unwrap(), once);
    }

    #[test]
    fn blend_is_idempotent(
        (masks, a, b) in (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(n, h, w)| (
            prop::collection::vec(mask(h, w), n),
            prop::collection::vec(-1.0f64..1.0, n * h * w * 3).prop_map(move |v| Array4::from_shape_vec((n, h, w, 3), v).unwrap()),
            prop::collection::vec(-1.0f64..1.0, n * h * w * 3).prop_map(move |v| Array4::from_shape_vec((n, h, w, 3), v).unwrap()),
        )),
        aggregated in any::<bool>(),
    ) {
        let mode = if aggregated { BlendMode::Aggregated } else { BlendMode::PerFrame };
        let bm = aggregate_masks(&masks, mode).unwrap();
        let once = blend_step(&a, &b, &bm).unwrap();
        let twice = blend_step(&once, &b, &bm).unwrap();
        prop_assert_eq!(&once, &twice);
        for ((f, y, x, c), v) in once.indexed_iter() {
            let src = if bm.frames[f][[y, x]] { a[[f, y, x, c]] } else { b[[f, y, x, c]] };
            prop_assert_eq!(v.to_bits(), src.to_bits());
        }
    }

    #[test]
    fn attention_mass_is_permutation_invariant(
        (w, pos, perm) in (1usize..5, 1usize..8).prop_flat_map(|(r, n)| (
            prop::collection::vec(0.0f64..1.0, r * n).prop_map(move |v| Array2::from_shape_vec((r, n), v).unwrap()),
            prop::collection::vec(any::<bool>(), n),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        )),
    ) {
        let base = attention_mass(w.view(), |_, y| pos[y]);
        let pw = Array2::from_shape_fn(w.dim(), |(x, y)| w[[x, perm[y]]]);
        let permuted = attention_mass(pw.view(), |_, y| pos[perm[y]]);
        prop_assert!((base - permuted).abs() <= 1e-12);
    }

    #[test]
    fn ari_is_label_permutation_invariant(
        (a, b, perm) in (2usize..30).prop_flat_map(|n| (
            prop::collection::vec(0usize..4, n),
            prop::collection::vec(0usize..4, n),
            Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        )),
    ) {
        let relabelled: Vec<usize> = b.iter().map(|l| perm[*l]).collect();
        prop_assert!((adjusted_rand_index(&a, &b) - adjusted_rand_index(&a, &relabelled)).abs() <= 1e-12);
        let self_ari = adjusted_rand_index(&b, &relabelled);
        prop_assert!((self_ari - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn kmeans_inertia_never_increases(
        pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4..40),
        k in 1usize..4,
        seed in 0u64..1000,
    ) {
        let x = Array2::from_shape_fn((pts.len(), 2), |(i, j)| if j == 0 { pts[i].0 } else { pts[i].1 });
        let a = kmeans(x.view(), k, seed, 100, 0.0).unwrap();
        for pair in a.inertia.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-9 * (1.0 + pair[0]));
        }
        prop_assert_eq!(a, kmeans(x.view(), k, seed, 100, 0.0).unwrap());
    }

    #[test]
    fn matching_only_relabels(
        (labels, cents) in (2usize..4, 1usize..4).prop_flat_map(|(frames, k)| (
            prop::collection::vec(prop::collection::vec(0..k, 12), frames),
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, k * 3), frames),
        )),
    ) {
        let k = cents[0].len() / 3;
        let layout = ClusterLayout {
            k,
            labels: labels.clone(),
            centroids: cents.iter().map(|c| Array2::from_shape_vec((k, 3), c.clone()).unwrap()).collect(),
        };
        let matched = match_clusters(&layout);
        prop_assert_eq!(&matched.labels[0], &labels[0]);
        for (before, after) in labels.iter().zip(&matched.labels) {
            for i in 0..before.len() {
                for j in 0..before.len() {
                    prop_assert_eq!(before[i] == before[j], after[i] == after[j]);
                }
            }
        }
    }

    #[test]
    fn config_round_trips(
        modulate in 0usize..50,
        seed in any::<u64>(),
        coef in 0.01f64..=1.0,
        exp in 0.0f64..8.0,
        replay in any::<bool>(),
        targets in prop::collection::vec("[a-z]{1,6} [a-z]{1,6}", 1..4),
    ) {
        let regions = targets
            .iter()
            .enumerate()
            .map(|(i, t)| RegionEdit {
                id: i as u32 + 1,
                level: RegionLevel::Instance,
                priority: i as i32,
                source_prompt: "red square".into(),
                target_prompt: t.clone(),
                mask: MaskSource::Files,
            })
            .collect();
        let mut c = EditConfig::new("a video", regions);
        c.modulate_steps = modulate;
        c.seed = seed;
        c.xi_self.coefficient = coef;
        c.xi_self.exponent = exp;
        c.replay_mode = replay;
        let parsed = EditConfig::from_json(&c.to_json()).unwrap();
        prop_assert_eq!(&parsed, &c);
        prop_assert_eq!(EditConfig::from_json(&parsed.to_json()).unwrap(), parsed);
    }
}
