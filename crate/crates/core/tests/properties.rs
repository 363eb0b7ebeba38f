mod common;

use std::collections::BTreeMap;

use lcs_core::conditioning::{make_conditioning, Atlas};
use lcs_core::eval::{dice, paired_t_test};
use lcs_core::model::memory::{estimate_activation_memory, ActivationMeter};
use lcs_core::model::ops::FeatureMap;
use lcs_core::model::{Head, ModelConfig, UNet, COND_CHANNELS};
use lcs_core::synth::{generate_case, make_splits, SplitRatios};
use lcs_core::train::soft_dice_loss;
use lcs_core::volume::io::{load_volume, save_volume};
use lcs_core::volume::{
    binarize, downsample_mean, BinaryMask, ClassInfo, ClassSet, Grid, ImageVolume, LabelMap,
};
use proptest::prelude::*;

fn vocab(n: u32) -> Vec<ClassInfo> {
    (1..=n)
        .map(|id| ClassInfo {
            id,
            name: format!("c{id}"),
        })
        .collect()
}

fn dims_strategy(max: usize) -> impl Strategy<Value = [usize; 3]> {
    [1..=max, 1..=max, 1..=max]
}

/// Flat label map over ids 1..=5 plus background.
fn label_map() -> impl Strategy<Value = LabelMap> {
    dims_strategy(4).prop_flat_map(|d| {
        proptest::collection::vec(0u32..=5, d[0] * d[1] * d[2]).prop_map(move |v| {
            LabelMap::new(Grid::new(d, v).unwrap(), vocab(5), BTreeMap::new()).unwrap()
        })
    })
}

fn subsets(n: u32) -> Vec<ClassSet> {
    (1u32..(1 << n))
        .map(|bits| {
            (0..n)
                .filter(|i| bits & (1 << i) != 0)
                .map(|i| i + 1)
                .collect()
        })
        .collect()
}

fn or(a: &BinaryMask, b: &BinaryMask) -> Vec<u8> {
    a.grid
        .data()
        .iter()
        .zip(b.grid.data())
        .map(|(x, y)| x | y)
        .collect()
}

fn mask_from(bits: &[bool]) -> BinaryMask {
    let g = Grid::new([1, 1, bits.len()], bits.iter().map(|&b| b as u8).collect()).unwrap();
    BinaryMask::new(g, ClassSet::new()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn binarize_of_a_union_is_the_or(labels in label_map()) {
        let all = subsets(5);
        for a in &all {
            let ma = binarize(&labels, a).unwrap();
            for b in &all {
                let mb = binarize(&labels, b).unwrap();
                let union: ClassSet = a.union(b).copied().collect();
                let mu = binarize(&labels, &union).unwrap();
                prop_assert_eq!(mu.grid.data(), &or(&ma, &mb)[..]);
            }
        }
    }

    #[test]
    fn coarse_mask_is_the_or_of_its_children(v in proptest::collection::vec(0u32..=5, 27)) {
        // 6 = {1, 2}, 7 = {3, 6}: a two-level hierarchy.
        let hierarchy = BTreeMap::from([(6, vec![1, 2]), (7, vec![3, 6])]);
        let labels = LabelMap::new(Grid::new([3, 3, 3], v).unwrap(), vocab(7), hierarchy).unwrap();
        let m = |ids: &[u32]| binarize(&labels, &ids.iter().copied().collect()).unwrap().grid.into_data();
        let mm = |ids: &[u32]| binarize(&labels, &ids.iter().copied().collect()).unwrap();
        prop_assert_eq!(m(&[6]), or(&mm(&[1]), &mm(&[2])));
        prop_assert_eq!(m(&[7]), or(&mm(&[3]), &mm(&[6])));
    }

    #[test]
    fn downsampling_preserves_the_mean(
        blocks in dims_strategy(3),
        factor in prop::sample::select(vec![1usize, 2, 4]),
        seed in any::<u64>(),
    ) {
        let dims = blocks.map(|b| b * factor);
        let n = dims.iter().product::<usize>();
        // Small integers keep every block mean exactly representable.
        let data: Vec<f32> = (0..n).map(|i| ((seed >> (i % 61)) ^ i as u64) as f32 % 17.0).collect();
        let grid = Grid::new(dims, data).unwrap();
        let small = downsample_mean(&grid, factor).unwrap();
        let mean = |g: &Grid<f32>| g.data().iter().map(|&v| v as f64).sum::<f64>() / g.len() as f64;
        prop_assert_eq!(mean(&small), mean(&grid));
    }

    #[test]
    fn raw_volume_round_trip_is_bit_exact(d in dims_strategy(5), bits in any::<u64>()) {
        let n = d.iter().product::<usize>();
        let data: Vec<f32> = (0..n as u64)
            .map(|i| f32::from_bits((bits.rotate_left(i as u32) ^ i.wrapping_mul(0x9e37_79b9)) as u32))
            .collect();
        let v = ImageVolume::new("case", Grid::new(d, data).unwrap(), [1.0, 0.5, 2.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("case.f32raw");
        save_volume(&path, &v).unwrap();
        let back = load_volume(&path).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.spacing, v.spacing);
        let a: Vec<u32> = v.grid.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.grid.data().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn splits_partition_the_cases(
        train in 1usize..6, val in 1usize..4, test in 1usize..4,
        repeats in 1usize..4, seed in any::<u64>(),
    ) {
        let ratios = SplitRatios { train, atlas: 1, val, test };
        let n = ratios.total();
        let repeats = repeats.min(n / test);
        let table = make_splits(n, ratios, repeats, seed).unwrap();
        prop_assert_eq!(&table, &make_splits(n, ratios, repeats, seed).unwrap());
        let mut seen_tests = Vec::new();
        for s in &table.splits {
            prop_assert_eq!((s.train.len(), s.atlas.len(), s.val.len(), s.test.len()), (train, 1, val, test));
            let mut all: Vec<usize> = [&s.train, &s.atlas, &s.val, &s.test].into_iter().flatten().copied().collect();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            seen_tests.extend(s.test.iter().copied());
        }
        let k = seen_tests.len();
        seen_tests.sort_unstable();
        seen_tests.dedup();
        prop_assert_eq!(seen_tests.len(), k);
    }

    #[test]
    fn soft_dice_loss_is_bounded_and_permutation_invariant(
        pairs in proptest::collection::vec((0f64..=1.0, any::<bool>()), 1..80),
        eps in 1e-8f64..1.0,
        seed in any::<u64>(),
    ) {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<f64> = pairs.iter().map(|p| p.1 as u8 as f64).collect();
        let l = soft_dice_loss(&pred, &gt, eps).unwrap();
        prop_assert!((0.0..1.0).contains(&l), "{}", l);
        let mut order: Vec<usize> = (0..pred.len()).collect();
        let mut s = seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pp: Vec<f64> = order.iter().map(|&i| pred[i]).collect();
        let gp: Vec<f64> = order.iter().map(|&i| gt[i]).collect();
        let lp = soft_dice_loss(&pp, &gp, eps).unwrap();
        prop_assert!((l - lp).abs() <= 1e-12, "{} vs {}", l, lp);
    }

    #[test]
    fn loss_depends_only_on_the_union_mask(
        v in proptest::collection::vec(0u32..=5, 64),
        noise in proptest::collection::vec(0u32..=5, 64),
        pred in proptest::collection::vec(0f32..=1.0, 64),
        set in prop::sample::select(subsets(5)),
    ) {
        let a = LabelMap::new(Grid::new([4, 4, 4], v.clone()).unwrap(), vocab(5), BTreeMap::new()).unwrap();
        // Relabel voxels outside the union with other non-conditioned classes.
        let others: Vec<u32> = (0..=5).filter(|c| !set.contains(c)).collect();
        let edited: Vec<u32> = v
            .iter()
            .zip(&noise)
            .map(|(&l, &r)| if set.contains(&l) { l } else { others[r as usize % others.len()] })
            .collect();
        let b = a.with_grid(Grid::new([4, 4, 4], edited).unwrap());
        let target = |m: &LabelMap| binarize(m, &set).unwrap().to_f32().into_data();
        let la = soft_dice_loss(&pred, &target(&a), 1e-5).unwrap();
        let lb = soft_dice_loss(&pred, &target(&b), 1e-5).unwrap();
        prop_assert_eq!(la.to_bits(), lb.to_bits());
    }

    #[test]
    fn dice_is_symmetric_and_matches_the_loss(
        bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..100),
    ) {
        let p: Vec<bool> = bits.iter().map(|b| b.0).collect();
        let g: Vec<bool> = bits.iter().map(|b| b.1).collect();
        let (mp, mg) = (mask_from(&p), mask_from(&g));
        let d = dice(&mp, &mg).unwrap();
        prop_assert_eq!(d, dice(&mg, &mp).unwrap());
        let f = |b: &[bool]| b.iter().map(|&x| x as u8 as f64).collect::<Vec<_>>();
        let loss = soft_dice_loss(&f(&p), &f(&g), 1e-12).unwrap();
        prop_assert!((d - (1.0 - loss)).abs() < 1e-9, "{} vs {}", d, 1.0 - loss);
    }

    #[test]
    fn t_test_is_antisymmetric(
        pairs in proptest::collection::vec((0f64..1.0, 0f64..1.0), 2..30),
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        prop_assert_eq!(ab.status, ba.status);
        prop_assert_eq!(ab.p_value, ba.p_value);
        prop_assert_eq!(ab.mean_diff, -ba.mean_diff);
        prop_assert_eq!(ab.t.map(|t| -t), ba.t);
        if let Some(p) = ab.p_value {
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}

fn model_config() -> impl Strategy<Value = (ModelConfig, u64)> {
    (
        2usize..=3,
        1usize..=2,
        [1usize..=2, 1usize..=2, 1usize..=2],
        1usize..=6,
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(levels, base, mult, classes, lcs, seed)| {
            let head = if lcs {
                Head::Lcs
            } else {
                Head::Baseline { classes }
            };
            let f = 1 << (levels - 1);
            let mut cfg = ModelConfig::new(head, mult.map(|m| m * f * 2))
                .with_base_channels(base)
                .with_seed(seed);
            cfg.num_levels = levels;
            (cfg, seed)
        })
}

fn ramp(channels: usize, dims: [usize; 3], seed: u64) -> FeatureMap<f32> {
    let n = channels * dims.iter().product::<usize>();
    let data = (0..n)
        .map(|i| (((i as u64).wrapping_mul(seed | 1) >> 7) % 1000) as f32 / 500.0 - 1.0)
        .collect();
    FeatureMap::from_vec(channels, dims, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_shapes_and_range((cfg, seed) in model_config()) {
        let model = UNet::<f32>::new(cfg.clone()).unwrap();
        let x = ramp(1, cfg.input_grid, seed);
        let cond = cfg.head.is_lcs().then(|| {
            let mut c = ramp(COND_CHANNELS, cfg.bottleneck_dims(), seed ^ 5);
            c.channel_mut(1).iter_mut().for_each(|v| *v = v.abs().min(1.0));
            c
        });
        let meter = ActivationMeter::new();
        let y = model.forward_infer(&x, cond.as_ref(), &meter).unwrap();
        prop_assert_eq!(y.channels, cfg.output_channels());
        prop_assert_eq!(y.dims, cfg.input_grid);
        prop_assert!(y.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let again = model.forward_infer(&x, cond.as_ref(), &meter).unwrap();
        prop_assert_eq!(&y.data, &again.data);
        // The training pass computes the same probabilities.
        let cache = model.forward_train(&x, cond.as_ref()).unwrap();
        prop_assert_eq!(&cache.probs.data, &y.data);
    }
}

#[test]
fn memory_estimate_is_affine_in_classes_and_flat_for_lcs() {
    let grid = [32, 32, 32];
    let est = |head| estimate_activation_memory(&ModelConfig::new(head, grid), 4);
    let costs: Vec<u64> = (1..=20)
        .map(|c| est(Head::Baseline { classes: c }))
        .collect();
    let slope = costs[1] - costs[0];
    assert!(slope > 0);
    assert!(costs.windows(2).all(|w| w[1] - w[0] == slope));
    // Only the output-grid head tensors grow with C.
    assert_eq!(slope, 2 * 2 * 32 * 32 * 32 * 4);
    // The class count never enters the LCS configuration, so its cost is
    // one fixed number that sits between one and two baseline classes.
    let lcs = est(Head::Lcs);
    assert!(lcs > costs[0] && lcs < costs[1]);
}

#[test]
fn synthetic_cases_are_deterministic_and_hierarchical() {
    let cfg = common::small_phantom();
    for seed in 0..4 {
        let (img, labels) = generate_case(&cfg, seed).unwrap();
        let (img2, labels2) = generate_case(&cfg, seed).unwrap();
        assert_eq!(img, img2);
        assert_eq!(labels, labels2);
        for (parent, children) in &labels.hierarchy {
            let whole = binarize(&labels, &ClassSet::from([*parent])).unwrap();
            let mut acc = vec![0u8; whole.grid.len()];
            for c in children {
                let m = binarize(&labels, &ClassSet::from([*c])).unwrap();
                for (a, &b) in acc.iter_mut().zip(m.grid.data()) {
                    assert_eq!(*a & b, 0, "siblings overlap");
                    *a |= b;
                }
            }
            assert_eq!(whole.grid.data(), &acc[..]);
            assert!(whole.count() > 0);
        }
        let coarse = labels.coarse_ids();
        for (i, a) in coarse.iter().enumerate() {
            let ma = binarize(&labels, &ClassSet::from([*a])).unwrap();
            assert!(ma.count() > 0, "class {a} is empty");
            for b in &coarse[i + 1..] {
                let mb = binarize(&labels, &ClassSet::from([*b])).unwrap();
                assert!(ma
                    .grid
                    .data()
                    .iter()
                    .zip(mb.grid.data())
                    .all(|(x, y)| x & y == 0));
            }
        }
    }
    let (_, other) = generate_case(&cfg, 99).unwrap();
    assert_ne!(other, generate_case(&cfg, 0).unwrap().1);
}

#[test]
fn conditioning_is_pure_and_channel_zero_is_shared() {
    let ds = common::small_dataset(1);
    let case = ds.case(0);
    let atlas = Atlas::new(&case.image, case.labels.clone()).unwrap();
    let sets: Vec<ClassSet> = subsets(5);
    let reference = make_conditioning(&atlas, &sets[0], 4).unwrap();
    for s in &sets {
        let a = make_conditioning(&atlas, s, 4).unwrap();
        let b = make_conditioning(&atlas, s, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data.channels, COND_CHANNELS);
        assert_eq!(a.data.channel(0), reference.data.channel(0));
        assert!(a.data.channel(1).iter().all(|v| (0.0..=1.0).contains(v)));
    }
    // Distinct leaf classes are disjoint, so the union's block means add up.
    for (x, y) in [(1, 3), (1, 4), (4, 5), (3, 5)] {
        let one =
            |ids: &[u32]| make_conditioning(&atlas, &ids.iter().copied().collect(), 4).unwrap();
        let (u, a, b) = (one(&[x, y]), one(&[x]), one(&[y]));
        let sum: Vec<f32> = a
            .data
            .channel(1)
            .iter()
            .zip(b.data.channel(1))
            .map(|(p, q)| p + q)
            .collect();
        assert_eq!(u.data.channel(1), &sum[..]);
    }
    // The coarse parent conditions exactly like the union of its children.
    assert_eq!(
        make_conditioning(&atlas, &ClassSet::from([2]), 4)
            .unwrap()
            .data,
        make_conditioning(&atlas, &ClassSet::from([4, 5]), 4)
            .unwrap()
            .data
    );
}
