//! Property tests for the search-space invariants: bypass transparency,
//! shuffle bijectivity, derivation against exhaustive enumeration, score
//! shift invariance, schedule bounds, and data-split bookkeeping.

mod common;

use pcdarts_core::data::{batches, make_synthetic, split_half, Half};
use pcdarts_core::genotype::{derive, validate, Genotype};
use pcdarts_core::ops::BnPolicy;
use pcdarts_core::rng::stream;
use pcdarts_core::space::{edge_count, ChannelMask, MixedEdge};
use pcdarts_core::tensor::{cosine_lr, shuffle_groups, shuffle_order, Tape};
use proptest::prelude::*;

use common::randomized_arch;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Channels outside the selected set must come out of a stride-1 mixed
    /// edge bit-identical, merely moved behind the mixture block.
    #[test]
    fn bypass_is_bit_exact(
        k in prop::sample::select(vec![2usize, 4, 8]),
        c_mult in 1usize..4,
        hw in prop::sample::select(vec![4usize, 6, 8]),
        seed in 0u64..1_000,
    ) {
        let channels = k * c_mult;
        let mut rng = stream(seed, "prop-bypass");
        let edge = MixedEdge::<f64>::build(0, 2, 1, channels, k, false, &mut rng).unwrap();
        let mask = ChannelMask::efficient(channels, k).unwrap();
        let x = common::rand_tensor(&mut rng, vec![2, channels, hw, hw], -2.0, 2.0);
        let alpha = common::rand_tensor(&mut rng, vec![8], 0.0, 1.0);
        let aw = {
            let t = Tape::<f64>::new();
            t.no_grad(|| t.softmax(&alpha, 0)).unwrap()
        };

        let tape = Tape::<f64>::new();
        let out = edge.forward(&tape, &x, &aw, &mask, BnPolicy::BatchStats).unwrap();
        prop_assert_eq!(out.shape(), x.shape());

        let n_sel = mask.selected.len();
        let (xd, od) = (x.to_f64_vec(), out.to_f64_vec());
        let plane = hw * hw;
        for n in 0..2 {
            for (slot, &src) in mask.masked.iter().enumerate() {
                for p in 0..plane {
                    let a = xd[(n * channels + src) * plane + p];
                    let b = od[(n * channels + n_sel + slot) * plane + p];
                    prop_assert_eq!(a.to_bits(), b.to_bits(),
                        "bypass channel {} moved inexactly", src);
                }
            }
        }
    }

    /// The group count picked for any (channels, K) pair divides the channel
    /// count, the resulting order is a permutation, and consecutive output
    /// channels always come from distinct input groups.
    #[test]
    fn shuffle_order_is_an_interleaving_permutation(c in 1usize..64, k in 1usize..16) {
        let g = shuffle_groups(c, k);
        prop_assert!(g >= 1 && g <= k && c % g == 0);
        // greatest qualifying divisor: nothing between g and k divides c
        for cand in (g + 1)..=k.min(c) {
            prop_assert!(c % cand != 0, "{cand} divides {c} but {g} was chosen");
        }
        let order = shuffle_order(c, g);
        prop_assert_eq!(order.len(), c);
        let mut seen = vec![false; c];
        for &i in &order {
            prop_assert!(i < c && !seen[i]);
            seen[i] = true;
        }
        if g > 1 {
            let group_of = |ch: usize| ch / (c / g);
            for w in order.chunks(g) {
                let mut groups: Vec<usize> = w.iter().map(|&ch| group_of(ch)).collect();
                groups.sort_unstable();
                groups.dedup();
                prop_assert_eq!(groups.len(), w.len(), "chunk repeats a group");
            }
        }
    }

    /// Derivation agrees with brute-force enumeration over all (edge pair,
    /// op, op) assignments, with and without edge normalization.
    #[test]
    fn derivation_matches_exhaustive_enumeration(
        n in 3usize..=6,
        seed in 0u64..500,
        edge_norm in any::<bool>(),
    ) {
        let arch = randomized_arch(n, seed, 1.0);
        let got = derive(&arch, edge_norm).unwrap();
        let want = common::brute_force_derive(&arch, edge_norm);
        prop_assert_eq!(&got, &want);
        prop_assert!(validate(&got, n).is_empty());
        // JSON round-trip is lossless.
        prop_assert_eq!(Genotype::from_json(&got.to_json()).unwrap(), got);
    }

    /// Adding a constant to a β block or to an entire α row rescales nothing:
    /// softmax is shift invariant, so the genotype cannot move.
    #[test]
    fn derivation_ignores_score_shifts(
        n in 3usize..=6,
        seed in 0u64..500,
        shift in -5.0f64..5.0,
    ) {
        let arch = randomized_arch(n, seed, 1.0);
        let before = derive(&arch, true).unwrap();

        for (_, t) in arch.named() {
            let mut vals = t.to_vec();
            if t.shape().len() == 2 {
                // shift one whole row of each alpha table
                let cols = t.shape()[1];
                for v in vals[..cols].iter_mut() {
                    *v += shift;
                }
            } else {
                // shift every beta entry of the first node block
                let block = 2.min(vals.len());
                for v in vals[..block].iter_mut() {
                    *v += shift;
                }
            }
            t.set_data(&vals).unwrap();
        }
        let after = derive(&arch, true).unwrap();
        prop_assert_eq!(before, after);
    }

    /// Cosine schedule: starts at lr0, ends at zero, never leaves [0, lr0],
    /// and decreases monotonically.
    #[test]
    fn cosine_schedule_is_bounded_and_monotone(
        total in 1u64..2_000,
        lr0 in 1e-4f64..10.0,
    ) {
        let first = cosine_lr(0, total, lr0).unwrap();
        prop_assert!((first - lr0).abs() <= 1e-12 * lr0);
        let last = cosine_lr(total, total, lr0).unwrap();
        prop_assert!(last.abs() <= 1e-12);
        let mut prev = f64::INFINITY;
        let probes = (0..=total).step_by((total as usize / 17).max(1));
        for t in probes {
            let lr = cosine_lr(t, total, lr0).unwrap();
            prop_assert!(lr >= -1e-15 && lr <= lr0 * (1.0 + 1e-15));
            prop_assert!(lr <= prev + 1e-12 * lr0);
            prev = lr;
        }
    }

    /// Split halves are disjoint, equal-sized, and batching covers a half
    /// without repeats regardless of the epoch seed.
    #[test]
    fn split_and_batches_partition_the_data(
        count in 8usize..400,
        seed in 0u64..1_000,
        bs in 1usize..32,
        epoch in 0usize..40,
    ) {
        let plan = split_half(count, seed).unwrap();
        prop_assert_eq!(plan.w.len(), plan.a.len());
        let mut all: Vec<usize> = plan.w.iter().chain(&plan.a).copied().collect();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), plan.w.len() + plan.a.len(), "halves overlap");
        prop_assert!(all.iter().all(|&i| i < count));

        let half = plan.w.len();
        prop_assume!(bs <= half);
        let seed_e = pcdarts_core::search::epoch_seed(seed, epoch);
        for half_kind in [Half::W, Half::A] {
            let b = batches(&plan, half_kind, bs, seed_e).unwrap();
            prop_assert_eq!(b.len(), half / bs);
            let mut flat: Vec<usize> = b.iter().flatten().copied().collect();
            prop_assert!(b.iter().all(|batch| batch.len() == bs));
            flat.sort_unstable();
            flat.dedup();
            prop_assert_eq!(flat.len(), (half / bs) * bs, "batch indices repeat");
        }
    }

    /// Synthetic data is balanced and deterministic in the seed.
    #[test]
    fn synthetic_data_is_balanced_and_seeded(
        classes in 2usize..6,
        seed in 0u64..200,
    ) {
        let count = classes * 10;
        let d1 = make_synthetic(classes, 8, count, 0.3, seed).unwrap();
        let d2 = make_synthetic(classes, 8, count, 0.3, seed).unwrap();
        prop_assert_eq!(&d1.images, &d2.images);
        prop_assert_eq!(&d1.labels, &d2.labels);
        for cls in 0..classes {
            let n = d1.labels.iter().filter(|&&l| l == cls).count();
            prop_assert_eq!(n, 10);
        }
    }
}

#[test]
fn edge_count_matches_enumeration() {
    for n in 3..12 {
        assert_eq!(
            edge_count(n),
            pcdarts_core::space::edge_list(n).len(),
            "edge bookkeeping disagrees at {n} nodes"
        );
    }
}
