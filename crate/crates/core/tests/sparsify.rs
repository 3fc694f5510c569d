mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgddpg_core::gp::sparsify::{evict_to_capacity, independence_scores, remove_correlated};
use sgddpg_core::gp::{GpDataset, KernelHyperparams};

fn well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> (GpDataset, KernelHyperparams) {
    let dim = rng.random_range(2..=3);
    let hp = random_hp(rng, dim, 0.3..0.8);
    (random_dataset(rng, n, dim, 2.0), hp)
}

/// Minimal score; near-exact ties go to the most recent element.
fn argmin(v: &[f64]) -> usize {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    (0..v.len()).rev().find(|&i| v[i] <= min + 1e-12).unwrap()
}

fn without(d: &GpDataset, idx: usize) -> GpDataset {
    let keep: Vec<usize> = (0..d.len()).filter(|&i| i != idx).collect();
    d.select(&keep)
}

fn is_subsequence(small: &GpDataset, big: &GpDataset) -> bool {
    let mut it = big.inputs.iter().zip(&big.targets);
    small
        .inputs
        .iter()
        .zip(&small.targets)
        .all(|(z, y)| it.any(|(bz, by)| bz == z && by == y))
}

/// Column-pivoted Gram–Schmidt; returns the diagonal of R in pivot order
/// together with the pivot indices.
fn gram_schmidt_pivoted(a: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
    let n = a.ncols();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).iter().copied().collect()).collect();
    let mut remaining: Vec<usize> = (0..n).collect();
    let (mut perm, mut diag) = (Vec::new(), Vec::new());
    while !remaining.is_empty() {
        let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pos = (0..remaining.len())
            .max_by(|&p, &q| {
                norm(&cols[remaining[p]])
                    .total_cmp(&norm(&cols[remaining[q]]))
                    .then(q.cmp(&p))
            })
            .unwrap();
        let j = remaining.remove(pos);
        let r = norm(&cols[j]);
        perm.push(j);
        diag.push(r);
        if r > 0.0 {
            let q: Vec<f64> = cols[j].iter().map(|x| x / r).collect();
            for &k in &remaining {
                let dot: f64 = q.iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
                for (c, qi) in cols[k].iter_mut().zip(&q) {
                    *c -= dot * qi;
                }
            }
        }
    }
    (perm, diag)
}

#[test]
fn scores_match_leave_one_out() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..30 {
        let n = rng.random_range(2..=12);
        let (d, hp) = well_conditioned(&mut rng, n);
        let got = independence_scores(&d, &hp).unwrap().scores;
        let want = loo_scores(&d, &hp, hp.jitter);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w.max(0.0)).abs() < 1e-8, "{g} vs {w}");
        }
    }
}

#[test]
fn single_step_eviction_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let n = rng.random_range(2..=12);
        let (mut d, hp) = well_conditioned(&mut rng, n);
        d.capacity = n - 1;
        let expected = without(&d, argmin(&loo_scores(&d, &hp, hp.jitter)));
        assert_eq!(evict_to_capacity(&d, &hp), expected);
    }
}

#[test]
fn iterated_eviction_matches_repeated_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let (mut d, hp) = well_conditioned(&mut rng, 12);
        d.capacity = 10;
        let mut expected = d.clone();
        while expected.len() > 10 {
            expected = without(&expected, argmin(&loo_scores(&expected, &hp, hp.jitter)));
        }
        assert_eq!(evict_to_capacity(&d, &hp), expected);
    }
}

#[test]
fn long_eviction_crosses_refactor_boundary() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let hp = KernelHyperparams::new(1.0, vec![0.4, 0.4], 0.1).unwrap();
    let mut d = random_dataset(&mut rng, 80, 2, 3.0);
    d.capacity = 30;
    let mut expected = d.clone();
    while expected.len() > 30 {
        let s = independence_scores(&expected, &hp).unwrap().scores;
        expected = without(&expected, argmin(&s));
    }
    assert_eq!(evict_to_capacity(&d, &hp), expected);
}

#[test]
fn duplicate_inputs_evicted_first() {
    let hp = KernelHyperparams::unit(2);
    let d = GpDataset::from_pairs(
        3,
        [
            (vec![0.0, 0.0], 1.0),
            (vec![2.0, -1.0], 2.0),
            (vec![-2.0, 1.5], 3.0),
            (vec![0.0, 0.0], 4.0),
        ],
    )
    .unwrap();
    let out = evict_to_capacity(&d, &hp);
    assert_eq!(out.len(), 3);
    assert_eq!(out.targets.iter().filter(|&&t| t == 1.0 || t == 4.0).count(), 1);
    assert!(out.targets.contains(&2.0) && out.targets.contains(&3.0));

    let q = remove_correlated(&d, &hp, 1e-8);
    assert_eq!(q.len(), 3);
}

#[test]
fn qr_keeps_exactly_oracle_survivors() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..30 {
        let n = rng.random_range(2..=15);
        let (mut d, hp) = well_conditioned(&mut rng, n);
        if trial % 3 == 0 {
            let z = d.inputs[0].clone();
            d.push(z, 0.5).unwrap();
        }
        let threshold = [1e-8, 1e-3, 0.05][trial % 3];
        let (perm, diag) = gram_schmidt_pivoted(&dense_gram(&d.inputs, &hp));
        let max = diag.iter().copied().fold(0.0, f64::max);
        let mut keep: Vec<usize> = perm
            .iter()
            .zip(&diag)
            .enumerate()
            .filter(|(p, (_, r))| *p == 0 || **r >= threshold * max)
            .map(|(_, (i, _))| *i)
            .collect();
        keep.sort_unstable();
        assert_eq!(remove_correlated(&d, &hp, threshold), d.select(&keep), "trial {trial}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn eviction_size_order_and_idempotence(seed in any::<u64>(), n in 1usize..25, cap in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hp = random_hp(&mut rng, 2, 0.3..1.5);
        let mut d = random_dataset(&mut rng, n, 2, 2.0);
        d.capacity = cap;
        let out = evict_to_capacity(&d, &hp);
        prop_assert_eq!(out.len(), n.min(cap));
        prop_assert!(is_subsequence(&out, &d));
        prop_assert_eq!(evict_to_capacity(&out, &hp), out.clone());
    }

    #[test]
    fn scores_within_prior_variance((d, hp, _z) in gp_problem(20, 4)) {
        let s = independence_scores(&d, &hp).unwrap().scores;
        prop_assert_eq!(s.len(), d.len());
        for v in s {
            prop_assert!((0.0..=hp.signal_variance + 1e-9).contains(&v));
        }
    }

    #[test]
    fn qr_result_is_nonempty_ordered_subset((d, hp, _z) in gp_problem(20, 3)) {
        let out = remove_correlated(&d, &hp, 1e-8);
        prop_assert!(!out.is_empty());
        prop_assert!(out.len() <= d.len());
        prop_assert!(is_subsequence(&out, &d));
    }
}
