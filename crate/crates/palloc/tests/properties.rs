//! Randomized order-theory properties that back the comparison primitives.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use palloc::policy::{self, OrderComparison};

fn random_vec(rng: &mut StdRng, s: usize) -> Vec<f64> {
    (0..s).map(|_| rng.gen_range(0.0..3.0)).collect()
}

/// Draws `a` with every tail sum below the corresponding tail sum of `b`.
fn dominated_by(rng: &mut StdRng, b: &[f64]) -> Vec<f64> {
    let s = b.len();
    let mut b_tails = vec![0.0; s + 1];
    for i in (0..s).rev() {
        b_tails[i] = b_tails[i + 1] + b[i];
    }
    let mut a_tails = vec![0.0; s + 1];
    for i in (0..s).rev() {
        let u: f64 = rng.gen_range(0.0..1.0);
        a_tails[i] = a_tails[i + 1] + u * (b_tails[i] - a_tails[i + 1]);
    }
    (0..s).map(|i| a_tails[i] - a_tails[i + 1]).collect()
}

#[test]
fn gsc_is_reflexive_antisymmetric_transitive() {
    let mut rng = StdRng::seed_from_u64(31);
    for _ in 0..1000 {
        let s = rng.gen_range(2..=12usize);
        let c = random_vec(&mut rng, s);
        let b = dominated_by(&mut rng, &c);
        let a = dominated_by(&mut rng, &b);

        // Reflexive.
        assert_eq!(policy::gsc_compare(&c, &c).unwrap(), OrderComparison::Equal);
        // Antisymmetric up to tolerance: a perturbation below the comparison
        // tolerance still reads as equality.
        let mut c_jig = c.clone();
        c_jig[0] += 1e-14;
        assert_eq!(policy::gsc_compare(&c, &c_jig).unwrap(), OrderComparison::Equal);
        // Transitive along the constructed chain a <= b <= c.
        for (lo, hi) in [(&a, &b), (&b, &c), (&a, &c)] {
            let cmp = policy::gsc_compare(lo, hi).unwrap();
            assert!(
                matches!(cmp, OrderComparison::LessOrEqual | OrderComparison::Equal),
                "got {cmp:?}"
            );
        }
    }
}

#[test]
fn gsc_matches_cdf_dominance_for_probability_vectors() {
    let mut rng = StdRng::seed_from_u64(37);
    for _ in 0..1000 {
        let s = rng.gen_range(2..=10usize);
        let normalize = |v: Vec<f64>| -> Vec<f64> {
            let t: f64 = v.iter().sum();
            v.into_iter().map(|x| x / t).collect()
        };
        let a = normalize((0..s).map(|_| rng.gen_range(0.01..1.0)).collect());
        let b = normalize((0..s).map(|_| rng.gen_range(0.01..1.0)).collect());

        // For probability vectors, tail-sum dominance of `a` by `b` is the
        // usual stochastic order: the CDF of `a` sits above the CDF of `b`.
        let tol = 1e-12;
        let mut cdf_a = 0.0;
        let mut cdf_b = 0.0;
        let mut a_above = true;
        let mut b_above = true;
        for i in 0..s - 1 {
            cdf_a += a[i];
            cdf_b += b[i];
            if cdf_a < cdf_b - tol {
                a_above = false;
            }
            if cdf_b < cdf_a - tol {
                b_above = false;
            }
        }
        let expected = match (a_above, b_above) {
            (true, true) => OrderComparison::Equal,
            (true, false) => OrderComparison::LessOrEqual,
            (false, true) => OrderComparison::GreaterOrEqual,
            (false, false) => OrderComparison::Incomparable,
        };
        assert_eq!(policy::gsc_compare(&a, &b).unwrap(), expected);
    }
}

#[test]
fn tie_aware_distribution_is_stochastic_and_tie_symmetric() {
    let mut rng = StdRng::seed_from_u64(41);
    for _ in 0..1000 {
        let s = rng.gen_range(2..=8usize);
        // Small value range forces plenty of ties.
        let mut state: Vec<u32> = (0..s).map(|_| rng.gen_range(0..3)).collect();
        state.sort_unstable();
        let raw: Vec<f64> = (0..s).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let p = policy::AllocationVector::new(probs.clone()).unwrap();

        let dist = policy::tie_aware_routing_distribution(&state, &p).unwrap();
        assert!(dist.iter().all(|&r| r >= 0.0));
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // Swapping allocation mass between two ranks inside one tie group
        // must not change the routing distribution.
        let group: Vec<usize> = (0..s).filter(|&i| state[i] == state[0]).collect();
        if group.len() >= 2 {
            let mut swapped = probs;
            swapped.swap(group[0], group[1]);
            let p2 = policy::AllocationVector::new(swapped).unwrap();
            let dist2 = policy::tie_aware_routing_distribution(&state, &p2).unwrap();
            for (x, y) in dist.iter().zip(&dist2) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
