use moge::router::{route_logits, RouterConfig, RoutingMode};
use proptest::prelude::*;

const CASES: u32 = 10_000;

fn mode() -> impl Strategy<Value = RoutingMode> {
    prop_oneof![Just(RoutingMode::SoftmaxFirst), Just(RoutingMode::TopkFirst)]
}

/// Logits on a 1/64 grid so that shifting by another grid value is exact.
fn grid_logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-640i32..=640).prop_map(|v| v as f64 / 64.0), 1..48)
}

fn logits_and_k() -> impl Strategy<Value = (Vec<f64>, usize)> {
    grid_logits().prop_flat_map(|l| {
        let n = l.len();
        (Just(l), 1..=n)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn exactly_k_distinct_experts((logits, k) in logits_and_k(), mode in mode()) {
        let n = logits.len();
        let d = route_logits(&RouterConfig::new(n, k, mode).unwrap(), &logits);
        prop_assert_eq!(d.indices.len(), k);
        prop_assert_eq!(d.weights.len(), k);
        let mut sorted = d.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        prop_assert!(d.indices.iter().all(|&i| i < n));
        prop_assert_eq!(d.sparse_code().iter().filter(|w| **w != 0.0).count(), k);
        // nothing unselected beats a selected logit
        let weakest = d.indices.iter().map(|&i| logits[i]).fold(f64::INFINITY, f64::min);
        for j in (0..n).filter(|j| !d.indices.contains(j)) {
            prop_assert!(logits[j] <= weakest);
        }
    }

    #[test]
    fn logit_shift_invariance(
        (logits, k) in logits_and_k(),
        shift in (-4096i32..=4096).prop_map(|v| v as f64 / 64.0),
        mode in mode(),
    ) {
        let cfg = RouterConfig::new(logits.len(), k, mode).unwrap();
        let a = route_logits(&cfg, &logits);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let b = route_logits(&cfg, &shifted);
        prop_assert_eq!(&a.indices, &b.indices);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance(
        logits in prop::collection::vec(-10.0f64..10.0, 2..48),
        seed in any::<u64>(),
        k_frac in 0.0f64..1.0,
        mode in mode(),
    ) {
        let n = logits.len();
        let mut distinct = logits.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assume!(distinct.len() == n);
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let mut perm: Vec<usize> = (0..n).collect();
        moge::rng::Rng::new(seed).shuffle(&mut perm);
        // permuted[perm[i]] = logits[i]
        let mut permuted = vec![0.0; n];
        for (i, &p) in perm.iter().enumerate() {
            permuted[p] = logits[i];
        }
        let cfg = RouterConfig::new(n, k, mode).unwrap();
        let a = route_logits(&cfg, &logits);
        let b = route_logits(&cfg, &permuted);
        let mapped: Vec<usize> = a.indices.iter().map(|&i| perm[i]).collect();
        prop_assert_eq!(&mapped, &b.indices);
        prop_assert_eq!(&a.weights, &b.weights);
        for i in 0..n {
            prop_assert_eq!(a.dense_z[i], b.dense_z[perm[i]]);
        }
    }

    #[test]
    fn topk_first_weights_sum_to_one((logits, k) in logits_and_k()) {
        let d = route_logits(&RouterConfig::new(logits.len(), k, RoutingMode::TopkFirst).unwrap(), &logits);
        prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_first_weights_are_dense_entries((logits, k) in logits_and_k()) {
        let d = route_logits(&RouterConfig::new(logits.len(), k, RoutingMode::SoftmaxFirst).unwrap(), &logits);
        for (&i, &w) in d.indices.iter().zip(&d.weights) {
            prop_assert_eq!(w, d.dense_z[i]);
        }
        prop_assert!(d.weights.iter().sum::<f64>() <= 1.0 + 1e-12);
        prop_assert!((d.dense_z.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
