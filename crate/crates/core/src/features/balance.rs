use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::parser::{LabeledObservation, NULL_ACTION};
use crate::util::{fnv1a, mix_seed};

/// A sequence keeps at least this many null-action pairs (when it has them).
pub const BALANCE_FLOOR: usize = 10;

/// `min(count_null, max(count_macro, BALANCE_FLOOR))`.
pub fn retained_null_target(count_null: usize, count_macro: usize) -> usize {
    count_null.min(count_macro.max(BALANCE_FLOOR))
}

/// Indices of the pairs that survive balancing, in increasing order.
/// Every macro-action pair survives; null pairs are sampled uniformly
/// without replacement with an RNG keyed by `(key, seed)`.
pub fn balance_indices(labels: &[usize], key: &str, seed: u64) -> Vec<usize> {
    let nulls: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == NULL_ACTION)
        .map(|(i, _)| i)
        .collect();
    let target = retained_null_target(nulls.len(), labels.len() - nulls.len());
    let mut keep = vec![true; labels.len()];
    if target < nulls.len() {
        for &i in &nulls {
            keep[i] = false;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, fnv1a(key.as_bytes())));
        for pick in index::sample(&mut rng, nulls.len(), target) {
            keep[nulls[pick]] = true;
        }
    }
    keep.iter()
        .enumerate()
        .filter(|(_, k)| **k)
        .map(|(i, _)| i)
        .collect()
}

pub fn balance_sample(
    pairs: &[LabeledObservation],
    key: &str,
    seed: u64,
) -> Vec<LabeledObservation> {
    let labels: Vec<usize> = pairs.iter().map(|p| p.label).collect();
    balance_indices(&labels, key, seed)
        .into_iter()
        .map(|i| pairs[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(macro_count: usize, null_count: usize) -> Vec<usize> {
        // Interleave so order preservation is observable.
        let mut v = vec![NULL_ACTION; null_count];
        for i in 0..macro_count {
            let at = (i * 7) % (v.len() + 1);
            v.insert(at, 1 + i % 5);
        }
        v
    }

    fn counts(labels: &[usize], kept: &[usize]) -> (usize, usize) {
        let nulls = kept.iter().filter(|&&i| labels[i] == NULL_ACTION).count();
        (kept.len() - nulls, nulls)
    }

    #[test]
    fn examples() {
        let l = labels(10, 90);
        assert_eq!(counts(&l, &balance_indices(&l, "a", 1)), (10, 10));
        let l = labels(0, 50);
        assert_eq!(counts(&l, &balance_indices(&l, "a", 1)), (0, 10));
        let l = labels(5, 3);
        assert_eq!(balance_indices(&l, "a", 1), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn keyed_by_replay_and_seed() {
        let l = labels(10, 200);
        let a = balance_indices(&l, "r1", 3);
        assert_eq!(a, balance_indices(&l, "r1", 3));
        assert_ne!(a, balance_indices(&l, "r2", 3));
        assert_ne!(a, balance_indices(&l, "r1", 4));
    }

    proptest! {
        #[test]
        fn target_order_and_idempotence(raw in proptest::collection::vec(0usize..4, 0..300), seed in 0u64..1000) {
            let kept = balance_indices(&raw, "k", seed);
            prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
            let (m, n) = counts(&raw, &kept);
            let total_null = raw.iter().filter(|l| **l == NULL_ACTION).count();
            prop_assert_eq!(m, raw.len() - total_null);
            prop_assert_eq!(n, retained_null_target(total_null, m));
            let once: Vec<usize> = kept.iter().map(|&i| raw[i]).collect();
            let twice: Vec<usize> = balance_indices(&once, "k", seed).into_iter().map(|i| once[i]).collect();
            prop_assert_eq!(once, twice);
        }
    }
}
