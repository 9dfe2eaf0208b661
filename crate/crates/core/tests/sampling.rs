//! Hard-aware sampling against a multinomial oracle.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use step_core::training::{sample_indices, weighted_sample};

#[test]
fn single_draws_follow_the_weights() {
    let weights = [1.0, 2.0, 3.0, 0.0, 4.0];
    let items: Vec<usize> = (0..weights.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[weighted_sample(&items, &weights, 1, &mut rng)[0]] += 1;
    }
    assert_eq!(counts[3], 0);
    for (c, w) in counts.iter().zip(weights) {
        let p = w / 10.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt().max(1.0);
        assert!((*c as f64 - n as f64 * p).abs() <= 4.0 * sd, "{counts:?}");
    }
}

#[test]
fn two_draws_without_replacement() {
    // P(first = a, second = b) = w_a / W * w_b / (W - w_a)
    let weights = [1.0, 1.0, 2.0];
    let items = [0, 1, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 20_000;
    let mut both_low = 0;
    for _ in 0..n {
        let s = weighted_sample(&items, &weights, 2, &mut rng);
        assert_ne!(s[0], s[1]);
        if !s.contains(&2) {
            both_low += 1;
        }
    }
    // {0, 1}: 1/4 * 1/3 + 1/4 * 1/3 = 1/6
    let p = 1.0 / 6.0;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((both_low as f64 - n as f64 * p).abs() <= 4.0 * sd);
}

proptest! {
    #[test]
    fn every_gt_gets_a_forced_positive(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 3..15),
        num_pos in 0usize..6,
        num_neg in 0usize..6,
        seed in any::<u64>(),
    ) {
        let scores: Vec<f64> = rows.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_indices(&rows, 3, &scores, 0.5, num_pos, num_neg, &mut rng).unwrap();
        prop_assert_eq!(s.forced.len(), 3);
        for g in 0..3 {
            prop_assert!(s.positives.iter().any(|&(p, a)| a == g && s.forced.contains(&p)));
        }
        prop_assert!(s.positives.len() <= num_pos.max(3));
        prop_assert!(s.negatives.len() <= num_neg);
        let mut all: Vec<usize> = s.positives.iter().map(|p| p.0).chain(s.negatives.iter().cloned()).collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        for &i in &s.negatives {
            prop_assert!(rows[i].iter().all(|&o| o <= 0.5));
        }
    }
}
