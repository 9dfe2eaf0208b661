//! Analytic loss gradients against central differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use step_core::geometry::Offset;
use step_core::model::{linear_loss, LinearHead, SampleTarget};
use step_core::simulator::{FeatureLayout, FeatureVector};

fn case(seed: u64) -> (LinearHead, FeatureVector, SampleTarget) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=3);
    let layout = FeatureLayout {
        frames: k * rng.gen_range(1..=3),
        clip_len: k,
        num_classes: rng.gen_range(1..=3),
    };
    let anticipate = rng.gen_bool(0.5);
    let mut head = LinearHead::zeros(layout, anticipate);
    for p in head.params_mut() {
        *p = rng.gen_range(-0.5..0.5);
    }
    let x = FeatureVector((0..layout.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let mut offsets = |n: usize| -> Vec<Option<Offset>> {
        (0..n)
            .map(|_| {
                rng.gen_bool(0.75).then(|| {
                    Offset::from_array(std::array::from_fn(|_| rng.gen_range(-3.0..3.0)))
                })
            })
            .collect()
    };
    let label = seed as usize % (layout.num_classes + 1);
    let target = if label == 0 {
        SampleTarget::background()
    } else {
        SampleTarget {
            label,
            main: offsets(layout.frames),
            before: if anticipate { offsets(k) } else { vec![] },
            after: if anticipate { offsets(k) } else { vec![] },
        }
    };
    (head, x, target)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn gradients_match_central_differences(seed in any::<u64>()) {
        let (head, x, target) = case(seed);
        let (lambda, gamma) = (1.0, 0.5);
        let mut grads = head.zeros_like();
        linear_loss(&head, &x, &target, lambda, gamma, Some(&mut grads)).unwrap();
        let analytic = grads.params();
        let h = 1e-6;
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for i in 0..head.num_params() {
            let at = |d: f64| {
                let mut m = head.clone();
                *m.params_mut().nth(i).unwrap() += d;
                linear_loss(&m, &x, &target, lambda, gamma, None).unwrap().total
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            diff += (numeric - analytic[i]).powi(2);
            norm += numeric.powi(2) + analytic[i].powi(2);
        }
        prop_assert!(diff.sqrt() <= 1e-4 * norm.sqrt().max(1e-12), "relative error {}", diff.sqrt() / norm.sqrt());
    }
}

#[test]
fn descending_the_gradient_lowers_the_loss() {
    let (mut head, x, target) = case(7);
    let before = linear_loss(&head, &x, &target, 1.0, 0.5, None).unwrap().total;
    let mut grads = head.zeros_like();
    linear_loss(&head, &x, &target, 1.0, 0.5, Some(&mut grads)).unwrap();
    head.descend(&grads, 1e-3);
    let after = linear_loss(&head, &x, &target, 1.0, 0.5, None).unwrap().total;
    assert!(after < before);
}
