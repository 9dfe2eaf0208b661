//! Average precision and frame-mAP against independent hand-rolled oracles.

use proptest::prelude::*;
use step_core::geometry::BBox;
use step_core::metrics::{average_precision, frame_map, FrameDetection, FrameGroundTruth};

/// All-points AP: area under the precision envelope, where the envelope at
/// recall r is the best precision achieved at any recall >= r.
fn ap_oracle(flags: &[bool], num_gt: usize) -> f64 {
    let points: Vec<(f64, f64)> = (1..=flags.len())
        .map(|n| {
            let tp = flags[..n].iter().filter(|&&f| f).count() as f64;
            (tp / num_gt as f64, tp / n as f64)
        })
        .collect();
    let mut area = 0.0;
    let mut last_recall = 0.0;
    for &(r, _) in &points {
        if r > last_recall {
            let envelope = points
                .iter()
                .filter(|(r2, _)| *r2 >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            area += (r - last_recall) * envelope;
            last_recall = r;
        }
    }
    area
}

proptest! {
    #[test]
    fn ap_matches_envelope_oracle(flags in prop::collection::vec(any::<bool>(), 0..40), extra in 0usize..5) {
        let num_gt = flags.iter().filter(|&&f| f).count() + extra;
        prop_assume!(num_gt > 0);
        let ap = average_precision(&flags, num_gt);
        prop_assert!((ap - ap_oracle(&flags, num_gt)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    /// One gt box per frame and detections that either sit on it or far away:
    /// matching is unambiguous, so the ranked flags are known in advance.
    #[test]
    fn frame_map_equals_ap_of_known_ranking(
        hits in prop::collection::vec((any::<bool>(), 0u32..1000), 1..30),
        frames in 1i64..8,
    ) {
        let gt_box = BBox::new(10.0, 10.0, 50.0, 50.0);
        let far = BBox::new(200.0, 200.0, 240.0, 240.0);
        let gts: Vec<FrameGroundTruth> = (0..frames)
            .map(|frame| FrameGroundTruth { video: 0, frame, label: 1, bbox: gt_box })
            .collect();
        // distinct scores so the ranking is total
        let dets: Vec<FrameDetection> = hits
            .iter()
            .enumerate()
            .map(|(i, &(hit, s))| FrameDetection {
                video: 0,
                frame: i as i64 % frames,
                label: 1,
                score: s as f64 + i as f64 * 1e-4,
                bbox: if hit { gt_box } else { far },
            })
            .collect();
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        let mut claimed = vec![false; frames as usize];
        let flags: Vec<bool> = order
            .iter()
            .map(|&i| {
                let f = dets[i].frame as usize;
                let tp = hits[i].0 && !claimed[f];
                claimed[f] |= tp;
                tp
            })
            .collect();
        let report = frame_map(&dets, &gts, 0.5, 1);
        prop_assert!((report.map - ap_oracle(&flags, frames as usize)).abs() < 1e-12);
    }
}

#[test]
fn hand_computed_ap() {
    // ranks: TP FP TP FP, 3 gt; envelope 1 at r=1/3, 2/3 at r=2/3
    let ap = average_precision(&[true, false, true, false], 3);
    assert!((ap - (1.0 / 3.0 + 2.0 / 9.0)).abs() < 1e-12);
}
