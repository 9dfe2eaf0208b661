//! Frame- and video-level average precision, mean fusion of detection sets,
//! and per-step proposal quality histograms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::ClipDetection;
use crate::error::{Result, StepError};
use crate::geometry::{box_iou, shared_overlap, tubelet_overlap, BBox, FrameRange, Tubelet};
use crate::simulator::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetection {
    pub video: usize,
    pub frame: i64,
    pub label: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGroundTruth {
    pub video: usize,
    pub frame: i64,
    pub label: usize,
    pub bbox: BBox,
}

/// Per-class AP; `None` for classes without ground truth, which are left out
/// of the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub per_class: BTreeMap<usize, Option<f64>>,
    pub map: f64,
}

impl ApReport {
    fn from_per_class(per_class: BTreeMap<usize, Option<f64>>) -> Self {
        let aps: Vec<f64> = per_class.values().flatten().copied().collect();
        let map = if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        };
        ApReport { per_class, map }
    }
}

/// All-points interpolated AP of a ranked list of true/false positive flags.
pub fn average_precision(ranked_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (i, &hit) in ranked_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // monotone precision envelope from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// Greedy matching in score order: each detection takes the unmatched
/// ground truth with the highest overlap at or above `threshold`.
fn ranked_matches<D, G>(
    dets: &[&D],
    gts: &[&G],
    score: impl Fn(&D) -> f64,
    overlap: impl Fn(&D, &G) -> Option<f64>,
    threshold: f64,
) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| score(dets[b]).total_cmp(&score(dets[a])));
    let mut matched = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if matched[g] {
                    continue;
                }
                if let Some(ov) = overlap(dets[i], gt) {
                    if ov >= threshold && best.map_or(true, |(_, b)| ov > b) {
                        best = Some((g, ov));
                    }
                }
            }
            match best {
                Some((g, _)) => {
                    matched[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

pub fn frame_map(
    dets: &[FrameDetection],
    gts: &[FrameGroundTruth],
    threshold: f64,
    num_classes: usize,
) -> ApReport {
    let mut per_class = BTreeMap::new();
    for c in 1..=num_classes {
        let cd: Vec<&FrameDetection> = dets.iter().filter(|d| d.label == c).collect();
        let cg: Vec<&FrameGroundTruth> = gts.iter().filter(|g| g.label == c).collect();
        if cg.is_empty() {
            per_class.insert(c, None);
            continue;
        }
        let flags = ranked_matches(
            &cd,
            &cg,
            |d| d.score,
            |d, g| (d.video == g.video && d.frame == g.frame).then(|| box_iou(&d.bbox, &g.bbox)),
            threshold,
        );
        per_class.insert(c, Some(average_precision(&flags, cg.len())));
    }
    ApReport::from_per_class(per_class)
}

/// A scored video-level tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoDetection {
    pub video: usize,
    pub label: usize,
    pub score: f64,
    pub tubelet: Tubelet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoGroundTruth {
    pub video: usize,
    pub label: usize,
    pub tubelet: Tubelet,
}

/// Temporal IoU of the frame spans times the mean spatial IoU on shared frames.
pub fn tube_iou(a: &Tubelet, b: &Tubelet) -> f64 {
    let inter = (a.end_frame().min(b.end_frame()) - a.start_frame.max(b.start_frame)).max(0);
    if inter == 0 {
        return 0.0;
    }
    let union = a.end_frame().max(b.end_frame()) - a.start_frame.min(b.start_frame);
    let temporal = inter as f64 / union as f64;
    temporal * shared_overlap(a, b, |_| true).unwrap_or(0.0)
}

pub fn video_map(
    dets: &[VideoDetection],
    gts: &[VideoGroundTruth],
    threshold: f64,
    num_classes: usize,
) -> ApReport {
    let mut per_class = BTreeMap::new();
    for c in 1..=num_classes {
        let cd: Vec<&VideoDetection> = dets.iter().filter(|d| d.label == c).collect();
        let cg: Vec<&VideoGroundTruth> = gts.iter().filter(|g| g.label == c).collect();
        if cg.is_empty() {
            per_class.insert(c, None);
            continue;
        }
        let flags = ranked_matches(
            &cd,
            &cg,
            |d| d.score,
            |d, g| (d.video == g.video).then(|| tube_iou(&d.tubelet, &g.tubelet)),
            threshold,
        );
        per_class.insert(c, Some(average_precision(&flags, cg.len())));
    }
    ApReport::from_per_class(per_class)
}

/// Averages index-aligned detection sets: class distributions and boxes.
pub fn mean_fuse(a: &[ClipDetection], b: &[ClipDetection]) -> Result<Vec<ClipDetection>> {
    if a.len() != b.len() {
        return Err(StepError::Misaligned(format!(
            "{} vs {} detections",
            a.len(),
            b.len()
        )));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.probs.len() != y.probs.len() || x.tubelet.range() != y.tubelet.range() {
                return Err(StepError::Misaligned(format!(
                    "proposal {} differs in classes or frames",
                    x.proposal_id
                )));
            }
            let probs = x.probs.iter().zip(&y.probs).map(|(p, q)| 0.5 * (p + q)).collect();
            let boxes = x
                .tubelet
                .boxes
                .iter()
                .zip(&y.tubelet.boxes)
                .map(|(u, v)| {
                    BBox::new(
                        0.5 * (u.x1 + v.x1),
                        0.5 * (u.y1 + v.y1),
                        0.5 * (u.x2 + v.x2),
                        0.5 * (u.y2 + v.y2),
                    )
                })
                .collect();
            Ok(ClipDetection {
                proposal_id: x.proposal_id,
                probs,
                tubelet: Tubelet {
                    start_frame: x.tubelet.start_frame,
                    boxes,
                },
            })
        })
        .collect()
}

/// Greedy non-maximum suppression by tubelet overlap on `range`; returns the
/// kept indices in descending score order.
pub fn tubelet_nms(tubelets: &[&Tubelet], scores: &[f64], range: FrameRange, threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tubelets.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            tubelet_overlap(tubelets[i], tubelets[k], range).map_or(false, |ov| ov > threshold)
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Per-frame detections of one clip: every class of every proposal, scored by
/// its class probability, optionally thinned by per-class NMS.
pub fn clip_frame_detections(
    video: usize,
    clip_range: FrameRange,
    dets: &[ClipDetection],
    nms_threshold: Option<f64>,
) -> Vec<FrameDetection> {
    let mut out = Vec::new();
    let Some(num_classes) = dets.first().map(|d| d.probs.len() - 1) else {
        return out;
    };
    let tubes: Vec<&Tubelet> = dets.iter().map(|d| &d.tubelet).collect();
    for c in 1..=num_classes {
        let scores: Vec<f64> = dets.iter().map(|d| d.probs[c]).collect();
        let keep = match nms_threshold {
            Some(t) => tubelet_nms(&tubes, &scores, clip_range, t),
            None => (0..dets.len()).collect(),
        };
        for i in keep {
            for f in clip_range.frames() {
                if let Some(b) = dets[i].tubelet.box_at(f) {
                    out.push(FrameDetection {
                        video,
                        frame: f,
                        label: c,
                        score: scores[i],
                        bbox: *b,
                    });
                }
            }
        }
    }
    out
}

/// Ground-truth boxes of a scene on frames `[0, frames)`.
pub fn scene_frame_ground_truth(video: usize, scene: &Scene, frames: usize) -> Vec<FrameGroundTruth> {
    let mut out = Vec::new();
    for t in &scene.tubes {
        for f in 0..frames as i64 {
            if let Some(b) = t.box_at(f) {
                out.push(FrameGroundTruth {
                    video,
                    frame: f,
                    label: t.label,
                    bbox: *b,
                });
            }
        }
    }
    out
}

/// Best ground-truth overlap on `range` for each proposal (0 without ground truth).
pub fn best_gt_overlaps(proposals: &[Tubelet], scene: &Scene, range: FrameRange) -> Vec<f64> {
    proposals
        .iter()
        .map(|p| {
            scene
                .tubes
                .iter()
                .map(|g| tubelet_overlap(p, &g.tubelet, range).unwrap_or(0.0))
                .fold(0.0, f64::max)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
    pub median: f64,
    pub mean: f64,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn histogram(values: &[f64], bin_width: f64) -> Result<Histogram> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(StepError::InvalidConfig(format!(
            "bin width must lie in (0, 1], got {bin_width}"
        )));
    }
    let bins = (1.0 / bin_width).ceil() as usize;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = ((v / bin_width).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = match n {
        0 => 0.0,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    let mean = if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 };
    Ok(Histogram {
        bin_width,
        counts,
        median,
        mean,
    })
}

/// One histogram of best-gt overlaps per step.
pub fn iou_histogram(per_step: &[Vec<f64>], bin_width: f64) -> Result<Vec<Histogram>> {
    per_step.iter().map(|v| histogram(v, bin_width)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(frame: i64, label: usize, score: f64, x: f64) -> FrameDetection {
        FrameDetection {
            video: 0,
            frame,
            label,
            score,
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
        }
    }

    fn fg(frame: i64, label: usize, x: f64) -> FrameGroundTruth {
        FrameGroundTruth {
            video: 0,
            frame,
            label,
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
        }
    }

    #[test]
    fn perfect_detection() {
        let r = frame_map(&[fd(0, 1, 0.9, 0.0)], &[fg(0, 1, 0.0)], 0.5, 2);
        assert_eq!(r.per_class[&1], Some(1.0));
        assert_eq!(r.per_class[&2], None);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn wrong_then_right_is_half() {
        let r = frame_map(
            &[fd(0, 1, 0.9, 50.0), fd(0, 1, 0.5, 0.0)],
            &[fg(0, 1, 0.0)],
            0.5,
            1,
        );
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn duplicates_count_once() {
        let r = frame_map(
            &[fd(0, 1, 0.9, 0.0), fd(0, 1, 0.8, 0.0), fd(0, 1, 0.7, 0.0)],
            &[fg(0, 1, 0.0), fg(1, 1, 0.0)],
            0.5,
            1,
        );
        // TP, FP, FP with two gts: precision 1 at recall 1/2
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn frames_and_videos_must_match() {
        let mut other_video = fd(0, 1, 0.9, 0.0);
        other_video.video = 1;
        let r = frame_map(&[fd(1, 1, 0.9, 0.0), other_video], &[fg(0, 1, 0.0)], 0.5, 1);
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn tube_iou_product_form() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let gt = Tubelet::cuboid(b, FrameRange::new(0, 20));
        assert_eq!(tube_iou(&gt, &gt), 1.0);
        let half = Tubelet::cuboid(b, FrameRange::new(5, 10));
        assert_eq!(tube_iou(&half, &gt), 0.5);
        let apart = Tubelet::cuboid(b, FrameRange::new(30, 10));
        assert_eq!(tube_iou(&apart, &gt), 0.0);
    }

    #[test]
    fn identical_tube_has_unit_video_ap() {
        let t = Tubelet::cuboid(BBox::new(0.0, 0.0, 10.0, 10.0), FrameRange::new(0, 12));
        let r = video_map(
            &[VideoDetection {
                video: 3,
                label: 2,
                score: 0.4,
                tubelet: t.clone(),
            }],
            &[VideoGroundTruth {
                video: 3,
                label: 2,
                tubelet: t,
            }],
            0.5,
            2,
        );
        assert_eq!(r.map, 1.0);
    }

    fn cd(probs: Vec<f64>, x: f64) -> ClipDetection {
        ClipDetection {
            proposal_id: 0,
            probs,
            tubelet: Tubelet::cuboid(BBox::new(x, 0.0, x + 10.0, 10.0), FrameRange::new(0, 2)),
        }
    }

    #[test]
    fn mean_fusion() {
        let a = vec![cd(vec![0.8, 0.2], 0.0)];
        assert_eq!(mean_fuse(&a, &a).unwrap(), a);
        let b = vec![cd(vec![0.4, 0.6], 4.0)];
        let f = mean_fuse(&a, &b).unwrap();
        assert!((f[0].probs[0] - 0.6).abs() < 1e-12);
        assert!((f[0].probs[1] - 0.4).abs() < 1e-12);
        assert!((f[0].probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(f[0].tubelet.boxes[0].x1, 2.0);
        assert!(mean_fuse(&a, &[]).is_err());
        assert!(mean_fuse(&a, &[cd(vec![0.1, 0.2, 0.7], 0.0)]).is_err());
    }

    #[test]
    fn histogram_mass_and_top_bin() {
        let h = histogram(&[1.0, 1.0, 0.95], 0.1).unwrap();
        assert_eq!(h.total(), 3);
        assert_eq!(h.counts[9], 3);
        assert_eq!(h.median, 1.0);
        let h = histogram(&[0.0, 0.1, 0.26, 0.4], 0.25).unwrap();
        assert_eq!(h.counts, vec![2, 2, 0, 0]);
        assert!((h.median - 0.18).abs() < 1e-12);
        assert!(histogram(&[0.5], 0.0).is_err());
    }

    #[test]
    fn nms_keeps_best_of_overlapping() {
        let r = FrameRange::new(0, 2);
        let a = Tubelet::cuboid(BBox::new(0.0, 0.0, 10.0, 10.0), r);
        let b = Tubelet::cuboid(BBox::new(1.0, 0.0, 11.0, 10.0), r);
        let c = Tubelet::cuboid(BBox::new(50.0, 0.0, 60.0, 10.0), r);
        assert_eq!(tubelet_nms(&[&a, &b, &c], &[0.5, 0.9, 0.1], r, 0.5), vec![1, 2]);
    }

    #[test]
    fn ap_bounded_and_threshold_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let gts: Vec<_> = (0..4).map(|f| fg(f, 1, rng.gen_range(0.0..20.0))).collect();
            let dets: Vec<_> = (0..10)
                .map(|_| fd(rng.gen_range(0..4), 1, rng.gen(), rng.gen_range(0.0..20.0)))
                .collect();
            let mut prev = f64::INFINITY;
            for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let ap = frame_map(&dets, &gts, t, 1).map;
                assert!((0.0..=1.0).contains(&ap));
                assert!(ap <= prev + 1e-12);
                prev = ap;
            }
        }
    }
}
