//! The progressive Extend -> Refine -> Update loop run per clip.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StepError};
use crate::geometry::{decode, BBox, FrameRange, ImageBounds, Tubelet};
use crate::model::{class_slice, Detection, RefinementModel};
use crate::proposals::replicate_to_cuboids;
use crate::simulator::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtensionMode {
    /// Linear extrapolation of the boundary motion.
    Extrapolate,
    /// Decode the previous step's anticipation outputs.
    Anticipate,
    /// Replicate the boundary boxes (cuboid extension).
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepConfig {
    pub max_steps: usize,
    pub clip_len: usize,
    /// Per-step extension flags; entry `s - 1` controls step `s`. Step 1 never extends.
    pub extend_at: Vec<bool>,
    pub extension_mode: ExtensionMode,
    /// Per-step positive IoU thresholds, nondecreasing.
    pub tau: Vec<f64>,
    pub lambda: f64,
    pub gamma: f64,
    pub num_pos: usize,
    pub num_neg: usize,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            max_steps: 3,
            clip_len: 6,
            extend_at: vec![false, true, true],
            extension_mode: ExtensionMode::Extrapolate,
            tau: vec![0.3, 0.4, 0.5],
            lambda: 1.0,
            gamma: 0.5,
            num_pos: 8,
            num_neg: 8,
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StepError::InvalidConfig(m));
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1".into());
        }
        if self.clip_len == 0 {
            return bad("clip_len must be >= 1".into());
        }
        if self.extend_at.len() != self.max_steps {
            return bad(format!(
                "extend_at has {} entries for {} steps",
                self.extend_at.len(),
                self.max_steps
            ));
        }
        if self.extend_at[0] {
            return bad("step 1 starts from the initial proposals and cannot extend".into());
        }
        if self.extension_mode == ExtensionMode::Extrapolate
            && self.extend_at.iter().any(|&e| e)
            && self.clip_len < 2
        {
            return bad("extrapolation needs clip_len >= 2".into());
        }
        if self.tau.len() != self.max_steps {
            return bad(format!(
                "tau has {} entries for {} steps",
                self.tau.len(),
                self.max_steps
            ));
        }
        if self.tau.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("tau schedule {:?} must be nondecreasing", self.tau));
        }
        if self.tau.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("tau values must lie in [0, 1]".into());
        }
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return bad("lambda and gamma must be nonnegative".into());
        }
        Ok(())
    }

    /// Proposal length fed to step `s` (1-based).
    pub fn frames_at_step(&self, s: usize) -> usize {
        let ext = self.extend_at[..s].iter().filter(|&&e| e).count();
        self.clip_len * (1 + 2 * ext)
    }
}

/// One clip of one video, with access to the scene the features come from.
#[derive(Debug, Clone, Copy)]
pub struct ClipContext<'a> {
    pub scene: &'a Scene,
    pub clip_index: usize,
    pub clip_len: usize,
    pub max_steps: usize,
}

impl<'a> ClipContext<'a> {
    pub fn new(scene: &'a Scene, clip_index: usize, clip_len: usize, max_steps: usize) -> Self {
        ClipContext {
            scene,
            clip_index,
            clip_len,
            max_steps,
        }
    }

    /// The frames of clip `I_t`.
    pub fn target(&self) -> FrameRange {
        FrameRange::new((self.clip_index * self.clip_len) as i64, self.clip_len)
    }

    /// The `2 * S_max - 1` contiguous clips centred on the target.
    pub fn clips(&self) -> Vec<FrameRange> {
        let t = self.clip_index as i64;
        let s = self.max_steps as i64;
        (t - s + 1..=t + s - 1)
            .map(|i| FrameRange::new(i * self.clip_len as i64, self.clip_len))
            .collect()
    }

    pub fn video_len(&self) -> usize {
        self.scene.video_len()
    }

    pub fn bounds(&self) -> ImageBounds {
        self.scene.bounds()
    }

    pub fn in_video(&self, frame: i64) -> bool {
        frame >= 0 && frame < self.video_len() as i64
    }

    /// Number of whole clips in the video.
    pub fn num_clips(scene: &Scene, clip_len: usize) -> usize {
        scene.video_len() / clip_len
    }
}

/// Deterministic per-clip RNG stream from `(seed, video, clip)`.
pub fn clip_rng(seed: u64, video: usize, clip: usize) -> ChaCha8Rng {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        ^ (video as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (clip as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Replaces each proposal by its regression for the highest-scoring action class.
pub fn update_proposals(
    detections: &[Detection],
    proposals: &[Tubelet],
    bounds: ImageBounds,
) -> Result<Vec<Tubelet>> {
    if detections.len() != proposals.len() {
        return Err(StepError::Misaligned(format!(
            "{} detections for {} proposals",
            detections.len(),
            proposals.len()
        )));
    }
    detections
        .iter()
        .zip(proposals)
        .map(|(det, prop)| {
            det.validate(prop.len())?;
            let (class, _) = det.best_action();
            let boxes = det
                .class_offsets(class)
                .iter()
                .zip(&prop.boxes)
                .map(|(o, a)| decode(o, a, bounds))
                .collect();
            Ok(Tubelet {
                start_frame: prop.start_frame,
                boxes,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Linear extrapolation of `k` boxes past one end of `proposal`, using the
/// boundary box and the box `k - 1` frames inside it. Not clamped.
pub fn extrapolate(proposal: &Tubelet, direction: Direction, k: usize) -> Result<Tubelet> {
    let l = proposal.len();
    if k < 2 || l < k {
        return Err(StepError::ExtrapolationRange {
            clip_len: k,
            proposal_len: l,
        });
    }
    let (edge, inner) = match direction {
        Direction::Forward => (proposal.boxes[l - 1], proposal.boxes[l - k]),
        Direction::Backward => (proposal.boxes[0], proposal.boxes[k - 1]),
    };
    let (e, i) = (edge.to_array(), inner.to_array());
    let step = |j: usize| {
        let a = j as f64 / (k - 1) as f64;
        let mut c = [0.0; 4];
        for d in 0..4 {
            c[d] = e[d] + a * (e[d] - i[d]);
        }
        BBox::from_array_collapsed(c)
    };
    Ok(match direction {
        Direction::Forward => Tubelet {
            start_frame: proposal.end_frame(),
            boxes: (1..=k).map(step).collect(),
        },
        Direction::Backward => Tubelet {
            start_frame: proposal.start_frame - k as i64,
            boxes: (1..=k).rev().map(step).collect(),
        },
    })
}

/// Grows each proposal by one clip on both sides.
///
/// `previous` carries the inputs and detections of the step that produced
/// `proposals`; it is needed for anticipation. Frames outside the video take
/// the nearest in-video box, and every box is clamped to the frame.
pub fn temporal_extend(
    proposals: &[Tubelet],
    mode: ExtensionMode,
    previous: Option<(&[Tubelet], &[Detection])>,
    ctx: &ClipContext<'_>,
    step: usize,
) -> Result<Vec<Tubelet>> {
    let k = ctx.clip_len;
    let bounds = ctx.bounds();
    proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (before, after) = match mode {
                ExtensionMode::None => (
                    Tubelet::cuboid(p.boxes[0], FrameRange::new(p.start_frame - k as i64, k)),
                    Tubelet::cuboid(
                        *p.boxes.last().unwrap(),
                        FrameRange::new(p.end_frame(), k),
                    ),
                ),
                ExtensionMode::Extrapolate => (
                    extrapolate(p, Direction::Backward, k)?,
                    extrapolate(p, Direction::Forward, k)?,
                ),
                ExtensionMode::Anticipate => {
                    let (inputs, dets) =
                        previous.ok_or(StepError::MissingAnticipation { step })?;
                    let (anchor, det) = (&inputs[i], &dets[i]);
                    let ant = det
                        .anticipation
                        .as_ref()
                        .ok_or(StepError::MissingAnticipation { step })?;
                    let c = det.num_classes();
                    let (class, _) = det.best_action();
                    let l = anchor.len();
                    if l < k || anchor.range() != p.range() {
                        return Err(StepError::Misaligned(
                            "anticipation anchors do not match the proposal".into(),
                        ));
                    }
                    let dec = |offs: &[crate::geometry::Offset], anchors: &[BBox]| -> Vec<BBox> {
                        class_slice(offs, c, class)
                            .iter()
                            .zip(anchors)
                            .map(|(o, a)| crate::geometry::decode_unclamped(o, a))
                            .collect()
                    };
                    (
                        Tubelet {
                            start_frame: p.start_frame - k as i64,
                            boxes: dec(&ant.before, &anchor.boxes[..k]),
                        },
                        Tubelet {
                            start_frame: p.end_frame(),
                            boxes: dec(&ant.after, &anchor.boxes[l - k..]),
                        },
                    )
                }
            };
            let mut boxes = before.boxes;
            boxes.extend_from_slice(&p.boxes);
            boxes.extend(after.boxes);
            let start = before.start_frame;
            let mut out = Tubelet {
                start_frame: start,
                boxes,
            };
            pad_outside_video(&mut out, ctx.video_len());
            Ok(out.clamp(bounds))
        })
        .collect()
}

/// Replaces boxes on frames outside `[0, video_len)` by the nearest in-video box.
fn pad_outside_video(t: &mut Tubelet, video_len: usize) {
    let first_in = (-t.start_frame).max(0) as usize;
    let last_in = ((video_len as i64 - t.start_frame).min(t.len() as i64) - 1).max(-1);
    if last_in < first_in as i64 || first_in >= t.len() {
        return;
    }
    let last_in = last_in as usize;
    let (head, tail) = (t.boxes[first_in], t.boxes[last_in]);
    t.boxes[..first_in].iter_mut().for_each(|b| *b = head);
    t.boxes[last_in + 1..].iter_mut().for_each(|b| *b = tail);
}

/// Inputs, outputs and updated proposals of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub inputs: Vec<Tubelet>,
    pub detections: Vec<Detection>,
    pub updated: Vec<Tubelet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipResult {
    pub clip_index: usize,
    pub steps: Vec<StepRecord>,
}

impl ClipResult {
    pub fn last(&self) -> &StepRecord {
        self.steps.last().expect("at least one step")
    }

    pub fn final_detections(&self) -> &[Detection] {
        &self.last().detections
    }

    pub fn final_tubelets(&self) -> &[Tubelet] {
        &self.last().updated
    }

    /// Final class distributions paired with the final refined tubelets.
    pub fn clip_detections(&self) -> Vec<ClipDetection> {
        self.step_detections(self.steps.len())
    }

    /// Class distributions and refined tubelets after step `step` (1-based).
    pub fn step_detections(&self, step: usize) -> Vec<ClipDetection> {
        let record = &self.steps[step - 1];
        record
            .detections
            .iter()
            .zip(&record.updated)
            .enumerate()
            .map(|(i, (d, t))| ClipDetection {
                proposal_id: i,
                probs: d.probs.clone(),
                tubelet: t.clone(),
            })
            .collect()
    }
}

/// Output of the last step for one proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipDetection {
    pub proposal_id: usize,
    pub probs: Vec<f64>,
    pub tubelet: Tubelet,
}

pub fn detect_clip(
    ctx: &ClipContext<'_>,
    initial: &[Tubelet],
    config: &StepConfig,
    models: &[&dyn RefinementModel],
    rng: &mut ChaCha8Rng,
) -> Result<ClipResult> {
    config.validate()?;
    if initial.is_empty() {
        return Err(StepError::Empty("initial proposal set"));
    }
    if models.len() != config.max_steps {
        return Err(StepError::ShapeMismatch {
            what: "per-step models",
            expected: config.max_steps,
            actual: models.len(),
        });
    }
    let bounds = ctx.bounds();
    let mut steps: Vec<StepRecord> = Vec::with_capacity(config.max_steps);
    for s in 1..=config.max_steps {
        let inputs = match steps.last() {
            None => initial.to_vec(),
            Some(prev) if config.extend_at[s - 1] => temporal_extend(
                &prev.updated,
                config.extension_mode,
                Some((&prev.inputs, &prev.detections)),
                ctx,
                s - 1,
            )?,
            Some(prev) => prev.updated.clone(),
        };
        let detections = inputs
            .iter()
            .map(|p| models[s - 1].refine(p, ctx, rng))
            .collect::<Result<Vec<_>>>()?;
        let updated = update_proposals(&detections, &inputs, bounds)?;
        steps.push(StepRecord {
            step: s,
            inputs,
            detections,
            updated,
        });
    }
    Ok(ClipResult {
        clip_index: ctx.clip_index,
        steps,
    })
}

/// Runs [`detect_clip`] over every whole clip of a video.
pub fn detect_video(
    scene: &Scene,
    initial_boxes: &[BBox],
    config: &StepConfig,
    models: &[&dyn RefinementModel],
    seed: u64,
    video: usize,
) -> Result<Vec<ClipResult>> {
    (0..ClipContext::num_clips(scene, config.clip_len))
        .map(|clip| {
            let ctx = ClipContext::new(scene, clip, config.clip_len, config.max_steps);
            let initial = replicate_to_cuboids(initial_boxes, ctx.target())?;
            detect_clip(&ctx, &initial, config, models, &mut clip_rng(seed, video, clip))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{tubelet_overlap, Offset};
    use crate::model::{Anticipation, OracleModel};
    use crate::simulator::{GroundTruthTube, Motion, SceneSpec};

    fn centers(t: &Tubelet) -> Vec<f64> {
        t.boxes.iter().map(|b| b.cx()).collect()
    }

    fn line(start: i64, cxs: &[f64]) -> Tubelet {
        Tubelet::new(
            start,
            cxs.iter()
                .map(|&c| BBox::from_center(c, 50.0, 10.0, 10.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn extrapolate_linear_motion() {
        let p = line(0, &[0.0, 2.0, 4.0]);
        let fwd = extrapolate(&p, Direction::Forward, 3).unwrap();
        assert_eq!(fwd.start_frame, 3);
        assert_eq!(centers(&fwd), vec![6.0, 8.0, 10.0]);
        let bwd = extrapolate(&p, Direction::Backward, 3).unwrap();
        assert_eq!(bwd.start_frame, -3);
        assert_eq!(centers(&bwd), vec![-6.0, -4.0, -2.0]);
    }

    #[test]
    fn extrapolate_stationary_and_errors() {
        let p = line(4, &[7.0; 6]);
        let fwd = extrapolate(&p, Direction::Forward, 6).unwrap();
        assert!(fwd.boxes.iter().all(|b| *b == p.boxes[5]));
        assert!(extrapolate(&p, Direction::Forward, 1).is_err());
        assert!(extrapolate(&p, Direction::Forward, 7).is_err());
    }

    #[test]
    fn extrapolation_continues_per_frame_step() {
        // long tubelet, sub-tubelet of K=4 frames, step 1.5 px/frame
        let cx: Vec<f64> = (0..12).map(|i| 20.0 + 1.5 * i as f64).collect();
        let p = line(0, &cx);
        let fwd = extrapolate(&p, Direction::Forward, 4).unwrap();
        let got = centers(&fwd);
        for (j, c) in got.iter().enumerate() {
            // the span (K-1) * 1.5 is spread over K-1 frames
            assert!((c - (cx[11] + 1.5 * (j + 1) as f64)).abs() < 1e-12);
        }
    }

    fn offsets_det(probs: Vec<f64>, per_class: &[Offset], frames: usize) -> Detection {
        let mut offsets = Vec::new();
        for _ in 0..frames {
            offsets.extend_from_slice(per_class);
        }
        Detection {
            probs,
            offsets,
            anticipation: None,
        }
    }

    #[test]
    fn update_uses_best_action_class() {
        let bounds = ImageBounds::new(100.0, 100.0);
        let p = line(0, &[50.0, 50.0]);
        let a = Offset::new(0.5, 0.0, 0.0, 0.0);
        let b = Offset::new(-0.5, 0.0, 0.0, 0.0);
        let det = offsets_det(vec![0.1, 0.7, 0.2], &[a, b], 2);
        let out = update_proposals(&[det], &[p.clone()], bounds).unwrap();
        assert_eq!(out[0].boxes[0].cx(), 55.0);

        // background wins but is never decoded
        let det = offsets_det(vec![0.8, 0.05, 0.15], &[a, b], 2);
        let out = update_proposals(&[det], &[p.clone()], bounds).unwrap();
        assert_eq!(out[0].boxes[0].cx(), 45.0);

        // ties go to the lower class
        let det = offsets_det(vec![0.2, 0.4, 0.4], &[a, b], 2);
        let out = update_proposals(&[det], &[p.clone()], bounds).unwrap();
        assert_eq!(out[0].boxes[0].cx(), 55.0);

        let zero = offsets_det(vec![0.2, 0.4, 0.4], &[Offset::ZERO; 2], 2);
        assert_eq!(update_proposals(&[zero], &[p.clone()], bounds).unwrap()[0], p);
    }

    fn moving_scene(video_len: usize) -> Scene {
        let bounds = ImageBounds::new(320.0, 240.0);
        Scene {
            spec: SceneSpec {
                video_len,
                actors: (1, 1),
                ..SceneSpec::default()
            },
            tubes: vec![GroundTruthTube::from_motion(
                2,
                0,
                video_len,
                (60.0, 120.0),
                (40.0, 60.0),
                0.0,
                Motion::Linear { vx: 2.0, vy: 0.5 },
                bounds,
            )],
        }
    }

    #[test]
    fn extension_length_bookkeeping() {
        let scene = moving_scene(60);
        let ctx = ClipContext::new(&scene, 5, 6, 3);
        let config = StepConfig::default();
        let oracle = OracleModel::noisy(0.1);
        let models: Vec<&dyn RefinementModel> = vec![&oracle; 3];
        let init = replicate_to_cuboids(&[BBox::new(0.0, 0.0, 160.0, 120.0)], ctx.target()).unwrap();
        let res = detect_clip(&ctx, &init, &config, &models, &mut clip_rng(1, 0, 5)).unwrap();
        let lens: Vec<usize> = res.steps.iter().map(|s| s.inputs[0].len()).collect();
        assert_eq!(lens, vec![6, 18, 30]);
        for s in 1..=3 {
            assert_eq!(config.frames_at_step(s), lens[s - 1]);
        }
        assert_eq!(res.steps[2].inputs[0].start_frame, 30 - 12);
    }

    #[test]
    fn single_step_is_one_refine() {
        let scene = moving_scene(12);
        let ctx = ClipContext::new(&scene, 1, 6, 1);
        let config = StepConfig {
            max_steps: 1,
            extend_at: vec![false],
            tau: vec![0.5],
            ..StepConfig::default()
        };
        let oracle = OracleModel::exact();
        let init = replicate_to_cuboids(&[BBox::new(0.0, 0.0, 160.0, 120.0)], ctx.target()).unwrap();
        let res = detect_clip(&ctx, &init, &config, &[&oracle], &mut clip_rng(0, 0, 1)).unwrap();
        assert_eq!(res.steps.len(), 1);
        assert_eq!(res.steps[0].inputs, init);
    }

    #[test]
    fn exact_oracle_converges_in_two_steps() {
        let scene = moving_scene(36);
        let ctx = ClipContext::new(&scene, 2, 6, 2);
        let config = StepConfig {
            max_steps: 2,
            extend_at: vec![false, false],
            tau: vec![0.4, 0.5],
            ..StepConfig::default()
        };
        let oracle = OracleModel::exact();
        let init = replicate_to_cuboids(
            &[
                BBox::new(0.0, 0.0, 320.0, 240.0),
                BBox::new(0.0, 0.0, 160.0, 120.0),
            ],
            ctx.target(),
        )
        .unwrap();
        let res = detect_clip(&ctx, &init, &config, &[&oracle, &oracle], &mut clip_rng(0, 0, 2))
            .unwrap();
        let gt = &scene.tubes[0].tubelet;
        for p in &res.steps[1].inputs {
            assert!((tubelet_overlap(p, gt, ctx.target()).unwrap() - 1.0).abs() < 1e-9);
        }
        for p in res.final_tubelets() {
            assert!((tubelet_overlap(p, gt, ctx.target()).unwrap() - 1.0).abs() < 1e-6);
        }
        assert_eq!(res.final_tubelets().len(), 2);
    }

    #[test]
    fn none_mode_replicates_boundaries() {
        let scene = moving_scene(60);
        let ctx = ClipContext::new(&scene, 4, 6, 3);
        let p = line(24, &[40.0, 42.0, 44.0, 46.0, 48.0, 50.0]);
        let out = temporal_extend(&[p.clone()], ExtensionMode::None, None, &ctx, 1).unwrap();
        assert_eq!(out[0].len(), 18);
        assert_eq!(out[0].start_frame, 18);
        assert!(out[0].boxes[..6].iter().all(|b| *b == p.boxes[0]));
        assert!(out[0].boxes[12..].iter().all(|b| *b == p.boxes[5]));
    }

    #[test]
    fn anticipation_with_zero_residual_decodes_boundary_regression() {
        let scene = moving_scene(60);
        let ctx = ClipContext::new(&scene, 4, 2, 3);
        let anchor = line(8, &[40.0, 40.0, 40.0]);
        let shift = Offset::new(0.2, 0.0, 0.0, 0.0);
        // one action class: main regression shifts every frame by 2 px
        let det = Detection {
            probs: vec![0.1, 0.9],
            offsets: vec![shift; 3],
            anticipation: Some(Anticipation {
                before: vec![shift; 2],
                after: vec![shift; 2],
            }),
        };
        let updated = update_proposals(&[det.clone()], &[anchor.clone()], ctx.bounds()).unwrap();
        let out = temporal_extend(
            &updated,
            ExtensionMode::Anticipate,
            Some((&[anchor], &[det])),
            &ctx,
            1,
        )
        .unwrap();
        assert_eq!(out[0].len(), 7);
        assert!(out[0].boxes.iter().all(|b| (b.cx() - 42.0).abs() < 1e-12));
    }

    #[test]
    fn anticipation_requires_outputs() {
        let scene = moving_scene(60);
        let ctx = ClipContext::new(&scene, 4, 2, 3);
        let p = line(8, &[40.0, 40.0]);
        let err = temporal_extend(&[p], ExtensionMode::Anticipate, None, &ctx, 1).unwrap_err();
        assert!(matches!(err, StepError::MissingAnticipation { .. }));
    }

    #[test]
    fn video_boundary_is_padded_with_edge_box() {
        let scene = moving_scene(12);
        let ctx = ClipContext::new(&scene, 0, 6, 2);
        let p = line(0, &[40.0, 42.0, 44.0, 46.0, 48.0, 50.0]);
        let out = temporal_extend(&[p.clone()], ExtensionMode::Extrapolate, None, &ctx, 1).unwrap();
        assert_eq!(out[0].start_frame, -6);
        assert!(out[0].boxes[..6].iter().all(|b| *b == p.boxes[0]));
        // forward side stays inside the video and is extrapolated
        assert!((out[0].boxes[12].cx() - 52.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = StepConfig::default();
        let cases = [
            StepConfig {
                max_steps: 0,
                ..base.clone()
            },
            StepConfig {
                tau: vec![0.5, 0.4, 0.6],
                ..base.clone()
            },
            StepConfig {
                extend_at: vec![true, true, true],
                ..base.clone()
            },
            StepConfig {
                clip_len: 1,
                ..base.clone()
            },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
        base.validate().unwrap();
    }

    #[test]
    fn empty_proposals_rejected() {
        let scene = moving_scene(12);
        let ctx = ClipContext::new(&scene, 0, 6, 1);
        let config = StepConfig {
            max_steps: 1,
            extend_at: vec![false],
            tau: vec![0.5],
            ..StepConfig::default()
        };
        let oracle = OracleModel::exact();
        let err = detect_clip(&ctx, &[], &config, &[&oracle], &mut clip_rng(0, 0, 0)).unwrap_err();
        assert!(matches!(err, StepError::Empty(_)));
    }

    #[test]
    fn clip_set_is_centred() {
        let scene = moving_scene(60);
        let ctx = ClipContext::new(&scene, 3, 6, 3);
        let clips = ctx.clips();
        assert_eq!(clips.len(), 5);
        assert_eq!(clips[2], ctx.target());
        assert_eq!(clips[0].start, 6);
    }
}
