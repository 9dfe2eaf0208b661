//! Synthetic videos: moving actors with labelled ground-truth tubes, and the
//! feature vectors a trainable head sees in place of CNN features.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StepError};
use crate::geometry::{encode, shared_overlap, BBox, ImageBounds, Offset, Tubelet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryFamily {
    Stationary,
    Linear,
    Sinusoidal,
    PiecewiseLinear,
}

/// Centre trajectory of an actor, relative to its first-frame centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Motion {
    Stationary,
    Linear {
        vx: f64,
        vy: f64,
    },
    Sinusoidal {
        ax: f64,
        ay: f64,
        period: f64,
        phase: f64,
    },
    PiecewiseLinear {
        /// `(first frame, vx, vy)` per segment, sorted by frame; the first starts at 0.
        segments: Vec<(usize, f64, f64)>,
    },
}

impl Motion {
    /// Centre displacement after `t` frames.
    pub fn displacement(&self, t: usize) -> (f64, f64) {
        match self {
            Motion::Stationary => (0.0, 0.0),
            Motion::Linear { vx, vy } => (vx * t as f64, vy * t as f64),
            Motion::Sinusoidal {
                ax,
                ay,
                period,
                phase,
            } => {
                let w = std::f64::consts::TAU / period;
                let s = (w * t as f64 + phase).sin() - phase.sin();
                (ax * s, ay * s)
            }
            Motion::PiecewiseLinear { segments } => {
                let (mut dx, mut dy) = (0.0, 0.0);
                for (i, &(from, vx, vy)) in segments.iter().enumerate() {
                    if t <= from {
                        break;
                    }
                    let until = segments.get(i + 1).map_or(t, |s| s.0.min(t));
                    let n = (until - from) as f64;
                    dx += vx * n;
                    dy += vy * n;
                }
                (dx, dy)
            }
        }
    }
}

/// A labelled actor track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTube {
    /// Action class in `1..=C`.
    pub label: usize,
    pub tubelet: Tubelet,
    pub motion: Motion,
}

impl GroundTruthTube {
    /// Realizes a track from its first-frame centre and size. Sizes evolve as
    /// `size0 * exp(scale_rate * t)`; boxes are clamped to the frame.
    #[allow(clippy::too_many_arguments)]
    pub fn from_motion(
        label: usize,
        start_frame: i64,
        len: usize,
        center: (f64, f64),
        size: (f64, f64),
        scale_rate: f64,
        motion: Motion,
        bounds: ImageBounds,
    ) -> Self {
        let boxes = (0..len)
            .map(|t| {
                let (dx, dy) = motion.displacement(t);
                let g = (scale_rate * t as f64).exp();
                BBox::from_center(center.0 + dx, center.1 + dy, size.0 * g, size.1 * g)
                    .clamp(bounds)
            })
            .collect();
        GroundTruthTube {
            label,
            tubelet: Tubelet {
                start_frame,
                boxes,
            },
            motion,
        }
    }

    pub fn start_frame(&self) -> i64 {
        self.tubelet.start_frame
    }

    pub fn end_frame(&self) -> i64 {
        self.tubelet.end_frame()
    }

    pub fn box_at(&self, frame: i64) -> Option<&BBox> {
        self.tubelet.box_at(frame)
    }

    pub fn miut(&self) -> f64 {
        self.tubelet.miut()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: f64,
    pub height: f64,
    pub video_len: usize,
    /// Inclusive range of actors per video.
    pub actors: (usize, usize),
    pub num_classes: usize,
    pub families: Vec<TrajectoryFamily>,
    /// Peak centre speed in px/frame.
    pub speed: (f64, f64),
    /// Initial box side lengths in px.
    pub size: (f64, f64),
    /// Per-frame log size change.
    pub scale_rate: (f64, f64),
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 320.0,
            height: 240.0,
            video_len: 60,
            actors: (1, 2),
            num_classes: 4,
            families: vec![
                TrajectoryFamily::Stationary,
                TrajectoryFamily::Linear,
                TrajectoryFamily::Sinusoidal,
                TrajectoryFamily::PiecewiseLinear,
            ],
            speed: (0.5, 3.0),
            size: (40.0, 90.0),
            scale_rate: (-0.004, 0.004),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn bounds(&self) -> ImageBounds {
        ImageBounds::new(self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StepError::InvalidConfig(m));
        if !(self.width > 0.0 && self.height > 0.0) {
            return bad("scene frame size must be positive".into());
        }
        if self.video_len == 0 {
            return bad("video_len must be >= 1".into());
        }
        if self.actors.0 > self.actors.1 {
            return bad(format!("actor range {:?} is empty", self.actors));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.families.is_empty() && self.actors.1 > 0 {
            return bad("at least one trajectory family is required".into());
        }
        for (name, (lo, hi)) in [
            ("speed", self.speed),
            ("size", self.size),
            ("scale_rate", self.scale_rate),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return bad(format!("{name} range ({lo}, {hi}) is invalid"));
            }
        }
        if self.speed.0 < 0.0 || self.size.0 <= 0.0 {
            return bad("speed must be >= 0 and size > 0".into());
        }
        Ok(())
    }
}

/// A realized video: its spec and ground-truth tubes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub spec: SceneSpec,
    pub tubes: Vec<GroundTruthTube>,
}

impl Scene {
    pub fn bounds(&self) -> ImageBounds {
        self.spec.bounds()
    }

    pub fn video_len(&self) -> usize {
        self.spec.video_len
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn random_motion(
    rng: &mut ChaCha8Rng,
    family: TrajectoryFamily,
    speed: f64,
    len: usize,
) -> Motion {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ux, uy) = (angle.cos(), angle.sin());
    match family {
        TrajectoryFamily::Stationary => Motion::Stationary,
        TrajectoryFamily::Linear => Motion::Linear {
            vx: speed * ux,
            vy: speed * uy,
        },
        TrajectoryFamily::Sinusoidal => {
            let period = rng.gen_range(20.0..60.0);
            // peak speed of A sin(2 pi t / P) is 2 pi A / P
            let amp = speed * period / std::f64::consts::TAU;
            Motion::Sinusoidal {
                ax: amp * ux,
                ay: amp * uy,
                period,
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        }
        TrajectoryFamily::PiecewiseLinear => {
            let pieces = rng.gen_range(2..=3usize);
            let mut segments = vec![(0usize, speed * ux, speed * uy)];
            for i in 1..pieces {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                segments.push((i * len / pieces, speed * a.cos(), speed * a.sin()));
            }
            Motion::PiecewiseLinear { segments }
        }
    }
}

/// Deterministic scene realization from `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bounds = spec.bounds();
    let len = spec.video_len;
    let n = rng.gen_range(spec.actors.0..=spec.actors.1);
    let mut tubes = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(1..=spec.num_classes);
        let family = spec.families[rng.gen_range(0..spec.families.len())];
        let speed = uniform(&mut rng, spec.speed);
        let w0 = uniform(&mut rng, spec.size);
        let h0 = uniform(&mut rng, spec.size);
        let rate = uniform(&mut rng, spec.scale_rate);
        let motion = random_motion(&mut rng, family, speed, len);

        // place the start so the whole trajectory stays in frame when possible
        let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for t in 0..len {
            let (dx, dy) = motion.displacement(t);
            let g = (rate * t as f64).exp();
            lo_x = lo_x.min(dx - 0.5 * w0 * g);
            hi_x = hi_x.max(dx + 0.5 * w0 * g);
            lo_y = lo_y.min(dy - 0.5 * h0 * g);
            hi_y = hi_y.max(dy + 0.5 * h0 * g);
        }
        let place = |rng: &mut ChaCha8Rng, lo: f64, hi: f64, extent: f64| {
            let (a, b) = (-lo, extent - hi);
            if b > a {
                rng.gen_range(a..b)
            } else {
                0.5 * (a + b)
            }
        };
        let cx = place(&mut rng, lo_x, hi_x, spec.width);
        let cy = place(&mut rng, lo_y, hi_y, spec.height);
        tubes.push(GroundTruthTube::from_motion(
            label,
            0,
            len,
            (cx, cy),
            (w0, h0),
            rate,
            motion,
            bounds,
        ));
    }
    Ok(Scene {
        spec: spec.clone(),
        tubes,
    })
}

/// Index and overlap of the tube best matching `proposal` over the in-video
/// frames both cover. Ties go to the lower index; `None` without tubes.
pub fn best_overlap(
    proposal: &Tubelet,
    gt: &[GroundTruthTube],
    video_len: usize,
) -> Option<(usize, f64)> {
    let in_video = |f: i64| f >= 0 && f < video_len as i64;
    let mut best: Option<(usize, f64)> = None;
    for (i, tube) in gt.iter().enumerate() {
        let ov = shared_overlap(proposal, &tube.tubelet, in_video).unwrap_or(0.0);
        if best.map_or(true, |(_, b)| ov > b) {
            best = Some((i, ov));
        }
    }
    best
}

/// Offsets from each anchor to the tube box at `frames[k]`; `None` where the
/// frame lies outside the video or the tube, or a box is degenerate.
pub fn target_offsets(
    tube: &GroundTruthTube,
    anchors: &[BBox],
    frames: impl Iterator<Item = i64>,
    video_len: usize,
) -> Vec<Option<Offset>> {
    anchors
        .iter()
        .zip(frames)
        .map(|(a, f)| {
            if f < 0 || f >= video_len as i64 {
                return None;
            }
            tube.box_at(f).and_then(|g| encode(g, a).ok())
        })
        .collect()
}

/// Layout of a synthesized feature vector for a proposal of `frames` boxes.
///
/// ```text
/// [geometry(4) | overlap(1) | class block(C) | main offsets(4*frames) | before(4*K) | after(4*K)]
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub frames: usize,
    pub clip_len: usize,
    pub num_classes: usize,
}

impl FeatureLayout {
    pub const GEOMETRY: usize = 0;
    pub const OVERLAP: usize = 4;
    pub const CLASS_BLOCK: usize = 5;

    pub fn main_offsets(&self) -> usize {
        Self::CLASS_BLOCK + self.num_classes
    }

    pub fn before_offsets(&self) -> usize {
        self.main_offsets() + 4 * self.frames
    }

    pub fn after_offsets(&self) -> usize {
        self.before_offsets() + 4 * self.clip_len
    }

    pub fn dim(&self) -> usize {
        self.after_offsets() + 4 * self.clip_len
    }
}

/// Gain on the overlap and class-block features.
pub const RELATION_SCALE: f64 = 4.0;

/// Fixed-width real feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Builds the feature vector of `proposal`: normalized geometry, its relation
/// to the best-overlap tube (overlap, class indicator scaled by overlap,
/// per-frame offsets to that tube in the proposal and both adjacent clips),
/// plus uniform noise of half-width `noise`.
pub fn synth_features(
    proposal: &Tubelet,
    scene: &Scene,
    clip_len: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> FeatureVector {
    let layout = FeatureLayout {
        frames: proposal.len(),
        clip_len,
        num_classes: scene.spec.num_classes,
    };
    let video_len = scene.video_len();
    let mut x = vec![0.0; layout.dim()];

    let bounds = scene.bounds();
    let in_video: Vec<&BBox> = proposal
        .range()
        .frames()
        .zip(&proposal.boxes)
        .filter(|(f, _)| *f >= 0 && *f < video_len as i64)
        .map(|(_, b)| b)
        .collect();
    if !in_video.is_empty() {
        let n = in_video.len() as f64;
        x[0] = in_video.iter().map(|b| b.cx()).sum::<f64>() / n / bounds.width;
        x[1] = in_video.iter().map(|b| b.cy()).sum::<f64>() / n / bounds.height;
        x[2] = in_video.iter().map(|b| b.width()).sum::<f64>() / n / bounds.width;
        x[3] = in_video.iter().map(|b| b.height()).sum::<f64>() / n / bounds.height;
    }

    if let Some((gi, ov)) = best_overlap(proposal, &scene.tubes, video_len) {
        let tube = &scene.tubes[gi];
        x[FeatureLayout::OVERLAP] = RELATION_SCALE * ov;
        if (1..=layout.num_classes).contains(&tube.label) {
            x[FeatureLayout::CLASS_BLOCK + tube.label - 1] = RELATION_SCALE * ov;
        }
        let l = proposal.len();
        let k = clip_len.min(l);
        let mut write = |base: usize, offs: Vec<Option<Offset>>| {
            for (j, o) in offs.into_iter().enumerate() {
                if let Some(o) = o {
                    x[base + 4 * j..base + 4 * j + 4].copy_from_slice(&o.to_array());
                }
            }
        };
        write(
            layout.main_offsets(),
            target_offsets(tube, &proposal.boxes, proposal.range().frames(), video_len),
        );
        let s = proposal.start_frame;
        write(
            layout.before_offsets(),
            target_offsets(
                tube,
                &proposal.boxes[..k],
                (s - clip_len as i64)..s,
                video_len,
            ),
        );
        let e = proposal.end_frame();
        write(
            layout.after_offsets(),
            target_offsets(
                tube,
                &proposal.boxes[l - k..],
                e..e + clip_len as i64,
                video_len,
            ),
        );
    }

    if noise > 0.0 {
        for v in &mut x {
            *v += rng.gen_range(-noise..=noise);
        }
    }
    FeatureVector(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FrameRange;

    #[test]
    fn stationary_actor_has_unit_miut() {
        let t = GroundTruthTube::from_motion(
            1,
            0,
            30,
            (100.0, 100.0),
            (20.0, 20.0),
            0.0,
            Motion::Stationary,
            ImageBounds::new(400.0, 400.0),
        );
        assert_eq!(t.miut(), 1.0);
    }

    #[test]
    fn linear_actor_closed_form() {
        let t = GroundTruthTube::from_motion(
            2,
            0,
            30,
            (100.0, 200.0),
            (20.0, 20.0),
            0.0,
            Motion::Linear { vx: 2.0, vy: 0.0 },
            ImageBounds::new(400.0, 400.0),
        );
        let first = t.tubelet.boxes[0];
        let last = t.tubelet.boxes[29];
        assert!((last.cx() - first.cx() - 58.0).abs() < 1e-12);
        // centre frame 15 sits 30 px from frame 0 with a 20 px box: no overlap
        assert_eq!(t.miut(), 0.0);
        // over 6 frames the centre (index 3) is at most 6 px away: IoU 14/26
        let short = GroundTruthTube::from_motion(
            2,
            0,
            6,
            (100.0, 200.0),
            (20.0, 20.0),
            0.0,
            Motion::Linear { vx: 2.0, vy: 0.0 },
            ImageBounds::new(400.0, 400.0),
        );
        assert!((short.miut() - 14.0 / 26.0).abs() < 1e-12);
    }

    #[test]
    fn piecewise_displacement() {
        let m = Motion::PiecewiseLinear {
            segments: vec![(0, 1.0, 0.0), (3, 0.0, 2.0)],
        };
        assert_eq!(m.displacement(0), (0.0, 0.0));
        assert_eq!(m.displacement(3), (3.0, 0.0));
        assert_eq!(m.displacement(5), (3.0, 4.0));
    }

    #[test]
    fn scenes_are_deterministic() {
        let spec = SceneSpec {
            seed: 42,
            ..SceneSpec::default()
        };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
        let other = generate_scene(&SceneSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.tubes, other.tubes);
    }

    #[test]
    fn scene_boxes_stay_in_frame() {
        for seed in 0..50 {
            let spec = SceneSpec {
                seed,
                ..SceneSpec::default()
            };
            let scene = generate_scene(&spec).unwrap();
            for t in &scene.tubes {
                assert_eq!(t.tubelet.len(), spec.video_len);
                assert!((1..=spec.num_classes).contains(&t.label));
                for b in &t.tubelet.boxes {
                    assert!(b.is_inside(spec.bounds()));
                    assert!(!b.is_degenerate());
                }
            }
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = SceneSpec {
            actors: (3, 1),
            ..SceneSpec::default()
        };
        assert!(generate_scene(&spec).is_err());
    }

    fn one_actor_scene() -> Scene {
        let spec = SceneSpec {
            actors: (1, 1),
            seed: 5,
            ..SceneSpec::default()
        };
        generate_scene(&spec).unwrap()
    }

    #[test]
    fn features_are_functional_when_noise_free() {
        let scene = one_actor_scene();
        let p = Tubelet::cuboid(BBox::new(10.0, 10.0, 170.0, 130.0), FrameRange::new(6, 6));
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = synth_features(&p, &scene, 6, 0.0, &mut r1);
        let b = synth_features(&p, &scene, 6, 0.0, &mut r2);
        assert_eq!(a, b);
        let layout = FeatureLayout {
            frames: 6,
            clip_len: 6,
            num_classes: 4,
        };
        assert_eq!(a.len(), layout.dim());

        let mut r3 = ChaCha8Rng::seed_from_u64(1);
        let noisy = synth_features(&p, &scene, 6, 0.1, &mut r3);
        assert!(noisy
            .as_slice()
            .iter()
            .zip(a.as_slice())
            .all(|(u, v)| (u - v).abs() <= 0.1 + 1e-12));
    }

    #[test]
    fn features_encode_offsets_to_best_tube() {
        let scene = one_actor_scene();
        let tube = &scene.tubes[0];
        let p = Tubelet::cuboid(BBox::new(10.0, 10.0, 170.0, 130.0), FrameRange::new(6, 6));
        let x = synth_features(&p, &scene, 6, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        let layout = FeatureLayout {
            frames: 6,
            clip_len: 6,
            num_classes: 4,
        };
        let o = encode(tube.box_at(8).unwrap(), &p.boxes[2]).unwrap();
        let base = layout.main_offsets() + 8;
        assert_eq!(&x.0[base..base + 4], &o.to_array());
        // the frame after the proposal's end anchors on its last box
        let o = encode(tube.box_at(12).unwrap(), &p.boxes[5]).unwrap();
        let base = layout.after_offsets();
        assert_eq!(&x.0[base..base + 4], &o.to_array());
        let ov = x.0[FeatureLayout::OVERLAP];
        assert_eq!(x.0[FeatureLayout::CLASS_BLOCK + tube.label - 1], ov);
    }

    #[test]
    fn padding_frames_have_zero_offsets() {
        let scene = one_actor_scene();
        let p = Tubelet::cuboid(BBox::new(10.0, 10.0, 170.0, 130.0), FrameRange::new(0, 6));
        let x = synth_features(&p, &scene, 6, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        let layout = FeatureLayout {
            frames: 6,
            clip_len: 6,
            num_classes: 4,
        };
        assert!(x.0[layout.before_offsets()..layout.after_offsets()]
            .iter()
            .all(|&v| v == 0.0));
    }
}
