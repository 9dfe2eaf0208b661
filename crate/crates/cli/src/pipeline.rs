//! The experiment layer: scenes, detection, linking, training and evaluation
//! over a configured set of synthetic videos.

use std::collections::BTreeMap;

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use step_core::engine::{detect_video, ClipContext, ClipDetection, ClipResult, StepConfig};
use step_core::geometry::{BBox, FrameRange, Tubelet};
use step_core::linking::{link_tubes, LinkCandidate};
use step_core::metrics::{
    best_gt_overlaps, clip_frame_detections, frame_map, iou_histogram, scene_frame_ground_truth,
    tubelet_nms, video_map, ApReport, Histogram, VideoDetection, VideoGroundTruth,
};
use step_core::model::{Checkpoint, LinearHead, LinearModel, OracleModel, RefinementModel};
use step_core::proposals::{generate_pyramid, replicate_to_cuboids};
use step_core::simulator::{generate_scene, Scene, SceneSpec};
use step_core::training::{init_heads, joint_train_pass, TrainReport, TrainSettings};

use crate::config::{ExperimentConfig, ModelKind};

pub const SCENES_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenesFile {
    pub version: u32,
    pub videos: Vec<Scene>,
}

/// One box of a serialized tubelet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameBox {
    pub frame: i64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

pub fn to_frame_boxes(t: &Tubelet) -> Vec<FrameBox> {
    t.range()
        .frames()
        .zip(&t.boxes)
        .map(|(frame, b)| FrameBox {
            frame,
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        })
        .collect()
}

pub fn from_frame_boxes(boxes: &[FrameBox]) -> anyhow::Result<Tubelet> {
    let Some(first) = boxes.first() else {
        bail!("tubelet has no boxes");
    };
    for (i, b) in boxes.iter().enumerate() {
        if b.frame != first.frame + i as i64 {
            bail!("tubelet frames are not contiguous at frame {}", b.frame);
        }
    }
    Ok(Tubelet {
        start_frame: first.frame,
        boxes: boxes.iter().map(|b| BBox::new(b.x1, b.y1, b.x2, b.y2)).collect(),
    })
}

/// One line of `detections.jsonl`: a proposal's output after `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub video: usize,
    pub clip: usize,
    pub proposal_id: usize,
    pub probs: Vec<f64>,
    pub tubelet: Vec<FrameBox>,
    pub step: usize,
}

/// One line of `tubes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeRecord {
    pub video: usize,
    pub class: usize,
    pub score: f64,
    pub frames: Vec<FrameBox>,
}

/// Video `i` uses scene seed `spec.seed + i`.
pub fn make_scenes(spec: &SceneSpec, num_videos: usize) -> anyhow::Result<Vec<Scene>> {
    (0..num_videos)
        .map(|i| {
            let s = SceneSpec {
                seed: spec.seed.wrapping_add(i as u64),
                ..spec.clone()
            };
            Ok(generate_scene(&s)?)
        })
        .collect()
}

pub fn initial_boxes(cfg: &ExperimentConfig) -> anyhow::Result<Vec<BBox>> {
    let spec = cfg.proposals.pyramid(cfg.scene.width, cfg.scene.height);
    Ok(generate_pyramid(&spec)?)
}

/// Per-step refinement models.
pub enum Models {
    Oracle(Vec<OracleModel>),
    Linear(Vec<LinearModel>),
}

impl Models {
    pub fn oracle(cfg: &ExperimentConfig) -> Self {
        Models::Oracle(vec![cfg.model.oracle(cfg.step.extension_mode); cfg.step.max_steps])
    }

    pub fn linear(heads: Vec<LinearHead>, feature_noise: f64) -> Self {
        Models::Linear(
            heads
                .into_iter()
                .map(|head| LinearModel {
                    head,
                    feature_noise,
                })
                .collect(),
        )
    }

    /// The model kind chosen by the configuration; linear heads come from
    /// `checkpoint`.
    pub fn from_config(cfg: &ExperimentConfig, checkpoint: Option<&Checkpoint>) -> anyhow::Result<Self> {
        match cfg.model.kind {
            ModelKind::Oracle => Ok(Models::oracle(cfg)),
            ModelKind::Linear => {
                let ck = checkpoint.context("model.kind = \"linear\" needs a checkpoint")?;
                check_heads(&ck.heads, &cfg.step, cfg.scene.num_classes)?;
                Ok(Models::linear(ck.heads.clone(), cfg.model.feature_noise))
            }
        }
    }

    pub fn refs(&self) -> Vec<&dyn RefinementModel> {
        match self {
            Models::Oracle(v) => v.iter().map(|m| m as &dyn RefinementModel).collect(),
            Models::Linear(v) => v.iter().map(|m| m as &dyn RefinementModel).collect(),
        }
    }
}

/// Checks that checkpoint heads match the step schedule and class count.
pub fn check_heads(heads: &[LinearHead], step: &StepConfig, num_classes: usize) -> anyhow::Result<()> {
    let expected = init_heads(step, num_classes);
    if heads.len() != expected.len() {
        bail!(
            "checkpoint has {} heads, the step schedule needs {}",
            heads.len(),
            expected.len()
        );
    }
    for (s, (h, e)) in heads.iter().zip(&expected).enumerate() {
        if h.layout != e.layout || h.before.is_some() != e.before.is_some() {
            bail!("checkpoint head {} does not match the configured step {}", s, s + 1);
        }
    }
    Ok(())
}

/// Runs every video; results are in video order regardless of scheduling.
pub fn detect_all(
    scenes: &[Scene],
    boxes: &[BBox],
    step: &StepConfig,
    models: &Models,
    seed: u64,
) -> anyhow::Result<Vec<Vec<ClipResult>>> {
    let refs = models.refs();
    scenes
        .par_iter()
        .enumerate()
        .map(|(v, scene)| Ok(detect_video(scene, boxes, step, &refs, seed, v)?))
        .collect()
}

/// Records of every step (or only the last) of one video's clips.
pub fn detection_records(video: usize, clips: &[ClipResult], all_steps: bool) -> Vec<DetectionRecord> {
    let mut out = Vec::new();
    for clip in clips {
        let n = clip.steps.len();
        let first = if all_steps { 1 } else { n };
        for step in first..=n {
            for d in clip.step_detections(step) {
                out.push(DetectionRecord {
                    video,
                    clip: clip.clip_index,
                    proposal_id: d.proposal_id,
                    probs: d.probs,
                    tubelet: to_frame_boxes(&d.tubelet),
                    step,
                });
            }
        }
    }
    out
}

/// Detections grouped as `step -> video -> clip -> proposals (by id)`.
pub type Grouped = BTreeMap<usize, BTreeMap<usize, BTreeMap<usize, Vec<ClipDetection>>>>;

pub fn group_records(records: &[DetectionRecord]) -> anyhow::Result<Grouped> {
    let mut g: Grouped = BTreeMap::new();
    for r in records {
        if r.probs.len() < 2 {
            bail!("record (video {}, clip {}) has fewer than two class probabilities", r.video, r.clip);
        }
        g.entry(r.step)
            .or_default()
            .entry(r.video)
            .or_default()
            .entry(r.clip)
            .or_default()
            .push(ClipDetection {
                proposal_id: r.proposal_id,
                probs: r.probs.clone(),
                tubelet: from_frame_boxes(&r.tubelet)?,
            });
    }
    for videos in g.values_mut() {
        for clips in videos.values_mut() {
            for dets in clips.values_mut() {
                dets.sort_by_key(|d| d.proposal_id);
            }
        }
    }
    Ok(g)
}

pub fn clip_range(clip: usize, clip_len: usize) -> FrameRange {
    FrameRange::new((clip * clip_len) as i64, clip_len)
}

/// Frames evaluated for a scene: its whole clips.
pub fn evaluated_frames(scene: &Scene, clip_len: usize) -> usize {
    ClipContext::num_clips(scene, clip_len) * clip_len
}

/// Links one video's final-step detections into trimmed, class-labelled tubes.
pub fn link_video(
    video: usize,
    clips: &BTreeMap<usize, Vec<ClipDetection>>,
    clip_len: usize,
    cfg: &ExperimentConfig,
) -> Vec<TubeRecord> {
    let num_classes = clips
        .values()
        .flat_map(|d| d.first())
        .map(|d| d.probs.len() - 1)
        .next()
        .unwrap_or(0);
    let mut out = Vec::new();
    for c in 1..=num_classes {
        let mut candidates = Vec::new();
        for (&clip, dets) in clips {
            let range = clip_range(clip, clip_len);
            let tubes: Vec<&Tubelet> = dets.iter().map(|d| &d.tubelet).collect();
            let scores: Vec<f64> = dets.iter().map(|d| d.probs[c]).collect();
            let keep = match cfg.eval.nms_threshold {
                Some(t) => tubelet_nms(&tubes, &scores, range, t),
                None => (0..dets.len()).collect(),
            };
            for i in keep {
                candidates.push(LinkCandidate {
                    clip,
                    range,
                    tubelet: dets[i].tubelet.clone(),
                    score: scores[i],
                });
            }
        }
        for mut tube in link_tubes(&candidates, c, cfg.eval.link_threshold) {
            tube.trim(cfg.eval.trim_penalty);
            out.push(TubeRecord {
                video,
                class: c,
                score: tube.score(),
                frames: to_frame_boxes(&tube.kept_tubelet()),
            });
        }
    }
    out
}

pub fn link_all(grouped: &Grouped, clip_len: usize, cfg: &ExperimentConfig) -> Vec<TubeRecord> {
    let Some(last) = grouped.values().next_back() else {
        return Vec::new();
    };
    last.iter()
        .flat_map(|(&video, clips)| link_video(video, clips, clip_len, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEval {
    pub step: usize,
    pub frame_map: ApReport,
    /// Mean best-gt overlap of the step's refined proposals on the target clip.
    pub mean_iou: f64,
    /// Best-gt overlaps of the step's input proposals on the target clip.
    pub input_histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEval {
    pub threshold: f64,
    pub report: ApReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiutRow {
    pub video: usize,
    pub tube: usize,
    pub label: usize,
    pub length: usize,
    pub miut: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub iou_threshold: f64,
    pub steps: Vec<StepEval>,
    /// Frame-mAP of the last step.
    pub frame_map: f64,
    pub video: Vec<VideoEval>,
    pub miut: Vec<MiutRow>,
    /// Mean MIUT per configured length.
    pub mean_miut: BTreeMap<usize, f64>,
}

/// Mean over non-overlapping length-`len` windows of a tube of their MIUT;
/// `None` when the tube is shorter than `len`.
pub fn windowed_miut(tube: &Tubelet, len: usize) -> Option<f64> {
    let windows: Vec<f64> = tube.boxes.chunks_exact(len).map(step_core::geometry::miut).collect();
    (!windows.is_empty()).then(|| windows.iter().sum::<f64>() / windows.len() as f64)
}

pub fn miut_rows(scenes: &[Scene], lengths: &[usize]) -> Vec<MiutRow> {
    let mut rows = Vec::new();
    for (video, scene) in scenes.iter().enumerate() {
        for (tube, gt) in scene.tubes.iter().enumerate() {
            for &length in lengths {
                if let Some(miut) = windowed_miut(&gt.tubelet, length) {
                    rows.push(MiutRow {
                        video,
                        tube,
                        label: gt.label,
                        length,
                        miut,
                    });
                }
            }
        }
    }
    rows
}

/// Evaluates grouped detections (and optional tubes) against the scenes.
pub fn evaluate(
    scenes: &[Scene],
    grouped: &Grouped,
    tubes: Option<&[TubeRecord]>,
    boxes: &[BBox],
    clip_len: usize,
    cfg: &ExperimentConfig,
) -> anyhow::Result<EvalSummary> {
    let num_classes = cfg.scene.num_classes;
    let e = &cfg.eval;
    let scene_of = |v: usize| {
        scenes
            .get(v)
            .with_context(|| format!("detections refer to video {v}, only {} scenes", scenes.len()))
    };
    let mut gts = Vec::new();
    for (v, scene) in scenes.iter().enumerate() {
        gts.extend(scene_frame_ground_truth(v, scene, evaluated_frames(scene, clip_len)));
    }

    let mut steps = Vec::new();
    let mut prev_outputs: Option<Vec<f64>> = None;
    for (&step, videos) in grouped {
        let mut dets = Vec::new();
        let mut outputs = Vec::new();
        let mut inputs = Vec::new();
        for (&v, clips) in videos {
            let scene = scene_of(v)?;
            for (&clip, cds) in clips {
                let range = clip_range(clip, clip_len);
                dets.extend(clip_frame_detections(v, range, cds, e.nms_threshold));
                let tubelets: Vec<Tubelet> = cds.iter().map(|d| d.tubelet.clone()).collect();
                if tubelets.iter().any(|t| !t.covers(range)) {
                    bail!("a step-{step} detection of video {v} clip {clip} does not cover its clip");
                }
                outputs.extend(best_gt_overlaps(&tubelets, scene, range));
                if step == 1 {
                    inputs.extend(best_gt_overlaps(&replicate_to_cuboids(boxes, range)?, scene, range));
                }
            }
        }
        if step > 1 {
            inputs = prev_outputs.take().unwrap_or_default();
        }
        let input_histogram = iou_histogram(&[inputs], e.histogram_bin)?.remove(0);
        let mean_iou = if outputs.is_empty() {
            0.0
        } else {
            outputs.iter().sum::<f64>() / outputs.len() as f64
        };
        steps.push(StepEval {
            step,
            frame_map: frame_map(&dets, &gts, e.iou_threshold, num_classes),
            mean_iou,
            input_histogram,
        });
        prev_outputs = Some(outputs);
    }

    let mut video = Vec::new();
    if let Some(tubes) = tubes {
        let mut vdets = Vec::new();
        for t in tubes {
            scene_of(t.video)?;
            vdets.push(VideoDetection {
                video: t.video,
                label: t.class,
                score: t.score,
                tubelet: from_frame_boxes(&t.frames)?,
            });
        }
        let mut vgts = Vec::new();
        for (v, scene) in scenes.iter().enumerate() {
            let frames = FrameRange::new(0, evaluated_frames(scene, clip_len));
            for gt in &scene.tubes {
                let span = FrameRange::new(
                    gt.start_frame().max(0),
                    (gt.end_frame().min(frames.end()) - gt.start_frame().max(0)).max(0) as usize,
                );
                if let Some(tubelet) = gt.tubelet.slice(span) {
                    vgts.push(VideoGroundTruth {
                        video: v,
                        label: gt.label,
                        tubelet,
                    });
                }
            }
        }
        for &threshold in &e.video_thresholds {
            video.push(VideoEval {
                threshold,
                report: video_map(&vdets, &vgts, threshold, num_classes),
            });
        }
    }

    let miut = miut_rows(scenes, &e.miut_lengths);
    let mut mean_miut = BTreeMap::new();
    for &l in &e.miut_lengths {
        let v: Vec<f64> = miut.iter().filter(|r| r.length == l).map(|r| r.miut).collect();
        if !v.is_empty() {
            mean_miut.insert(l, v.iter().sum::<f64>() / v.len() as f64);
        }
    }

    Ok(EvalSummary {
        iou_threshold: e.iou_threshold,
        frame_map: steps.last().map_or(0.0, |s| s.frame_map.map),
        steps,
        video,
        miut,
        mean_miut,
    })
}

/// Detection, linking and evaluation in memory.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    scenes: &[Scene],
    models: &Models,
) -> anyhow::Result<(Vec<DetectionRecord>, Vec<TubeRecord>, EvalSummary)> {
    let boxes = initial_boxes(cfg)?;
    let results = detect_all(scenes, &boxes, &cfg.step, models, cfg.seed)?;
    let records: Vec<DetectionRecord> = results
        .iter()
        .enumerate()
        .flat_map(|(v, clips)| detection_records(v, clips, true))
        .collect();
    let grouped = group_records(&records)?;
    let tubes = link_all(&grouped, cfg.step.clip_len, cfg);
    let summary = evaluate(scenes, &grouped, Some(&tubes), &boxes, cfg.step.clip_len, cfg)?;
    Ok((records, tubes, summary))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub report: TrainReport,
}

/// Joint training of zero-initialized heads on clips drawn uniformly from
/// `scenes`.
pub fn train(
    cfg: &ExperimentConfig,
    scenes: &[Scene],
    mut on_iteration: impl FnMut(&TrainLogRow),
) -> anyhow::Result<Vec<LinearHead>> {
    let boxes = initial_boxes(cfg)?;
    let k = cfg.step.clip_len;
    let clips: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(v, s)| (0..ClipContext::num_clips(s, k)).map(move |c| (v, c)))
        .collect();
    if clips.is_empty() {
        bail!("no whole clip to train on");
    }
    let mut heads = init_heads(&cfg.step, cfg.scene.num_classes);
    let settings = TrainSettings {
        learning_rate: cfg.train.learning_rate,
        feature_noise: cfg.model.feature_noise,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for iteration in 0..cfg.train.iterations {
        let batch: Vec<ClipContext> = (0..cfg.train.batch)
            .map(|_| {
                let (v, c) = clips[rng.gen_range(0..clips.len())];
                ClipContext::new(&scenes[v], c, k, cfg.step.max_steps)
            })
            .collect();
        let report = joint_train_pass(&batch, &boxes, &cfg.step, &mut heads, &settings, &mut rng)?;
        on_iteration(&TrainLogRow { iteration, report });
    }
    Ok(heads)
}
