//! Losses, hard-aware sampling and the joint multi-step training pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{temporal_extend, update_proposals, ClipContext, ExtensionMode, StepConfig};
use crate::error::{Result, StepError};
use crate::geometry::{tubelet_overlap, BBox, FrameRange, Offset, Tubelet};
use crate::model::{linear_loss, linear_outputs, Detection, LinearHead, SampleTarget};
use crate::proposals::replicate_to_cuboids;
use crate::simulator::{synth_features, target_offsets, FeatureLayout, Scene};

/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

/// Derivative of [`smooth_l1`]; at `|d| = 1` the linear branch `sign(d)` is used.
pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Mean over valid frames of the coordinate-summed smooth-L1 error.
/// `None` targets (padding, missing ground truth) are skipped.
pub fn loc_loss(pred: &[Offset], target: &[Option<Offset>]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(StepError::ShapeMismatch {
            what: "localization frames",
            expected: target.len(),
            actual: pred.len(),
        });
    }
    let mut n = 0usize;
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let Some(t) = t else { continue };
        n += 1;
        sum += p
            .to_array()
            .iter()
            .zip(t.to_array())
            .map(|(a, b)| smooth_l1(a - b))
            .sum::<f64>();
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Per-term loss report. `total = cls + lambda * loc + gamma * anticipation`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub loc: f64,
    pub anticipation: f64,
    pub total: f64,
    /// Samples whose target probability was floored at [`PROB_FLOOR`].
    pub clamped: usize,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.cls += o.cls;
        self.loc += o.loc;
        self.anticipation += o.anticipation;
        self.total += o.total;
        self.clamped += o.clamped;
    }
}

impl LossBreakdown {
    pub fn scaled(mut self, f: f64) -> Self {
        self.cls *= f;
        self.loc *= f;
        self.anticipation *= f;
        self.total *= f;
        self
    }
}

/// Cross-entropy over every sample plus weighted localization and
/// anticipation terms over positives.
pub fn multi_task_loss(
    samples: &[(&Detection, &SampleTarget)],
    lambda: f64,
    gamma: f64,
) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(StepError::Empty("sample set"));
    }
    let mut r = LossBreakdown::default();
    for (det, target) in samples {
        let p = *det.probs.get(target.label).ok_or(StepError::ShapeMismatch {
            what: "class label",
            expected: det.probs.len() - 1,
            actual: target.label,
        })?;
        if p < PROB_FLOOR {
            r.clamped += 1;
        }
        r.cls += -p.max(PROB_FLOOR).ln();
        if target.label == 0 {
            continue;
        }
        if !target.main.is_empty() {
            r.loc += loc_loss(&det.class_offsets(target.label), &target.main)?;
        }
        if let Some(ant) = &det.anticipation {
            let c = det.num_classes();
            let pick = |v: &[Offset]| crate::model::class_slice(v, c, target.label);
            if !target.before.is_empty() {
                r.anticipation += loc_loss(&pick(&ant.before), &target.before)?;
            }
            if !target.after.is_empty() {
                r.anticipation += loc_loss(&pick(&ant.after), &target.after)?;
            }
        }
    }
    r.total = r.cls + lambda * r.loc + gamma * r.anticipation;
    Ok(r)
}

/// Proposal indices chosen for one step, before targets are attached.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampledIndices {
    /// `(proposal, assigned gt)`; forced positives come first.
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<usize>,
    /// Proposals forced positive, one per gt tube in gt order.
    pub forced: Vec<usize>,
}

/// Draws up to `n` items without replacement with probability proportional
/// to `weights`, renormalizing after each draw. All-zero weights fall back to
/// uniform.
pub fn weighted_sample(items: &[usize], weights: &[f64], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n >= items.len() {
        return items.to_vec();
    }
    let mut pool: Vec<(usize, f64)> = items
        .iter()
        .zip(weights)
        .map(|(&i, &w)| (i, w.max(0.0)))
        .collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = pool.iter().map(|p| p.1).sum();
        let pick = if total > 0.0 {
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = pool.len() - 1;
            for (j, p) in pool.iter().enumerate() {
                acc += p.1;
                if u < acc && p.1 > 0.0 {
                    pick = j;
                    break;
                }
            }
            // guard against rounding leaving a zero-weight tail pick
            while pool[pick].1 <= 0.0 && pick > 0 {
                pick -= 1;
            }
            pick
        } else {
            rng.gen_range(0..pool.len())
        };
        out.push(pool.remove(pick).0);
    }
    out
}

fn argmax(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Positive/negative selection from an `M x G` overlap matrix.
///
/// Every gt tube first claims its highest-overlap unclaimed proposal. The
/// rest split on `max overlap > tau`; positives and negatives are then drawn
/// with probability proportional to `scores`. Forced positives are always
/// kept, so the positive count is `max(num_pos, #gt)` at most.
pub fn sample_indices(
    overlaps: &[Vec<f64>],
    num_gt: usize,
    scores: &[f64],
    tau: f64,
    num_pos: usize,
    num_neg: usize,
    rng: &mut impl Rng,
) -> Result<SampledIndices> {
    let m = overlaps.len();
    if scores.len() != m {
        return Err(StepError::ShapeMismatch {
            what: "sampling scores",
            expected: m,
            actual: scores.len(),
        });
    }
    if let Some(row) = overlaps.iter().find(|r| r.len() != num_gt) {
        return Err(StepError::ShapeMismatch {
            what: "overlap row",
            expected: num_gt,
            actual: row.len(),
        });
    }
    let mut taken = vec![false; m];
    let mut positives = Vec::new();
    let mut forced = Vec::new();
    for g in 0..num_gt {
        let best = argmax(
            (0..m).map(|i| if taken[i] { f64::NEG_INFINITY } else { overlaps[i][g] }),
        );
        if let Some((i, v)) = best {
            if v > f64::NEG_INFINITY {
                taken[i] = true;
                forced.push(i);
                positives.push((i, g));
            }
        }
    }
    let (mut pos_pool, mut neg_pool) = (Vec::new(), Vec::new());
    for i in (0..m).filter(|&i| !taken[i]) {
        let best = argmax(overlaps[i].iter().cloned());
        match best {
            Some((_, v)) if v > tau => pos_pool.push(i),
            _ => neg_pool.push(i),
        }
    }
    let w = |pool: &[usize]| pool.iter().map(|&i| scores[i]).collect::<Vec<_>>();
    let extra = num_pos.saturating_sub(positives.len());
    for i in weighted_sample(&pos_pool, &w(&pos_pool), extra, rng) {
        let (g, _) = argmax(overlaps[i].iter().cloned()).unwrap();
        positives.push((i, g));
    }
    let negatives = weighted_sample(&neg_pool, &w(&neg_pool), num_neg, rng);
    Ok(SampledIndices {
        positives,
        negatives,
        forced,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Positive {
    pub proposal: usize,
    pub gt: usize,
    pub target: SampleTarget,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub positives: Vec<Positive>,
    pub negatives: Vec<usize>,
}

impl SampleSet {
    /// `(proposal index, target)` for every sampled item.
    pub fn items(&self) -> Vec<(usize, SampleTarget)> {
        self.positives
            .iter()
            .map(|p| (p.proposal, p.target.clone()))
            .chain(self.negatives.iter().map(|&i| (i, SampleTarget::background())))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Overlap of every proposal with every gt tube on the target clip.
pub fn overlap_matrix(proposals: &[Tubelet], scene: &Scene, target: FrameRange) -> Vec<Vec<f64>> {
    proposals
        .iter()
        .map(|p| {
            scene
                .tubes
                .iter()
                .map(|g| tubelet_overlap(p, &g.tubelet, target).unwrap_or(0.0))
                .collect()
        })
        .collect()
}

/// Sampling scores: the best gt overlap at step 1, afterwards the previous
/// step's highest action-class probability.
pub fn sampling_scores(overlaps: &[Vec<f64>], previous: Option<&[Detection]>) -> Vec<f64> {
    match previous {
        Some(dets) => dets.iter().map(|d| d.best_action().1).collect(),
        None => overlaps
            .iter()
            .map(|r| r.iter().cloned().fold(0.0, f64::max))
            .collect(),
    }
}

/// Samples positives and negatives for one clip and attaches regression
/// (and, when `anticipation` is set, adjacent-clip) targets.
#[allow(clippy::too_many_arguments)]
pub fn assign_and_sample(
    proposals: &[Tubelet],
    ctx: &ClipContext<'_>,
    scores: Option<&[f64]>,
    tau: f64,
    num_pos: usize,
    num_neg: usize,
    anticipation: bool,
    rng: &mut impl Rng,
) -> Result<SampleSet> {
    let scene = ctx.scene;
    let overlaps = overlap_matrix(proposals, scene, ctx.target());
    let default_scores;
    let scores = match scores {
        Some(s) => s,
        None => {
            default_scores = sampling_scores(&overlaps, None);
            &default_scores
        }
    };
    let picked = sample_indices(
        &overlaps,
        scene.tubes.len(),
        scores,
        tau,
        num_pos,
        num_neg,
        rng,
    )?;
    let video_len = scene.video_len();
    let k = ctx.clip_len;
    let positives = picked
        .positives
        .into_iter()
        .map(|(i, g)| {
            let p = &proposals[i];
            let tube = &scene.tubes[g];
            let main = target_offsets(tube, &p.boxes, p.range().frames(), video_len);
            let (before, after) = if anticipation && p.len() >= k {
                let s = p.start_frame;
                let e = p.end_frame();
                (
                    target_offsets(tube, &p.boxes[..k], (s - k as i64)..s, video_len),
                    target_offsets(tube, &p.boxes[p.len() - k..], e..e + k as i64, video_len),
                )
            } else {
                (Vec::new(), Vec::new())
            };
            Positive {
                proposal: i,
                gt: g,
                target: SampleTarget {
                    label: tube.label,
                    main,
                    before,
                    after,
                },
            }
        })
        .collect();
    Ok(SampleSet {
        positives,
        negatives: picked.negatives,
    })
}

/// Zero-initialized heads sized for each step of `config`.
pub fn init_heads(config: &StepConfig, num_classes: usize) -> Vec<LinearHead> {
    let anticipate = config.extension_mode == ExtensionMode::Anticipate;
    (1..=config.max_steps)
        .map(|s| {
            LinearHead::zeros(
                FeatureLayout {
                    frames: config.frames_at_step(s),
                    clip_len: config.clip_len,
                    num_classes,
                },
                anticipate,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub feature_noise: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 0.1,
            feature_noise: 0.0,
        }
    }
}

/// Batch-mean losses of one training pass.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub per_step: Vec<LossBreakdown>,
    pub total: f64,
}

/// One joint update of all per-step heads.
///
/// For each clip the heads are run step by step (the inference pass that
/// materializes each step's inputs); every step samples its own positives
/// and negatives with `tau[s]`, and the losses of all steps are accumulated
/// before a single gradient-descent update.
pub fn joint_train_pass(
    batch: &[ClipContext<'_>],
    initial_boxes: &[BBox],
    config: &StepConfig,
    heads: &mut [LinearHead],
    settings: &TrainSettings,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    config.validate()?;
    if batch.is_empty() {
        return Err(StepError::Empty("training batch"));
    }
    if heads.len() != config.max_steps {
        return Err(StepError::ShapeMismatch {
            what: "per-step heads",
            expected: config.max_steps,
            actual: heads.len(),
        });
    }
    let mut grads: Vec<LinearHead> = heads.iter().map(LinearHead::zeros_like).collect();
    let mut per_step = vec![LossBreakdown::default(); config.max_steps];

    for ctx in batch {
        let bounds = ctx.bounds();
        let mut inputs = replicate_to_cuboids(initial_boxes, ctx.target())?;
        let mut prev: Option<(Vec<Tubelet>, Vec<Detection>)> = None;
        for s in 1..=config.max_steps {
            let head = &heads[s - 1];
            if let Some((prev_inputs, prev_dets)) = &prev {
                let updated = update_proposals(prev_dets, prev_inputs, bounds)?;
                inputs = if config.extend_at[s - 1] {
                    temporal_extend(
                        &updated,
                        config.extension_mode,
                        Some((prev_inputs, prev_dets)),
                        ctx,
                        s - 1,
                    )?
                } else {
                    updated
                };
            }
            let feats: Vec<_> = inputs
                .iter()
                .map(|p| synth_features(p, ctx.scene, ctx.clip_len, settings.feature_noise, rng))
                .collect();
            let dets = feats
                .iter()
                .map(|x| linear_outputs(head, x).map(|o| o.into_detection()))
                .collect::<Result<Vec<_>>>()?;
            let scores = prev.as_ref().map(|(_, d)| sampling_scores(&[], Some(d)));
            let samples = assign_and_sample(
                &inputs,
                ctx,
                scores.as_deref(),
                config.tau[s - 1],
                config.num_pos,
                config.num_neg,
                head.before.is_some(),
                rng,
            )?;
            for (i, target) in samples.items() {
                per_step[s - 1] += linear_loss(
                    head,
                    &feats[i],
                    &target,
                    config.lambda,
                    config.gamma,
                    Some(&mut grads[s - 1]),
                )?;
            }
            prev = Some((std::mem::take(&mut inputs), dets));
        }
    }

    let scale = 1.0 / batch.len() as f64;
    for (head, g) in heads.iter_mut().zip(&grads) {
        head.descend(g, settings.learning_rate * scale);
    }
    let per_step: Vec<_> = per_step.into_iter().map(|r| r.scaled(scale)).collect();
    let total = per_step.iter().map(|r| r.total).sum();
    Ok(TrainReport { per_step, total })
}
