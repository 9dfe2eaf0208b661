//! Refinement models: the per-step classifier/regressor contract, a
//! noise-parameterized oracle and a trainable linear head.
//!
//! Every model maps a proposal tubelet to a [`Detection`]: a distribution over
//! `C + 1` classes (index 0 is background) and class-specific offsets for each
//! proposal frame and each of the `C` action classes. Models that anticipate
//! also return offsets for the clip before and after the proposal, expressed
//! relative to the proposal's first and last `K` boxes respectively.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::ClipContext;
use crate::error::{Result, StepError};
use crate::geometry::{Offset, Tubelet};
use crate::simulator::{best_overlap, synth_features, target_offsets, FeatureLayout, FeatureVector};
use crate::training::{smooth_l1, smooth_l1_grad, LossBreakdown, PROB_FLOOR};

/// Offsets for the adjacent clips, `clip_len x C` each, frame-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anticipation {
    pub before: Vec<Offset>,
    pub after: Vec<Offset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `C + 1` probabilities; index 0 is background.
    pub probs: Vec<f64>,
    /// `frames x C` offsets; entry `k * C + (c - 1)` is frame `k`, class `c`.
    pub offsets: Vec<Offset>,
    pub anticipation: Option<Anticipation>,
}

impl Detection {
    pub fn num_classes(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn frames(&self) -> usize {
        self.offsets.len() / self.num_classes().max(1)
    }

    /// Offsets of action class `class` (1-based) for every frame.
    pub fn class_offsets(&self, class: usize) -> Vec<Offset> {
        class_slice(&self.offsets, self.num_classes(), class)
    }

    /// Highest-probability action class, background excluded; ties go to the
    /// lowest class index.
    pub fn best_action(&self) -> (usize, f64) {
        let mut best = (1, f64::NEG_INFINITY);
        for (c, &p) in self.probs.iter().enumerate().skip(1) {
            if p > best.1 {
                best = (c, p);
            }
        }
        best
    }

    /// Checks the output contract against the expected frame count.
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.probs.len() < 2 {
            return Err(StepError::ShapeMismatch {
                what: "class distribution",
                expected: 2,
                actual: self.probs.len(),
            });
        }
        let c = self.num_classes();
        if self.offsets.len() != frames * c {
            return Err(StepError::ShapeMismatch {
                what: "regression offsets",
                expected: frames * c,
                actual: self.offsets.len(),
            });
        }
        Ok(())
    }
}

pub(crate) fn class_slice(offsets: &[Offset], num_classes: usize, class: usize) -> Vec<Offset> {
    offsets
        .chunks(num_classes)
        .map(|row| row[class - 1])
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One refinement step: classify and regress a proposal within its clip.
pub trait RefinementModel: Send + Sync {
    fn refine(
        &self,
        proposal: &Tubelet,
        ctx: &ClipContext<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Detection>;
}

/// Test double for a trained network: regresses towards the best-overlap
/// ground-truth tube with bounded uniform noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleModel {
    /// Half-width of the uniform offset noise.
    pub noise: f64,
    /// Logit scale applied to overlaps.
    pub sharpness: f64,
    /// Noise grows as `noise * (1 + context_gain * (1 - overlap))` for
    /// proposals poorly aligned over their whole length.
    pub context_gain: f64,
    /// Fraction of the noise drawn independently per frame; the rest is one
    /// draw shared by all frames of a regression.
    #[serde(default = "default_frame_jitter")]
    pub frame_jitter: f64,
    pub anticipate: bool,
}

fn default_frame_jitter() -> f64 {
    0.0
}

impl Default for OracleModel {
    fn default() -> Self {
        OracleModel {
            noise: 0.0,
            sharpness: 10.0,
            context_gain: 1.0,
            frame_jitter: default_frame_jitter(),
            anticipate: true,
        }
    }
}

impl OracleModel {
    pub fn exact() -> Self {
        OracleModel::default()
    }

    pub fn noisy(noise: f64) -> Self {
        OracleModel {
            noise,
            ..OracleModel::default()
        }
    }
}

impl RefinementModel for OracleModel {
    fn refine(
        &self,
        proposal: &Tubelet,
        ctx: &ClipContext<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Detection> {
        oracle_refine(proposal, ctx, self, rng)
    }
}

pub fn oracle_refine(
    proposal: &Tubelet,
    ctx: &ClipContext<'_>,
    params: &OracleModel,
    rng: &mut ChaCha8Rng,
) -> Result<Detection> {
    let scene = ctx.scene;
    let c = scene.spec.num_classes;
    let k = ctx.clip_len;
    let l = proposal.len();
    let video_len = scene.video_len();

    let Some((best, best_ov)) = best_overlap(proposal, &scene.tubes, video_len) else {
        let mut logits = vec![0.0; c + 1];
        logits[0] = params.sharpness;
        return Ok(Detection {
            probs: softmax(&logits),
            offsets: vec![Offset::ZERO; l * c],
            anticipation: params.anticipate.then(|| Anticipation {
                before: vec![Offset::ZERO; k * c],
                after: vec![Offset::ZERO; k * c],
            }),
        });
    };

    let mut per_class = vec![0.0f64; c];
    for tube in &scene.tubes {
        if !(1..=c).contains(&tube.label) {
            continue;
        }
        let (_, ov) = best_overlap(proposal, std::slice::from_ref(tube), video_len).unwrap();
        per_class[tube.label - 1] = per_class[tube.label - 1].max(ov);
    }
    let max_ov = per_class.iter().cloned().fold(0.0, f64::max);
    let mut logits = Vec::with_capacity(c + 1);
    logits.push(params.sharpness * (1.0 - max_ov));
    logits.extend(per_class.iter().map(|ov| params.sharpness * ov));

    let spread = params.noise * (1.0 + params.context_gain * (1.0 - best_ov));
    let tube = &scene.tubes[best];
    let (per_frame, shared) = (
        spread * params.frame_jitter,
        spread * (1.0 - params.frame_jitter),
    );
    let draw = |rng: &mut ChaCha8Rng, half: f64| {
        if half > 0.0 {
            rng.gen_range(-half..=half)
        } else {
            0.0
        }
    };
    let mut jitter = |targets: Vec<Option<Offset>>| -> Vec<Offset> {
        let bias: Vec<[f64; 4]> = (0..c)
            .map(|_| std::array::from_fn(|_| draw(rng, shared)))
            .collect();
        let mut out = Vec::with_capacity(targets.len() * c);
        for t in targets {
            for b in &bias {
                let o = match t {
                    Some(o) if spread > 0.0 => {
                        let mut a = o.to_array();
                        for (v, b) in a.iter_mut().zip(b) {
                            *v += b + draw(rng, per_frame);
                        }
                        Offset::from_array(a)
                    }
                    Some(o) => o,
                    None => Offset::ZERO,
                };
                out.push(o);
            }
        }
        out
    };

    let offsets = jitter(target_offsets(
        tube,
        &proposal.boxes,
        proposal.range().frames(),
        video_len,
    ));
    let anticipation = if params.anticipate && l >= k {
        let s = proposal.start_frame;
        let e = proposal.end_frame();
        let before = jitter(target_offsets(
            tube,
            &proposal.boxes[..k],
            (s - k as i64)..s,
            video_len,
        ));
        let after = jitter(target_offsets(
            tube,
            &proposal.boxes[l - k..],
            e..e + k as i64,
            video_len,
        ));
        Some(Anticipation { before, after })
    } else {
        None
    };

    Ok(Detection {
        probs: softmax(&logits),
        offsets,
        anticipation,
    })
}

/// Affine map `y = W x + b` with row-major `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Adds `dy x^T` and `dy` into the weight and bias accumulators.
    fn accumulate(&mut self, dy: &[f64], x: &[f64]) {
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.bias[r] += g;
            for (w, v) in self.weight[r * self.cols..(r + 1) * self.cols]
                .iter_mut()
                .zip(x)
            {
                *w += g * v;
            }
        }
    }

    fn is_consistent(&self) -> bool {
        self.weight.len() == self.rows * self.cols && self.bias.len() == self.rows
    }
}

/// Trainable per-step head: class logits, class-specific regression and two
/// residual anticipation regressors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub layout: FeatureLayout,
    pub classifier: Dense,
    pub regressor: Dense,
    pub before: Option<Dense>,
    pub after: Option<Dense>,
}

impl LinearHead {
    pub fn zeros(layout: FeatureLayout, anticipate: bool) -> Self {
        let d = layout.dim();
        let c = layout.num_classes;
        let ant = || Dense::zeros(layout.clip_len * c * 4, d);
        LinearHead {
            layout,
            classifier: Dense::zeros(c + 1, d),
            regressor: Dense::zeros(layout.frames * c * 4, d),
            before: anticipate.then(ant),
            after: anticipate.then(ant),
        }
    }

    /// Same shapes, all parameters zero.
    pub fn zeros_like(&self) -> Self {
        LinearHead::zeros(self.layout, self.before.is_some())
    }

    pub fn input_dim(&self) -> usize {
        self.layout.dim()
    }

    fn dense_layers(&self) -> impl Iterator<Item = &Dense> {
        [Some(&self.classifier), Some(&self.regressor), self.before.as_ref(), self.after.as_ref()]
            .into_iter()
            .flatten()
    }

    fn dense_layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        [
            Some(&mut self.classifier),
            Some(&mut self.regressor),
            self.before.as_mut(),
            self.after.as_mut(),
        ]
        .into_iter()
        .flatten()
    }

    pub fn num_params(&self) -> usize {
        self.dense_layers()
            .map(|d| d.weight.len() + d.bias.len())
            .sum()
    }

    /// All parameters in a fixed order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for d in self.dense_layers() {
            out.extend_from_slice(&d.weight);
            out.extend_from_slice(&d.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.dense_layers_mut()
            .flat_map(|d| d.weight.iter_mut().chain(d.bias.iter_mut()))
    }

    /// `self -= lr * grads`.
    pub fn descend(&mut self, grads: &LinearHead, lr: f64) {
        for (p, g) in self.params_mut().zip(grads.params()) {
            *p -= lr * g;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.layout.dim();
        let c = self.layout.num_classes;
        let check = |what: &'static str, dense: &Dense, rows: usize| -> Result<()> {
            if dense.cols != d || dense.rows != rows || !dense.is_consistent() {
                return Err(StepError::ShapeMismatch {
                    what,
                    expected: rows * d,
                    actual: dense.weight.len(),
                });
            }
            Ok(())
        };
        check("classifier", &self.classifier, c + 1)?;
        check("regressor", &self.regressor, self.layout.frames * c * 4)?;
        if self.before.is_some() != self.after.is_some() {
            return Err(StepError::InvalidConfig(
                "anticipation heads must come in pairs".into(),
            ));
        }
        if let (Some(b), Some(a)) = (&self.before, &self.after) {
            if self.layout.clip_len > self.layout.frames {
                return Err(StepError::InvalidConfig(
                    "clip length exceeds head frame count".into(),
                ));
            }
            check("before anticipation", b, self.layout.clip_len * c * 4)?;
            check("after anticipation", a, self.layout.clip_len * c * 4)?;
        }
        Ok(())
    }
}

fn to_offsets(v: &[f64]) -> Vec<Offset> {
    v.chunks(4)
        .map(|q| Offset::new(q[0], q[1], q[2], q[3]))
        .collect()
}

/// Raw outputs of a linear head before packaging into a [`Detection`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Main regression, `frames * C * 4`.
    pub regression: Vec<f64>,
    /// Residual anticipation outputs `f(x)`, `clip_len * C * 4` each.
    pub before_residual: Option<Vec<f64>>,
    pub after_residual: Option<Vec<f64>>,
    /// Anticipated offsets: main regression on the boundary frames plus residual.
    pub before: Option<Vec<f64>>,
    pub after: Option<Vec<f64>>,
}

impl HeadOutput {
    pub fn into_detection(self) -> Detection {
        let anticipation = match (self.before, self.after) {
            (Some(b), Some(a)) => Some(Anticipation {
                before: to_offsets(&b),
                after: to_offsets(&a),
            }),
            _ => None,
        };
        Detection {
            probs: self.probs,
            offsets: to_offsets(&self.regression),
            anticipation,
        }
    }
}

pub fn linear_outputs(head: &LinearHead, x: &FeatureVector) -> Result<HeadOutput> {
    let d = head.input_dim();
    if x.len() != d {
        return Err(StepError::ShapeMismatch {
            what: "feature vector",
            expected: d,
            actual: x.len(),
        });
    }
    let x = x.as_slice();
    let logits = head.classifier.forward(x);
    let probs = softmax(&logits);
    let regression = head.regressor.forward(x);
    let span = head.layout.clip_len * head.layout.num_classes * 4;
    let tail = regression.len() - span;
    let before_residual = head.before.as_ref().map(|h| h.forward(x));
    let after_residual = head.after.as_ref().map(|h| h.forward(x));
    let before = before_residual
        .as_ref()
        .map(|r| regression[..span].iter().zip(r).map(|(m, f)| m + f).collect());
    let after = after_residual
        .as_ref()
        .map(|r| regression[tail..].iter().zip(r).map(|(m, f)| m + f).collect());
    Ok(HeadOutput {
        logits,
        probs,
        regression,
        before_residual,
        after_residual,
        before,
        after,
    })
}

pub fn linear_forward(head: &LinearHead, x: &FeatureVector) -> Result<Detection> {
    Ok(linear_outputs(head, x)?.into_detection())
}

/// Training target for one sampled proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTarget {
    /// 0 for background.
    pub label: usize,
    /// Per-frame regression targets; `None` frames are excluded. Empty for negatives.
    pub main: Vec<Option<Offset>>,
    pub before: Vec<Option<Offset>>,
    pub after: Vec<Option<Offset>>,
}

impl SampleTarget {
    pub fn background() -> Self {
        SampleTarget {
            label: 0,
            main: Vec::new(),
            before: Vec::new(),
            after: Vec::new(),
        }
    }
}

/// Masked mean over valid frames of the summed smooth-L1 on class `class`;
/// accumulates `scale * dLoss/dOutput` into `grad` when given.
fn masked_loc(
    out: &[f64],
    targets: &[Option<Offset>],
    num_classes: usize,
    class: usize,
    scale: f64,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let valid = targets.iter().filter(|t| t.is_some()).count();
    if valid == 0 {
        return 0.0;
    }
    let norm = 1.0 / valid as f64;
    let mut loss = 0.0;
    for (k, t) in targets.iter().enumerate() {
        let Some(t) = t else { continue };
        let base = (k * num_classes + class - 1) * 4;
        for (j, tv) in t.to_array().iter().enumerate() {
            let diff = out[base + j] - tv;
            loss += smooth_l1(diff);
            if let Some(g) = grad.as_deref_mut() {
                g[base + j] += scale * norm * smooth_l1_grad(diff);
            }
        }
    }
    loss * norm
}

/// Loss of one sample under the multi-task objective and, when `grads` is
/// given, accumulation of its parameter gradients.
pub fn linear_loss(
    head: &LinearHead,
    x: &FeatureVector,
    target: &SampleTarget,
    lambda: f64,
    gamma: f64,
    grads: Option<&mut LinearHead>,
) -> Result<LossBreakdown> {
    let out = linear_outputs(head, x)?;
    let c = head.layout.num_classes;
    if target.label > c {
        return Err(StepError::ShapeMismatch {
            what: "class label",
            expected: c,
            actual: target.label,
        });
    }
    let mut report = LossBreakdown::default();
    let p = out.probs[target.label];
    if p < PROB_FLOOR {
        report.clamped += 1;
    }
    report.cls = -p.max(PROB_FLOOR).ln();

    let want_grad = grads.is_some();
    let mut d_reg = vec![0.0; out.regression.len()];
    let mut d_before = vec![0.0; out.before.as_ref().map_or(0, Vec::len)];
    let mut d_after = vec![0.0; out.after.as_ref().map_or(0, Vec::len)];

    if target.label > 0 {
        if !target.main.is_empty() {
            if target.main.len() != head.layout.frames {
                return Err(StepError::ShapeMismatch {
                    what: "regression targets",
                    expected: head.layout.frames,
                    actual: target.main.len(),
                });
            }
            report.loc = masked_loc(
                &out.regression,
                &target.main,
                c,
                target.label,
                lambda,
                want_grad.then_some(d_reg.as_mut_slice()),
            );
        }
        if let (Some(b), Some(a)) = (&out.before, &out.after) {
            let k = head.layout.clip_len;
            for (t, name) in [(&target.before, "before targets"), (&target.after, "after targets")] {
                if !t.is_empty() && t.len() != k {
                    return Err(StepError::ShapeMismatch {
                        what: name,
                        expected: k,
                        actual: t.len(),
                    });
                }
            }
            report.anticipation = masked_loc(
                b,
                &target.before,
                c,
                target.label,
                gamma,
                want_grad.then_some(d_before.as_mut_slice()),
            ) + masked_loc(
                a,
                &target.after,
                c,
                target.label,
                gamma,
                want_grad.then_some(d_after.as_mut_slice()),
            );
        }
    }
    report.total = report.cls + lambda * report.loc + gamma * report.anticipation;

    if let Some(g) = grads {
        let xs = x.as_slice();
        let mut d_logits = out.probs.clone();
        d_logits[target.label] -= 1.0;
        if p < PROB_FLOOR {
            // clamped: the loss is flat in the logits
            d_logits.iter_mut().for_each(|v| *v = 0.0);
        }
        g.classifier.accumulate(&d_logits, xs);
        // anticipated = main(boundary frames) + residual: gradient reaches both
        let span = d_before.len();
        if span > 0 {
            let tail = d_reg.len() - span;
            for i in 0..span {
                d_reg[i] += d_before[i];
                d_reg[tail + i] += d_after[i];
            }
            g.before.as_mut().unwrap().accumulate(&d_before, xs);
            g.after.as_mut().unwrap().accumulate(&d_after, xs);
        }
        g.regressor.accumulate(&d_reg, xs);
    }
    Ok(report)
}

/// A linear head wrapped as a refinement model over synthesized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub head: LinearHead,
    pub feature_noise: f64,
}

impl RefinementModel for LinearModel {
    fn refine(
        &self,
        proposal: &Tubelet,
        ctx: &ClipContext<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Detection> {
        if proposal.len() != self.head.layout.frames {
            return Err(StepError::ShapeMismatch {
                what: "proposal length",
                expected: self.head.layout.frames,
                actual: proposal.len(),
            });
        }
        let x = synth_features(proposal, ctx.scene, ctx.clip_len, self.feature_noise, rng);
        linear_forward(&self.head, &x)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable set of per-step heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub heads: Vec<LinearHead>,
}

impl Checkpoint {
    pub fn new(heads: Vec<LinearHead>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(StepError::InvalidConfig(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.heads.iter().try_for_each(LinearHead::validate)
    }
}
