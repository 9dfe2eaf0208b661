//! Video-level action tubes: greedy linking of clip detections across
//! adjacent clips and two-state temporal trimming.

use serde::{Deserialize, Serialize};

use crate::geometry::{box_iou, shared_overlap, BBox, FrameRange, Tubelet};

/// A scored detection of one class in one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkCandidate {
    pub clip: usize,
    /// The clip's own frames; the tubelet may extend beyond them.
    pub range: FrameRange,
    pub tubelet: Tubelet,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTube {
    pub label: usize,
    /// Members ordered by clip; consecutive members come from consecutive clips.
    pub entries: Vec<LinkCandidate>,
    /// Input indices of the members, aligned with `entries`.
    pub members: Vec<usize>,
    /// Inclusive entry-index span kept by trimming; all entries when untrimmed.
    pub kept: (usize, usize),
}

impl ActionTube {
    /// Mean score of the kept entries.
    pub fn score(&self) -> f64 {
        let kept = &self.entries[self.kept.0..=self.kept.1];
        kept.iter().map(|e| e.score).sum::<f64>() / kept.len() as f64
    }

    /// Mean score over every linked entry.
    pub fn linked_score(&self) -> f64 {
        self.entries.iter().map(|e| e.score).sum::<f64>() / self.entries.len() as f64
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    /// Frames covered by the kept entries.
    pub fn trimmed_range(&self) -> FrameRange {
        let a = self.entries[self.kept.0].range;
        let b = self.entries[self.kept.1].range;
        FrameRange::new(a.start, (b.end() - a.start) as usize)
    }

    /// Per-frame boxes of the kept entries, each taken from its own clip frames.
    pub fn kept_boxes(&self) -> Vec<(i64, BBox)> {
        self.entries[self.kept.0..=self.kept.1]
            .iter()
            .flat_map(|e| {
                e.range
                    .frames()
                    .filter_map(move |f| e.tubelet.box_at(f).map(|b| (f, *b)))
            })
            .collect()
    }

    /// The kept boxes as one contiguous tubelet.
    pub fn kept_tubelet(&self) -> Tubelet {
        let frames = self.kept_boxes();
        Tubelet {
            start_frame: frames.first().map_or(0, |f| f.0),
            boxes: frames.into_iter().map(|(_, b)| b).collect(),
        }
    }

    /// Applies [`temporal_trim`] to the per-entry scores.
    pub fn trim(&mut self, penalty: f64) {
        self.kept = temporal_trim(&self.scores(), penalty).kept;
    }
}

/// Overlap used to decide links: mean IoU on shared frames, or the IoU of the
/// facing boundary boxes when the tubelets share no frame.
pub fn link_overlap(earlier: &Tubelet, later: &Tubelet) -> f64 {
    shared_overlap(earlier, later, |_| true)
        .unwrap_or_else(|| box_iou(earlier.boxes.last().unwrap(), &later.boxes[0]))
}

/// Greedy linking of one class.
///
/// The highest-scoring unlinked candidate (ties: lower clip, then lower input
/// index) seeds a tube that grows forward then backward, each time taking the
/// best-scoring unlinked candidate of the adjacent clip whose overlap with the
/// current end exceeds `threshold`. Linked candidates are consumed.
pub fn link_tubes(candidates: &[LinkCandidate], label: usize, threshold: f64) -> Vec<ActionTube> {
    let mut used = vec![false; candidates.len()];
    let mut tubes = Vec::new();
    let better = |a: usize, b: usize| {
        let (x, y) = (&candidates[a], &candidates[b]);
        x.score > y.score || (x.score == y.score && (x.clip, a) < (y.clip, b))
    };
    let best_next = |used: &[bool], from: usize, clip: Option<usize>, forward: bool| {
        let clip = clip?;
        let mut best: Option<usize> = None;
        for (j, c) in candidates.iter().enumerate() {
            if used[j] || c.clip != clip {
                continue;
            }
            let ov = if forward {
                link_overlap(&candidates[from].tubelet, &c.tubelet)
            } else {
                link_overlap(&c.tubelet, &candidates[from].tubelet)
            };
            if ov > threshold && best.map_or(true, |b| better(j, b)) {
                best = Some(j);
            }
        }
        best
    };
    loop {
        let mut seed: Option<usize> = None;
        for i in (0..candidates.len()).filter(|&i| !used[i]) {
            if seed.map_or(true, |s| better(i, s)) {
                seed = Some(i);
            }
        }
        let Some(seed) = seed else { break };
        used[seed] = true;
        let mut members = vec![seed];
        let mut cur = seed;
        while let Some(j) = best_next(&used, cur, candidates[cur].clip.checked_add(1), true) {
            used[j] = true;
            members.push(j);
            cur = j;
        }
        cur = seed;
        while let Some(j) = best_next(&used, cur, candidates[cur].clip.checked_sub(1), false) {
            used[j] = true;
            members.insert(0, j);
            cur = j;
        }
        let entries: Vec<_> = members.iter().map(|&i| candidates[i].clone()).collect();
        let n = entries.len();
        tubes.push(ActionTube {
            label,
            entries,
            members,
            kept: (0, n - 1),
        });
    }
    tubes
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrimResult {
    /// `true` = in.
    pub labels: Vec<bool>,
    pub energy: f64,
    /// Inclusive index span kept.
    pub kept: (usize, usize),
}

/// Energy of a binary labeling: agreement with the scores minus `penalty` per label switch.
pub fn trim_energy(scores: &[f64], labels: &[bool], penalty: f64) -> f64 {
    let unary: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| if y { s } else { 1.0 - s })
        .sum();
    let switches = labels.windows(2).filter(|w| w[0] != w[1]).count();
    unary - penalty * switches as f64
}

/// Exact two-state maximization of [`trim_energy`] by a forward pass with
/// backtracking. The kept span is the maximal in-run containing the
/// highest-scoring entry (ties: earliest); if that entry is labelled out the
/// in-run with the largest score mass is used, and with no in-run at all the
/// best entry alone is kept.
pub fn temporal_trim(scores: &[f64], penalty: f64) -> TrimResult {
    let n = scores.len();
    if n == 0 {
        return TrimResult {
            labels: Vec::new(),
            energy: 0.0,
            kept: (0, 0),
        };
    }
    let unary = |t: usize, y: usize| if y == 1 { scores[t] } else { 1.0 - scores[t] };
    let mut value = vec![[0.0f64; 2]; n];
    let mut back = vec![[0usize; 2]; n];
    value[0] = [unary(0, 0), unary(0, 1)];
    for t in 1..n {
        for y in 0..2 {
            let stay = value[t - 1][y];
            let switch = value[t - 1][1 - y] - penalty;
            let (v, from) = if stay >= switch { (stay, y) } else { (switch, 1 - y) };
            value[t][y] = v + unary(t, y);
            back[t][y] = from;
        }
    }
    let mut y = if value[n - 1][1] >= value[n - 1][0] { 1 } else { 0 };
    let energy = value[n - 1][y];
    let mut labels = vec![false; n];
    for t in (0..n).rev() {
        labels[t] = y == 1;
        y = back[t][y];
    }

    let runs = in_runs(&labels);
    let best = (0..n).fold(0, |b, t| if scores[t] > scores[b] { t } else { b });
    let kept = runs
        .iter()
        .copied()
        .find(|&(a, z)| a <= best && best <= z)
        .or_else(|| {
            runs.iter().copied().fold(None, |acc: Option<(usize, usize)>, r| {
                let mass = |(a, z): (usize, usize)| scores[a..=z].iter().sum::<f64>();
                match acc {
                    Some(b) if mass(b) >= mass(r) => Some(b),
                    _ => Some(r),
                }
            })
        })
        .unwrap_or((best, best));
    TrimResult {
        labels,
        energy,
        kept,
    }
}

fn in_runs(labels: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (t, &y) in labels.iter().enumerate() {
        match (y, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                runs.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, labels.len() - 1));
    }
    runs
}
