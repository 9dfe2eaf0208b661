//! Boxes, tubelets and the regression-offset codec.
//!
//! All coordinates are continuous pixel values in corner form. A [`Tubelet`]
//! is a run of per-frame boxes over a contiguous frame range; frame indices
//! are signed so that temporally extended proposals may reach past either
//! end of a video (those frames are treated as padding by callers).

use serde::{Deserialize, Serialize};

use crate::error::{Result, StepError};

/// Axis-aligned rectangle `(x1, y1, x2, y2)` with `x1 <= x2`, `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box from corners, swapping coordinates that arrive out of order.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn cx(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    pub fn cy(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() <= 0.0 || self.height() <= 0.0
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        box_iou(self, other)
    }

    /// Clips the box to the image; a box entirely outside collapses onto the border.
    pub fn clamp(&self, bounds: ImageBounds) -> BBox {
        let cx = |v: f64| v.clamp(0.0, bounds.width);
        let cy = |v: f64| v.clamp(0.0, bounds.height);
        BBox {
            x1: cx(self.x1),
            y1: cy(self.y1),
            x2: cx(self.x2),
            y2: cy(self.y2),
        }
    }

    pub fn is_inside(&self, bounds: ImageBounds) -> bool {
        let eps = 1e-9 * bounds.width.max(bounds.height).max(1.0);
        self.x1 >= -eps
            && self.y1 >= -eps
            && self.x2 <= bounds.width + eps
            && self.y2 <= bounds.height + eps
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Inverse of [`BBox::to_array`]; collapses inverted extents to their midpoint.
    pub fn from_array_collapsed(c: [f64; 4]) -> BBox {
        let (x1, x2) = if c[0] <= c[2] {
            (c[0], c[2])
        } else {
            let m = 0.5 * (c[0] + c[2]);
            (m, m)
        };
        let (y1, y2) = if c[1] <= c[3] {
            (c[1], c[3])
        } else {
            let m = 0.5 * (c[1] + c[3]);
            (m, m)
        };
        BBox { x1, y1, x2, y2 }
    }
}

/// Frame size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageBounds {
    pub width: f64,
    pub height: f64,
}

impl ImageBounds {
    pub fn new(width: f64, height: f64) -> Self {
        ImageBounds { width, height }
    }

    pub fn full_frame(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width, self.height)
    }
}

/// Half-open frame interval `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameRange {
    pub start: i64,
    pub len: usize,
}

impl FrameRange {
    pub fn new(start: i64, len: usize) -> Self {
        FrameRange { start, len }
    }

    pub fn end(&self) -> i64 {
        self.start + self.len as i64
    }

    pub fn contains(&self, frame: i64) -> bool {
        frame >= self.start && frame < self.end()
    }

    pub fn frames(&self) -> impl Iterator<Item = i64> {
        self.start..self.end()
    }
}

/// Intersection over union; zero when either box has no area.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A contiguous run of per-frame boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tubelet {
    pub start_frame: i64,
    pub boxes: Vec<BBox>,
}

impl Tubelet {
    pub fn new(start_frame: i64, boxes: Vec<BBox>) -> Result<Self> {
        if boxes.is_empty() {
            return Err(StepError::EmptyTubelet);
        }
        Ok(Tubelet { start_frame, boxes })
    }

    /// A temporally constant tubelet: `bbox` replicated over `range`.
    pub fn cuboid(bbox: BBox, range: FrameRange) -> Self {
        Tubelet {
            start_frame: range.start,
            boxes: vec![bbox; range.len],
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn range(&self) -> FrameRange {
        FrameRange::new(self.start_frame, self.boxes.len())
    }

    pub fn end_frame(&self) -> i64 {
        self.range().end()
    }

    pub fn covers(&self, range: FrameRange) -> bool {
        range.start >= self.start_frame && range.end() <= self.end_frame()
    }

    pub fn box_at(&self, frame: i64) -> Option<&BBox> {
        if frame < self.start_frame {
            return None;
        }
        self.boxes.get((frame - self.start_frame) as usize)
    }

    /// The sub-tubelet over `range`, if fully covered.
    pub fn slice(&self, range: FrameRange) -> Option<Tubelet> {
        if !self.covers(range) || range.len == 0 {
            return None;
        }
        let off = (range.start - self.start_frame) as usize;
        Some(Tubelet {
            start_frame: range.start,
            boxes: self.boxes[off..off + range.len].to_vec(),
        })
    }

    pub fn clamp(&self, bounds: ImageBounds) -> Tubelet {
        Tubelet {
            start_frame: self.start_frame,
            boxes: self.boxes.iter().map(|b| b.clamp(bounds)).collect(),
        }
    }

    /// Minimum IoU between the centre-frame box and every box of the tubelet.
    pub fn miut(&self) -> f64 {
        miut(&self.boxes)
    }
}

/// Mean per-frame IoU of two tubelets over `range`.
pub fn tubelet_overlap(a: &Tubelet, b: &Tubelet, range: FrameRange) -> Result<f64> {
    for t in [a, b] {
        if !t.covers(range) {
            return Err(StepError::RangeNotCovered {
                start: t.start_frame,
                len: t.len(),
                range_start: range.start,
                range_end: range.end(),
            });
        }
    }
    if range.len == 0 {
        return Err(StepError::Empty("frame range"));
    }
    let sum: f64 = range
        .frames()
        .map(|f| box_iou(a.box_at(f).unwrap(), b.box_at(f).unwrap()))
        .sum();
    Ok(sum / range.len as f64)
}

/// Mean IoU over the frames where both tubelets have a box and `keep(frame)`
/// holds. `None` when no such frame exists.
pub fn shared_overlap(a: &Tubelet, b: &Tubelet, keep: impl Fn(i64) -> bool) -> Option<f64> {
    let start = a.start_frame.max(b.start_frame);
    let end = a.end_frame().min(b.end_frame());
    let mut sum = 0.0;
    let mut n = 0usize;
    for f in start..end {
        if !keep(f) {
            continue;
        }
        sum += box_iou(a.box_at(f).unwrap(), b.box_at(f).unwrap());
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per-frame regression offsets: centre shift scaled by the anchor size and
/// log-space width/height ratio.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offset {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl Offset {
    pub const ZERO: Offset = Offset {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Offset { tx, ty, tw, th }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Offset::new(a[0], a[1], a[2], a[3])
    }

    pub fn add(&self, other: &Offset) -> Offset {
        Offset::new(
            self.tx + other.tx,
            self.ty + other.ty,
            self.tw + other.tw,
            self.th + other.th,
        )
    }
}

pub fn encode(target: &BBox, anchor: &BBox) -> Result<Offset> {
    for b in [anchor, target] {
        if b.is_degenerate() {
            return Err(StepError::DegenerateBox {
                width: b.width(),
                height: b.height(),
            });
        }
    }
    let (wa, ha) = (anchor.width(), anchor.height());
    Ok(Offset {
        tx: (target.cx() - anchor.cx()) / wa,
        ty: (target.cy() - anchor.cy()) / ha,
        tw: (target.width() / wa).ln(),
        th: (target.height() / ha).ln(),
    })
}

/// Inverse of [`encode`] without clamping.
pub fn decode_unclamped(offset: &Offset, anchor: &BBox) -> BBox {
    let (wa, ha) = (anchor.width(), anchor.height());
    let cx = anchor.cx() + offset.tx * wa;
    let cy = anchor.cy() + offset.ty * ha;
    let w = wa * offset.tw.exp();
    let h = ha * offset.th.exp();
    BBox::from_center(cx, cy, w, h)
}

/// Inverse of [`encode`], clamped to the image.
pub fn decode(offset: &Offset, anchor: &BBox, bounds: ImageBounds) -> BBox {
    decode_unclamped(offset, anchor).clamp(bounds)
}

/// Minimum IoU of each box against the box at index `len / 2`.
pub fn miut(boxes: &[BBox]) -> f64 {
    let Some(center) = boxes.get(boxes.len() / 2) else {
        return 1.0;
    };
    boxes
        .iter()
        .map(|b| box_iou(center, b))
        .fold(1.0, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        // inter 50, union 150
        assert!((box_iou(&a, &b(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_degenerate_is_zero() {
        let p = b(3.0, 3.0, 3.0, 3.0);
        assert_eq!(box_iou(&p, &p), 0.0);
        assert_eq!(box_iou(&p, &b(0.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn tubelet_overlap_examples() {
        let a = Tubelet::new(0, vec![b(0.0, 0.0, 10.0, 10.0); 3]).unwrap();
        let r = FrameRange::new(0, 3);
        assert_eq!(tubelet_overlap(&a, &a, r).unwrap(), 1.0);

        // per-frame IoUs 1, 1/2, 0
        let c = Tubelet::new(
            0,
            vec![
                b(0.0, 0.0, 10.0, 10.0),
                b(0.0, 0.0, 10.0, 5.0),
                b(50.0, 50.0, 60.0, 60.0),
            ],
        )
        .unwrap();
        assert!((tubelet_overlap(&a, &c, r).unwrap() - 0.5).abs() < 1e-12);

        let far = Tubelet::new(0, vec![b(50.0, 50.0, 60.0, 60.0); 3]).unwrap();
        assert_eq!(tubelet_overlap(&a, &far, r).unwrap(), 0.0);
    }

    #[test]
    fn tubelet_overlap_rejects_uncovered_range() {
        let a = Tubelet::new(2, vec![b(0.0, 0.0, 10.0, 10.0); 3]).unwrap();
        let err = tubelet_overlap(&a, &a, FrameRange::new(0, 3)).unwrap_err();
        assert!(matches!(err, StepError::RangeNotCovered { .. }));
    }

    #[test]
    fn overlap_on_sub_range() {
        let a = Tubelet::new(-2, vec![b(0.0, 0.0, 10.0, 10.0); 6]).unwrap();
        let c = Tubelet::new(0, vec![b(0.0, 0.0, 10.0, 10.0); 2]).unwrap();
        assert_eq!(tubelet_overlap(&a, &c, FrameRange::new(0, 2)).unwrap(), 1.0);
        assert_eq!(shared_overlap(&a, &c, |_| true), Some(1.0));
        assert_eq!(shared_overlap(&a, &c, |f| f > 5), None);
    }

    #[test]
    fn encode_examples() {
        let anchor = BBox::from_center(10.0, 10.0, 4.0, 4.0);
        assert_eq!(encode(&anchor, &anchor).unwrap(), Offset::ZERO);

        let t = BBox::from_center(12.0, 10.0, 8.0, 4.0);
        let o = encode(&t, &anchor).unwrap();
        assert!((o.tx - 0.5).abs() < 1e-12);
        assert!(o.ty.abs() < 1e-12);
        assert!((o.tw - 2f64.ln()).abs() < 1e-12);
        assert!(o.th.abs() < 1e-12);

        let anchor = BBox::from_center(0.0, 0.0, 2.0, 2.0);
        let t = BBox::from_center(-1.0, 1.0, 1.0, 1.0);
        let o = encode(&t, &anchor).unwrap();
        assert!((o.tx + 0.5).abs() < 1e-12);
        assert!((o.ty - 0.5).abs() < 1e-12);
        assert!((o.tw - 0.5f64.ln()).abs() < 1e-12);
        assert!((o.th - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_zero_size() {
        let good = b(0.0, 0.0, 4.0, 4.0);
        let flat = b(0.0, 0.0, 4.0, 0.0);
        assert!(matches!(
            encode(&good, &flat),
            Err(StepError::DegenerateBox { .. })
        ));
        assert!(encode(&flat, &good).is_err());
    }

    #[test]
    fn decode_examples() {
        let bounds = ImageBounds::new(100.0, 100.0);
        let anchor = BBox::from_center(10.0, 10.0, 4.0, 4.0);
        assert_eq!(decode(&Offset::ZERO, &anchor, bounds), anchor);

        let out = decode(&Offset::new(0.5, 0.0, 2f64.ln(), 0.0), &anchor, bounds);
        let want = BBox::from_center(12.0, 10.0, 8.0, 4.0);
        for (u, v) in out.to_array().iter().zip(want.to_array()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_clamps_to_bounds() {
        let bounds = ImageBounds::new(20.0, 20.0);
        let anchor = b(10.0, 10.0, 20.0, 20.0);
        let out = decode(&Offset::new(1.0, 0.0, 0.0, 0.0), &anchor, bounds);
        assert_eq!(out, b(20.0, 10.0, 20.0, 20.0));
        assert!(out.is_degenerate());
    }

    #[test]
    fn miut_examples() {
        let sq = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(miut(&[sq; 5]), 1.0);
        assert_eq!(miut(&[sq]), 1.0);
        let shifted = b(5.0, 0.0, 15.0, 10.0);
        assert!((miut(&[sq, sq, shifted]) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn miut_even_length_uses_lower_median() {
        // len 4 -> centre index 2
        let sq = b(0.0, 0.0, 10.0, 10.0);
        let shifted = b(5.0, 0.0, 15.0, 10.0);
        let boxes = [sq, sq, shifted, shifted];
        // against index 2: IoU(sq, shifted) = 1/3
        assert!((miut(&boxes) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(miut(&[shifted, shifted, sq, sq]), box_iou(&sq, &shifted));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..300.0f64, 0.0..300.0f64, 0.5..100.0f64, 0.5..100.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let u = box_iou(&a, &c);
            prop_assert_eq!(u, box_iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&u));
            prop_assert_eq!(box_iou(&a, &a), 1.0);
        }

        #[test]
        fn codec_roundtrip(t in arb_box(), a in arb_box()) {
            let o = encode(&t, &a).unwrap();
            let back = decode(&o, &a, ImageBounds::new(400.0, 400.0));
            for (u, v) in back.to_array().iter().zip(t.to_array()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }

        #[test]
        fn miut_is_one_iff_all_match(boxes in prop::collection::vec(arb_box(), 1..8)) {
            let m = miut(&boxes);
            prop_assert!(m <= 1.0);
            let c = boxes[boxes.len() / 2];
            let all_match = boxes.iter().all(|x| box_iou(&c, x) == 1.0);
            prop_assert_eq!(m == 1.0, all_match);
        }
    }
}
