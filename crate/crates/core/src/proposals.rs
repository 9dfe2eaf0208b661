//! Initial proposal cuboids: sliding-window pyramid boxes replicated over a clip.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StepError};
use crate::geometry::{BBox, FrameRange, ImageBounds, Tubelet};

/// One pyramid level: windows of size `frame / scale` with fractional `overlap`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidLevel {
    pub scale: f64,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidSpec {
    pub width: f64,
    pub height: f64,
    pub levels: Vec<PyramidLevel>,
    /// Extra single boxes of size `frame / scale` centred in the frame.
    #[serde(default)]
    pub centered: Vec<f64>,
}

impl PyramidSpec {
    /// Two-level pyramid, scales 4/3 and 2 with overlaps 5/6 and 3/4: 9 + 25 = 34 boxes.
    pub fn ava(width: f64, height: f64) -> Self {
        PyramidSpec {
            width,
            height,
            levels: vec![
                PyramidLevel {
                    scale: 4.0 / 3.0,
                    overlap: 5.0 / 6.0,
                },
                PyramidLevel {
                    scale: 2.0,
                    overlap: 0.75,
                },
            ],
            centered: Vec::new(),
        }
    }

    /// Eleven coarse boxes: the full frame, a 3x3 grid of half-size windows
    /// and one centred 3/4-size window.
    pub fn coarse11(width: f64, height: f64) -> Self {
        PyramidSpec {
            width,
            height,
            levels: vec![
                PyramidLevel {
                    scale: 1.0,
                    overlap: 0.0,
                },
                PyramidLevel {
                    scale: 2.0,
                    overlap: 0.5,
                },
            ],
            centered: vec![4.0 / 3.0],
        }
    }

    pub fn bounds(&self) -> ImageBounds {
        ImageBounds::new(self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(StepError::InvalidConfig(format!(
                "frame size must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        for l in &self.levels {
            if !(l.scale >= 1.0) {
                return Err(StepError::InvalidConfig(format!(
                    "pyramid scale must be >= 1, got {}",
                    l.scale
                )));
            }
            if !(0.0..1.0).contains(&l.overlap) {
                return Err(StepError::InvalidConfig(format!(
                    "pyramid overlap must lie in [0, 1), got {} (stride would be <= 0)",
                    l.overlap
                )));
            }
        }
        for &s in &self.centered {
            if !(s >= 1.0) {
                return Err(StepError::InvalidConfig(format!(
                    "centred box scale must be >= 1, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Window origins along one axis: stride multiples from 0 that keep the window
/// inside `[0, extent]`, plus a flush position against the far edge when the
/// grid misses it.
fn axis_positions(extent: f64, window: f64, stride: f64) -> Vec<f64> {
    let span = extent - window;
    let eps = 1e-9 * extent.max(1.0);
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let p = i as f64 * stride;
        if p > span + eps {
            break;
        }
        out.push(p.min(span));
        i += 1;
    }
    if let Some(&last) = out.last() {
        if last < span - eps {
            out.push(span);
        }
    }
    out
}

pub fn generate_pyramid(spec: &PyramidSpec) -> Result<Vec<BBox>> {
    spec.validate()?;
    let mut boxes: Vec<BBox> = Vec::new();
    let mut push = |b: BBox| {
        let dup = boxes.iter().any(|o| {
            o.to_array()
                .iter()
                .zip(b.to_array())
                .all(|(u, v)| (u - v).abs() <= 1e-9 * spec.width.max(spec.height))
        });
        if !dup {
            boxes.push(b);
        }
    };
    for level in &spec.levels {
        let (ww, wh) = (spec.width / level.scale, spec.height / level.scale);
        let xs = axis_positions(spec.width, ww, ww * (1.0 - level.overlap));
        let ys = axis_positions(spec.height, wh, wh * (1.0 - level.overlap));
        for &y in &ys {
            for &x in &xs {
                push(BBox::new(x, y, x + ww, y + wh));
            }
        }
    }
    for &s in &spec.centered {
        push(BBox::from_center(
            spec.width / 2.0,
            spec.height / 2.0,
            spec.width / s,
            spec.height / s,
        ));
    }
    Ok(boxes)
}

/// Replicates each 2D box across the clip.
pub fn replicate_to_cuboids(boxes: &[BBox], clip: FrameRange) -> Result<Vec<Tubelet>> {
    if clip.len == 0 {
        return Err(StepError::InvalidConfig("clip length must be >= 1".into()));
    }
    Ok(boxes.iter().map(|&b| Tubelet::cuboid(b, clip)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::tubelet_overlap;

    #[test]
    fn ava_pyramid_has_34_boxes() {
        let boxes = generate_pyramid(&PyramidSpec::ava(320.0, 240.0)).unwrap();
        assert_eq!(boxes.len(), 34);
    }

    #[test]
    fn ava_levels_enumerate_by_hand() {
        // window 3W/4, stride W/8 over a span of W/4 -> 3 positions per axis
        let mut spec = PyramidSpec::ava(320.0, 240.0);
        let second = spec.levels.pop().unwrap();
        let first = generate_pyramid(&spec).unwrap();
        assert_eq!(first.len(), 9);
        for (b, x) in first.iter().zip([0.0, 40.0, 80.0]) {
            assert!((b.x1 - x).abs() < 1e-9);
        }

        spec.levels = vec![second];
        assert_eq!(generate_pyramid(&spec).unwrap().len(), 25);
    }

    #[test]
    fn single_full_frame_level() {
        let spec = PyramidSpec {
            width: 64.0,
            height: 48.0,
            levels: vec![PyramidLevel {
                scale: 1.0,
                overlap: 0.0,
            }],
            centered: vec![],
        };
        assert_eq!(
            generate_pyramid(&spec).unwrap(),
            vec![BBox::new(0.0, 0.0, 64.0, 48.0)]
        );
    }

    #[test]
    fn coarse_layout_has_eleven_boxes() {
        assert_eq!(
            generate_pyramid(&PyramidSpec::coarse11(320.0, 240.0))
                .unwrap()
                .len(),
            11
        );
    }

    #[test]
    fn flush_edge_window_added() {
        // window 40 on 100 with stride 40 -> 0, 40, then flush 60 (per axis)
        let spec = PyramidSpec {
            width: 100.0,
            height: 100.0,
            levels: vec![PyramidLevel {
                scale: 2.5,
                overlap: 0.0,
            }],
            centered: vec![],
        };
        let xs: Vec<f64> = generate_pyramid(&spec)
            .unwrap()
            .iter()
            .filter(|b| b.y1 == 0.0)
            .map(|b| b.x1)
            .collect();
        assert_eq!(xs, vec![0.0, 40.0, 60.0]);
    }

    #[test]
    fn rejects_full_overlap() {
        let mut spec = PyramidSpec::ava(320.0, 240.0);
        spec.levels[0].overlap = 1.0;
        assert!(generate_pyramid(&spec).is_err());
    }

    #[test]
    fn boxes_lie_inside_frame() {
        for (w, h) in [(320.0, 240.0), (101.0, 77.0), (400.0, 400.0)] {
            for spec in [PyramidSpec::ava(w, h), PyramidSpec::coarse11(w, h)] {
                for b in generate_pyramid(&spec).unwrap() {
                    assert!(b.is_inside(spec.bounds()), "{b:?}");
                }
            }
        }
    }

    #[test]
    fn cuboids_are_constant() {
        let boxes = generate_pyramid(&PyramidSpec::coarse11(320.0, 240.0)).unwrap();
        let clip = FrameRange::new(12, 6);
        let cubes = replicate_to_cuboids(&boxes, clip).unwrap();
        assert_eq!(cubes.len(), 11);
        for c in &cubes {
            assert_eq!(c.len(), 6);
            assert_eq!(c.miut(), 1.0);
            assert_eq!(tubelet_overlap(c, c, clip).unwrap(), 1.0);
        }

        let one = replicate_to_cuboids(&boxes[..1], FrameRange::new(0, 1)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 1);

        let ava = generate_pyramid(&PyramidSpec::ava(320.0, 240.0)).unwrap();
        assert_eq!(
            replicate_to_cuboids(&ava, FrameRange::new(0, 12))
                .unwrap()
                .len(),
            34
        );
        assert!(replicate_to_cuboids(&ava, FrameRange::new(0, 0)).is_err());
    }
}
