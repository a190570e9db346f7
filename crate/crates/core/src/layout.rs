//! Layout condition: class-labeled axis-aligned boxes plus a global caption
//! over a closed vocabulary.

use crate::error::{FicgenError, Result};
use serde::{Deserialize, Serialize};

/// Hard cap on instances per layout.
pub const MAX_INSTANCES: usize = 15;

/// Normalized box, corners in `[0, 1]`, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn aspect(&self) -> f64 {
        self.width() / self.height().max(1e-9)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Horizontal mirror: x -> 1 - x with corner swap.
    pub fn mirror_x(&self) -> Self {
        Self {
            x1: 1.0 - self.x2,
            y1: self.y1,
            x2: 1.0 - self.x1,
            y2: self.y2,
        }
    }

    /// Pixel rectangle `(row0, col0, rows, cols)` at a raster resolution,
    /// rounded outward and clamped so at least one pixel survives.
    pub fn pixel_rect(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let c0 = ((self.x1 * w as f64).floor() as isize).clamp(0, w as isize - 1) as usize;
        let r0 = ((self.y1 * h as f64).floor() as isize).clamp(0, h as isize - 1) as usize;
        let c1 = ((self.x2 * w as f64).ceil() as isize).clamp(c0 as isize + 1, w as isize) as usize;
        let r1 = ((self.y2 * h as f64).ceil() as isize).clamp(r0 as isize + 1, h as isize) as usize;
        (r0, c0, r1 - r0, c1 - c0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && (0.0..=1.0).contains(&self.x1)
            && (0.0..=1.0).contains(&self.y1)
            && (0.0..=1.0).contains(&self.x2)
            && (0.0..=1.0).contains(&self.y2)
            && self.x1 < self.x2
            && self.y1 < self.y2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Generation condition: boxes plus caption token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LayoutSpec {
    pub instances: Vec<Instance>,
    pub caption: Vec<usize>,
}

impl LayoutSpec {
    pub fn n(&self) -> usize {
        self.instances.len()
    }

    /// Validate against the type invariants and a vocabulary size. Errors
    /// carry the failing box index.
    pub fn validate(&self, num_classes: usize, vocab_size: usize) -> Result<()> {
        if self.instances.len() > MAX_INSTANCES {
            return Err(FicgenError::LayoutInvalid {
                index: MAX_INSTANCES,
                reason: format!(
                    "{} instances exceed the cap of {MAX_INSTANCES}",
                    self.instances.len()
                ),
            });
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if !inst.bbox.is_valid() {
                return Err(FicgenError::LayoutInvalid {
                    index: i,
                    reason: format!("bbox {:?} violates corner constraints", inst.bbox),
                });
            }
            if inst.class_id >= num_classes {
                return Err(FicgenError::LayoutInvalid {
                    index: i,
                    reason: format!("class id {} outside vocabulary", inst.class_id),
                });
            }
        }
        for (i, &tok) in self.caption.iter().enumerate() {
            if tok >= vocab_size {
                return Err(FicgenError::LayoutInvalid {
                    index: i,
                    reason: format!("caption token {tok} outside vocabulary"),
                });
            }
        }
        Ok(())
    }

    /// Max pairwise IoU between instance boxes; 0 for fewer than two boxes.
    pub fn max_pairwise_iou(&self) -> f64 {
        let mut best: f64 = 0.0;
        for i in 0..self.instances.len() {
            for j in (i + 1)..self.instances.len() {
                best = best.max(self.instances[i].bbox.iou(&self.instances[j].bbox));
            }
        }
        best
    }
}

/// Closed token vocabulary: class names first (token id == class id),
/// then degradation words and glue words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub words: Vec<String>,
    pub num_classes: usize,
}

impl Vocab {
    pub fn new(classes: &[String], extra: &[&str]) -> Self {
        let mut words: Vec<String> = classes.to_vec();
        words.extend(extra.iter().map(|s| s.to_string()));
        Self {
            words,
            num_classes: classes.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_validity_and_iou() {
        assert!(BBox::new(0.1, 0.1, 0.5, 0.5).is_valid());
        assert!(!BBox::new(0.5, 0.1, 0.5, 0.5).is_valid());
        assert!(!BBox::new(-0.1, 0.1, 0.5, 0.5).is_valid());
        let a = BBox::new(0.0, 0.0, 0.5, 1.0);
        let b = BBox::new(0.25, 0.0, 0.75, 1.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((a.iou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mirror_swaps_corners() {
        let b = BBox::new(0.2, 0.3, 0.4, 0.5).mirror_x();
        assert!((b.x1 - 0.6).abs() < 1e-12);
        assert!((b.x2 - 0.8).abs() < 1e-12);
        assert!((b.y1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn pixel_rect_never_empty() {
        let tiny = BBox::new(0.501, 0.501, 0.502, 0.502);
        let (r0, c0, rh, cw) = tiny.pixel_rect(8, 8);
        assert!(rh >= 1 && cw >= 1);
        assert!(r0 < 8 && c0 < 8);
        let full = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(full.pixel_rect(8, 8), (0, 0, 8, 8));
    }

    #[test]
    fn layout_validation_reports_index() {
        let mut layout = LayoutSpec::default();
        layout.instances.push(Instance {
            class_id: 0,
            bbox: BBox::new(0.1, 0.1, 0.6, 0.6),
        });
        layout.instances.push(Instance {
            class_id: 9,
            bbox: BBox::new(0.1, 0.1, 0.6, 0.6),
        });
        match layout.validate(6, 12) {
            Err(FicgenError::LayoutInvalid { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected layout error, got {other:?}"),
        }
    }
}
