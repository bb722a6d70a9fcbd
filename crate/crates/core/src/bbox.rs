//! Axis-aligned boxes in pixel (`x, y, w, h`, top-left origin) and normalized
//! center (`cx, cy, w, h`) forms.

use serde::{Deserialize, Serialize};

/// Pixel box with top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU: IoU minus the fraction of the enclosing box not covered by the union.
    pub fn giou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        let ex = self.right().max(other.right()) - self.x.min(other.x);
        let ey = self.bottom().max(other.bottom()) - self.y.min(other.y);
        let enclosing = ex * ey;
        if union <= 0.0 || enclosing <= 0.0 {
            return 0.0;
        }
        inter / union - (enclosing - union) / enclosing
    }

    /// Clip to `[0, width] x [0, height]`; `None` when nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.right().min(width);
        let y1 = self.bottom().min(height);
        if x1 <= x0 || y1 <= y0 {
            None
        } else {
            Some(BBox::new(x0, y0, x1 - x0, y1 - y0))
        }
    }

    pub fn to_normalized(&self, width: f64, height: f64) -> NormBox {
        let (cx, cy) = self.center();
        NormBox {
            cx: cx / width,
            cy: cy / height,
            w: self.w / width,
            h: self.h / height,
        }
    }
}

/// Normalized center-format box, all coordinates in `[0, 1]` image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn to_pixels(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            (self.cx - 0.5 * self.w) * width,
            (self.cy - 0.5 * self.h) * height,
            self.w * width,
            self.h * height,
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        }
    }

    pub fn iou(&self, other: &NormBox) -> f64 {
        self.to_pixels(1.0, 1.0).iou(&other.to_pixels(1.0, 1.0))
    }

    pub fn giou(&self, other: &NormBox) -> f64 {
        self.to_pixels(1.0, 1.0).giou(&other.to_pixels(1.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_of_disjoint_unit_squares() {
        // corners (0,0)-(1,1) and (2,0)-(3,1): union 2, hull 3x1
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(2.0, 0.0, 1.0, 1.0);
        assert_eq!(a.iou(&b), 0.0);
        assert!((a.giou(&b) - (-1.0 / 3.0)).abs() < 1e-15);
        assert_eq!(a.giou(&a), 1.0);
    }

    #[test]
    fn clip_drops_outside_boxes() {
        let b = BBox::new(-20.0, 5.0, 10.0, 10.0);
        assert!(b.clip(100.0, 100.0).is_none());
        let c = BBox::new(95.0, 95.0, 10.0, 10.0).clip(100.0, 100.0).unwrap();
        assert_eq!((c.w, c.h), (5.0, 5.0));
    }

    #[test]
    fn normalized_round_trip() {
        let b = BBox::new(10.0, 20.0, 30.0, 40.0);
        let n = b.to_normalized(200.0, 100.0);
        let back = n.to_pixels(200.0, 100.0);
        assert!((back.x - b.x).abs() < 1e-12 && (back.h - b.h).abs() < 1e-12);
    }
}
