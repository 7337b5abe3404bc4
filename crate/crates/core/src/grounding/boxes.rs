use serde::{Deserialize, Serialize};

use crate::raster::Mask;

/// Corner coordinates as fractions of the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl NormalizedBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_array(v: [f32; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn in_unit_range(&self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Swaps reversed corners.
    pub fn ordered(self) -> Self {
        Self {
            x1: self.x1.min(self.x2),
            y1: self.y1.min(self.y2),
            x2: self.x1.max(self.x2),
            y2: self.y1.max(self.y2),
        }
    }
}

/// Continuous pixel-space box; `(x1, y1)` is the top-left edge and `(x2, y2)`
/// the bottom-right edge, so a single pixel at `(3, 4)` is `(3, 4, 4, 5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl PixelBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(v: [f32; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Tight box around the foreground of `mask`.
    pub fn from_mask(mask: &Mask) -> Option<Self> {
        mask.extent()
            .map(|(x0, y0, x1, y1)| Self::new(x0 as f32, y0 as f32, (x1 + 1) as f32, (y1 + 1) as f32))
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn within(&self, w: usize, h: usize) -> bool {
        let (w, h) = (w as f32, h as f32);
        0.0 <= self.x1 && self.x1 <= self.x2 && self.x2 <= w && 0.0 <= self.y1 && self.y1 <= self.y2 && self.y2 <= h
    }

    pub fn normalized(&self, w: usize, h: usize) -> NormalizedBox {
        let (w, h) = (w as f32, h as f32);
        NormalizedBox::new(self.x1 / w, self.y1 / h, self.x2 / w, self.y2 / h)
    }
}

/// Componentwise `(x1·W, y1·H, x2·W, y2·H)` without any repair.
pub fn rescale_raw(b: NormalizedBox, w: f32, h: f32) -> PixelBox {
    PixelBox::new(b.x1 * w, b.y1 * h, b.x2 * w, b.y2 * h)
}

/// Rescale to pixels, then repair: reversed corners are swapped and sides
/// shorter than one pixel grow to one pixel around their midpoint, shifted
/// back inside the image when needed.
pub fn rescale_box(b: NormalizedBox, w: usize, h: usize) -> PixelBox {
    let (wf, hf) = (w.max(1) as f32, h.max(1) as f32);
    let raw = rescale_raw(b, wf, hf);
    let (x1, x2) = repair_side(raw.x1, raw.x2, wf);
    let (y1, y2) = repair_side(raw.y1, raw.y2, hf);
    PixelBox::new(x1, y1, x2, y2)
}

fn repair_side(a: f32, b: f32, limit: f32) -> (f32, f32) {
    let clamp = |v: f32| if v.is_nan() { 0.0 } else { v.clamp(0.0, limit) };
    let (mut lo, mut hi) = (clamp(a.min(b)), clamp(a.max(b)));
    if hi - lo < 1.0 {
        let mid = 0.5 * (lo + hi);
        lo = mid - 0.5;
        hi = mid + 0.5;
        if lo < 0.0 {
            lo = 0.0;
            hi = 1.0;
        } else if hi > limit {
            hi = limit;
            lo = limit - 1.0;
        }
    }
    (lo, hi)
}

/// Intersection over union of two pixel boxes; `0` when disjoint.
pub fn box_iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0) as f64;
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0) as f64;
    let inter = iw * ih;
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}
