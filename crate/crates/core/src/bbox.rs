/// Axis-aligned box in center form.
///
/// The same type carries normalized search-crop coordinates (head output)
/// and frame pixels (tracker state, datasets); the unit is set by context.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// From top-left corner plus size.
    pub fn from_top_left(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    /// `(x, y, w, h)` with `(x, y)` the top-left corner.
    pub fn to_top_left(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }

    /// Normalized-box invariant: center in `[0,1]`, extents in `(0,1]`.
    pub fn is_valid_normalized(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }

    /// Keeps the box inside a `width x height` frame: size is capped to the
    /// frame and the center is clamped so the box stays fully inside.
    pub fn clamp_to_frame(&self, width: f64, height: f64, min_side: f64) -> BBox {
        let w = self.w.clamp(min_side, width);
        let h = self.h.clamp(min_side, height);
        BBox::new(
            self.cx.clamp(w / 2.0, width - w / 2.0),
            self.cy.clamp(h / 2.0, height - h / 2.0),
            w,
            h,
        )
    }
}
