use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Smallest width/height a box is clamped to.
pub const MIN_EXTENT: f64 = 1e-4;

/// Axis-aligned box in normalised image coordinates, centre + size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    /// Centre into `[0, 1]`, extents into `[MIN_EXTENT, 1]`.
    pub fn clamped(&self) -> Self {
        let c = |v: f64| if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) };
        let e = |v: f64| if v.is_nan() { MIN_EXTENT } else { v.clamp(MIN_EXTENT, 1.0) };
        Self::new(c(self.cx), c(self.cy), e(self.w), e(self.h))
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Ordered set of boxes; the rows of an `N x 4` tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    boxes: Vec<BBox>,
}

impl BoxSet {
    pub fn new(boxes: Vec<BBox>) -> Self {
        Self { boxes }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn iter(&self) -> impl Iterator<Item = &BBox> {
        self.boxes.iter()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.boxes.is_empty() {
            return Err(Error::shape("boxes", "cannot build a tensor from an empty box set"));
        }
        Tensor::new(
            vec![self.boxes.len(), 4],
            self.boxes.iter().flat_map(|b| b.to_array()).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 || s[1] != 4 {
            return Err(Error::shape("boxes", format!("expected [N, 4], got {s:?}")));
        }
        Ok(Self::new(
            t.data()
                .chunks_exact(4)
                .map(|r| BBox::new(r[0], r[1], r[2], r[3]))
                .collect(),
        ))
    }

    pub fn clamped(&self) -> Self {
        Self::new(self.boxes.iter().map(BBox::clamped).collect())
    }
}

impl FromIterator<BBox> for BoxSet {
    fn from_iter<I: IntoIterator<Item = BBox>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}
