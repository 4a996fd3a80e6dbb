//! Fundamental raster and geometry types shared by every other module, plus
//! connected-component and box-extraction primitives.
//!
//! Conventions used throughout the crate:
//! - pixel `(x, y)` is treated as the point `(x, y)` (no half-pixel offset),
//! - boxes are half-open `[x0, x1) × [y0, y1)` so area is `(x1-x0)*(y1-y0)`,
//! - components and lattice graphs are 4-connected.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Per-pixel class labels of the 3-class segmentation task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum TriLabel {
    Background = 0,
    Edge = 1,
    Inner = 2,
}

impl TriLabel {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(TriLabel::Background),
            1 => Some(TriLabel::Edge),
            2 => Some(TriLabel::Inner),
            _ => None,
        }
    }
}

/// 8-bit RGB raster, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageU8 {
    /// Number of interleaved channels (fixed RGB).
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be >= 1, got {width}x{height}"
            )));
        }
        Ok(Self {
            width,
            height,
            data: vec![0; width * height * Self::CHANNELS],
        })
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be >= 1, got {width}x{height}"
            )));
        }
        if data.len() != width * height * Self::CHANNELS {
            return Err(Error::InvalidArgument(format!(
                "image data length {} does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }
}

/// Per-pixel 3-class label map (background / cell edge / cell inner region).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl TriMask {
    pub fn filled(width: usize, height: usize, label: TriLabel) -> Self {
        Self {
            width,
            height,
            labels: vec![label as u8; width * height],
        }
    }

    pub fn all_background(width: usize, height: usize) -> Self {
        Self::filled(width, height, TriLabel::Background)
    }

    /// Build from raw label bytes; every value must be in {0, 1, 2}.
    pub fn from_raw(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "label length {} does not match {width}x{height}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&v| v > 2) {
            return Err(Error::InvalidArgument(format!(
                "tri-mask value {bad} outside {{0,1,2}}"
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> TriLabel {
        TriLabel::from_u8(self.labels[y * self.width + x]).unwrap()
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: TriLabel) {
        self.labels[y * self.width + x] = label as u8;
    }

    /// Count of pixels carrying `label`.
    pub fn count(&self, label: TriLabel) -> usize {
        let v = label as u8;
        self.labels.iter().filter(|&&l| l == v).count()
    }
}

/// Per-pixel 3-vector of class probabilities, `[bg, edge, inner]` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMapOf<S> {
    width: usize,
    height: usize,
    probs: Vec<S>,
}

impl<S: Real> ProbMapOf<S> {
    pub const CLASSES: usize = 3;

    /// Build from pixel-major data (`[p0_bg, p0_edge, p0_inner, p1_bg, ...]`).
    pub fn from_raw(width: usize, height: usize, probs: Vec<S>) -> Result<Self> {
        if probs.len() != width * height * Self::CLASSES {
            return Err(Error::InvalidArgument(format!(
                "prob length {} does not match {width}x{height}x3",
                probs.len()
            )));
        }
        Ok(Self {
            width,
            height,
            probs,
        })
    }

    /// A map that puts probability 1 on the background class everywhere.
    pub fn all_background(width: usize, height: usize) -> Self {
        let mut probs = vec![S::zero(); width * height * 3];
        for px in probs.chunks_exact_mut(3) {
            px[0] = S::one();
        }
        Self {
            width,
            height,
            probs,
        }
    }

    /// Probability 1 on the labelled class of `mask` at every pixel.
    pub fn one_hot(mask: &TriMask) -> Self {
        let mut probs = vec![S::zero(); mask.width() * mask.height() * 3];
        for (px, &l) in probs.chunks_exact_mut(3).zip(mask.labels()) {
            px[l as usize] = S::one();
        }
        Self {
            width: mask.width(),
            height: mask.height(),
            probs,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Pixel-major probability buffer.
    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [S; 3] {
        let i = (y * self.width + x) * 3;
        [self.probs[i], self.probs[i + 1], self.probs[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, p: [S; 3]) {
        let i = (y * self.width + x) * 3;
        self.probs[i] = p[0];
        self.probs[i + 1] = p[1];
        self.probs[i + 2] = p[2];
    }

    /// Verify every pixel's 3-vector is nonnegative and sums to 1 within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for (i, px) in self.probs.chunks_exact(3).enumerate() {
            let sum: f64 = px.iter().map(|p| p.as_f64()).sum();
            if px.iter().any(|p| *p < S::zero()) || (sum - 1.0).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "probability vector at pixel {i} invalid (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    /// Index of the maximal class at a pixel; ties go to the lowest index.
    #[inline]
    pub fn argmax(&self, x: usize, y: usize) -> usize {
        let p = self.get(x, y);
        let mut best = 0;
        for c in 1..3 {
            if p[c] > p[best] {
                best = c;
            }
        }
        best
    }

    /// Per-pixel argmax as a TriMask.
    pub fn argmax_mask(&self) -> TriMask {
        let labels = self
            .probs
            .chunks_exact(3)
            .map(|px| {
                let mut best = 0u8;
                for c in 1..3u8 {
                    if px[c as usize] > px[best as usize] {
                        best = c;
                    }
                }
                best
            })
            .collect();
        TriMask {
            width: self.width,
            height: self.height,
            labels,
        }
    }

    /// Convert the scalar type (used to run walker solves in f64).
    pub fn cast<T: Real>(&self) -> ProbMapOf<T> {
        ProbMapOf {
            width: self.width,
            height: self.height,
            probs: self.probs.iter().map(|p| T::of_f64(p.as_f64())).collect(),
        }
    }
}

/// Per-pixel instance labels: 0 = background, k >= 1 = instance k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    width: usize,
    height: usize,
    ids: Vec<u32>,
}

impl InstanceMask {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    /// Highest instance id (ids are dense 1..=K).
    pub fn num_instances(&self) -> u32 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    /// Pixel count per instance id, indexed 1..=K.
    pub fn areas(&self) -> Vec<usize> {
        let k = self.num_instances() as usize;
        let mut areas = vec![0usize; k + 1];
        for &id in &self.ids {
            areas[id as usize] += 1;
        }
        areas
    }

    pub(crate) fn from_raw_unchecked(width: usize, height: usize, ids: Vec<u32>) -> Self {
        Self { width, height, ids }
    }
}

/// Binary per-pixel map, the input of connected-component labeling.
#[derive(Debug, Clone)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }
}

/// Axis-aligned half-open pixel box with a confidence score.
/// Ground-truth boxes carry the default score 1.0, which is omitted from
/// JSON so annotation files stay plain `{x0, y0, x1, y1}` records.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    #[serde(default = "default_score", skip_serializing_if = "is_default_score")]
    pub score: f32,
}

fn default_score() -> f32 {
    1.0
}

#[allow(clippy::trivially_copy_pass_by_ref)]
fn is_default_score(score: &f32) -> bool {
    *score == 1.0
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize, score: f32) -> Result<Self> {
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate box [{x0},{x1})x[{y0},{y1})"
            )));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!(
                "box score {score} outside [0,1]"
            )));
        }
        Ok(Self {
            x0,
            y0,
            x1,
            y1,
            score,
        })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }

    /// Intersection area under the half-open convention.
    pub fn intersection_area(&self, other: &BBox) -> usize {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        if x1 > x0 && y1 > y0 {
            (x1 - x0) * (y1 - y0)
        } else {
            0
        }
    }
}

/// Intersection-over-union of two boxes using half-open pixel areas.
pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// 4-connectivity component labeling; ids are dense 1..=K in first-encounter
/// (row-major scan) order. An all-false mask yields K = 0.
pub fn connected_components(mask: &BinaryMask) -> InstanceMask {
    let (w, h) = (mask.width, mask.height);
    let mut ids = vec![0u32; w * h];
    let mut next = 0u32;
    let mut stack: Vec<usize> = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || ids[start] != 0 {
            continue;
        }
        next += 1;
        ids[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.data[j] && ids[j] == 0 {
                    ids[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    InstanceMask {
        width: w,
        height: h,
        ids,
    }
}

/// Tightest half-open box containing all pixels of instance `id`; the score
/// is the mean inner-class probability over the instance's pixels.
pub fn instance_to_box<S: Real>(
    inst: &InstanceMask,
    id: u32,
    scores: &ProbMapOf<S>,
) -> Result<BBox> {
    if inst.width() != scores.width() || inst.height() != scores.height() {
        return Err(Error::InvalidArgument(
            "instance mask and probability map dimensions differ".into(),
        ));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for y in 0..inst.height {
        for x in 0..inst.width {
            if inst.get(x, y) == id {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
                sum += scores.get(x, y)[TriLabel::Inner as usize].as_f64();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "instance id {id} does not exist"
        )));
    }
    BBox::new(x0, y0, x1, y1, (sum / n as f64).clamp(0.0, 1.0) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from_str(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(w, h, |x, y| rows[y].as_bytes()[x] == b'1')
    }

    #[test]
    fn components_empty_mask() {
        let m = mask_from_str(&["000", "000"]);
        let inst = connected_components(&m);
        assert_eq!(inst.num_instances(), 0);
        assert!(inst.ids().iter().all(|&v| v == 0));
    }

    #[test]
    fn components_all_ones() {
        let m = mask_from_str(&["11111"; 5]);
        let inst = connected_components(&m);
        assert_eq!(inst.num_instances(), 1);
        assert!(inst.ids().iter().all(|&v| v == 1));
    }

    #[test]
    fn components_diagonal_pixels_are_separate() {
        // Touching only diagonally: 4-connectivity keeps them apart.
        let m = mask_from_str(&["10", "01"]);
        let inst = connected_components(&m);
        assert_eq!(inst.num_instances(), 2);
        assert_eq!(inst.get(0, 0), 1);
        assert_eq!(inst.get(1, 1), 2);
    }

    #[test]
    fn components_scan_order_ids() {
        let m = mask_from_str(&["0101", "0101", "0000", "1111"]);
        let inst = connected_components(&m);
        assert_eq!(inst.num_instances(), 3);
        assert_eq!(inst.get(1, 0), 1);
        assert_eq!(inst.get(3, 0), 2);
        assert_eq!(inst.get(0, 3), 3);
    }

    #[test]
    fn box_of_single_pixel() {
        let m = BinaryMask::from_fn(8, 8, |x, y| x == 3 && y == 4);
        let inst = connected_components(&m);
        let probs = ProbMapOf::<f32>::all_background(8, 8);
        let b = instance_to_box(&inst, 1, &probs).unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (3, 4, 4, 5));
    }

    #[test]
    fn box_of_rectangle() {
        let m = BinaryMask::from_fn(16, 12, |x, y| (2..12).contains(&x) && (3..9).contains(&y));
        let inst = connected_components(&m);
        let probs = ProbMapOf::<f32>::all_background(16, 12);
        let b = instance_to_box(&inst, 1, &probs).unwrap();
        assert_eq!(b.width(), 10);
        assert_eq!(b.height(), 6);
    }

    #[test]
    fn box_of_l_shape() {
        // L-shape spanning rows 2..8, cols 1..5: min/max over the pixel list.
        let m = BinaryMask::from_fn(10, 10, |x, y| {
            (x == 1 && (2..=8).contains(&y)) || (y == 8 && (1..=5).contains(&x))
        });
        let inst = connected_components(&m);
        let probs = ProbMapOf::<f32>::all_background(10, 10);
        let b = instance_to_box(&inst, 1, &probs).unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (1, 2, 6, 9));
    }

    #[test]
    fn box_unknown_id_is_error() {
        let m = mask_from_str(&["1"]);
        let inst = connected_components(&m);
        let probs = ProbMapOf::<f32>::all_background(1, 1);
        assert!(instance_to_box(&inst, 2, &probs).is_err());
    }

    #[test]
    fn box_score_is_mean_inner_probability() {
        let m = mask_from_str(&["11"]);
        let inst = connected_components(&m);
        let mut probs = ProbMapOf::<f32>::all_background(2, 1);
        probs.set(0, 0, [0.0, 0.2, 0.8]);
        probs.set(1, 0, [0.4, 0.2, 0.4]);
        let b = instance_to_box(&inst, 1, &probs).unwrap();
        assert!((b.score - 0.6).abs() < 1e-6);
    }

    #[test]
    fn iou_hand_cases() {
        let a = BBox::new(0, 0, 10, 10, 1.0).unwrap();
        assert_eq!(bbox_iou(&a, &a), 1.0);
        let b = BBox::new(20, 20, 30, 30, 1.0).unwrap();
        assert_eq!(bbox_iou(&a, &b), 0.0);
        let c = BBox::new(5, 5, 15, 15, 1.0).unwrap();
        let iou = bbox_iou(&a, &c);
        assert!((iou - 25.0 / 175.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(
            ax0 in 0usize..20, aw in 1usize..15, ay0 in 0usize..20, ah in 1usize..15,
            bx0 in 0usize..20, bw in 1usize..15, by0 in 0usize..20, bh in 1usize..15,
        ) {
            let a = BBox::new(ax0, ay0, ax0 + aw, ay0 + ah, 1.0).unwrap();
            let b = BBox::new(bx0, by0, bx0 + bw, by0 + bh, 1.0).unwrap();
            let ab = bbox_iou(&a, &b);
            let ba = bbox_iou(&b, &a);
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            let identical = (a.x0, a.y0, a.x1, a.y1) == (b.x0, b.y0, b.x1, b.y1);
            prop_assert_eq!(ab == 1.0, identical);
        }

        #[test]
        fn components_boxes_are_minimal(bits in proptest::collection::vec(any::<bool>(), 36)) {
            let m = BinaryMask::from_fn(6, 6, |x, y| bits[y * 6 + x]);
            let inst = connected_components(&m);
            let probs = ProbMapOf::<f32>::all_background(6, 6);
            let k = inst.num_instances();
            for id in 1..=k {
                let b = instance_to_box(&inst, id, &probs).unwrap();
                // Shrinking any side by one pixel must exclude an instance pixel.
                let col_hit = |x: usize| (b.y0..b.y1).any(|y| inst.get(x, y) == id);
                let row_hit = |y: usize| (b.x0..b.x1).any(|x| inst.get(x, y) == id);
                prop_assert!(col_hit(b.x0) && col_hit(b.x1 - 1));
                prop_assert!(row_hit(b.y0) && row_hit(b.y1 - 1));
            }
            // ids dense 1..=K
            let mut seen = vec![false; k as usize + 1];
            for &id in inst.ids() {
                seen[id as usize] = true;
            }
            prop_assert!(seen.iter().skip(1).all(|&s| s));
        }
    }
}
