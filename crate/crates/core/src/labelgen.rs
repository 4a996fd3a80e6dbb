//! Box annotations to 3-class pixel targets via inscribed ellipses, and the
//! label-merge rules of the iterative self-training rounds.

use crate::error::{Error, Result};
use crate::imaging::{BBox, ProbMapOf, TriLabel, TriMask};
use crate::scalar::Real;

/// Inscribed ellipse of a bounding box: tangent to all four sides.
#[derive(Debug, Clone, Copy)]
pub struct EllipseGt {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
}

impl EllipseGt {
    pub fn from_box(bx: &BBox) -> Self {
        Self {
            cx: (bx.x0 + bx.x1) as f64 / 2.0,
            cy: (bx.y0 + bx.y1) as f64 / 2.0,
            a: bx.width() as f64 / 2.0,
            b: bx.height() as f64 / 2.0,
        }
    }

    #[inline]
    fn inside(&self, px: f64, py: f64, shrink: f64) -> bool {
        let (sa, sb) = (self.a - shrink, self.b - shrink);
        if sa <= 0.0 || sb <= 0.0 {
            return false;
        }
        let dx = (px - self.cx) / sa;
        let dy = (py - self.cy) / sb;
        dx * dx + dy * dy <= 1.0
    }
}

/// Rasterize the inscribed ellipses of `boxes` into a 3-class target mask.
///
/// A pixel is inner when it falls inside some box's ellipse shrunk by
/// `edge_width`, edge when inside the full ellipse but not the shrunk one.
/// Where boxes overlap, another box's edge overrules this box's inner region
/// so instances stay separable; within one box inner wins by construction
/// (the two bands are disjoint).
///
/// Degenerate boxes (width or height <= 2*edge_width) contribute an
/// edge-only ring and emit a warning.
pub fn rasterize_ellipse_targets(
    boxes: &[BBox],
    width: usize,
    height: usize,
    edge_width: usize,
) -> Result<TriMask> {
    if edge_width == 0 {
        return Err(Error::InvalidArgument("edge_width must be >= 1".into()));
    }
    let ew = edge_width as f64;
    let mut inner_any = vec![false; width * height];
    let mut edge_any = vec![false; width * height];
    for bx in boxes {
        let el = EllipseGt::from_box(bx);
        if el.a <= ew || el.b <= ew {
            log::warn!(
                "degenerate box [{},{})x[{},{}): edge-only ring",
                bx.x0,
                bx.x1,
                bx.y0,
                bx.y1
            );
        }
        let x_lo = bx.x0.min(width);
        let x_hi = bx.x1.min(width);
        let y_lo = bx.y0.min(height);
        let y_hi = bx.y1.min(height);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (px, py) = (x as f64, y as f64);
                if el.inside(px, py, ew) {
                    inner_any[y * width + x] = true;
                } else if el.inside(px, py, 0.0) {
                    edge_any[y * width + x] = true;
                }
            }
        }
    }
    let labels = inner_any
        .iter()
        .zip(&edge_any)
        .map(|(&inner, &edge)| {
            if edge {
                TriLabel::Edge as u8
            } else if inner {
                TriLabel::Inner as u8
            } else {
                TriLabel::Background as u8
            }
        })
        .collect();
    TriMask::from_raw(width, height, labels)
}

/// Merge a prediction into the initial ellipse ground truth (the refinement
/// step of a self-training round):
///
/// 1. inner := {P(inner) > inner_threshold} ∪ gt_inner,
/// 2. edge  := {argmax class = edge} ∪ gt_edge, overwriting inner,
/// 3. everything else background.
pub fn merge_refined_labels<S: Real>(
    ellipse_gt: &TriMask,
    pred: &ProbMapOf<S>,
    inner_threshold: f64,
) -> Result<TriMask> {
    if ellipse_gt.width() != pred.width() || ellipse_gt.height() != pred.height() {
        return Err(Error::InvalidArgument(format!(
            "merge dimension mismatch: gt {}x{}, pred {}x{}",
            ellipse_gt.width(),
            ellipse_gt.height(),
            pred.width(),
            pred.height()
        )));
    }
    if !(0.0 < inner_threshold && inner_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "inner_threshold {inner_threshold} outside (0,1)"
        )));
    }
    let thr = S::of_f64(inner_threshold);
    let (w, h) = (ellipse_gt.width(), ellipse_gt.height());
    let mut out = TriMask::all_background(w, h);
    for y in 0..h {
        for x in 0..w {
            let gt = ellipse_gt.get(x, y);
            let p = pred.get(x, y);
            let pred_inner = p[TriLabel::Inner as usize] > thr;
            let pred_edge = pred.argmax(x, y) == TriLabel::Edge as usize;
            let inner = pred_inner || gt == TriLabel::Inner;
            let edge = pred_edge || gt == TriLabel::Edge;
            let label = if edge {
                TriLabel::Edge
            } else if inner {
                TriLabel::Inner
            } else {
                TriLabel::Background
            };
            out.set(x, y, label);
        }
    }
    Ok(out)
}

/// Growth of the inner region between two masks:
/// `|inner(next) \ inner(prev)| / max(1, |inner(prev)|)`.
pub fn mask_growth(prev: &TriMask, next: &TriMask) -> Result<f64> {
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(Error::InvalidArgument(
            "mask_growth dimension mismatch".into(),
        ));
    }
    let inner = TriLabel::Inner as u8;
    let mut new_pixels = 0usize;
    let mut prev_pixels = 0usize;
    for (p, n) in prev.labels().iter().zip(next.labels()) {
        if *p == inner {
            prev_pixels += 1;
        } else if *n == inner {
            new_pixels += 1;
        }
    }
    Ok(new_pixels as f64 / prev_pixels.max(1) as f64)
}
