//! Combined cross-entropy / soft-IOU segmentation loss.
//!
//! For each class S in {edge, inner} with binary targets y and predicted
//! class probability p:
//!
//! ```text
//! ce  = -sum_S sum_i [ y_i ln p_i + (1-y_i) ln(1-p_i) ] / n_pixels
//! iou =  sum_S [ 1 - sum(y*p) / (sum(y) + sum(p) - sum(y*p)) ]
//! total = ce + iou
//! ```
//!
//! Probabilities are clamped to `[1e-7, 1-1e-7]` before the logs; a class
//! that is empty in both target and prediction contributes 0 to the IOU term
//! (an absent class counts as perfectly predicted).

use crate::error::{Error, Result};
use crate::imaging::{ProbMapOf, TriMask};
use crate::scalar::Real;

const CLAMP: f64 = 1e-7;

/// Loss components; `total = ce + iou`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub ce: f64,
    pub iou: f64,
}

/// Loss on planar probabilities (`[class][pixel]`, 3 classes) against labels.
pub(crate) fn loss_planar<S: Real>(probs: &[S], labels: &[u8]) -> LossValues {
    let n = labels.len();
    debug_assert_eq!(probs.len(), 3 * n);
    let mut ce_sum = 0.0f64;
    let mut iou = 0.0f64;
    for class in 1..3u8 {
        let plane = &probs[class as usize * n..(class as usize + 1) * n];
        let mut inter = 0.0f64;
        let mut sum_y = 0.0f64;
        let mut sum_p = 0.0f64;
        for (&p, &l) in plane.iter().zip(labels) {
            let p = p.as_f64();
            let pc = p.clamp(CLAMP, 1.0 - CLAMP);
            let y = (l == class) as u8 as f64;
            ce_sum += y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            inter += y * p;
            sum_y += y;
            sum_p += p;
        }
        let union = sum_y + sum_p - inter;
        if union > 0.0 {
            iou += 1.0 - inter / union;
        }
    }
    let ce = -ce_sum / n as f64;
    LossValues {
        total: ce + iou,
        ce,
        iou,
    }
}

/// dLoss/dprobs for `loss_planar`, planar layout. The background plane gets
/// zero gradient; the softmax backward couples it.
pub(crate) fn loss_backward_planar<S: Real>(probs: &[S], labels: &[u8]) -> Vec<S> {
    let n = labels.len();
    let mut grad = vec![S::zero(); 3 * n];
    let inv_n = 1.0 / n as f64;
    for class in 1..3u8 {
        let plane = &probs[class as usize * n..(class as usize + 1) * n];
        let mut inter = 0.0f64;
        let mut sum_y = 0.0f64;
        let mut sum_p = 0.0f64;
        for (&p, &l) in plane.iter().zip(labels) {
            let p = p.as_f64();
            let y = (l == class) as u8 as f64;
            inter += y * p;
            sum_y += y;
            sum_p += p;
        }
        let union = sum_y + sum_p - inter;
        // d(1 - I/U)/dp = -(y*U - I*(1-y)) / U^2, i.e. -1/U at target pixels
        // and I/U^2 elsewhere.
        let (g_pos, g_neg) = if union > 0.0 {
            (-1.0 / union, inter / (union * union))
        } else {
            (0.0, 0.0)
        };
        let gplane = &mut grad[class as usize * n..(class as usize + 1) * n];
        for ((g, &p), &l) in gplane.iter_mut().zip(plane).zip(labels) {
            let pf = p.as_f64();
            let y = l == class;
            // CE gradient is zero where the clamp binds.
            let ce_g = if (CLAMP..=1.0 - CLAMP).contains(&pf) {
                if y {
                    -inv_n / pf
                } else {
                    inv_n / (1.0 - pf)
                }
            } else {
                0.0
            };
            let iou_g = if y { g_pos } else { g_neg };
            *g = S::of_f64(ce_g + iou_g);
        }
    }
    grad
}

/// Public loss over a pixel-major probability map and its target mask.
pub fn loss<S: Real>(prob: &ProbMapOf<S>, target: &TriMask) -> Result<LossValues> {
    if prob.width() != target.width() || prob.height() != target.height() {
        return Err(Error::InvalidArgument(format!(
            "loss dimension mismatch: prob {}x{}, target {}x{}",
            prob.width(),
            prob.height(),
            target.width(),
            target.height()
        )));
    }
    let n = target.labels().len();
    let mut planar = vec![S::zero(); 3 * n];
    for (i, px) in prob.probs().chunks_exact(3).enumerate() {
        planar[i] = px[0];
        planar[n + i] = px[1];
        planar[2 * n + i] = px[2];
    }
    Ok(loss_planar(&planar, target.labels()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{TriLabel, TriMask};

    #[test]
    fn single_pixel_hand_case() {
        // Target inner, P(inner)=0.5, P(edge)=0.5:
        // ce = -(ln 0.5 + ln 0.5) = 1.3863
        // iou = (1 - 0/0.5) + (1 - 0.5/1.0) = 1.0 + 0.5 = 1.5
        let mut tm = TriMask::all_background(1, 1);
        tm.set(0, 0, TriLabel::Inner);
        let prob = ProbMapOf::<f64>::from_raw(1, 1, vec![0.0, 0.5, 0.5]).unwrap();
        let lv = loss(&prob, &tm).unwrap();
        assert!((lv.ce - 1.3863).abs() < 1e-4, "ce {}", lv.ce);
        assert!((lv.iou - 1.5).abs() < 1e-4, "iou {}", lv.iou);
        assert!((lv.total - 2.8863).abs() < 1e-4, "total {}", lv.total);
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let mut tm = TriMask::all_background(4, 2);
        tm.set(1, 0, TriLabel::Inner);
        tm.set(2, 1, TriLabel::Edge);
        let prob = ProbMapOf::<f64>::one_hot(&tm);
        let lv = loss(&prob, &tm).unwrap();
        assert!(lv.total.abs() < 1e-6, "total {}", lv.total);
    }

    #[test]
    fn empty_class_contributes_zero_iou() {
        // All background in target and prediction: both IOU terms are 0/0 -> 0.
        let tm = TriMask::all_background(3, 3);
        let prob = ProbMapOf::<f64>::one_hot(&tm);
        let lv = loss(&prob, &tm).unwrap();
        assert!(lv.iou.abs() < 1e-12);
        assert!(lv.total.abs() < 1e-6);
    }

    #[test]
    fn loss_is_nonnegative_and_permutation_equivariant() {
        let w = 8;
        let h = 4;
        let n = w * h;
        let mut labels = vec![0u8; n];
        for i in 0..n {
            labels[i] = (i % 3) as u8;
        }
        let mut raw = Vec::with_capacity(3 * n);
        for i in 0..n {
            let a = 0.1 + 0.8 * ((i * 7 % 13) as f64 / 13.0);
            let b = (1.0 - a) * ((i * 5 % 7) as f64 / 7.0);
            let c = 1.0 - a - b;
            raw.extend_from_slice(&[a, b, c]);
        }
        let tm = TriMask::from_raw(w, h, labels.clone()).unwrap();
        let pm = ProbMapOf::<f64>::from_raw(w, h, raw.clone()).unwrap();
        let lv = loss(&pm, &tm).unwrap();
        assert!(lv.total >= 0.0 && lv.ce >= 0.0 && lv.iou >= 0.0);

        // Reverse pixel order in both.
        let mut labels_r = labels.clone();
        labels_r.reverse();
        let mut raw_r = vec![0.0; 3 * n];
        for i in 0..n {
            raw_r[3 * i..3 * i + 3].copy_from_slice(&raw[3 * (n - 1 - i)..3 * (n - 1 - i) + 3]);
        }
        let tm_r = TriMask::from_raw(w, h, labels_r).unwrap();
        let pm_r = ProbMapOf::<f64>::from_raw(w, h, raw_r).unwrap();
        let lv_r = loss(&pm_r, &tm_r).unwrap();
        assert!((lv.total - lv_r.total).abs() < 1e-12);
        assert!((lv.ce - lv_r.ce).abs() < 1e-12);
        assert!((lv.iou - lv_r.iou).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let n = 6;
        let labels: Vec<u8> = vec![0, 1, 2, 2, 1, 0];
        let mut probs = vec![0.0f64; 3 * n];
        for i in 0..n {
            let a = 0.2 + 0.1 * i as f64 / n as f64;
            let b = 0.3;
            probs[i] = a;
            probs[n + i] = b;
            probs[2 * n + i] = 1.0 - a - b;
        }
        let grad = loss_backward_planar(&probs, &labels);
        let eps = 1e-7;
        for idx in 0..3 * n {
            let mut p = probs.clone();
            p[idx] += eps;
            let lp = loss_planar(&p, &labels).total;
            p[idx] -= 2.0 * eps;
            let lm = loss_planar(&p, &labels).total;
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (fd - grad[idx]).abs() < 1e-5,
                "idx {idx}: fd {fd} vs analytic {}",
                grad[idx]
            );
        }
    }
}
