//! Shared test oracles, independent of the implementation paths they check.

use srcd_core::imaging::BBox;
use srcd_core::instancer::DirichletSystem;

/// Dense Gaussian elimination with partial pivoting on the densified
/// unknown-subgraph Laplacian; solves every right-hand side of the system.
pub fn dense_solve_all(sys: &DirichletSystem<f64>) -> Vec<Vec<f64>> {
    let n = sys.pixels.len();
    let mut base = vec![0.0f64; n * n];
    for i in 0..n {
        base[i * n + i] = sys.diag[i];
        for &(j, w) in &sys.neighbors[i] {
            base[i * n + j] -= w;
        }
    }
    sys.rhs
        .iter()
        .map(|b| {
            let mut a = base.clone();
            let mut x = b.clone();
            // Forward elimination.
            for col in 0..n {
                let pivot = (col..n)
                    .max_by(|&r1, &r2| {
                        a[r1 * n + col]
                            .abs()
                            .partial_cmp(&a[r2 * n + col].abs())
                            .unwrap()
                    })
                    .unwrap();
                if pivot != col {
                    for k in 0..n {
                        a.swap(col * n + k, pivot * n + k);
                    }
                    x.swap(col, pivot);
                }
                let d = a[col * n + col];
                assert!(d.abs() > 1e-14, "singular Dirichlet system");
                for row in col + 1..n {
                    let f = a[row * n + col] / d;
                    if f == 0.0 {
                        continue;
                    }
                    for k in col..n {
                        a[row * n + k] -= f * a[col * n + k];
                    }
                    x[row] -= f * x[col];
                }
            }
            // Back substitution.
            for col in (0..n).rev() {
                x[col] /= a[col * n + col];
                for row in 0..col {
                    let f = a[row * n + col];
                    x[row] -= f * x[col];
                    a[row * n + col] = 0.0;
                }
            }
            x
        })
        .collect()
}

/// Brute-force FROC: sweep *all* distinct scores (positive and negative
/// images alike) plus the keep-everything sentinel, pick the smallest
/// feasible threshold per false-positive level, and average the recalls.
pub fn brute_force_froc(
    positives: &[(Vec<BBox>, Vec<BBox>)],
    negatives: &[Vec<BBox>],
    fp_levels: &[f64],
    iou_thresh: f64,
) -> f64 {
    assert!(!negatives.is_empty());
    let mut thresholds: Vec<f64> = negatives
        .iter()
        .flatten()
        .chain(positives.iter().flat_map(|(p, _)| p))
        .map(|b| b.score as f64)
        .collect();
    thresholds.push(-1.0);
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let n_neg = negatives.len() as f64;
    let mean_fp = |t: f64| {
        negatives
            .iter()
            .map(|bs| bs.iter().filter(|b| b.score as f64 > t).count())
            .sum::<usize>() as f64
            / n_neg
    };
    let recall_at = |t: f64| {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (preds, gts) in positives {
            let kept: Vec<BBox> = preds
                .iter()
                .filter(|b| b.score as f64 > t)
                .copied()
                .collect();
            let m = srcd_core::evalkit::match_boxes(&kept, gts, iou_thresh);
            matched += m.pairs.len();
            total += gts.len();
        }
        if total == 0 {
            1.0
        } else {
            matched as f64 / total as f64
        }
    };

    let mut sum = 0.0;
    for &level in fp_levels {
        // Smallest threshold meeting the constraint (ascending scan).
        let t = thresholds
            .iter()
            .copied()
            .find(|&t| mean_fp(t) <= level)
            .unwrap_or(f64::INFINITY);
        sum += if t.is_finite() { recall_at(t) } else { 0.0 };
    }
    sum / fp_levels.len() as f64
}

/// Small deterministic generator for test instances.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.0 >> 11
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n.max(1) as u64) as usize
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() % 1_000_000) as f64 / 1_000_000.0
    }
}
