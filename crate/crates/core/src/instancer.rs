//! Random-walker instancing: inner-region components become seeds, edge
//! pixels are "undetermined" and get assigned by solving the combinatorial
//! Dirichlet problem on the 4-neighbor lattice, one linear system per
//! competing label, via conjugate gradient.
//!
//! Edge weights come from the inner-class probability field:
//! `w_uv = exp(-beta * (f_u - f_v)^2)`, which keeps the instancer
//! independent of raw image appearance.

use crate::error::{Error, Result};
use crate::imaging::{
    connected_components, BBox, BinaryMask, InstanceMask, ProbMapOf, TriLabel,
};
use crate::scalar::Real;

/// Walker configuration. Defaults: beta 0.1, cg_tol 1e-6, cg_max_iter 2000.
///
/// Beta trades affinity sharpness against edge-band capture: with a large
/// beta, edge pixels (whose inner-class probability sits between seed and
/// background) couple almost exclusively to the background and instances
/// collapse to their seeds; near 1 the undetermined band is shared
/// geometrically between the adjacent labels.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkerParams {
    pub beta: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for WalkerParams {
    fn default() -> Self {
        Self {
            beta: 0.1,
            cg_tol: 1e-6,
            cg_max_iter: 2000,
        }
    }
}

/// The Dirichlet problem restricted to one connected component of unknown
/// (edge) pixels: the unknown-subgraph Laplacian plus one right-hand side
/// per adjacent label. Label 0 is the absorbing background.
#[derive(Debug, Clone)]
pub struct DirichletSystem<S> {
    /// Unknown pixels in row-major discovery order, as flat indices.
    pub pixels: Vec<usize>,
    /// Laplacian diagonal: total weight of each unknown pixel's lattice edges.
    pub diag: Vec<S>,
    /// Off-diagonal entries: per unknown pixel, (local neighbor index, weight).
    pub neighbors: Vec<Vec<(usize, S)>>,
    /// Adjacent labels in ascending order (0 = background, k >= 1 = seed k).
    pub labels: Vec<u32>,
    /// One right-hand side per entry of `labels`.
    pub rhs: Vec<Vec<S>>,
}

/// Seed labeling plus the per-component Dirichlet systems of a probability map.
pub struct WalkerSystems<S> {
    /// 0 = background, k >= 1 = seed component k; edge pixels are 0 here.
    pub seeds: InstanceMask,
    /// Per-pixel mask of unknown (edge) pixels.
    pub unknown: Vec<bool>,
    pub systems: Vec<DirichletSystem<S>>,
}

#[inline]
fn edge_weight<S: Real>(beta: S, fu: S, fv: S) -> S {
    let d = fu - fv;
    (-beta * d * d).exp()
}

/// Derive the 3-class mask by argmax, extract seed components, and build one
/// Dirichlet system per connected component of edge pixels.
pub fn build_walker_systems<S: Real>(prob: &ProbMapOf<S>, beta: f64) -> Result<WalkerSystems<S>> {
    if beta <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta {beta} must be > 0")));
    }
    let beta = S::of_f64(beta);
    let (w, h) = (prob.width(), prob.height());
    let tri = prob.argmax_mask();
    let inner = BinaryMask::from_fn(w, h, |x, y| tri.get(x, y) == TriLabel::Inner);
    let seeds = connected_components(&inner);
    let edge = BinaryMask::from_fn(w, h, |x, y| tri.get(x, y) == TriLabel::Edge);
    let unknown_components = connected_components(&edge);
    let n_comp = unknown_components.num_instances() as usize;

    // f = inner-class probability, the affinity feature.
    let f: Vec<S> = (0..w * h)
        .map(|i| prob.probs()[i * 3 + TriLabel::Inner as usize])
        .collect();
    let unknown: Vec<bool> = (0..w * h).map(|i| unknown_components.ids()[i] != 0).collect();

    // Gather unknown pixels per component in row-major order.
    let mut comp_pixels: Vec<Vec<usize>> = vec![Vec::new(); n_comp];
    let mut local_index = vec![usize::MAX; w * h];
    for i in 0..w * h {
        let c = unknown_components.ids()[i];
        if c != 0 {
            let pixels = &mut comp_pixels[c as usize - 1];
            local_index[i] = pixels.len();
            pixels.push(i);
        }
    }

    let neighbors_of = |i: usize| {
        let (x, y) = (i % w, i / w);
        let mut out = [usize::MAX; 4];
        let mut n = 0;
        if x > 0 {
            out[n] = i - 1;
            n += 1;
        }
        if x + 1 < w {
            out[n] = i + 1;
            n += 1;
        }
        if y > 0 {
            out[n] = i - w;
            n += 1;
        }
        if y + 1 < h {
            out[n] = i + w;
            n += 1;
        }
        (out, n)
    };

    let mut systems = Vec::with_capacity(n_comp);
    for pixels in comp_pixels {
        let n = pixels.len();
        let mut diag = vec![S::zero(); n];
        let mut neighbors: Vec<Vec<(usize, S)>> = vec![Vec::with_capacity(4); n];
        let mut labels: Vec<u32> = Vec::new();
        // (local pixel, label, weight) boundary contributions.
        let mut boundary: Vec<(usize, u32, S)> = Vec::new();
        for (li, &i) in pixels.iter().enumerate() {
            let (nbrs, count) = neighbors_of(i);
            for &j in &nbrs[..count] {
                let wgt = edge_weight(beta, f[i], f[j]);
                diag[li] = diag[li] + wgt;
                if unknown[j] {
                    neighbors[li].push((local_index[j], wgt));
                } else {
                    let label = seeds.ids()[j]; // 0 for background pixels
                    if !labels.contains(&label) {
                        labels.push(label);
                    }
                    boundary.push((li, label, wgt));
                }
            }
        }
        labels.sort_unstable();
        let mut rhs = vec![vec![S::zero(); n]; labels.len()];
        for (li, label, wgt) in boundary {
            let k = labels.binary_search(&label).unwrap();
            rhs[k][li] = rhs[k][li] + wgt;
        }
        systems.push(DirichletSystem {
            pixels,
            diag,
            neighbors,
            labels,
            rhs,
        });
    }

    Ok(WalkerSystems {
        seeds,
        unknown,
        systems,
    })
}

/// Apply the unknown-subgraph Laplacian: `out = diag .* x - W x`.
fn apply_laplacian<S: Real>(sys: &DirichletSystem<S>, x: &[S], out: &mut [S]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = sys.diag[i] * x[i];
        for &(j, w) in &sys.neighbors[i] {
            acc = acc - w * x[j];
        }
        *o = acc;
    }
}

/// Conjugate gradient for one right-hand side of a Dirichlet system.
///
/// Converges when `||r|| <= tol * ||b||`; exceeding `max_iter` is an error
/// carrying the residual norm.
pub fn solve_dirichlet_cg<S: Real>(
    sys: &DirichletSystem<S>,
    rhs: &[S],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<S>> {
    let n = rhs.len();
    let norm_b = rhs.iter().fold(S::zero(), |acc, &v| acc + v * v).sqrt();
    if norm_b == S::zero() {
        return Ok(vec![S::zero(); n]);
    }
    let threshold = S::of_f64(tol) * norm_b;
    let mut x = vec![S::zero(); n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut ap = vec![S::zero(); n];
    let mut rs: S = r.iter().map(|&v| v * v).sum();
    if rs.sqrt() <= threshold {
        return Ok(x);
    }
    for _ in 0..max_iter {
        apply_laplacian(sys, &p, &mut ap);
        let p_ap: S = p.iter().zip(&ap).map(|(&a, &b)| a * b).sum();
        if p_ap <= S::zero() {
            return Err(Error::Numerical(format!(
                "CG curvature {p_ap} non-positive: system not SPD"
            )));
        }
        let alpha = rs / p_ap;
        for i in 0..n {
            x[i] = x[i] + alpha * p[i];
            r[i] = r[i] - alpha * ap[i];
        }
        let rs_new: S = r.iter().map(|&v| v * v).sum();
        if rs_new.sqrt() <= threshold {
            return Ok(x);
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(Error::Numerical(format!(
        "CG did not converge within {max_iter} iterations (residual {}, target {})",
        rs.sqrt(),
        threshold
    )))
}

/// Solve every label of every component; returns, aligned with
/// `sys.systems`, one probability vector per adjacent label.
pub fn solve_walker_systems<S: Real>(
    systems: &WalkerSystems<S>,
    params: &WalkerParams,
) -> Result<Vec<Vec<Vec<S>>>> {
    systems
        .systems
        .iter()
        .map(|sys| {
            sys.rhs
                .iter()
                .map(|b| solve_dirichlet_cg(sys, b, params.cg_tol, params.cg_max_iter))
                .collect()
        })
        .collect()
}

/// Full random-walker instancing of a probability map.
///
/// Inner-region components keep their (row-major dense) ids; every edge pixel
/// is assigned to the label whose first-arrival probability is largest, ties
/// broken toward the lower label id; pixels won by the background get id 0.
/// Unknown pixels left disconnected from their seed's territory fall back to
/// background so every instance stays one 4-connected component.
pub fn segment_instances<S: Real>(
    prob: &ProbMapOf<S>,
    params: &WalkerParams,
) -> Result<InstanceMask> {
    let (w, h) = (prob.width(), prob.height());
    let systems = build_walker_systems(prob, params.beta)?;
    let solutions = solve_walker_systems(&systems, params)?;

    let mut ids: Vec<u32> = systems.seeds.ids().to_vec();
    for (sys, sols) in systems.systems.iter().zip(&solutions) {
        if sys.labels.is_empty() {
            log::warn!(
                "unknown component of {} pixels has no reachable seed; assigning background",
                sys.pixels.len()
            );
            continue; // stays 0
        }
        for (li, &i) in sys.pixels.iter().enumerate() {
            let mut best_label = sys.labels[0];
            let mut best_p = sols[0][li];
            for k in 1..sys.labels.len() {
                if sols[k][li] > best_p {
                    best_p = sols[k][li];
                    best_label = sys.labels[k];
                }
            }
            ids[i] = best_label;
        }
    }

    // Keep, per seed, only the territory connected to the seed itself.
    let k = systems.seeds.num_instances();
    if k > 0 {
        let mut keep = vec![false; w * h];
        let mut stack: Vec<usize> = Vec::new();
        for i in 0..w * h {
            // Flood from seed pixels through same-id territory.
            if systems.seeds.ids()[i] != 0 && !keep[i] {
                let id = ids[i];
                keep[i] = true;
                stack.push(i);
                while let Some(p) = stack.pop() {
                    let (x, y) = (p % w, p / w);
                    let mut visit = |q: usize| {
                        if !keep[q] && ids[q] == id {
                            keep[q] = true;
                            stack.push(q);
                        }
                    };
                    if x > 0 {
                        visit(p - 1);
                    }
                    if x + 1 < w {
                        visit(p + 1);
                    }
                    if y > 0 {
                        visit(p - w);
                    }
                    if y + 1 < h {
                        visit(p + w);
                    }
                }
            }
        }
        for i in 0..w * h {
            if ids[i] != 0 && !keep[i] {
                ids[i] = 0;
            }
        }
    }

    Ok(InstanceMask::from_raw_unchecked(w, h, ids))
}

/// One scored box per instance with pixel area >= `min_area`, ordered by
/// descending score (ties by ascending instance id).
pub fn extract_boxes<S: Real>(
    inst: &InstanceMask,
    prob: &ProbMapOf<S>,
    min_area: usize,
) -> Result<Vec<BBox>> {
    if inst.width() != prob.width() || inst.height() != prob.height() {
        return Err(Error::InvalidArgument(
            "instance mask and probability map dimensions differ".into(),
        ));
    }
    let areas = inst.areas();
    let mut boxes: Vec<BBox> = Vec::new();
    for id in 1..areas.len() {
        if areas[id] >= min_area {
            boxes.push(crate::imaging::instance_to_box(inst, id as u32, prob)?);
        }
    }
    boxes.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    Ok(boxes)
}
