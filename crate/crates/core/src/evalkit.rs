//! Detection evaluation under incomplete annotation: collective-level
//! recall, instance-level recall, normal-region false positives, instance
//! FROC, and the easy/hard k-fold cross-validation plans.
//!
//! Precision is deliberately absent: with incomplete ground truth a
//! prediction outside the annotations is not necessarily wrong.

use crate::error::{Error, Result};
use crate::imaging::{bbox_iou, BBox};
use crate::rng::stream;
use crate::synthgen::SplitTag;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

/// Greedy one-to-one matching result.
#[derive(Debug, Clone)]
pub struct Matching {
    /// (pred index, gt index) pairs.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Greedy one-to-one matching: predictions in descending score order each
/// claim the unmatched ground-truth box of highest IOU, if that IOU exceeds
/// `iou_thresh` (strictly).
pub fn match_boxes(preds: &[BBox], gts: &[BBox], iou_thresh: f64) -> Matching {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut gt_taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    let mut unmatched_preds = Vec::new();
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let iou = bbox_iou(&preds[pi], gt);
            let better = match best {
                None => true,
                Some((_, b)) => iou > b,
            };
            if better {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou > iou_thresh => {
                gt_taken[gi] = true;
                pairs.push((pi, gi));
            }
            _ => unmatched_preds.push(pi),
        }
    }
    let unmatched_gts = (0..gts.len()).filter(|&g| !gt_taken[g]).collect();
    pairs.sort_unstable();
    unmatched_preds.sort_unstable();
    Matching {
        pairs,
        unmatched_preds,
        unmatched_gts,
    }
}

/// Matched ground truths over total ground truths; empty gts count as 1.0.
pub fn instance_recall(matching: &Matching, n_gts: usize) -> f64 {
    if n_gts == 0 {
        1.0
    } else {
        matching.pairs.len() as f64 / n_gts as f64
    }
}

/// Number of ground-truth boxes covered by the rasterized union of all
/// prediction boxes: a gt counts as detected when
/// `|gt ∩ union| / |gt| > coverage_thresh`.
pub fn collective_detected(preds: &[BBox], gts: &[BBox], coverage_thresh: f64) -> usize {
    if gts.is_empty() {
        return 0;
    }
    let w = preds.iter().chain(gts).map(|b| b.x1).max().unwrap_or(0);
    let h = preds.iter().chain(gts).map(|b| b.y1).max().unwrap_or(0);
    let mut union = vec![false; w * h];
    for p in preds {
        for y in p.y0..p.y1.min(h) {
            for x in p.x0..p.x1.min(w) {
                union[y * w + x] = true;
            }
        }
    }
    gts.iter()
        .filter(|gt| {
            let mut covered = 0usize;
            for y in gt.y0..gt.y1 {
                for x in gt.x0..gt.x1 {
                    if union[y * w + x] {
                        covered += 1;
                    }
                }
            }
            covered as f64 / gt.area() as f64 > coverage_thresh
        })
        .count()
}

/// Collective-level recall for one image; empty gts count as 1.0.
pub fn collective_recall(preds: &[BBox], gts: &[BBox], coverage_thresh: f64) -> f64 {
    if gts.is_empty() {
        1.0
    } else {
        collective_detected(preds, gts, coverage_thresh) as f64 / gts.len() as f64
    }
}

/// Mean prediction count over negative images.
pub fn normal_fps(counts: &[usize]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument(
            "normal_fps undefined without negative images".into(),
        ));
    }
    Ok(counts.iter().sum::<usize>() as f64 / counts.len() as f64)
}

/// One FROC operating point.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FrocPoint {
    pub fp_level: f64,
    /// Boxes with score strictly greater than this threshold are kept.
    pub threshold: f64,
    pub recall: f64,
}

/// Instance-level FROC: for each false-positive level L, take the smallest
/// threshold (swept over the distinct scores of negative-image predictions,
/// plus a keep-everything sentinel) at which the mean negative-image box
/// count is <= L, and average the instance recalls at those thresholds.
pub fn froc_detailed(
    positives: &[(Vec<BBox>, Vec<BBox>)],
    negatives: &[Vec<BBox>],
    fp_levels: &[f64],
    iou_thresh: f64,
) -> Result<Vec<FrocPoint>> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument(
            "FROC undefined without negative images".into(),
        ));
    }
    let n_neg = negatives.len() as f64;
    let mut neg_scores: Vec<f64> = negatives
        .iter()
        .flatten()
        .map(|b| b.score as f64)
        .collect();
    neg_scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    neg_scores.dedup();
    // Sentinel below every valid score keeps all boxes.
    neg_scores.push(-1.0);

    let mean_fp = |t: f64| -> f64 {
        negatives
            .iter()
            .map(|boxes| boxes.iter().filter(|b| b.score as f64 > t).count())
            .sum::<usize>() as f64
            / n_neg
    };
    let recall_at = |t: f64| -> f64 {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (preds, gts) in positives {
            let kept: Vec<BBox> = preds
                .iter()
                .filter(|b| b.score as f64 > t)
                .copied()
                .collect();
            let m = match_boxes(&kept, gts, iou_thresh);
            matched += m.pairs.len();
            total += gts.len();
        }
        if total == 0 {
            1.0
        } else {
            matched as f64 / total as f64
        }
    };

    let mut points = Vec::with_capacity(fp_levels.len());
    for &level in fp_levels {
        // Descending sweep: the feasible set {t : mean_fp(t) <= level} is
        // upward-closed, so the last feasible candidate is the smallest.
        let mut chosen = None;
        for &t in &neg_scores {
            if mean_fp(t) <= level {
                chosen = Some(t);
            } else {
                break;
            }
        }
        let threshold = chosen.unwrap_or(f64::INFINITY);
        let recall = if threshold.is_finite() {
            recall_at(threshold)
        } else {
            0.0
        };
        points.push(FrocPoint {
            fp_level: level,
            threshold,
            recall,
        });
    }
    Ok(points)
}

/// Mean recall over the FROC operating points.
pub fn froc(
    positives: &[(Vec<BBox>, Vec<BBox>)],
    negatives: &[Vec<BBox>],
    fp_levels: &[f64],
    iou_thresh: f64,
) -> Result<f64> {
    let points = froc_detailed(positives, negatives, fp_levels, iou_thresh)?;
    Ok(points.iter().map(|p| p.recall).sum::<f64>() / points.len() as f64)
}

/// Evaluation thresholds; defaults follow the protocol constants
/// (IOU > 0.3 matching, coverage 0.3, FP levels 1..32).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub coverage_thresh: f64,
    pub fp_levels: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.3,
            coverage_thresh: 0.3,
            fp_levels: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
        }
    }
}

/// Ground truth of one evaluated region.
#[derive(Debug, Clone)]
pub struct RegionGt {
    pub boxes: Vec<BBox>,
    pub negative: bool,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PerImageEval {
    pub id: String,
    pub negative: bool,
    pub n_preds: usize,
    pub n_gts: usize,
    pub matched: usize,
    pub collectively_detected: usize,
}

/// The four-criterion report.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub collective_recall: f64,
    pub instance_recall: f64,
    pub normal_fps: f64,
    pub instance_froc: f64,
    pub n_positive_images: usize,
    pub n_negative_images: usize,
    pub n_gts: usize,
    pub iou_thresh: f64,
    pub coverage_thresh: f64,
    pub fp_levels: Vec<f64>,
    pub froc_points: Vec<FrocPoint>,
    pub per_image: Vec<PerImageEval>,
}

/// Compute all four criteria over per-region predictions and annotations.
/// The key sets must coincide; missing regions are reported by id.
pub fn evaluate_run(
    predictions: &BTreeMap<String, Vec<BBox>>,
    annotations: &BTreeMap<String, RegionGt>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let missing: Vec<&String> = annotations
        .keys()
        .filter(|id| !predictions.contains_key(*id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "predictions missing for regions: {missing:?}"
        )));
    }
    let extra: Vec<&String> = predictions
        .keys()
        .filter(|id| !annotations.contains_key(*id))
        .collect();
    if !extra.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "predictions for unknown regions: {extra:?}"
        )));
    }

    let mut per_image = Vec::new();
    let mut positives: Vec<(Vec<BBox>, Vec<BBox>)> = Vec::new();
    let mut negatives: Vec<Vec<BBox>> = Vec::new();
    let mut matched_total = 0usize;
    let mut detected_total = 0usize;
    let mut gts_total = 0usize;
    for (id, gt) in annotations {
        let preds = &predictions[id];
        if gt.negative {
            negatives.push(preds.clone());
            per_image.push(PerImageEval {
                id: id.clone(),
                negative: true,
                n_preds: preds.len(),
                n_gts: 0,
                matched: 0,
                collectively_detected: 0,
            });
        } else {
            let m = match_boxes(preds, &gt.boxes, cfg.iou_thresh);
            let detected = collective_detected(preds, &gt.boxes, cfg.coverage_thresh);
            matched_total += m.pairs.len();
            detected_total += detected;
            gts_total += gt.boxes.len();
            per_image.push(PerImageEval {
                id: id.clone(),
                negative: false,
                n_preds: preds.len(),
                n_gts: gt.boxes.len(),
                matched: m.pairs.len(),
                collectively_detected: detected,
            });
            positives.push((preds.clone(), gt.boxes.clone()));
        }
    }

    let neg_counts: Vec<usize> = negatives.iter().map(|p| p.len()).collect();
    let instance = if gts_total == 0 {
        1.0
    } else {
        matched_total as f64 / gts_total as f64
    };
    let collective = if gts_total == 0 {
        1.0
    } else {
        detected_total as f64 / gts_total as f64
    };
    let froc_points = froc_detailed(&positives, &negatives, &cfg.fp_levels, cfg.iou_thresh)?;
    let instance_froc =
        froc_points.iter().map(|p| p.recall).sum::<f64>() / froc_points.len().max(1) as f64;

    // With coverage threshold equal to the IOU threshold, collective recall
    // upper-bounds instance recall (IOU >= t implies inter/gt-area >= t).
    if (cfg.coverage_thresh - cfg.iou_thresh).abs() < f64::EPSILON
        && collective < instance - 1e-12
    {
        return Err(Error::Numerical(format!(
            "metric theorem violated: collective {collective} < instance {instance}"
        )));
    }

    Ok(EvalReport {
        collective_recall: collective,
        instance_recall: instance,
        normal_fps: normal_fps(&neg_counts)?,
        instance_froc,
        n_positive_images: positives.len(),
        n_negative_images: negatives.len(),
        n_gts: gts_total,
        iou_thresh: cfg.iou_thresh,
        coverage_thresh: cfg.coverage_thresh,
        fp_levels: cfg.fp_levels.clone(),
        froc_points,
        per_image,
    })
}

/// Cross-validation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldMode {
    /// Regions of one slide spread across folds (same-distribution test).
    Easy,
    /// Slides (grouped by style where possible) assigned to folds as units.
    Hard,
}

impl std::fmt::Display for FoldMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FoldMode::Easy => write!(f, "easy"),
            FoldMode::Hard => write!(f, "hard"),
        }
    }
}

/// Region metadata needed for folding.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RegionMeta {
    pub id: String,
    pub slide_id: u32,
    pub style_id: u32,
    pub split: SplitTag,
    pub positive: bool,
}

impl From<&crate::datastore::RegionEntry> for RegionMeta {
    fn from(e: &crate::datastore::RegionEntry) -> Self {
        Self {
            id: e.id.clone(),
            slide_id: e.slide_id,
            style_id: e.style_id,
            split: e.split,
            positive: e.positive,
        }
    }
}

/// A k-fold partition of the region set.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FoldPlan {
    pub mode: FoldMode,
    pub k: usize,
    pub folds: Vec<Vec<String>>,
}

/// Build a k-fold plan. Easy mode deals each slide's (shuffled) regions
/// round-robin through a global cursor, so folds stay balanced and every
/// slide with >= 2 regions spans >= 2 folds. Hard mode assigns style groups
/// (or slides when there are fewer styles than folds) as indivisible units.
pub fn build_folds(
    records: &[RegionMeta],
    mode: FoldMode,
    k: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k = {k} must be >= 2")));
    }
    if records.is_empty() {
        return Err(Error::Config("no regions to fold".into()));
    }
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    match mode {
        FoldMode::Easy => {
            let mut by_slide: BTreeMap<u32, Vec<&RegionMeta>> = BTreeMap::new();
            for r in records {
                by_slide.entry(r.slide_id).or_default().push(r);
            }
            let mut rng = stream(seed, "folds-easy", &[]);
            let mut cursor = 0usize;
            for (slide, mut regions) in by_slide {
                regions.sort_by(|a, b| a.id.cmp(&b.id));
                regions.shuffle(&mut rng);
                let _ = slide;
                for r in regions {
                    folds[cursor % k].push(r.id.clone());
                    cursor += 1;
                }
            }
        }
        FoldMode::Hard => {
            let slides: std::collections::BTreeSet<u32> =
                records.iter().map(|r| r.slide_id).collect();
            if slides.len() < k {
                return Err(Error::Config(format!(
                    "hard mode needs >= {k} slides, found {}",
                    slides.len()
                )));
            }
            let styles: std::collections::BTreeSet<u32> =
                records.iter().map(|r| r.style_id).collect();
            // Unit = style group when possible, else slide.
            let unit_of = |r: &RegionMeta| -> u32 {
                if styles.len() >= k {
                    r.style_id
                } else {
                    r.slide_id
                }
            };
            let mut units: BTreeMap<u32, Vec<&RegionMeta>> = BTreeMap::new();
            for r in records {
                units.entry(unit_of(r)).or_default().push(r);
            }
            let mut unit_list: Vec<(u32, Vec<&RegionMeta>)> = units.into_iter().collect();
            let mut rng = stream(seed, "folds-hard", &[]);
            unit_list.shuffle(&mut rng);
            unit_list.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
            for (_, regions) in unit_list {
                // Lightest fold takes the next unit.
                let lightest = (0..k).min_by_key(|&f| folds[f].len()).unwrap();
                for r in regions {
                    folds[lightest].push(r.id.clone());
                }
            }
            if folds.iter().any(|f| f.is_empty()) {
                return Err(Error::Config(
                    "hard mode produced an empty fold; not enough units".into(),
                ));
            }
        }
    }
    Ok(FoldPlan { mode, k, folds })
}

impl FoldPlan {
    /// Region ids of the test fold.
    pub fn test_fold(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    /// Region ids of the training folds (all but `fold`).
    pub fn train_folds(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, ids)| ids.iter().cloned())
            .collect()
    }
}
