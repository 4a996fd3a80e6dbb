//! Semi-supervised training regimes: iterative self-training (with the
//! optional unlabeled-pool "extra" variant) and two-model cooperative
//! training, built on the label-merge rules of `labelgen`.
//!
//! The round protocols are generic over a [`RegionModel`] so their control
//! flow (merge, stop criteria, round caps, label lineage) is testable with
//! fake predictors; [`SegPredictor`] binds them to the real network.

use crate::error::{Error, Result};
use crate::imaging::{ImageU8, InstanceMask, TriMask};
use crate::instancer::{extract_boxes, segment_instances, WalkerParams};
use crate::labelgen::{mask_growth, merge_refined_labels};
use crate::rng::derive_seed;
use crate::segmodel::{
    sliding_window_infer, train, ModelParamsOf, TrainConfig, TrainItem, TrainLog,
};
use crate::ProbMap;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Round-protocol thresholds and caps. Defaults: pixel threshold 0.7 for
/// self-training, 0.33 for cooperative training, round caps 5 and 2, stop
/// tolerances 0.01.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    pub self_threshold: f64,
    pub co_threshold: f64,
    pub self_max_rounds: usize,
    pub co_max_rounds: usize,
    pub growth_stop: f64,
    pub change_stop: f64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            self_threshold: 0.7,
            co_threshold: 0.33,
            self_max_rounds: 5,
            co_max_rounds: 2,
            growth_stop: 0.01,
            change_stop: 0.01,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let thr_ok = |t: f64| 0.0 < t && t < 1.0;
        if !thr_ok(self.self_threshold)
            || !thr_ok(self.co_threshold)
            || self.self_max_rounds == 0
            || self.co_max_rounds == 0
        {
            return Err(Error::Config(format!("invalid round config: {self:?}")));
        }
        Ok(())
    }
}

/// A trainable region predictor; the round protocols only need these two
/// operations.
pub trait RegionModel {
    fn train_on(&mut self, items: &[TrainItem], epochs: usize, seed: u64) -> Result<TrainLog>;
    fn infer(&self, image: &ImageU8) -> Result<ProbMap>;
}

/// The concrete predictor: network parameters plus training/inference
/// configuration.
pub struct SegPredictor {
    pub params: ModelParamsOf<f32>,
    pub train_cfg: TrainConfig,
    pub window: usize,
    pub overlap: usize,
}

impl RegionModel for SegPredictor {
    fn train_on(&mut self, items: &[TrainItem], epochs: usize, seed: u64) -> Result<TrainLog> {
        train(&mut self.params, items, epochs, &self.train_cfg, seed)
    }

    fn infer(&self, image: &ImageU8) -> Result<ProbMap> {
        sliding_window_infer(&self.params, image, self.window, self.overlap)
    }
}

/// A region with pixel targets (initial ellipse targets for self-training,
/// refined labels for cooperative training).
#[derive(Debug, Clone)]
pub struct TargetRegion {
    pub id: String,
    pub image: Arc<ImageU8>,
    pub target: Arc<TriMask>,
}

/// A region without targets (negatives train against all-background;
/// unlabeled regions receive pseudo-labels).
#[derive(Debug, Clone)]
pub struct PlainRegion {
    pub id: String,
    pub image: Arc<ImageU8>,
}

/// Duplication weights balancing two classes: the smaller class gets
/// `round(larger/smaller)` (at least 1), the larger gets 1.
pub fn balance_weights(n_pos: usize, n_neg: usize) -> Result<(usize, usize)> {
    if n_pos == 0 && n_neg == 0 {
        return Err(Error::InvalidArgument(
            "cannot balance two empty classes".into(),
        ));
    }
    if n_pos == 0 || n_neg == 0 {
        return Ok((1, 1));
    }
    let ratio = |a: usize, b: usize| ((a as f64 / b as f64).round() as usize).max(1);
    if n_pos < n_neg {
        Ok((ratio(n_neg, n_pos), 1))
    } else if n_neg < n_pos {
        Ok((1, ratio(n_pos, n_neg)))
    } else {
        Ok((1, 1))
    }
}

/// Attach duplication weights to two region classes.
pub fn balance<'a, T>(pos: &'a [T], neg: &'a [T]) -> Result<Vec<(&'a T, usize)>> {
    let (wp, wn) = balance_weights(pos.len(), neg.len())?;
    Ok(pos
        .iter()
        .map(|r| (r, wp))
        .chain(neg.iter().map(|r| (r, wn)))
        .collect())
}

fn all_background_target(w: usize, h: usize) -> Arc<TriMask> {
    Arc::new(TriMask::all_background(w, h))
}

/// Build the balanced training items for one round: positive-class regions
/// with their current targets plus negatives with all-background targets.
fn build_items(
    positives: &[(Arc<ImageU8>, Arc<TriMask>)],
    negatives: &[PlainRegion],
) -> Result<Vec<TrainItem>> {
    let (wp, wn) = balance_weights(positives.len(), negatives.len())?;
    let mut items = Vec::with_capacity(positives.len() + negatives.len());
    for (image, target) in positives {
        items.push(TrainItem {
            image: image.clone(),
            target: target.clone(),
            weight: wp,
        });
    }
    for r in negatives {
        items.push(TrainItem {
            image: r.image.clone(),
            target: all_background_target(r.image.width(), r.image.height()),
            weight: wn,
        });
    }
    Ok(items)
}

/// The initial fully-supervised training: the given targets plus balanced
/// negatives for `epochs` epochs. Both the FT baseline and round 0 of the
/// iterative regimes are exactly this.
pub fn train_round0<M: RegionModel>(
    model: &mut M,
    labeled: &[TargetRegion],
    negatives: &[PlainRegion],
    epochs: usize,
    seed: u64,
) -> Result<TrainLog> {
    let positives: Vec<(Arc<ImageU8>, Arc<TriMask>)> = labeled
        .iter()
        .map(|r| (r.image.clone(), r.target.clone()))
        .collect();
    let items = build_items(&positives, negatives)?;
    model.train_on(&items, epochs, seed)
}

/// Per-round label snapshots and metrics of a self-training run.
#[derive(Debug, Clone)]
pub struct SelfTrainReport {
    /// Rounds that executed (merging counts; a round stopped by growth did
    /// not retrain).
    pub rounds_executed: usize,
    /// Mean inner-mask growth per executed round.
    pub growth: Vec<f64>,
    /// Snapshot 0 holds the initial targets; snapshot r the round-r merge.
    pub snapshots: Vec<BTreeMap<String, Arc<TriMask>>>,
    pub train_logs: Vec<TrainLog>,
}

/// Options of a self-training run.
#[derive(Debug, Clone, Copy)]
pub struct SelfTrainOptions {
    pub include_unlabeled: bool,
    /// Skip the initial full training (the model is already round-0 trained).
    pub skip_round0: bool,
    pub epochs_initial: usize,
    pub epochs_round: usize,
}

/// Iterative self-training. Round 0 trains on the initial targets plus
/// balanced negatives; each later round infers, merges predictions into the
/// *initial* targets at `self_threshold` (unlabeled regions merge into an
/// all-background prior), and retrains for `epochs_round`. Stops when the
/// mean inner-mask growth drops below `growth_stop` or at the round cap.
#[allow(clippy::too_many_arguments)]
pub fn self_train<M: RegionModel>(
    model: &mut M,
    labeled: &[TargetRegion],
    negatives: &[PlainRegion],
    unlabeled: &[PlainRegion],
    opts: &SelfTrainOptions,
    cfg: &RoundConfig,
    master_seed: u64,
    mut on_round: impl FnMut(usize, &M) -> Result<()>,
) -> Result<SelfTrainReport> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("self_train needs labeled regions".into()));
    }
    if opts.include_unlabeled && unlabeled.is_empty() {
        return Err(Error::InvalidArgument(
            "include_unlabeled set but the unlabeled pool is empty".into(),
        ));
    }

    let mut current: BTreeMap<String, Arc<TriMask>> = labeled
        .iter()
        .map(|r| (r.id.clone(), r.target.clone()))
        .collect();
    if opts.include_unlabeled {
        for r in unlabeled {
            current.insert(
                r.id.clone(),
                all_background_target(r.image.width(), r.image.height()),
            );
        }
    }
    let mut report = SelfTrainReport {
        rounds_executed: 0,
        growth: Vec::new(),
        snapshots: vec![current.clone()],
        train_logs: Vec::new(),
    };

    if !opts.skip_round0 {
        let log = train_round0(
            model,
            labeled,
            negatives,
            opts.epochs_initial,
            derive_seed(master_seed, "st-round", &[0]),
        )
        .map_err(|e| Error::Numerical(format!("round 0: {e}")))?;
        report.train_logs.push(log);
        on_round(0, model)?;
    }

    for round in 1..=cfg.self_max_rounds {
        // Inference over every region that carries labels this round.
        let mut merged: BTreeMap<String, Arc<TriMask>> = BTreeMap::new();
        for r in labeled {
            let prob = model
                .infer(&r.image)
                .map_err(|e| Error::Numerical(format!("round {round}, region {}: {e}", r.id)))?;
            let m = merge_refined_labels(&r.target, &prob, cfg.self_threshold)?;
            merged.insert(r.id.clone(), Arc::new(m));
        }
        if opts.include_unlabeled {
            for r in unlabeled {
                let prob = model.infer(&r.image).map_err(|e| {
                    Error::Numerical(format!("round {round}, region {}: {e}", r.id))
                })?;
                let prior = TriMask::all_background(r.image.width(), r.image.height());
                let m = merge_refined_labels(&prior, &prob, cfg.self_threshold)?;
                merged.insert(r.id.clone(), Arc::new(m));
            }
        }

        let growth = {
            let mut sum = 0.0;
            for (id, next) in &merged {
                sum += mask_growth(&current[id], next)?;
            }
            sum / merged.len() as f64
        };
        current = merged;
        report.snapshots.push(current.clone());
        report.growth.push(growth);
        report.rounds_executed = round;

        if growth < cfg.growth_stop {
            break;
        }

        let mut positives: Vec<(Arc<ImageU8>, Arc<TriMask>)> = labeled
            .iter()
            .map(|r| (r.image.clone(), current[&r.id].clone()))
            .collect();
        if opts.include_unlabeled {
            positives.extend(
                unlabeled
                    .iter()
                    .map(|r| (r.image.clone(), current[&r.id].clone())),
            );
        }
        let items = build_items(&positives, negatives)?;
        let log = model
            .train_on(
                &items,
                opts.epochs_round,
                derive_seed(master_seed, "st-round", &[round as u64]),
            )
            .map_err(|e| Error::Numerical(format!("round {round}: {e}")))?;
        report.train_logs.push(log);
        on_round(round, model)?;
    }
    Ok(report)
}

/// Per-round state of a cooperative-training run.
#[derive(Debug, Clone)]
pub struct CoTrainReport {
    pub rounds_executed: usize,
    /// Mean symmetric-difference ratio of consecutive pseudo-label inner
    /// masks (None for round 1, which has no predecessor).
    pub change: Vec<Option<f64>>,
    /// Per round: pseudo-labels consumed by model A (from B's predictions)
    /// and by model B (from A's).
    pub pseudo_for_a: Vec<BTreeMap<String, Arc<TriMask>>>,
    pub pseudo_for_b: Vec<BTreeMap<String, Arc<TriMask>>>,
    pub train_logs: Vec<(TrainLog, TrainLog)>,
}

/// Symmetric-difference ratio of the inner masks: `|A Δ B| / max(1, |A ∪ B|)`.
fn inner_symdiff_ratio(a: &TriMask, b: &TriMask) -> f64 {
    let inner = crate::imaging::TriLabel::Inner as u8;
    let mut diff = 0usize;
    let mut union = 0usize;
    for (x, y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (*x == inner, *y == inner);
        if ia || ib {
            union += 1;
            if ia != ib {
                diff += 1;
            }
        }
    }
    diff as f64 / union.max(1) as f64
}

/// Two-model cooperative training. Round 0 trains both models from scratch
/// on the refined labels plus balanced negatives. Each round both models
/// infer on the unlabeled pool; model A's next training set mixes the
/// labeled refined targets with pseudo-labels thresholded at `co_threshold`
/// from B's predictions, and symmetrically for B. Stops when the mean
/// symmetric-difference ratio of consecutive pseudo-label sets drops below
/// `change_stop`, or at the round cap.
#[allow(clippy::too_many_arguments)]
pub fn co_train<MA: RegionModel, MB: RegionModel>(
    model_a: &mut MA,
    model_b: &mut MB,
    labeled_refined: &[TargetRegion],
    negatives: &[PlainRegion],
    unlabeled: &[PlainRegion],
    epochs_initial: usize,
    epochs_round: usize,
    cfg: &RoundConfig,
    master_seed: u64,
    mut on_round: impl FnMut(usize, &MA, &MB) -> Result<()>,
) -> Result<CoTrainReport> {
    cfg.validate()?;
    if labeled_refined.is_empty() {
        return Err(Error::InvalidArgument("co_train needs refined labels".into()));
    }
    if unlabeled.is_empty() {
        return Err(Error::InvalidArgument("co_train needs an unlabeled pool".into()));
    }

    let labeled_positives: Vec<(Arc<ImageU8>, Arc<TriMask>)> = labeled_refined
        .iter()
        .map(|r| (r.image.clone(), r.target.clone()))
        .collect();
    let round0_items = build_items(&labeled_positives, negatives)?;
    let log_a = model_a
        .train_on(
            &round0_items,
            epochs_initial,
            derive_seed(master_seed, "co-round", &[0, 0]),
        )
        .map_err(|e| Error::Numerical(format!("round 0, model A: {e}")))?;
    let log_b = model_b
        .train_on(
            &round0_items,
            epochs_initial,
            derive_seed(master_seed, "co-round", &[0, 1]),
        )
        .map_err(|e| Error::Numerical(format!("round 0, model B: {e}")))?;
    let mut report = CoTrainReport {
        rounds_executed: 0,
        change: Vec::new(),
        pseudo_for_a: Vec::new(),
        pseudo_for_b: Vec::new(),
        train_logs: vec![(log_a, log_b)],
    };
    on_round(0, model_a, model_b)?;

    for round in 1..=cfg.co_max_rounds {
        let mut pseudo_a: BTreeMap<String, Arc<TriMask>> = BTreeMap::new();
        let mut pseudo_b: BTreeMap<String, Arc<TriMask>> = BTreeMap::new();
        for r in unlabeled {
            let prior = TriMask::all_background(r.image.width(), r.image.height());
            let prob_b = model_b
                .infer(&r.image)
                .map_err(|e| Error::Numerical(format!("round {round}, model B, {}: {e}", r.id)))?;
            pseudo_a.insert(
                r.id.clone(),
                Arc::new(merge_refined_labels(&prior, &prob_b, cfg.co_threshold)?),
            );
            let prob_a = model_a
                .infer(&r.image)
                .map_err(|e| Error::Numerical(format!("round {round}, model A, {}: {e}", r.id)))?;
            pseudo_b.insert(
                r.id.clone(),
                Arc::new(merge_refined_labels(&prior, &prob_a, cfg.co_threshold)?),
            );
        }

        let change = if round >= 2 {
            let prev_a = &report.pseudo_for_a[round - 2];
            let prev_b = &report.pseudo_for_b[round - 2];
            let mut sum = 0.0;
            let mut n = 0usize;
            for (id, mask) in &pseudo_a {
                sum += inner_symdiff_ratio(&prev_a[id], mask);
                n += 1;
            }
            for (id, mask) in &pseudo_b {
                sum += inner_symdiff_ratio(&prev_b[id], mask);
                n += 1;
            }
            Some(sum / n as f64)
        } else {
            None
        };
        report.pseudo_for_a.push(pseudo_a);
        report.pseudo_for_b.push(pseudo_b);
        report.change.push(change);
        report.rounds_executed = round;

        if let Some(c) = change {
            if c < cfg.change_stop {
                break;
            }
        }

        // Labeled refined targets stay fixed; pseudo-labels join the mix.
        let pseudo_a_ref = report.pseudo_for_a.last().unwrap();
        let pseudo_b_ref = report.pseudo_for_b.last().unwrap();
        let mut positives_a = labeled_positives.clone();
        let mut positives_b = labeled_positives.clone();
        for r in unlabeled {
            positives_a.push((r.image.clone(), pseudo_a_ref[&r.id].clone()));
            positives_b.push((r.image.clone(), pseudo_b_ref[&r.id].clone()));
        }
        let items_a = build_items(&positives_a, negatives)?;
        let items_b = build_items(&positives_b, negatives)?;
        let log_a = model_a
            .train_on(
                &items_a,
                epochs_round,
                derive_seed(master_seed, "co-round", &[round as u64, 0]),
            )
            .map_err(|e| Error::Numerical(format!("round {round}, model A: {e}")))?;
        let log_b = model_b
            .train_on(
                &items_b,
                epochs_round,
                derive_seed(master_seed, "co-round", &[round as u64, 1]),
            )
            .map_err(|e| Error::Numerical(format!("round {round}, model B: {e}")))?;
        report.train_logs.push((log_a, log_b));
        on_round(round, model_a, model_b)?;
    }
    Ok(report)
}

/// Full pipeline output for one region.
#[derive(Debug, Clone)]
pub struct RegionPrediction {
    pub id: String,
    pub probs: ProbMap,
    pub instances: InstanceMask,
    pub boxes: Vec<crate::imaging::BBox>,
}

/// Deterministic image -> probabilities -> instances -> scored boxes for a
/// batch of regions (parallel over regions, output in input order).
pub fn predict_regions(
    params: &ModelParamsOf<f32>,
    regions: &[PlainRegion],
    window: usize,
    overlap: usize,
    walker: &WalkerParams,
    min_area: usize,
) -> Result<Vec<RegionPrediction>> {
    regions
        .par_iter()
        .map(|r| {
            let probs = sliding_window_infer(params, &r.image, window, overlap)?;
            // Walker solves run in f64 for accuracy.
            let probs64 = probs.cast::<f64>();
            let instances = segment_instances(&probs64, walker)?;
            let boxes = extract_boxes(&instances, &probs64, min_area)?;
            Ok(RegionPrediction {
                id: r.id.clone(),
                probs,
                instances,
                boxes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{ProbMapOf, TriLabel};
    use crate::labelgen::rasterize_ellipse_targets;
    use crate::imaging::BBox;

    #[test]
    fn balance_matches_reference_ratios() {
        // 74 positive vs 320 negative: positive weight round(320/74) = 4.
        assert_eq!(balance_weights(74, 320).unwrap(), (4, 1));
        assert_eq!(balance_weights(10, 10).unwrap(), (1, 1));
        // 10 vs 95: round(9.5) = 10 on the smaller side.
        assert_eq!(balance_weights(95, 10).unwrap(), (1, 10));
        assert!(balance_weights(0, 0).is_err());
        assert_eq!(balance_weights(0, 5).unwrap(), (1, 1));
        let pos = ["a", "b"];
        let neg = ["x"; 8];
        let weighted = balance(&pos, &neg).unwrap();
        assert_eq!(weighted[0].1, 4);
        assert_eq!(weighted[2].1, 1);
    }

    /// Fake model whose predictions echo a fixed label map; training is a
    /// no-op. Lets the round protocol run without a real network.
    struct EchoModel {
        masks: BTreeMap<String, TriMask>,
        by_image_key: BTreeMap<Vec<u8>, String>,
        trained: Vec<usize>,
    }

    impl EchoModel {
        fn new(regions: &[(TargetRegion, TriMask)]) -> Self {
            let mut masks = BTreeMap::new();
            let mut by_image_key = BTreeMap::new();
            for (r, pred) in regions {
                masks.insert(r.id.clone(), pred.clone());
                by_image_key.insert(r.image.data().to_vec(), r.id.clone());
            }
            Self {
                masks,
                by_image_key,
                trained: Vec::new(),
            }
        }
    }

    impl RegionModel for EchoModel {
        fn train_on(&mut self, items: &[TrainItem], epochs: usize, _seed: u64) -> Result<TrainLog> {
            self.trained.push(epochs);
            let _ = items;
            Ok(TrainLog::default())
        }

        fn infer(&self, image: &ImageU8) -> Result<ProbMap> {
            let id = self.by_image_key.get(image.data()).expect("known region");
            Ok(ProbMapOf::one_hot(&self.masks[id]))
        }
    }

    fn region(id: &str, seed: u8, boxes: &[BBox]) -> TargetRegion {
        let mut img = ImageU8::new(32, 32).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                img.set(x, y, [seed, (x * 3) as u8, (y * 5) as u8]);
            }
        }
        let target = rasterize_ellipse_targets(boxes, 32, 32, 2).unwrap();
        TargetRegion {
            id: id.to_string(),
            image: Arc::new(img),
            target: Arc::new(target),
        }
    }

    #[test]
    fn self_train_fixed_point_stops_after_round_one() {
        let boxes = [BBox::new(4, 4, 20, 20, 1.0).unwrap()];
        let r = region("a", 1, &boxes);
        // Model predicts exactly the initial targets: merge is the identity,
        // growth 0 < growth_stop, loop exits after round 1 without retraining.
        let mut model = EchoModel::new(&[(r.clone(), (*r.target).clone())]);
        let opts = SelfTrainOptions {
            include_unlabeled: false,
            skip_round0: false,
            epochs_initial: 3,
            epochs_round: 2,
        };
        let report = self_train(
            &mut model,
            &[r],
            &[],
            &[],
            &opts,
            &RoundConfig::default(),
            7,
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(report.rounds_executed, 1);
        assert_eq!(report.growth, vec![0.0]);
        assert_eq!(model.trained, vec![3]); // round 0 only
        assert_eq!(report.snapshots.len(), 2);
        assert_eq!(report.snapshots[0]["a"], report.snapshots[1]["a"]);
    }

    #[test]
    fn self_train_round_cap_with_zero_tolerance() {
        let boxes = [BBox::new(4, 4, 20, 20, 1.0).unwrap()];
        let r = region("a", 1, &boxes);
        let mut model = EchoModel::new(&[(r.clone(), (*r.target).clone())]);
        let cfg = RoundConfig {
            growth_stop: 0.0,
            ..RoundConfig::default()
        };
        let opts = SelfTrainOptions {
            include_unlabeled: false,
            skip_round0: false,
            epochs_initial: 1,
            epochs_round: 1,
        };
        let report =
            self_train(&mut model, &[r], &[], &[], &opts, &cfg, 7, |_, _| Ok(())).unwrap();
        // growth 0 is never < 0, so exactly 5 rounds execute, each retraining.
        assert_eq!(report.rounds_executed, 5);
        assert_eq!(model.trained.len(), 6); // round 0 + 5 rounds
    }

    #[test]
    fn self_train_monotone_label_soundness() {
        // Model predicts extra inner pixels each round: initial inner must
        // never return to background across snapshots.
        let boxes = [BBox::new(8, 8, 24, 24, 1.0).unwrap()];
        let r = region("a", 2, &boxes);
        let mut pred = (*r.target).clone();
        for y in 0..6 {
            for x in 0..6 {
                pred.set(x, y, TriLabel::Inner);
            }
        }
        let mut model = EchoModel::new(&[(r.clone(), pred)]);
        let opts = SelfTrainOptions {
            include_unlabeled: false,
            skip_round0: false,
            epochs_initial: 1,
            epochs_round: 1,
        };
        let report = self_train(
            &mut model,
            &[r.clone()],
            &[],
            &[],
            &opts,
            &RoundConfig::default(),
            3,
            |_, _| Ok(()),
        )
        .unwrap();
        let initial = &report.snapshots[0]["a"];
        for snap in &report.snapshots[1..] {
            let m = &snap["a"];
            for y in 0..32 {
                for x in 0..32 {
                    if initial.get(x, y) == TriLabel::Inner {
                        assert_ne!(m.get(x, y), TriLabel::Background);
                    }
                }
            }
        }
    }

    #[test]
    fn co_train_round_cap_and_symmetric_degenerate_case() {
        let boxes = [BBox::new(4, 4, 20, 20, 1.0).unwrap()];
        let labeled = region("l", 1, &boxes);
        let u_boxes = [BBox::new(6, 6, 22, 22, 1.0).unwrap()];
        let unl = region("u", 9, &u_boxes);
        let unlabeled = vec![PlainRegion {
            id: unl.id.clone(),
            image: unl.image.clone(),
        }];
        // Identical fake models: the exchange is a no-op relative to
        // self-training; pseudo-labels for A and B coincide each round.
        let mk = || {
            EchoModel::new(&[
                (labeled.clone(), (*labeled.target).clone()),
                (unl.clone(), (*unl.target).clone()),
            ])
        };
        let mut a = mk();
        let mut b = mk();
        let cfg = RoundConfig {
            change_stop: 0.0,
            ..RoundConfig::default()
        };
        let report = co_train(
            &mut a,
            &mut b,
            &[labeled.clone()],
            &[],
            &unlabeled,
            2,
            1,
            &cfg,
            5,
            |_, _, _| Ok(()),
        )
        .unwrap();
        // change_stop 0 -> exactly 2 exchange rounds.
        assert_eq!(report.rounds_executed, 2);
        assert_eq!(a.trained, vec![2, 1, 1]);
        assert_eq!(b.trained, vec![2, 1, 1]);
        for round in 0..2 {
            assert_eq!(
                report.pseudo_for_a[round]["u"], report.pseudo_for_b[round]["u"],
                "identical models must exchange identical pseudo-labels"
            );
        }
        // Identical predictions round to round: change ratio 0 at round 2.
        assert_eq!(report.change[1], Some(0.0));
    }

    #[test]
    fn co_train_targets_come_from_the_other_model() {
        // Model A predicts inner block at the top-left, model B at the
        // bottom-right; A must train on B's block and vice versa.
        let boxes = [BBox::new(4, 4, 20, 20, 1.0).unwrap()];
        let labeled = region("l", 1, &boxes);
        let unl = region("u", 9, &[]);
        let unlabeled = vec![PlainRegion {
            id: unl.id.clone(),
            image: unl.image.clone(),
        }];
        let mut mask_a = TriMask::all_background(32, 32);
        let mut mask_b = TriMask::all_background(32, 32);
        for i in 0..8 {
            for j in 0..8 {
                mask_a.set(i, j, TriLabel::Inner);
                mask_b.set(31 - i, 31 - j, TriLabel::Inner);
            }
        }
        let mut a = EchoModel::new(&[(labeled.clone(), (*labeled.target).clone()), (unl.clone(), mask_a)]);
        let mut b = EchoModel::new(&[(labeled.clone(), (*labeled.target).clone()), (unl.clone(), mask_b)]);
        let report = co_train(
            &mut a,
            &mut b,
            &[labeled.clone()],
            &[],
            &unlabeled,
            1,
            1,
            &RoundConfig::default(),
            5,
            |_, _, _| Ok(()),
        )
        .unwrap();
        let for_a = &report.pseudo_for_a[0]["u"];
        let for_b = &report.pseudo_for_b[0]["u"];
        // A's targets carry B's bottom-right block.
        assert_eq!(for_a.get(31, 31), TriLabel::Inner);
        assert_eq!(for_a.get(0, 0), TriLabel::Background);
        assert_eq!(for_b.get(0, 0), TriLabel::Inner);
        assert_eq!(for_b.get(31, 31), TriLabel::Background);
    }
}
