//! End-to-end pipeline integration tests on small synthetic data.

mod common;

use srcd_core::datastore::{write_dataset, Dataset};
use srcd_core::evalkit::{build_folds, match_boxes, FoldMode, RegionMeta};
use srcd_core::experiments::{run_fold_suite, ExperimentConfig, Regime};
use srcd_core::imaging::TriLabel;
use srcd_core::instancer::WalkerParams;
use srcd_core::labelgen::rasterize_ellipse_targets;
use srcd_core::segmodel::{train, ModelParamsOf, ModelSpec, TrainConfig};
use srcd_core::semisup::{predict_regions, PlainRegion, TargetRegion};
use srcd_core::synthgen::{default_styles, generate_region, DatasetGenConfig, SlideSpec, SplitTag};
use std::sync::Arc;

fn tiny_gen_config() -> DatasetGenConfig {
    DatasetGenConfig {
        region_size: 64,
        labeled_per_pos_slide: 2,
        unlabeled_per_pos_slide: 2,
        regions_per_neg_slide: 2,
        styles: default_styles()[..2].to_vec(),
        ..DatasetGenConfig::default()
    }
}

fn tiny_experiment() -> ExperimentConfig {
    ExperimentConfig {
        train: TrainConfig {
            crop_size: 48,
            batch_size: 4,
            epochs_initial: 2,
            epochs_round: 1,
            ..TrainConfig::default()
        },
        rounds: srcd_core::semisup::RoundConfig {
            self_max_rounds: 1,
            co_max_rounds: 1,
            ..Default::default()
        },
        window: 48,
        overlap: 16,
        min_area: 8,
        seed: 3,
        ..ExperimentConfig::default()
    }
}

/// Overfit sanity oracle: a model trained to convergence on a single region
/// must re-detect that region's own training labels perfectly.
#[test]
fn overfit_single_region_reaches_full_recall() {
    // A sparse, cluster-free style so instances stay separable.
    let mut style = default_styles()[2].clone();
    style.cell_density = 7.0;
    style.cluster_factor = 0.0;
    style.distractor_density = 0.5;
    style.cell_radius_range = (4.5, 6.5);
    style.texture_noise = 3.0;
    let slide = SlideSpec {
        slide_id: 0,
        style,
        positive: true,
        n_labeled_regions: 1,
        n_unlabeled_regions: 0,
        region_size: 64,
    };
    let region = generate_region(&slide, 0, 33).unwrap();
    assert!(
        region.boxes_full.len() >= 2,
        "need multiple cells, got {}",
        region.boxes_full.len()
    );
    // Cells must be pairwise separable for the full-recall claim.
    for (i, a) in region.boxes_full.iter().enumerate() {
        for b in &region.boxes_full[i + 1..] {
            assert!(srcd_core::imaging::bbox_iou(a, b) < 0.25, "boxes overlap too much");
        }
    }
    let target = rasterize_ellipse_targets(&region.boxes_full, 64, 64, 2).unwrap();
    let image = Arc::new(region.image.clone());
    let items = vec![srcd_core::segmodel::TrainItem {
        image: image.clone(),
        target: Arc::new(target),
        weight: 1,
    }];
    let spec = ModelSpec::variant_a();
    let mut params = ModelParamsOf::<f32>::init(&spec, 5).unwrap();
    let cfg = TrainConfig {
        crop_size: 64,
        batch_size: 8,
        augment_flips: false,
        ..TrainConfig::default()
    };
    let log = train(&mut params, &items, 220, &cfg, 11).unwrap();
    let first = log.epochs.first().unwrap().total;
    let last = log.epochs.last().unwrap().total;
    assert!(last < first, "overfit loss must decrease: {first} -> {last}");

    let preds = predict_regions(
        &params,
        &[PlainRegion {
            id: "r".into(),
            image,
        }],
        128,
        32,
        &WalkerParams::default(),
        10,
    )
    .unwrap();
    let m = match_boxes(&preds[0].boxes, &region.boxes_full, 0.3);
    assert_eq!(
        m.pairs.len(),
        region.boxes_full.len(),
        "recall must be 1.0 against its own training labels; boxes {:?} vs gts {:?}",
        preds[0].boxes,
        region.boxes_full
    );
}

/// Self-training without the unlabeled pool must never read unlabeled
/// regions through the training capability.
#[test]
fn access_accounting_without_unlabeled_pool() {
    let dir = tempfile::tempdir().unwrap();
    let gen = tiny_gen_config();
    write_dataset(dir.path(), &gen.generate_regions().unwrap(), gen.master_seed).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let metas: Vec<RegionMeta> = ds.regions().iter().map(RegionMeta::from).collect();
    let plan = build_folds(&metas, FoldMode::Easy, 2, 3).unwrap();
    let cfg = tiny_experiment();
    let suite = run_fold_suite(&ds, &plan, 0, &cfg, &[Regime::Ft, Regime::St], None).unwrap();

    let unlabeled_ids: Vec<&str> = ds
        .regions()
        .iter()
        .filter(|r| r.split == SplitTag::Unlabeled)
        .map(|r| r.id.as_str())
        .collect();
    assert!(!unlabeled_ids.is_empty());
    for id in unlabeled_ids {
        assert!(
            !suite.accessed_train_ids.contains(id),
            "unlabeled region {id} was read by a labeled-only regime"
        );
    }
    assert!(suite.reports.contains_key(&Regime::Ft));
    assert!(suite.reports.contains_key(&Regime::St));
}

/// The full prediction path is deterministic for a fixed checkpoint.
#[test]
fn predict_regions_is_deterministic() {
    let slide = SlideSpec {
        slide_id: 0,
        style: default_styles()[0].clone(),
        positive: true,
        n_labeled_regions: 1,
        n_unlabeled_regions: 0,
        region_size: 96,
    };
    let region = generate_region(&slide, 0, 9).unwrap();
    let params = ModelParamsOf::<f32>::init(&ModelSpec::variant_b(), 21).unwrap();
    let regions = vec![PlainRegion {
        id: "r".into(),
        image: Arc::new(region.image),
    }];
    let a = predict_regions(&params, &regions, 64, 16, &WalkerParams::default(), 8).unwrap();
    let b = predict_regions(&params, &regions, 64, 16, &WalkerParams::default(), 8).unwrap();
    assert_eq!(a[0].boxes, b[0].boxes);
    assert_eq!(a[0].instances.ids(), b[0].instances.ids());
}

/// Label soundness through rounds on a real (tiny) self-training run:
/// initial ellipse-inner pixels never become background.
#[test]
fn tiny_self_train_keeps_initial_inner_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let gen = tiny_gen_config();
    write_dataset(dir.path(), &gen.generate_regions().unwrap(), gen.master_seed).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let metas: Vec<RegionMeta> = ds.regions().iter().map(RegionMeta::from).collect();
    let plan = build_folds(&metas, FoldMode::Easy, 2, 1).unwrap();
    let mut cfg = tiny_experiment();
    cfg.rounds.self_max_rounds = 2;
    cfg.rounds.growth_stop = 0.0;
    let suite = run_fold_suite(&ds, &plan, 0, &cfg, &[Regime::St], None).unwrap();
    assert!(suite.st_rounds_executed >= 1);
    let initial = &suite.st_snapshots[0];
    for snap in &suite.st_snapshots[1..] {
        for (id, mask0) in initial {
            let m = &snap[id];
            for (p0, p1) in mask0.labels().iter().zip(m.labels()) {
                if *p0 == TriLabel::Inner as u8 {
                    assert_ne!(
                        *p1,
                        TriLabel::Background as u8,
                        "initial inner pixel lost in region {id}"
                    );
                }
            }
        }
    }
}

/// TargetRegion construction from dataset + fold must produce ellipse
/// targets that only label pixels inside annotated boxes.
#[test]
fn fold_targets_respect_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let gen = tiny_gen_config();
    write_dataset(dir.path(), &gen.generate_regions().unwrap(), gen.master_seed).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let view = ds.train_view();
    for entry in ds.regions().iter().filter(|r| r.split == SplitTag::Labeled) {
        let boxes = view.partial_boxes(&entry.id).unwrap();
        let img = view.image(&entry.id).unwrap();
        let target: TargetRegion = TargetRegion {
            id: entry.id.clone(),
            image: Arc::new(img),
            target: Arc::new(
                rasterize_ellipse_targets(&boxes, 64, 64, 2).unwrap(),
            ),
        };
        for y in 0..64 {
            for x in 0..64 {
                if target.target.get(x, y) != TriLabel::Background {
                    assert!(
                        boxes.iter().any(|b| x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1),
                        "labelled pixel outside every box"
                    );
                }
            }
        }
    }
}
