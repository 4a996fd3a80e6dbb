//! Experiment orchestration: the four training regimes (FT, ST, ST-Ex, CT)
//! over cross-validation folds, with shared sub-results where the protocols
//! coincide (FT is exactly round 0 of self-training; ST-Ex restarts from the
//! same round-0 model; CT consumes ST's refined labels).

use crate::datastore::{Dataset, Provenance, RunDir};
use crate::error::{Error, Result};
use crate::evalkit::{
    build_folds, evaluate_run, EvalConfig, EvalReport, FoldMode, FoldPlan, RegionGt, RegionMeta,
};
use crate::imaging::{BBox, ImageU8, TriMask};
use crate::instancer::WalkerParams;
use crate::labelgen::rasterize_ellipse_targets;
use crate::rng::derive_seed;
use crate::segmodel::{save_checkpoint, ModelParamsOf, ModelSpec, TrainConfig, Variant};
use crate::semisup::{
    co_train, predict_regions, self_train, train_round0, PlainRegion, SegPredictor,
    SelfTrainOptions, SelfTrainReport, TargetRegion,
};
use crate::semisup::RoundConfig;
use crate::synthgen::SplitTag;
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

/// Everything a full experiment needs; all defaults follow the desk-scale
/// protocol constants.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub rounds: RoundConfig,
    pub eval: EvalConfig,
    pub walker: WalkerParams,
    /// Sliding-window size and overlap for inference.
    pub window: usize,
    pub overlap: usize,
    /// Minimum instance area (pixels) for box extraction.
    pub min_area: usize,
    /// Ellipse ring thickness of the synthesized targets.
    pub edge_width: usize,
    pub model_a: ModelSpec,
    pub model_b: ModelSpec,
    /// Variant used for FT/ST/ST-Ex and for CT inference, so regime
    /// comparisons share one architecture.
    pub inference_variant: Variant,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            rounds: RoundConfig::default(),
            eval: EvalConfig::default(),
            walker: WalkerParams::default(),
            window: 128,
            overlap: 32,
            min_area: 20,
            edge_width: 2,
            model_a: ModelSpec::variant_a(),
            model_b: ModelSpec::variant_b(),
            inference_variant: Variant::A,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.rounds.validate()?;
        self.model_a.validate()?;
        self.model_b.validate()?;
        if self.edge_width == 0 {
            return Err(Error::Config("edge_width must be >= 1".into()));
        }
        Ok(())
    }

    fn spec_of(&self, variant: Variant) -> ModelSpec {
        match variant {
            Variant::A => self.model_a,
            Variant::B => self.model_b,
        }
    }
}

/// The compared training regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Regime {
    Ft,
    St,
    StEx,
    Ct,
}

pub const ALL_REGIMES: [Regime; 4] = [Regime::Ft, Regime::St, Regime::StEx, Regime::Ct];

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::Ft => write!(f, "FT"),
            Regime::St => write!(f, "ST"),
            Regime::StEx => write!(f, "ST-Ex"),
            Regime::Ct => write!(f, "CT"),
        }
    }
}

/// Train-fold regions plus the held-out test regions of one fold.
pub struct FoldData {
    pub labeled: Vec<TargetRegion>,
    pub negatives: Vec<PlainRegion>,
    pub unlabeled: Vec<PlainRegion>,
    pub test_pos: Vec<(String, Arc<ImageU8>, Vec<BBox>)>,
    pub test_neg: Vec<(String, Arc<ImageU8>)>,
    /// Region ids read through the training view.
    pub accessed_train_ids: BTreeSet<String>,
}

/// Load one fold's data. Training images and partial annotations go through
/// the dataset's [`TrainView`] capability; the unlabeled pool is only read
/// when a regime actually consumes it.
pub fn load_fold(
    ds: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    edge_width: usize,
    include_unlabeled: bool,
) -> Result<FoldData> {
    if fold >= plan.k {
        return Err(Error::Config(format!("fold {fold} out of range")));
    }
    let test_ids: BTreeSet<&String> = plan.test_fold(fold).iter().collect();
    let view = ds.train_view();
    let mut labeled = Vec::new();
    let mut negatives = Vec::new();
    let mut unlabeled = Vec::new();
    let mut test_pos = Vec::new();
    let mut test_neg = Vec::new();
    for entry in ds.regions() {
        let in_test = test_ids.contains(&entry.id);
        match (entry.split, in_test) {
            (SplitTag::Labeled, false) => {
                let image = Arc::new(view.image(&entry.id)?);
                let boxes = view.partial_boxes(&entry.id)?;
                let target = rasterize_ellipse_targets(
                    &boxes,
                    image.width(),
                    image.height(),
                    edge_width,
                )?;
                labeled.push(TargetRegion {
                    id: entry.id.clone(),
                    image,
                    target: Arc::new(target),
                });
            }
            (SplitTag::Labeled, true) => {
                let image = Arc::new(ds.load_image(&entry.id)?);
                let boxes = ds.partial_boxes(&entry.id)?;
                test_pos.push((entry.id.clone(), image, boxes));
            }
            (SplitTag::Negative, false) => {
                negatives.push(PlainRegion {
                    id: entry.id.clone(),
                    image: Arc::new(view.image(&entry.id)?),
                });
            }
            (SplitTag::Negative, true) => {
                test_neg.push((entry.id.clone(), Arc::new(ds.load_image(&entry.id)?)));
            }
            (SplitTag::Unlabeled, false) => {
                if include_unlabeled {
                    unlabeled.push(PlainRegion {
                        id: entry.id.clone(),
                        image: Arc::new(view.image(&entry.id)?),
                    });
                }
            }
            // Test-fold unlabeled regions carry no annotations; they take
            // part in neither training nor evaluation.
            (SplitTag::Unlabeled, true) => {}
        }
    }
    if labeled.is_empty() || test_pos.is_empty() || test_neg.is_empty() {
        return Err(Error::Config(format!(
            "fold {fold} leaves an empty split: {} labeled train, {} test positives, {} test negatives",
            labeled.len(),
            test_pos.len(),
            test_neg.len()
        )));
    }
    Ok(FoldData {
        labeled,
        negatives,
        unlabeled,
        test_pos,
        test_neg,
        accessed_train_ids: view.accessed_ids(),
    })
}

/// Evaluate a checkpoint on the fold's test regions.
pub fn evaluate_params(
    params: &ModelParamsOf<f32>,
    data: &FoldData,
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    let mut regions: Vec<PlainRegion> = Vec::new();
    let mut annotations: BTreeMap<String, RegionGt> = BTreeMap::new();
    for (id, image, boxes) in &data.test_pos {
        regions.push(PlainRegion {
            id: id.clone(),
            image: image.clone(),
        });
        annotations.insert(
            id.clone(),
            RegionGt {
                boxes: boxes.clone(),
                negative: false,
            },
        );
    }
    for (id, image) in &data.test_neg {
        regions.push(PlainRegion {
            id: id.clone(),
            image: image.clone(),
        });
        annotations.insert(
            id.clone(),
            RegionGt {
                boxes: Vec::new(),
                negative: true,
            },
        );
    }
    let preds = predict_regions(
        params,
        &regions,
        cfg.window,
        cfg.overlap,
        &cfg.walker,
        cfg.min_area,
    )?;
    let predictions: BTreeMap<String, Vec<BBox>> =
        preds.into_iter().map(|p| (p.id, p.boxes)).collect();
    evaluate_run(&predictions, &annotations, &cfg.eval)
}

/// Outputs of one fold's regime comparison.
pub struct FoldSuite {
    pub fold: usize,
    pub seed: u64,
    pub reports: BTreeMap<Regime, EvalReport>,
    /// Self-training label snapshots of the labeled train regions
    /// (index 0 = initial ellipse targets).
    pub st_snapshots: Vec<BTreeMap<String, Arc<TriMask>>>,
    pub st_growth: Vec<f64>,
    pub st_rounds_executed: usize,
    pub ct_rounds_executed: usize,
    /// Per-round training logs of the self-training run (index 0 = the
    /// initial fully-supervised training).
    pub st_train_logs: Vec<crate::segmodel::TrainLog>,
    /// Final self-training checkpoint.
    pub st_params: Option<ModelParamsOf<f32>>,
    pub accessed_train_ids: BTreeSet<String>,
    /// Ids of the labeled train regions (for oracle reports).
    pub train_labeled_ids: Vec<String>,
}

fn persist_snapshots(
    run: Option<&RunDir>,
    report: &SelfTrainReport,
    tag: &str,
) -> Result<()> {
    if let Some(run) = run {
        for (round, snap) in report.snapshots.iter().enumerate() {
            let provenance = Provenance::RefinedRound(round as u32);
            for (id, mask) in snap {
                let path = run
                    .labels_dir(&provenance)
                    .join(format!("{tag}-{id}.png"));
                crate::datastore::save_labels(mask, &path)?;
            }
        }
    }
    Ok(())
}

/// Run the requested regimes on one fold. Work is shared along the protocol:
/// the FT model is the round-0 checkpoint of self-training, ST-Ex continues
/// from that same checkpoint with the unlabeled pool, and CT trains both
/// variants from scratch on ST's refined labels.
pub fn run_fold_suite(
    ds: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    cfg: &ExperimentConfig,
    regimes: &[Regime],
    run_dir: Option<&RunDir>,
) -> Result<FoldSuite> {
    cfg.validate()?;
    let wants = |r: Regime| regimes.contains(&r);
    let include_unlabeled = wants(Regime::StEx) || wants(Regime::Ct);
    let data = load_fold(ds, plan, fold, cfg.edge_width, include_unlabeled)?;

    let st_spec = cfg.spec_of(cfg.inference_variant);
    let mut predictor = SegPredictor {
        params: ModelParamsOf::init(&st_spec, derive_seed(cfg.seed, "init-st", &[fold as u64]))?,
        train_cfg: cfg.train.clone(),
        window: cfg.window,
        overlap: cfg.overlap,
    };

    let mut reports = BTreeMap::new();
    let mut round0_params: Option<ModelParamsOf<f32>> = None;
    let mut st_snapshots = Vec::new();
    let mut st_growth = Vec::new();
    let mut st_rounds = 0usize;
    let mut ct_rounds = 0usize;
    let mut st_train_logs = Vec::new();
    let mut st_params = None;
    let mut refined: Option<Vec<TargetRegion>> = None;

    let needs_st_rounds = wants(Regime::St) || wants(Regime::StEx) || wants(Regime::Ct);
    if needs_st_rounds {
        let st_seed = derive_seed(cfg.seed, "st", &[fold as u64]);
        let opts = SelfTrainOptions {
            include_unlabeled: false,
            skip_round0: false,
            epochs_initial: cfg.train.epochs_initial,
            epochs_round: cfg.train.epochs_round,
        };
        let mut captured_round0 = None;
        let st_report = self_train(
            &mut predictor,
            &data.labeled,
            &data.negatives,
            &data.unlabeled,
            &opts,
            &cfg.rounds,
            st_seed,
            |round, m| {
                if round == 0 {
                    captured_round0 = Some(m.params.clone());
                }
                if let Some(run) = run_dir {
                    save_checkpoint(&m.params, &run.checkpoint_path(&format!("st-round-{round}")))?;
                }
                Ok(())
            },
        )?;
        round0_params = captured_round0;
        persist_snapshots(run_dir, &st_report, "st")?;
        if let Some(run) = run_dir {
            run.write_json(&run.log_path("st-train"), &st_report.train_logs)?;
        }
        refined = Some(
            data.labeled
                .iter()
                .map(|r| TargetRegion {
                    id: r.id.clone(),
                    image: r.image.clone(),
                    target: st_report.snapshots.last().unwrap()[&r.id].clone(),
                })
                .collect(),
        );
        st_rounds = st_report.rounds_executed;
        st_growth = st_report.growth.clone();
        st_snapshots = st_report.snapshots.clone();
        st_train_logs = st_report.train_logs.clone();
        st_params = Some(predictor.params.clone());

        if wants(Regime::St) {
            reports.insert(Regime::St, evaluate_params(&predictor.params, &data, cfg)?);
        }
    } else if wants(Regime::Ft) {
        train_round0(
            &mut predictor,
            &data.labeled,
            &data.negatives,
            cfg.train.epochs_initial,
            derive_seed(derive_seed(cfg.seed, "st", &[fold as u64]), "st-round", &[0]),
        )?;
        round0_params = Some(predictor.params.clone());
    }

    if wants(Regime::Ft) {
        let params = round0_params
            .as_ref()
            .expect("round-0 checkpoint captured above");
        if let Some(run) = run_dir {
            save_checkpoint(params, &run.checkpoint_path("ft"))?;
        }
        reports.insert(Regime::Ft, evaluate_params(params, &data, cfg)?);
    }

    if wants(Regime::StEx) {
        let mut ex_predictor = SegPredictor {
            params: round0_params
                .clone()
                .expect("ST-Ex reuses the round-0 checkpoint"),
            train_cfg: cfg.train.clone(),
            window: cfg.window,
            overlap: cfg.overlap,
        };
        let opts = SelfTrainOptions {
            include_unlabeled: true,
            skip_round0: true,
            epochs_initial: cfg.train.epochs_initial,
            epochs_round: cfg.train.epochs_round,
        };
        let ex_report = self_train(
            &mut ex_predictor,
            &data.labeled,
            &data.negatives,
            &data.unlabeled,
            &opts,
            &cfg.rounds,
            derive_seed(cfg.seed, "stex", &[fold as u64]),
            |round, m| {
                if let Some(run) = run_dir {
                    save_checkpoint(
                        &m.params,
                        &run.checkpoint_path(&format!("stex-round-{round}")),
                    )?;
                }
                Ok(())
            },
        )?;
        if let Some(run) = run_dir {
            run.write_json(&run.log_path("stex-train"), &ex_report.train_logs)?;
        }
        reports.insert(Regime::StEx, evaluate_params(&ex_predictor.params, &data, cfg)?);
    }

    if wants(Regime::Ct) {
        let refined = refined.as_ref().expect("CT consumes ST refined labels");
        let ct_seed = derive_seed(cfg.seed, "ct", &[fold as u64]);
        let mut model_a = SegPredictor {
            params: ModelParamsOf::init(
                &cfg.model_a,
                derive_seed(cfg.seed, "init-ct-a", &[fold as u64]),
            )?,
            train_cfg: cfg.train.clone(),
            window: cfg.window,
            overlap: cfg.overlap,
        };
        let mut model_b = SegPredictor {
            params: ModelParamsOf::init(
                &cfg.model_b,
                derive_seed(cfg.seed, "init-ct-b", &[fold as u64]),
            )?,
            train_cfg: cfg.train.clone(),
            window: cfg.window,
            overlap: cfg.overlap,
        };
        let ct_report = co_train(
            &mut model_a,
            &mut model_b,
            refined,
            &data.negatives,
            &data.unlabeled,
            cfg.train.epochs_initial,
            cfg.train.epochs_round,
            &cfg.rounds,
            ct_seed,
            |round, a, b| {
                if let Some(run) = run_dir {
                    save_checkpoint(&a.params, &run.checkpoint_path(&format!("ct-round-{round}-A")))?;
                    save_checkpoint(&b.params, &run.checkpoint_path(&format!("ct-round-{round}-B")))?;
                }
                Ok(())
            },
        )?;
        ct_rounds = ct_report.rounds_executed;
        if let Some(run) = run_dir {
            for (round, (pa, pb)) in ct_report
                .pseudo_for_a
                .iter()
                .zip(&ct_report.pseudo_for_b)
                .enumerate()
            {
                for (model, snap) in [("A", pa), ("B", pb)] {
                    let provenance = Provenance::PseudoModelRound {
                        model: model.to_string(),
                        round: round as u32 + 1,
                    };
                    for (id, mask) in snap {
                        crate::datastore::save_labels(
                            mask,
                            &run.labels_dir(&provenance).join(format!("{id}.png")),
                        )?;
                    }
                }
            }
        }
        let infer_params = match cfg.inference_variant {
            Variant::A => &model_a.params,
            Variant::B => &model_b.params,
        };
        reports.insert(Regime::Ct, evaluate_params(infer_params, &data, cfg)?);
    }

    if let Some(run) = run_dir {
        for (regime, report) in &reports {
            run.write_json(&run.report_path(&format!("{regime}")), report)?;
        }
    }

    Ok(FoldSuite {
        fold,
        seed: cfg.seed,
        reports,
        st_snapshots,
        st_growth,
        st_rounds_executed: st_rounds,
        ct_rounds_executed: ct_rounds,
        st_train_logs,
        st_params,
        accessed_train_ids: data.accessed_train_ids,
        train_labeled_ids: data.labeled.iter().map(|r| r.id.clone()).collect(),
    })
}

/// One (seed, fold) suite request of a cross-validation run.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SuiteRequest {
    pub seed: u64,
    pub fold: usize,
}

/// Mean criteria of one regime across suites.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct MeanMetrics {
    pub collective_recall: f64,
    pub instance_recall: f64,
    pub normal_fps: f64,
    pub instance_froc: f64,
    pub n: usize,
}

/// Aggregated cross-validation comparison.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CrossvalResult {
    pub mode: FoldMode,
    pub k: usize,
    pub cells: Vec<CrossvalCell>,
    pub means: BTreeMap<String, MeanMetrics>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CrossvalCell {
    pub seed: u64,
    pub fold: usize,
    pub regime: String,
    pub report: EvalReport,
}

/// Run the regime comparison for each (seed, fold) request; fold plans are
/// rebuilt per seed so the whole suite is a pure function of the requests.
#[allow(clippy::too_many_arguments)]
pub fn run_crossval(
    ds: &Dataset,
    mode: FoldMode,
    k: usize,
    requests: &[SuiteRequest],
    base_cfg: &ExperimentConfig,
    regimes: &[Regime],
    out_root: Option<&PathBuf>,
    mut on_suite: impl FnMut(&FoldSuite),
) -> Result<CrossvalResult> {
    let metas: Vec<RegionMeta> = ds.regions().iter().map(RegionMeta::from).collect();
    let mut cells = Vec::new();
    for req in requests {
        let plan = build_folds(&metas, mode, k, req.seed)?;
        let mut cfg = base_cfg.clone();
        cfg.seed = req.seed;
        let run_dir = match out_root {
            Some(root) => Some(RunDir::create(
                &root.join(format!("{mode}-seed{}-fold{}", req.seed, req.fold)),
            )?),
            None => None,
        };
        let suite = run_fold_suite(ds, &plan, req.fold, &cfg, regimes, run_dir.as_ref())?;
        for (regime, report) in &suite.reports {
            cells.push(CrossvalCell {
                seed: req.seed,
                fold: req.fold,
                regime: regime.to_string(),
                report: report.clone(),
            });
        }
        on_suite(&suite);
    }
    let mut means: BTreeMap<String, MeanMetrics> = BTreeMap::new();
    for cell in &cells {
        let m = means.entry(cell.regime.clone()).or_default();
        m.collective_recall += cell.report.collective_recall;
        m.instance_recall += cell.report.instance_recall;
        m.normal_fps += cell.report.normal_fps;
        m.instance_froc += cell.report.instance_froc;
        m.n += 1;
    }
    for m in means.values_mut() {
        let n = m.n as f64;
        m.collective_recall /= n;
        m.instance_recall /= n;
        m.normal_fps /= n;
        m.instance_froc /= n;
    }
    Ok(CrossvalResult {
        mode,
        k,
        cells,
        means,
    })
}

impl CrossvalResult {
    /// Text table with criteria rows and regime columns.
    pub fn format_table(&self) -> String {
        let order = ["FT", "ST", "ST-Ex", "CT"];
        let cols: Vec<&str> = order
            .iter()
            .copied()
            .filter(|r| self.means.contains_key(*r))
            .collect();
        let mut out = String::new();
        out.push_str(&format!(
            "{} mode, {}-fold, {} suite(s)\n",
            self.mode,
            self.k,
            self.cells.len() / cols.len().max(1)
        ));
        out.push_str(&format!("{:<12}", "Criteria"));
        for c in &cols {
            out.push_str(&format!("{c:>10}"));
        }
        out.push('\n');
        let rows: [(&str, fn(&MeanMetrics) -> f64); 4] = [
            ("Col Recall", |m| m.collective_recall),
            ("Ins Recall", |m| m.instance_recall),
            ("Nor FPs", |m| m.normal_fps),
            ("Ins FROC", |m| m.instance_froc),
        ];
        for (name, get) in rows {
            out.push_str(&format!("{name:<12}"));
            for c in &cols {
                out.push_str(&format!("{:>10.3}", get(&self.means[*c])));
            }
            out.push('\n');
        }
        out
    }
}
