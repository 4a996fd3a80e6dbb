//! `srcd` — batch command surface of the detection pipeline.
//!
//! Subcommands: `gen` (synthesize a dataset), `train` (fully-supervised
//! baseline), `selftrain` (iterative self-training; `--extra` adds the
//! unlabeled pool), `cotrain` (two-model cooperative training), `infer`
//! (boxes + overlay PNGs), `eval` (metric report from stored predictions),
//! `crossval` (the full k-fold FT/ST/ST-Ex/CT comparison table).
//!
//! All tunables live in a JSON config; flags override only paths, mode,
//! seed and thread count. Every run writes its resolved config into the
//! output directory so a rerun reproduces it hash-for-hash.

use clap::{Parser, Subcommand, ValueEnum};
use srcd_core::datastore::{
    save_annotations, AnnotationFile, Dataset, Provenance, RunDir,
};
use srcd_core::error::{Error, Result};
use srcd_core::evalkit::{evaluate_run, FoldMode, RegionGt};
use srcd_core::experiments::{run_crossval, ExperimentConfig, SuiteRequest, ALL_REGIMES};
use srcd_core::evalkit::{build_folds, RegionMeta};
use srcd_core::imaging::{BBox, ImageU8};
use srcd_core::segmodel::{load_checkpoint, save_checkpoint, ModelParamsOf};
use srcd_core::semisup::{
    predict_regions, self_train, train_round0, PlainRegion, SegPredictor, SelfTrainOptions,
    TargetRegion,
};
use srcd_core::synthgen::{DatasetGenConfig, SplitTag};
use srcd_core::labelgen::rasterize_ellipse_targets;
use srcd_core::rng::derive_seed;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Full run configuration; unknown keys are rejected.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    /// Dataset synthesis parameters (for `gen`).
    dataset: DatasetGenConfig,
    /// Root of an existing dataset (for everything else).
    data_root: Option<PathBuf>,
    /// Training/round/eval/inference parameters.
    experiment: ExperimentConfig,
    /// Cross-validation setup.
    folds: FoldsConfig,
    /// Inference inputs.
    infer: InferConfig,
    /// Evaluation inputs.
    eval_inputs: EvalInputs,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FoldsConfig {
    k: usize,
    mode: FoldMode,
    /// Experiment seeds; defaults to the experiment seed.
    seeds: Vec<u64>,
    /// Folds to run; defaults to all.
    folds: Option<Vec<usize>>,
}

impl Default for FoldsConfig {
    fn default() -> Self {
        Self {
            k: 3,
            mode: FoldMode::Easy,
            seeds: Vec::new(),
            folds: None,
        }
    }
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct InferConfig {
    checkpoint: Option<PathBuf>,
    /// Region splits to run inference on.
    splits: Option<Vec<SplitTag>>,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalInputs {
    /// Directory of per-region prediction JSONs (as written by `infer`).
    predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Easy,
    Hard,
}

#[derive(Parser, Debug)]
#[command(name = "srcd", version, about = "Signet-ring-cell detection pipeline")]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cap worker threads (1 = fully deterministic reference path).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Cross-validation mode override.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Synthesize a dataset with complete and omission-degraded annotations.
    Gen,
    /// Fully-supervised baseline training (the FT regime).
    Train,
    /// Iterative self-training (ST; --extra adds the unlabeled pool).
    Selftrain {
        #[arg(long)]
        extra: bool,
    },
    /// Two-model cooperative training on top of self-training labels.
    Cotrain,
    /// Predict boxes and overlay PNGs for a region set.
    Infer,
    /// Metric report from stored predictions.
    Eval,
    /// Full k-fold FT/ST/ST-Ex/CT comparison table.
    Crossval,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &cli.config {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.folds.mode = match mode {
            ModeArg::Easy => FoldMode::Easy,
            ModeArg::Hard => FoldMode::Hard,
        };
    }
    if cfg.folds.seeds.is_empty() {
        cfg.folds.seeds = vec![cfg.experiment.seed];
    }
    cfg.experiment.validate()?;
    Ok(cfg)
}

fn require_out(cli: &Cli) -> Result<PathBuf> {
    cli.out
        .clone()
        .ok_or_else(|| Error::Config("--out DIR is required for this command".into()))
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let root = cfg
        .data_root
        .as_ref()
        .ok_or_else(|| Error::Config("data_root must be set in the config".into()))?;
    Dataset::open(root)
}

fn write_resolved_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("config.resolved.json");
    let json = serde_json::to_vec_pretty(cfg).expect("serialize config");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Training inputs over the whole dataset (no fold split).
struct FullData {
    labeled: Vec<TargetRegion>,
    negatives: Vec<PlainRegion>,
    unlabeled: Vec<PlainRegion>,
}

fn load_full(ds: &Dataset, edge_width: usize, include_unlabeled: bool) -> Result<FullData> {
    let view = ds.train_view();
    let mut labeled = Vec::new();
    let mut negatives = Vec::new();
    let mut unlabeled = Vec::new();
    for entry in ds.regions() {
        match entry.split {
            SplitTag::Labeled => {
                let image = Arc::new(view.image(&entry.id)?);
                let boxes = view.partial_boxes(&entry.id)?;
                let target =
                    rasterize_ellipse_targets(&boxes, image.width(), image.height(), edge_width)?;
                labeled.push(TargetRegion {
                    id: entry.id.clone(),
                    image,
                    target: Arc::new(target),
                });
            }
            SplitTag::Negative => negatives.push(PlainRegion {
                id: entry.id.clone(),
                image: Arc::new(view.image(&entry.id)?),
            }),
            SplitTag::Unlabeled => {
                if include_unlabeled {
                    unlabeled.push(PlainRegion {
                        id: entry.id.clone(),
                        image: Arc::new(view.image(&entry.id)?),
                    });
                }
            }
        }
    }
    if labeled.is_empty() {
        return Err(Error::Config("dataset has no labeled regions".into()));
    }
    Ok(FullData {
        labeled,
        negatives,
        unlabeled,
    })
}

fn predictor(cfg: &ExperimentConfig, params: ModelParamsOf<f32>) -> SegPredictor {
    SegPredictor {
        params,
        train_cfg: cfg.train.clone(),
        window: cfg.window,
        overlap: cfg.overlap,
    }
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_resolved_config(cfg, out)?;
    let regions = cfg.dataset.generate_regions()?;
    let manifest = srcd_core::datastore::write_dataset(out, &regions, cfg.dataset.master_seed)?;
    println!(
        "dataset written to {}: {} regions",
        out.display(),
        manifest.regions.len()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_resolved_config(cfg, out)?;
    let ds = open_dataset(cfg)?;
    let data = load_full(&ds, cfg.experiment.edge_width, false)?;
    let run = RunDir::create(out)?;
    let ex = &cfg.experiment;
    let spec = match ex.inference_variant {
        srcd_core::segmodel::Variant::A => ex.model_a,
        srcd_core::segmodel::Variant::B => ex.model_b,
    };
    let mut model = predictor(ex, ModelParamsOf::init(&spec, derive_seed(ex.seed, "init-st", &[0]))?);
    let log = train_round0(
        &mut model,
        &data.labeled,
        &data.negatives,
        ex.train.epochs_initial,
        derive_seed(derive_seed(ex.seed, "st", &[0]), "st-round", &[0]),
    )?;
    save_checkpoint(&model.params, &run.checkpoint_path("ft"))?;
    run.write_json(&run.log_path("train"), &log)?;
    println!("checkpoint written to {}", run.checkpoint_path("ft").display());
    Ok(())
}

fn cmd_selftrain(cfg: &RunConfig, out: &Path, extra: bool) -> Result<()> {
    write_resolved_config(cfg, out)?;
    let ds = open_dataset(cfg)?;
    let ex = &cfg.experiment;
    let data = load_full(&ds, ex.edge_width, extra)?;
    let run = RunDir::create(out)?;
    let spec = match ex.inference_variant {
        srcd_core::segmodel::Variant::A => ex.model_a,
        srcd_core::segmodel::Variant::B => ex.model_b,
    };
    let mut model = predictor(ex, ModelParamsOf::init(&spec, derive_seed(ex.seed, "init-st", &[0]))?);
    let opts = SelfTrainOptions {
        include_unlabeled: extra,
        skip_round0: false,
        epochs_initial: ex.train.epochs_initial,
        epochs_round: ex.train.epochs_round,
    };
    let report = self_train(
        &mut model,
        &data.labeled,
        &data.negatives,
        &data.unlabeled,
        &opts,
        &ex.rounds,
        derive_seed(ex.seed, if extra { "stex" } else { "st" }, &[0]),
        |round, m| {
            save_checkpoint(&m.params, &run.checkpoint_path(&format!("st-round-{round}")))
        },
    )?;
    for (round, snap) in report.snapshots.iter().enumerate() {
        let prov = Provenance::RefinedRound(round as u32);
        for (id, mask) in snap {
            srcd_core::datastore::save_labels(mask, &run.label_path(&prov, id))?;
        }
    }
    run.write_json(&run.log_path("selftrain"), &report.train_logs)?;
    run.write_json(
        &run.log_path("growth"),
        &serde_json::json!({
            "rounds_executed": report.rounds_executed,
            "growth": report.growth,
        }),
    )?;
    println!(
        "self-training finished after {} round(s); growth: {:?}",
        report.rounds_executed, report.growth
    );
    Ok(())
}

fn cmd_cotrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_resolved_config(cfg, out)?;
    let ds = open_dataset(cfg)?;
    let ex = &cfg.experiment;
    let data = load_full(&ds, ex.edge_width, true)?;
    if data.unlabeled.is_empty() {
        return Err(Error::Config("cotrain needs unlabeled regions".into()));
    }
    let run = RunDir::create(out)?;
    let spec = match ex.inference_variant {
        srcd_core::segmodel::Variant::A => ex.model_a,
        srcd_core::segmodel::Variant::B => ex.model_b,
    };
    // Self-training supplies the refined labels.
    let mut st_model =
        predictor(ex, ModelParamsOf::init(&spec, derive_seed(ex.seed, "init-st", &[0]))?);
    let opts = SelfTrainOptions {
        include_unlabeled: false,
        skip_round0: false,
        epochs_initial: ex.train.epochs_initial,
        epochs_round: ex.train.epochs_round,
    };
    let st_report = self_train(
        &mut st_model,
        &data.labeled,
        &data.negatives,
        &data.unlabeled,
        &opts,
        &ex.rounds,
        derive_seed(ex.seed, "st", &[0]),
        |round, m| {
            save_checkpoint(&m.params, &run.checkpoint_path(&format!("st-round-{round}")))
        },
    )?;
    let refined: Vec<TargetRegion> = data
        .labeled
        .iter()
        .map(|r| TargetRegion {
            id: r.id.clone(),
            image: r.image.clone(),
            target: st_report.snapshots.last().unwrap()[&r.id].clone(),
        })
        .collect();
    let mut model_a = predictor(
        ex,
        ModelParamsOf::init(&ex.model_a, derive_seed(ex.seed, "init-ct-a", &[0]))?,
    );
    let mut model_b = predictor(
        ex,
        ModelParamsOf::init(&ex.model_b, derive_seed(ex.seed, "init-ct-b", &[0]))?,
    );
    let report = srcd_core::semisup::co_train(
        &mut model_a,
        &mut model_b,
        &refined,
        &data.negatives,
        &data.unlabeled,
        ex.train.epochs_initial,
        ex.train.epochs_round,
        &ex.rounds,
        derive_seed(ex.seed, "ct", &[0]),
        |round, a, b| {
            save_checkpoint(&a.params, &run.checkpoint_path(&format!("ct-round-{round}-A")))?;
            save_checkpoint(&b.params, &run.checkpoint_path(&format!("ct-round-{round}-B")))
        },
    )?;
    run.write_json(&run.log_path("cotrain"), &report.train_logs)?;
    println!(
        "cooperative training finished after {} round(s)",
        report.rounds_executed
    );
    Ok(())
}

/// Box outlines burned into a copy of the image.
fn draw_boxes(image: &ImageU8, boxes: &[BBox], color: [u8; 3]) -> ImageU8 {
    let mut out = image.clone();
    for b in boxes {
        let x1 = b.x1.min(image.width()).saturating_sub(1);
        let y1 = b.y1.min(image.height()).saturating_sub(1);
        for x in b.x0..=x1 {
            out.set(x, b.y0, color);
            out.set(x, y1, color);
        }
        for y in b.y0..=y1 {
            out.set(b.x0, y, color);
            out.set(x1, y, color);
        }
    }
    out
}

fn cmd_infer(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_resolved_config(cfg, out)?;
    let ds = open_dataset(cfg)?;
    let ex = &cfg.experiment;
    let ckpt = cfg
        .infer
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("infer.checkpoint must be set".into()))?;
    let params = load_checkpoint(ckpt)?;
    let splits = cfg
        .infer
        .splits
        .clone()
        .unwrap_or_else(|| vec![SplitTag::Labeled, SplitTag::Negative]);
    let mut regions = Vec::new();
    for entry in ds.regions() {
        if splits.contains(&entry.split) {
            regions.push(PlainRegion {
                id: entry.id.clone(),
                image: Arc::new(ds.load_image(&entry.id)?),
            });
        }
    }
    let preds = predict_regions(
        &params,
        &regions,
        ex.window,
        ex.overlap,
        &ex.walker,
        ex.min_area,
    )?;
    let pred_dir = out.join("predictions");
    let overlay_dir = out.join("overlays");
    std::fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
    std::fs::create_dir_all(&overlay_dir).map_err(|e| Error::io(&overlay_dir, e))?;
    for (region, pred) in regions.iter().zip(&preds) {
        let file = AnnotationFile {
            region_id: pred.id.clone(),
            provenance: Provenance::Prediction,
            boxes: pred.boxes.clone(),
        };
        save_annotations(&file, &pred_dir.join(format!("{}.json", pred.id)))?;
        let overlay = draw_boxes(&region.image, &pred.boxes, [20, 220, 40]);
        let png = srcd_core::datastore::encode_image_png(&overlay)?;
        let path = overlay_dir.join(format!("{}.png", pred.id));
        std::fs::write(&path, png).map_err(|e| Error::io(&path, e))?;
    }
    println!(
        "predictions for {} regions written to {}",
        preds.len(),
        pred_dir.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_resolved_config(cfg, out)?;
    let ds = open_dataset(cfg)?;
    let pred_dir = cfg
        .eval_inputs
        .predictions
        .as_ref()
        .ok_or_else(|| Error::Config("eval_inputs.predictions must be set".into()))?;
    let mut predictions: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    let entries = std::fs::read_dir(pred_dir).map_err(|e| Error::io(pred_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(pred_dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "json") {
            let file = srcd_core::datastore::load_annotations(&path)?;
            predictions.insert(file.region_id.clone(), file.boxes);
        }
    }
    let mut annotations: BTreeMap<String, RegionGt> = BTreeMap::new();
    for id in predictions.keys() {
        let entry = ds.entry(id)?;
        match entry.split {
            SplitTag::Labeled => {
                annotations.insert(
                    id.clone(),
                    RegionGt {
                        boxes: ds.partial_boxes(id)?,
                        negative: false,
                    },
                );
            }
            SplitTag::Negative => {
                annotations.insert(
                    id.clone(),
                    RegionGt {
                        boxes: Vec::new(),
                        negative: true,
                    },
                );
            }
            SplitTag::Unlabeled => {
                return Err(Error::Config(format!(
                    "region {id} is unlabeled and cannot be evaluated"
                )));
            }
        }
    }
    let report = evaluate_run(&predictions, &annotations, &cfg.experiment.eval)?;
    let run = RunDir::create(out)?;
    run.write_json(&run.report_path("eval"), &report)?;
    println!(
        "Col Recall {:.3}  Ins Recall {:.3}  Nor FPs {:.3}  Ins FROC {:.3}",
        report.collective_recall, report.instance_recall, report.normal_fps, report.instance_froc
    );
    Ok(())
}

fn cmd_crossval(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_resolved_config(cfg, out)?;
    let ds = open_dataset(cfg)?;
    let metas: Vec<RegionMeta> = ds.regions().iter().map(RegionMeta::from).collect();
    // Validate fold construction early so bad configs fail before training.
    build_folds(&metas, cfg.folds.mode, cfg.folds.k, cfg.experiment.seed)?;
    let fold_list: Vec<usize> = cfg
        .folds
        .folds
        .clone()
        .unwrap_or_else(|| (0..cfg.folds.k).collect());
    let mut requests = Vec::new();
    for &seed in &cfg.folds.seeds {
        for &fold in &fold_list {
            requests.push(SuiteRequest { seed, fold });
        }
    }
    let out_buf = out.to_path_buf();
    let result = run_crossval(
        &ds,
        cfg.folds.mode,
        cfg.folds.k,
        &requests,
        &cfg.experiment,
        &ALL_REGIMES,
        Some(&out_buf),
        |suite| {
            eprintln!("fold {} (seed {}) done", suite.fold, suite.seed);
        },
    )?;
    let run = RunDir::create(out)?;
    run.write_json(&run.report_path("crossval"), &result)?;
    println!("{}", result.format_table());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::Gen => cmd_gen(&cfg, &require_out(cli)?),
        Cmd::Train => cmd_train(&cfg, &require_out(cli)?),
        Cmd::Selftrain { extra } => cmd_selftrain(&cfg, &require_out(cli)?, *extra),
        Cmd::Cotrain => cmd_cotrain(&cfg, &require_out(cli)?),
        Cmd::Infer => cmd_infer(&cfg, &require_out(cli)?),
        Cmd::Eval => cmd_eval(&cfg, &require_out(cli)?),
        Cmd::Crossval => cmd_crossval(&cfg, &require_out(cli)?),
    }
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!(
                "{}",
                serde_json::json!({"error": {"kind": "internal", "message": e.to_string()}})
            );
            std::process::exit(5);
        }
    }
    match run(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}})
            );
            std::process::exit(e.exit_code());
        }
    }
}
