//! Training loop: Adam on random crops with optional flips, sampling images
//! proportional to their duplication weight.

use super::loss::{loss_backward_planar, loss_planar};
use super::net::{backward, forward_store, zero_grads};
use super::optim::Adam;
use super::{ModelParamsOf, TrainConfig};
use crate::error::{Error, Result};
use crate::imaging::{ImageU8, TriMask};
use crate::scalar::Real;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;

/// One training sample: a region, its pixel targets, and an integer
/// duplication weight (data balancing by duplication).
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub image: Arc<ImageU8>,
    pub target: Arc<TriMask>,
    pub weight: usize,
}

/// Per-epoch mean loss components over the epoch's batches.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub total: f64,
    pub ce: f64,
    pub iou: f64,
}

/// Loss trace of one training call.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

/// Crop + flip descriptor, pre-drawn sequentially so batch computation can
/// run in parallel without touching the RNG.
#[derive(Debug, Clone, Copy)]
struct SampleDesc {
    item: usize,
    x0: usize,
    y0: usize,
    flip_h: bool,
    flip_v: bool,
}

/// Extract a normalized planar crop and its label crop, flips applied.
fn crop_sample<S: Real>(
    item: &TrainItem,
    desc: &SampleDesc,
    crop: usize,
) -> (Vec<S>, Vec<u8>) {
    let img = &item.image;
    let tgt = &item.target;
    let w = img.width();
    let n = crop * crop;
    let mut planar = vec![S::zero(); 3 * n];
    let mut labels = vec![0u8; n];
    let scale = S::of_f64(1.0 / 127.5);
    let one = S::one();
    for y in 0..crop {
        for x in 0..crop {
            let sx = if desc.flip_h { crop - 1 - x } else { x } + desc.x0;
            let sy = if desc.flip_v { crop - 1 - y } else { y } + desc.y0;
            let px = img.get(sx, sy);
            let o = y * crop + x;
            for c in 0..3 {
                planar[c * n + o] = S::of_f64(px[c] as f64) * scale - one;
            }
            labels[o] = tgt.labels()[sy * w + sx];
        }
    }
    (planar, labels)
}

/// Run Adam for `epochs` epochs over the weight-expanded dataset; the
/// optimizer state is fresh for every call. Deterministic for a fixed seed
/// regardless of thread count (per-sample gradients are reduced in batch
/// order).
pub fn train<S: Real>(
    params: &mut ModelParamsOf<S>,
    items: &[TrainItem],
    epochs: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    for it in items {
        if it.image.width() < cfg.crop_size || it.image.height() < cfg.crop_size {
            return Err(Error::Config(format!(
                "crop_size {} exceeds region size {}x{}",
                cfg.crop_size,
                it.image.width(),
                it.image.height()
            )));
        }
        if it.image.width() != it.target.width() || it.image.height() != it.target.height() {
            return Err(Error::InvalidArgument(
                "training image and target dimensions differ".into(),
            ));
        }
    }

    let mut expanded: Vec<usize> = Vec::new();
    for (i, it) in items.iter().enumerate() {
        for _ in 0..it.weight.max(1) {
            expanded.push(i);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(
        params,
        cfg.learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_epsilon,
    );
    let mut log = TrainLog::default();
    let crop = cfg.crop_size;

    for epoch in 0..epochs {
        expanded.shuffle(&mut rng);
        let mut epoch_sums = (0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for batch in expanded.chunks(cfg.batch_size) {
            let descs: Vec<SampleDesc> = batch
                .iter()
                .map(|&item| {
                    let img = &items[item].image;
                    let x0 = rng.gen_range(0..=img.width() - crop);
                    let y0 = rng.gen_range(0..=img.height() - crop);
                    let (flip_h, flip_v) = if cfg.augment_flips {
                        (rng.gen::<bool>(), rng.gen::<bool>())
                    } else {
                        (false, false)
                    };
                    SampleDesc {
                        item,
                        x0,
                        y0,
                        flip_h,
                        flip_v,
                    }
                })
                .collect();

            let results: Vec<Result<(f64, f64, f64, Vec<Vec<S>>)>> = descs
                .par_iter()
                .map(|desc| {
                    let (planar, labels) = crop_sample::<S>(&items[desc.item], desc, crop);
                    let acts = forward_store(params, &planar, crop, crop, false)?;
                    // Crop region equals the forward size here, but the padded
                    // raster may be bigger; extract the cropped planar probs.
                    let n_pad = acts.ht * acts.wt;
                    let n = crop * crop;
                    let mut probs = vec![S::zero(); 3 * n];
                    for y in 0..crop {
                        for x in 0..crop {
                            let pi = y * acts.wt + x;
                            let o = y * crop + x;
                            probs[o] = acts.probs[pi];
                            probs[n + o] = acts.probs[n_pad + pi];
                            probs[2 * n + o] = acts.probs[2 * n_pad + pi];
                        }
                    }
                    let lv = loss_planar(&probs, &labels);
                    let dprobs = loss_backward_planar(&probs, &labels);
                    let mut grads = zero_grads(params);
                    backward(params, &acts, &dprobs, &mut grads);
                    Ok((lv.total, lv.ce, lv.iou, grads))
                })
                .collect();

            let mut batch_grads = zero_grads(params);
            let mut batch_loss = (0.0f64, 0.0f64, 0.0f64);
            let bsize = batch.len() as f64;
            for (step_in_batch, r) in results.into_iter().enumerate() {
                let (total, ce, iou, grads) = r.map_err(|e| {
                    Error::Numerical(format!(
                        "epoch {epoch}, batch {batches}, sample {step_in_batch}: {e}"
                    ))
                })?;
                if !total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "NaN loss at epoch {epoch}, batch {batches}, sample {step_in_batch}"
                    )));
                }
                batch_loss.0 += total / bsize;
                batch_loss.1 += ce / bsize;
                batch_loss.2 += iou / bsize;
                let scale = S::of_f64(1.0 / bsize);
                for (acc, g) in batch_grads.iter_mut().zip(&grads) {
                    for (a, &v) in acc.iter_mut().zip(g) {
                        *a = *a + v * scale;
                    }
                }
            }
            adam.step(params, &batch_grads);
            epoch_sums.0 += batch_loss.0;
            epoch_sums.1 += batch_loss.1;
            epoch_sums.2 += batch_loss.2;
            batches += 1;
        }
        log.epochs.push(EpochStats {
            total: epoch_sums.0 / batches as f64,
            ce: epoch_sums.1 / batches as f64,
            iou: epoch_sums.2 / batches as f64,
        });
    }
    Ok(log)
}
