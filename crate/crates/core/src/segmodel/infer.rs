//! Sliding-window inference for regions larger than the training window.

use super::net::forward;
use super::ModelParamsOf;
use crate::error::{Error, Result};
use crate::imaging::{ImageU8, ProbMapOf};
use crate::scalar::Real;

/// Tile start positions covering `size` with the given stride; the last tile
/// is clamped so it ends exactly at `size`.
fn tile_positions(size: usize, window: usize, stride: usize) -> Vec<usize> {
    if size <= window {
        return vec![0];
    }
    let mut xs = Vec::new();
    let mut x = 0;
    loop {
        if x + window >= size {
            xs.push(size - window);
            break;
        }
        xs.push(x);
        x += stride;
    }
    xs.dedup();
    xs
}

/// Tile the image, average class probabilities in overlapping zones, and
/// renormalize. An image no larger than the window is returned as a plain
/// forward pass, bit-identical to [`forward`].
pub fn sliding_window_infer<S: Real>(
    params: &ModelParamsOf<S>,
    image: &ImageU8,
    window: usize,
    overlap: usize,
) -> Result<ProbMapOf<S>> {
    let stride_req = params.spec().stride();
    if window == 0 || window % stride_req != 0 {
        return Err(Error::Config(format!(
            "window {window} must be a positive multiple of {stride_req}"
        )));
    }
    if overlap >= window {
        return Err(Error::Config(format!(
            "overlap {overlap} must be < window {window}"
        )));
    }
    let (w, h) = (image.width(), image.height());
    if w <= window && h <= window {
        return forward(params, image);
    }

    let stride = window - overlap;
    let xs = tile_positions(w, window, stride);
    let ys = tile_positions(h, window, stride);

    let mut sums = vec![S::zero(); w * h * 3];
    let mut counts = vec![0u32; w * h];
    for &ty in &ys {
        for &tx in &xs {
            let tw = window.min(w);
            let th = window.min(h);
            let mut tile = ImageU8::new(tw, th)?;
            for y in 0..th {
                for x in 0..tw {
                    tile.set(x, y, image.get(tx + x, ty + y));
                }
            }
            let probs = forward(params, &tile)?;
            for y in 0..th {
                for x in 0..tw {
                    let p = probs.get(x, y);
                    let o = ((ty + y) * w + (tx + x)) * 3;
                    for c in 0..3 {
                        sums[o + c] = sums[o + c] + p[c];
                    }
                    counts[(ty + y) * w + (tx + x)] += 1;
                }
            }
        }
    }

    for (i, &count) in counts.iter().enumerate() {
        debug_assert!(count > 0);
        let inv = S::of_f64(1.0 / count as f64);
        let px = &mut sums[3 * i..3 * i + 3];
        let total = (px[0] + px[1] + px[2]) * inv;
        let norm = if total > S::zero() { inv / total } else { inv };
        for v in px {
            *v = *v * norm;
        }
    }
    ProbMapOf::from_raw(w, h, sums)
}
