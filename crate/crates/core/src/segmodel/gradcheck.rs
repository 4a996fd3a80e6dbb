//! Finite-difference validation of the analytic gradients.

use super::loss::{loss_backward_planar, loss_planar};
use super::net::{backward, forward_store, normalize_image, zero_grads};
use super::ModelParamsOf;
use crate::error::Result;
use crate::imaging::{ImageU8, TriMask};
use crate::rng::stream;
use crate::scalar::Real;
use rand::Rng;

/// Max relative error between analytic and numeric derivatives, with the
/// denominator `max(|g|, |fd|, 1e-8)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&g, &fd)| (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn eval_loss<S: Real>(
    params: &ModelParamsOf<S>,
    planar: &[S],
    h: usize,
    w: usize,
    labels: &[u8],
) -> Result<f64> {
    let acts = forward_store(params, planar, h, w, false)?;
    let n_pad = acts.ht * acts.wt;
    let n = h * w;
    let mut probs = vec![S::zero(); 3 * n];
    for y in 0..h {
        for x in 0..w {
            let pi = y * acts.wt + x;
            let o = y * w + x;
            probs[o] = acts.probs[pi];
            probs[n + o] = acts.probs[n_pad + pi];
            probs[2 * n + o] = acts.probs[2 * n_pad + pi];
        }
    }
    Ok(loss_planar(&probs, labels).total)
}

/// Compare the analytic gradient of the total loss against central finite
/// differences on `samples` randomly chosen parameters; returns the max
/// relative error. Intended for small inputs (<= 32x32).
pub fn grad_check<S: Real>(
    params: &ModelParamsOf<S>,
    image: &ImageU8,
    target: &TriMask,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let (h, w) = (image.height(), image.width());
    let planar = normalize_image::<S>(image);
    let labels = target.labels();

    // Analytic pass.
    let acts = forward_store(params, &planar, h, w, true)?;
    let n_pad = acts.ht * acts.wt;
    let n = h * w;
    let mut probs = vec![S::zero(); 3 * n];
    for y in 0..h {
        for x in 0..w {
            let pi = y * acts.wt + x;
            let o = y * w + x;
            probs[o] = acts.probs[pi];
            probs[n + o] = acts.probs[n_pad + pi];
            probs[2 * n + o] = acts.probs[2 * n_pad + pi];
        }
    }
    let dprobs = loss_backward_planar(&probs, labels);
    let mut grads = zero_grads(params);
    backward(params, &acts, &dprobs, &mut grads);

    // Sample parameter coordinates.
    let total: usize = params.num_params();
    let mut rng = stream(seed, "grad-check", &[]);
    let mut picked: Vec<usize> = Vec::with_capacity(samples);
    while picked.len() < samples.min(total) {
        let ix = rng.gen_range(0..total);
        if !picked.contains(&ix) {
            picked.push(ix);
        }
    }

    let locate = |flat: usize| -> (usize, usize) {
        let mut rest = flat;
        for (ti, t) in params.tensors().iter().enumerate() {
            if rest < t.data.len() {
                return (ti, rest);
            }
            rest -= t.data.len();
        }
        unreachable!("flat index in range")
    };

    let eps = S::of_f64(epsilon);
    let mut work = params.clone();
    let mut analytic = Vec::with_capacity(picked.len());
    let mut numeric = Vec::with_capacity(picked.len());
    for &flat in &picked {
        let (ti, off) = locate(flat);
        let orig = work.tensors()[ti].data[off];
        work.tensors_mut()[ti].data[off] = orig + eps;
        let lp = eval_loss(&work, &planar, h, w, labels)?;
        work.tensors_mut()[ti].data[off] = orig - eps;
        let lm = eval_loss(&work, &planar, h, w, labels)?;
        work.tensors_mut()[ti].data[off] = orig;
        analytic.push(grads[ti][off].as_f64());
        numeric.push((lp - lm) / (2.0 * epsilon));
    }
    Ok(max_rel_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::super::tensor::{conv1_backward, conv1_forward};
    use super::*;
    use crate::imaging::TriLabel;
    use crate::segmodel::ModelSpec;

    /// Linear single-layer model with a quadratic loss: finite differences
    /// are exact up to rounding, validating the check machinery itself.
    #[test]
    fn linear_layer_quadratic_loss_error_below_1e6() {
        let (c_in, c_out, n) = (3, 2, 8);
        let input: Vec<f64> = (0..c_in * n).map(|i| (i as f64 * 0.31).sin()).collect();
        let weight: Vec<f64> = (0..c_out * c_in).map(|i| (i as f64 * 0.17).cos() * 0.4).collect();
        let bias = vec![0.0; c_out];
        let targets: Vec<f64> = (0..c_out * n).map(|i| (i as f64 * 0.07).cos()).collect();
        let eval = |w: &[f64]| {
            let mut out = vec![0.0; c_out * n];
            conv1_forward(&input, w, &bias, c_in, c_out, n, &mut out);
            out.iter()
                .zip(&targets)
                .map(|(o, t)| (o - t) * (o - t))
                .sum::<f64>()
        };
        // Analytic gradient via the layer backward with dout = 2(out - t).
        let mut out = vec![0.0; c_out * n];
        conv1_forward(&input, &weight, &bias, c_in, c_out, n, &mut out);
        let dout: Vec<f64> = out.iter().zip(&targets).map(|(o, t)| 2.0 * (o - t)).collect();
        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; c_out];
        conv1_backward(&input, &weight, &dout, c_in, c_out, n, &mut dw, &mut db, None);
        let eps = 1e-5;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in 0..weight.len() {
            let mut wp = weight.clone();
            wp[i] += eps;
            let mut wm = weight.clone();
            wm[i] -= eps;
            analytic.push(dw[i]);
            numeric.push((eval(&wp) - eval(&wm)) / (2.0 * eps));
        }
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-6, "linear-model fd error {err}");
    }

    fn toy_case(w: usize, h: usize) -> (ImageU8, TriMask) {
        let mut img = ImageU8::new(w, h).unwrap();
        let mut tm = TriMask::all_background(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, [((x * 31 + y * 7) % 256) as u8, (y * 11 % 256) as u8, 90]);
                if (4..w - 4).contains(&x) && (4..h - 4).contains(&y) {
                    tm.set(x, y, TriLabel::Inner);
                } else if x % 3 == 0 {
                    tm.set(x, y, TriLabel::Edge);
                }
            }
        }
        (img, tm)
    }

    #[test]
    fn full_model_f64_error_below_1e3() {
        let (img, tm) = toy_case(16, 16);
        let params = ModelParamsOf::<f64>::init(&ModelSpec::variant_a(), 11).unwrap();
        let err = grad_check(&params, &img, &tm, 1e-5, 60, 3).unwrap();
        assert!(err < 1e-3, "variant A grad error {err}");
    }

    #[test]
    fn truncation_error_grows_with_epsilon() {
        let (img, tm) = toy_case(16, 16);
        let params = ModelParamsOf::<f64>::init(&ModelSpec::variant_a(), 13).unwrap();
        let small = grad_check(&params, &img, &tm, 1e-4, 40, 5).unwrap();
        let large = grad_check(&params, &img, &tm, 1e-1, 40, 5).unwrap();
        assert!(
            large > small,
            "epsilon sweep: err(1e-1)={large} should exceed err(1e-4)={small}"
        );
    }
}
