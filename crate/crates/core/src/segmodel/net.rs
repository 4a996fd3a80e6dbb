//! Encoder-decoder forward/backward passes.
//!
//! Architecture per level: 3x3 conv + ReLU, 2x2 max pool between levels, a
//! 3x3 bottleneck conv, and a decoder of nearest upsample + 1x1 projection +
//! skip addition + 3x3 conv, closed by a 1x1 head with per-pixel softmax.
//! Inputs are reflect-padded on the right/bottom to a multiple of 2^depth
//! and cropped back after the softmax.

use super::tensor::*;
use super::{conv_plan, ModelParamsOf, ModelSpec, OUTPUT_CLASSES};
use crate::error::{Error, Result};
use crate::imaging::{ImageU8, ProbMapOf};
use crate::scalar::Real;

/// Layer indices into the conv plan.
#[inline]
fn enc_layer(l: usize) -> usize {
    l
}
#[inline]
fn bott_layer(spec: &ModelSpec) -> usize {
    spec.depth
}
#[inline]
fn proj_layer(spec: &ModelSpec, l: usize) -> usize {
    spec.depth + 1 + 2 * (spec.depth - 1 - l)
}
#[inline]
fn conv_layer(spec: &ModelSpec, l: usize) -> usize {
    proj_layer(spec, l) + 1
}
#[inline]
fn head_layer(spec: &ModelSpec) -> usize {
    3 * spec.depth + 1
}

/// Channel count feeding decoder level `l` from above.
#[inline]
fn upper_channels(spec: &ModelSpec, l: usize) -> usize {
    spec.channels(l + 1)
}

/// All intermediate values needed for one backward pass.
pub(crate) struct Activations<S> {
    pub h: usize,
    pub w: usize,
    pub ht: usize,
    pub wt: usize,
    /// Padded normalized input, planar (3, ht, wt).
    pub input: Vec<S>,
    pub enc_out: Vec<Vec<S>>,
    pub pooled: Vec<Vec<S>>,
    pub pool_idx: Vec<Vec<u32>>,
    pub bott_out: Vec<S>,
    pub dec_u: Vec<Vec<S>>,
    pub dec_s: Vec<Vec<S>>,
    pub dec_out: Vec<Vec<S>>,
    /// Softmax probabilities, planar (3, ht, wt).
    pub probs: Vec<S>,
}

/// Map an RGB image to the normalized planar tensor in [-1, 1].
pub(crate) fn normalize_image<S: Real>(image: &ImageU8) -> Vec<S> {
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    let mut out = vec![S::zero(); 3 * n];
    let scale = S::of_f64(1.0 / 127.5);
    let one = S::one();
    for (i, px) in image.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = S::of_f64(px[c] as f64) * scale - one;
        }
    }
    out
}

fn check_layer_finite<S: Real>(data: &[S], name: &str) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite activation in layer {name}"
        )));
    }
    Ok(())
}

fn softmax_planar<S: Real>(logits: &mut [S], n: usize) {
    for i in 0..n {
        let (z0, z1, z2) = (logits[i], logits[n + i], logits[2 * n + i]);
        let m = z0.max(z1).max(z2);
        let e0 = (z0 - m).exp();
        let e1 = (z1 - m).exp();
        let e2 = (z2 - m).exp();
        let inv = S::one() / (e0 + e1 + e2);
        logits[i] = e0 * inv;
        logits[n + i] = e1 * inv;
        logits[2 * n + i] = e2 * inv;
    }
}

/// Forward pass keeping activations. `image_norm` is planar (3, h, w).
pub(crate) fn forward_store<S: Real>(
    params: &ModelParamsOf<S>,
    image_norm: &[S],
    h: usize,
    w: usize,
    check_finite: bool,
) -> Result<Activations<S>> {
    let spec = *params.spec();
    let plan = conv_plan(&spec);
    let stride = spec.stride();
    let ht = h.div_ceil(stride) * stride;
    let wt = w.div_ceil(stride) * stride;
    let input = if (ht, wt) == (h, w) {
        image_norm.to_vec()
    } else {
        pad_reflect(image_norm, 3, h, w, ht, wt)
    };

    let tensor = |layer: usize| {
        (
            &params.tensors()[2 * layer].data,
            &params.tensors()[2 * layer + 1].data,
        )
    };

    let depth = spec.depth;
    let mut enc_out: Vec<Vec<S>> = Vec::with_capacity(depth);
    let mut pooled: Vec<Vec<S>> = Vec::with_capacity(depth);
    let mut pool_idx: Vec<Vec<u32>> = Vec::with_capacity(depth);

    for l in 0..depth {
        let def = &plan[enc_layer(l)];
        let (lh, lw) = (ht >> l, wt >> l);
        let src: &[S] = if l == 0 { &input } else { &pooled[l - 1] };
        let (wgt, bias) = tensor(enc_layer(l));
        let mut col = vec![S::zero(); def.c_in * 9 * lh * lw];
        let mut out = vec![S::zero(); def.c_out * lh * lw];
        conv3_forward(src, wgt, bias, def.c_in, def.c_out, lh, lw, &mut col, &mut out);
        relu(&mut out);
        if check_finite {
            check_layer_finite(&out, &def.name)?;
        }
        let mut pout = vec![S::zero(); def.c_out * (lh / 2) * (lw / 2)];
        let mut pidx = vec![0u32; pout.len()];
        maxpool2_forward(&out, def.c_out, lh, lw, &mut pout, &mut pidx);
        enc_out.push(out);
        pooled.push(pout);
        pool_idx.push(pidx);
    }

    let (bh, bw) = (ht >> depth, wt >> depth);
    let bdef = &plan[bott_layer(&spec)];
    let (wgt, bias) = tensor(bott_layer(&spec));
    let mut col = vec![S::zero(); bdef.c_in * 9 * bh * bw];
    let mut bott_out = vec![S::zero(); bdef.c_out * bh * bw];
    conv3_forward(
        &pooled[depth - 1],
        wgt,
        bias,
        bdef.c_in,
        bdef.c_out,
        bh,
        bw,
        &mut col,
        &mut bott_out,
    );
    relu(&mut bott_out);
    if check_finite {
        check_layer_finite(&bott_out, &bdef.name)?;
    }

    let mut dec_u: Vec<Vec<S>> = vec![Vec::new(); depth];
    let mut dec_s: Vec<Vec<S>> = vec![Vec::new(); depth];
    let mut dec_out: Vec<Vec<S>> = vec![Vec::new(); depth];
    for l in (0..depth).rev() {
        let (lh, lw) = (ht >> l, wt >> l);
        let n = lh * lw;
        let c_up = upper_channels(&spec, l);
        let c_l = spec.channels(l);
        let prev: &[S] = if l == depth - 1 { &bott_out } else { &dec_out[l + 1] };
        let mut u = vec![S::zero(); c_up * n];
        upsample2_forward(prev, c_up, lh / 2, lw / 2, &mut u);
        let (pw, pb) = tensor(proj_layer(&spec, l));
        let mut s = vec![S::zero(); c_l * n];
        conv1_forward(&u, pw, pb, c_up, c_l, n, &mut s);
        for (sv, &ev) in s.iter_mut().zip(&enc_out[l]) {
            *sv = *sv + ev;
        }
        let (cw, cb) = tensor(conv_layer(&spec, l));
        let mut col = vec![S::zero(); c_l * 9 * n];
        let mut t = vec![S::zero(); c_l * n];
        conv3_forward(&s, cw, cb, c_l, c_l, lh, lw, &mut col, &mut t);
        relu(&mut t);
        if check_finite {
            check_layer_finite(&t, &plan[conv_layer(&spec, l)].name)?;
        }
        dec_u[l] = u;
        dec_s[l] = s;
        dec_out[l] = t;
    }

    let n = ht * wt;
    let (hw, hb) = tensor(head_layer(&spec));
    let mut logits = vec![S::zero(); OUTPUT_CLASSES * n];
    conv1_forward(&dec_out[0], hw, hb, spec.channels(0), OUTPUT_CLASSES, n, &mut logits);
    if check_finite {
        check_layer_finite(&logits, "head")?;
    }
    softmax_planar(&mut logits, n);

    Ok(Activations {
        h,
        w,
        ht,
        wt,
        input,
        enc_out,
        pooled,
        pool_idx,
        bott_out,
        dec_u,
        dec_s,
        dec_out,
        probs: logits,
    })
}

/// Zero-filled gradient buffers aligned with the parameter tensors.
pub(crate) fn zero_grads<S: Real>(params: &ModelParamsOf<S>) -> Vec<Vec<S>> {
    params
        .tensors()
        .iter()
        .map(|t| vec![S::zero(); t.data.len()])
        .collect()
}

/// Backward pass. `dprobs` is dL/dprobs on the *unpadded* (h, w) raster,
/// planar (3, h, w); gradients accumulate into `grads`.
pub(crate) fn backward<S: Real>(
    params: &ModelParamsOf<S>,
    acts: &Activations<S>,
    dprobs: &[S],
    grads: &mut [Vec<S>],
) {
    let spec = *params.spec();
    let depth = spec.depth;
    let (h, w, ht, wt) = (acts.h, acts.w, acts.ht, acts.wt);
    let n = ht * wt;
    let npix = h * w;

    // Softmax backward, embedded into the padded raster (zero outside crop).
    let mut dlogits = vec![S::zero(); OUTPUT_CLASSES * n];
    for y in 0..h {
        for x in 0..w {
            let pi = y * wt + x;
            let gi = y * w + x;
            let p = [acts.probs[pi], acts.probs[n + pi], acts.probs[2 * n + pi]];
            let g = [dprobs[gi], dprobs[npix + gi], dprobs[2 * npix + gi]];
            let s = p[0] * g[0] + p[1] * g[1] + p[2] * g[2];
            dlogits[pi] = p[0] * (g[0] - s);
            dlogits[n + pi] = p[1] * (g[1] - s);
            dlogits[2 * n + pi] = p[2] * (g[2] - s);
        }
    }

    let weight_of = |layer: usize| -> &[S] { &params.tensors()[2 * layer].data };
    let c0 = spec.channels(0);

    // Head (1x1).
    let mut dcur = vec![S::zero(); c0 * n];
    {
        let hl = head_layer(&spec);
        let (left, right) = grads.split_at_mut(2 * hl + 1);
        conv1_backward(
            &acts.dec_out[0],
            weight_of(hl),
            &dlogits,
            c0,
            OUTPUT_CLASSES,
            n,
            &mut left[2 * hl],
            &mut right[0],
            Some(&mut dcur),
        );
    }

    // Decoder backward from level 0 down the stack; collects skip grads.
    let mut dskip: Vec<Vec<S>> = vec![Vec::new(); depth];
    for l in 0..depth {
        let (lh, lw) = (ht >> l, wt >> l);
        let ln = lh * lw;
        let c_l = spec.channels(l);
        let c_up = upper_channels(&spec, l);

        relu_backward(&acts.dec_out[l], &mut dcur);

        let cl_layer = conv_layer(&spec, l);
        let mut col = vec![S::zero(); c_l * 9 * ln];
        let mut dcol = vec![S::zero(); c_l * 9 * ln];
        let mut ds = vec![S::zero(); c_l * ln];
        {
            let (left, right) = grads.split_at_mut(2 * cl_layer + 1);
            conv3_backward(
                &acts.dec_s[l],
                weight_of(cl_layer),
                &dcur,
                c_l,
                c_l,
                lh,
                lw,
                &mut col,
                &mut dcol,
                &mut left[2 * cl_layer],
                &mut right[0],
                Some(&mut ds),
            );
        }

        let pj_layer = proj_layer(&spec, l);
        let mut du = vec![S::zero(); c_up * ln];
        {
            let (left, right) = grads.split_at_mut(2 * pj_layer + 1);
            conv1_backward(
                &acts.dec_u[l],
                weight_of(pj_layer),
                &ds,
                c_up,
                c_l,
                ln,
                &mut left[2 * pj_layer],
                &mut right[0],
                Some(&mut du),
            );
        }
        dskip[l] = ds; // gradient on enc_out[l] through the skip addition

        let mut dprev = vec![S::zero(); c_up * (lh / 2) * (lw / 2)];
        upsample2_backward(&du, c_up, lh / 2, lw / 2, &mut dprev);
        dcur = dprev;
    }

    // Bottleneck.
    relu_backward(&acts.bott_out, &mut dcur);
    let (bh, bw) = (ht >> depth, wt >> depth);
    let bl = bott_layer(&spec);
    let c_in_b = spec.channels(depth - 1);
    let c_out_b = spec.channels(depth);
    let mut dpool = vec![S::zero(); c_in_b * bh * bw];
    {
        let mut col = vec![S::zero(); c_in_b * 9 * bh * bw];
        let mut dcol = vec![S::zero(); c_in_b * 9 * bh * bw];
        let (left, right) = grads.split_at_mut(2 * bl + 1);
        conv3_backward(
            &acts.pooled[depth - 1],
            weight_of(bl),
            &dcur,
            c_in_b,
            c_out_b,
            bh,
            bw,
            &mut col,
            &mut dcol,
            &mut left[2 * bl],
            &mut right[0],
            Some(&mut dpool),
        );
    }

    // Encoder backward from the deepest level up.
    for l in (0..depth).rev() {
        let (lh, lw) = (ht >> l, wt >> l);
        let c_l = spec.channels(l);
        let c_in = if l == 0 { 3 } else { spec.channels(l - 1) };

        let mut denc = vec![S::zero(); c_l * lh * lw];
        maxpool2_backward(&dpool, &acts.pool_idx[l], &mut denc);
        for (d, s) in denc.iter_mut().zip(&dskip[l]) {
            *d = *d + *s;
        }
        relu_backward(&acts.enc_out[l], &mut denc);

        let src: &[S] = if l == 0 { &acts.input } else { &acts.pooled[l - 1] };
        let el = enc_layer(l);
        let mut col = vec![S::zero(); c_in * 9 * lh * lw];
        let mut dcol = vec![S::zero(); c_in * 9 * lh * lw];
        let mut dsrc = if l > 0 {
            vec![S::zero(); c_in * lh * lw]
        } else {
            Vec::new()
        };
        {
            let (left, right) = grads.split_at_mut(2 * el + 1);
            conv3_backward(
                src,
                weight_of(el),
                &denc,
                c_in,
                c_l,
                lh,
                lw,
                &mut col,
                &mut dcol,
                &mut left[2 * el],
                &mut right[0],
                if l > 0 { Some(&mut dsrc) } else { None },
            );
        }
        dpool = dsrc;
    }
}

/// Extract the cropped, pixel-major probability map from activations.
pub(crate) fn probs_to_map<S: Real>(acts: &Activations<S>) -> ProbMapOf<S> {
    let (h, w, wt) = (acts.h, acts.w, acts.wt);
    let n = acts.ht * acts.wt;
    let mut out = vec![S::zero(); h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let pi = y * wt + x;
            let o = (y * w + x) * 3;
            out[o] = acts.probs[pi];
            out[o + 1] = acts.probs[n + pi];
            out[o + 2] = acts.probs[2 * n + pi];
        }
    }
    ProbMapOf::from_raw(w, h, out).expect("shape by construction")
}

/// Per-pixel softmax over the 3 classes; output spatial size equals input.
pub fn forward<S: Real>(params: &ModelParamsOf<S>, image: &ImageU8) -> Result<ProbMapOf<S>> {
    let norm = normalize_image(image);
    let acts = forward_store(params, &norm, image.height(), image.width(), true)?;
    Ok(probs_to_map(&acts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmodel::ModelSpec;

    fn test_image(w: usize, h: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> ImageU8 {
        let mut img = ImageU8::new(w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    #[test]
    fn forward_probs_sum_to_one() {
        let params = ModelParamsOf::<f32>::init(&ModelSpec::variant_a(), 3).unwrap();
        let img = test_image(24, 16, |x, y| [(x * 10) as u8, (y * 13) as u8, 128]);
        let probs = forward(&params, &img).unwrap();
        probs.validate(1e-5).unwrap();
        assert_eq!(probs.width(), 24);
        assert_eq!(probs.height(), 16);
    }

    #[test]
    fn forward_handles_non_divisible_sizes() {
        let params = ModelParamsOf::<f32>::init(&ModelSpec::variant_b(), 3).unwrap();
        let img = test_image(37, 23, |x, y| [(x * 3) as u8, (y * 5) as u8, 77]);
        let probs = forward(&params, &img).unwrap();
        assert_eq!(probs.width(), 37);
        assert_eq!(probs.height(), 23);
        probs.validate(1e-5).unwrap();
    }

    #[test]
    fn forward_constant_image_is_constant() {
        // Reflect padding keeps a constant input constant through every layer.
        let params = ModelParamsOf::<f32>::init(&ModelSpec::variant_a(), 5).unwrap();
        let img = test_image(32, 32, |_, _| [120, 90, 160]);
        let probs = forward(&params, &img).unwrap();
        let center = probs.get(16, 16);
        for y in 0..32 {
            for x in 0..32 {
                let p = probs.get(x, y);
                for c in 0..3 {
                    assert!((p[c] - center[c]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = ModelParamsOf::<f32>::init(&ModelSpec::variant_a(), 9).unwrap();
        let img = test_image(40, 24, |x, y| [(x * y) as u8, (x + y) as u8, 31]);
        let a = forward(&params, &img).unwrap();
        let b = forward(&params, &img).unwrap();
        assert_eq!(a.probs(), b.probs());
    }
}
