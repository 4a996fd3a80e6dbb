//! Planar (CHW) tensor kernels: 3x3 and 1x1 convolutions via im2col + GEMM,
//! 2x2 max pooling, nearest-neighbor upsampling, ReLU, reflect padding.
//!
//! Convolutions use reflect padding (mirror without edge repeat), so a
//! constant input stays constant through every layer and sliding-window
//! tiles join without seams.

use crate::scalar::Real;

/// Mirror-bounce index for reflect padding; valid for any overshoot.
#[inline]
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = (2 * n - 2) as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        period as usize - m
    }
}

/// Reflect-padded im2col for a 3x3 kernel: writes a `(c_in*9) x (h*w)` matrix.
pub fn im2col3<S: Real>(input: &[S], c_in: usize, h: usize, w: usize, col: &mut [S]) {
    let n = h * w;
    debug_assert_eq!(input.len(), c_in * n);
    debug_assert_eq!(col.len(), c_in * 9 * n);
    for ci in 0..c_in {
        let plane = &input[ci * n..(ci + 1) * n];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * n..(ci * 9 + ky * 3 + kx + 1) * n];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = mirror(y as isize + ky as isize - 1, h);
                    let src = &plane[sy * w..(sy + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = src[mirror(-1, w)];
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = src[mirror(w as isize, w)];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the columns gradient back into the input gradient, mirroring
/// border contributions exactly as `im2col3` read them.
pub fn col2im3<S: Real>(col: &[S], c_in: usize, h: usize, w: usize, dinput: &mut [S]) {
    let n = h * w;
    for ci in 0..c_in {
        let plane = &mut dinput[ci * n..(ci + 1) * n];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &col[(ci * 9 + ky * 3 + kx) * n..(ci * 9 + ky * 3 + kx + 1) * n];
                for y in 0..h {
                    let sy = mirror(y as isize + ky as isize - 1, h);
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    match kx {
                        0 => {
                            let m = mirror(-1, w);
                            dst[m] = dst[m] + src[0];
                            for x in 1..w {
                                dst[x - 1] = dst[x - 1] + src[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                dst[x] = dst[x] + src[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                dst[x + 1] = dst[x + 1] + src[x];
                            }
                            let m = mirror(w as isize, w);
                            dst[m] = dst[m] + src[w - 1];
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 same-size convolution: `out[c_out, h, w]`, weights `[c_out, c_in*9]`.
/// `col` is scratch of size `c_in*9*h*w`.
pub fn conv3_forward<S: Real>(
    input: &[S],
    weight: &[S],
    bias: &[S],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    col: &mut [S],
    out: &mut [S],
) {
    let n = h * w;
    let k = c_in * 9;
    im2col3(input, c_in, h, w, col);
    S::gemm(
        c_out,
        k,
        n,
        S::one(),
        weight,
        k as isize,
        1,
        col,
        n as isize,
        1,
        S::zero(),
        out,
        n as isize,
        1,
    );
    for co in 0..c_out {
        let b = bias[co];
        for v in &mut out[co * n..(co + 1) * n] {
            *v = *v + b;
        }
    }
}

/// Backward of `conv3_forward`. Accumulates `dweight`/`dbias`, and writes
/// `dinput` if provided. `col` must hold the forward im2col of `input`
/// (recomputed here); `dcol` is scratch of the same size.
#[allow(clippy::too_many_arguments)]
pub fn conv3_backward<S: Real>(
    input: &[S],
    weight: &[S],
    dout: &[S],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    col: &mut [S],
    dcol: &mut [S],
    dweight: &mut [S],
    dbias: &mut [S],
    dinput: Option<&mut [S]>,
) {
    let n = h * w;
    let k = c_in * 9;
    im2col3(input, c_in, h, w, col);
    // dW += dY * col^T
    S::gemm(
        c_out,
        n,
        k,
        S::one(),
        dout,
        n as isize,
        1,
        col,
        1,
        n as isize,
        S::one(),
        dweight,
        k as isize,
        1,
    );
    for co in 0..c_out {
        let mut acc = S::zero();
        for &v in &dout[co * n..(co + 1) * n] {
            acc = acc + v;
        }
        dbias[co] = dbias[co] + acc;
    }
    if let Some(dinput) = dinput {
        // dcol = W^T * dY
        S::gemm(
            k,
            c_out,
            n,
            S::one(),
            weight,
            1,
            k as isize,
            dout,
            n as isize,
            1,
            S::zero(),
            dcol,
            n as isize,
            1,
        );
        dinput.fill(S::zero());
        col2im3(dcol, c_in, h, w, dinput);
    }
}

/// 1x1 convolution: a plain channel-mixing GEMM.
pub fn conv1_forward<S: Real>(
    input: &[S],
    weight: &[S],
    bias: &[S],
    c_in: usize,
    c_out: usize,
    n: usize,
    out: &mut [S],
) {
    S::gemm(
        c_out,
        c_in,
        n,
        S::one(),
        weight,
        c_in as isize,
        1,
        input,
        n as isize,
        1,
        S::zero(),
        out,
        n as isize,
        1,
    );
    for co in 0..c_out {
        let b = bias[co];
        for v in &mut out[co * n..(co + 1) * n] {
            *v = *v + b;
        }
    }
}

/// Backward of `conv1_forward`.
#[allow(clippy::too_many_arguments)]
pub fn conv1_backward<S: Real>(
    input: &[S],
    weight: &[S],
    dout: &[S],
    c_in: usize,
    c_out: usize,
    n: usize,
    dweight: &mut [S],
    dbias: &mut [S],
    dinput: Option<&mut [S]>,
) {
    S::gemm(
        c_out,
        n,
        c_in,
        S::one(),
        dout,
        n as isize,
        1,
        input,
        1,
        n as isize,
        S::one(),
        dweight,
        c_in as isize,
        1,
    );
    for co in 0..c_out {
        let mut acc = S::zero();
        for &v in &dout[co * n..(co + 1) * n] {
            acc = acc + v;
        }
        dbias[co] = dbias[co] + acc;
    }
    if let Some(dinput) = dinput {
        S::gemm(
            c_in,
            c_out,
            n,
            S::one(),
            weight,
            1,
            c_in as isize,
            dout,
            n as isize,
            1,
            S::zero(),
            dinput,
            n as isize,
            1,
        );
    }
}

/// In-place ReLU.
pub fn relu<S: Real>(x: &mut [S]) {
    for v in x {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

/// ReLU backward using the stored output as the mask.
pub fn relu_backward<S: Real>(out: &[S], dout: &mut [S]) {
    for (d, &o) in dout.iter_mut().zip(out) {
        if o <= S::zero() {
            *d = S::zero();
        }
    }
}

/// 2x2 max pooling with stride 2; `idx` records the argmax flat offset
/// (ties to the scan-order first) for the backward scatter.
pub fn maxpool2_forward<S: Real>(
    input: &[S],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [S],
    idx: &mut [u32],
) {
    let (oh, ow) = (h / 2, w / 2);
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = (2 * oy) * w + 2 * ox;
                let mut best = plane[best_i];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                }
                let o = ci * oh * ow + oy * ow + ox;
                out[o] = best;
                idx[o] = (ci * h * w + best_i) as u32;
            }
        }
    }
}

pub fn maxpool2_backward<S: Real>(dout: &[S], idx: &[u32], dinput: &mut [S]) {
    dinput.fill(S::zero());
    for (o, &i) in idx.iter().enumerate() {
        dinput[i as usize] = dinput[i as usize] + dout[o];
    }
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward<S: Real>(input: &[S], c: usize, h: usize, w: usize, out: &mut [S]) {
    let (oh, ow) = (h * 2, w * 2);
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        let oplane = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for y in 0..oh {
            let src = &plane[(y / 2) * w..(y / 2 + 1) * w];
            let dst = &mut oplane[y * ow..(y + 1) * ow];
            for x in 0..ow {
                dst[x] = src[x / 2];
            }
        }
    }
}

pub fn upsample2_backward<S: Real>(dout: &[S], c: usize, h: usize, w: usize, dinput: &mut [S]) {
    // h, w are the *input* (small) dimensions.
    let (oh, ow) = (h * 2, w * 2);
    for ci in 0..c {
        let dplane = &mut dinput[ci * h * w..(ci + 1) * h * w];
        let oplane = &dout[ci * oh * ow..(ci + 1) * oh * ow];
        dplane.fill(S::zero());
        for y in 0..oh {
            let src = &oplane[y * ow..(y + 1) * ow];
            let dst = &mut dplane[(y / 2) * w..(y / 2 + 1) * w];
            for x in 0..ow {
                dst[x / 2] = dst[x / 2] + src[x];
            }
        }
    }
}

/// Reflect-pad a planar tensor on the right/bottom to `(ht, wt)`.
pub fn pad_reflect<S: Real>(input: &[S], c: usize, h: usize, w: usize, ht: usize, wt: usize) -> Vec<S> {
    let mut out = vec![S::zero(); c * ht * wt];
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        let oplane = &mut out[ci * ht * wt..(ci + 1) * ht * wt];
        for y in 0..ht {
            let sy = mirror(y as isize, h);
            for x in 0..wt {
                oplane[y * wt + x] = plane[sy * w + mirror(x as isize, w)];
            }
        }
    }
    out
}
