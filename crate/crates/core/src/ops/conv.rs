//! Same-padding 2-D convolution and 2×2 max pooling over `[C, H, W]`
//! activations.

use crate::tensor::{Scalar, Tensor};

fn dims3<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 3, "expected [C, H, W] activation, got {s:?}");
    (s[0], s[1], s[2])
}

fn dims4<T: Scalar>(w: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = w.shape();
    assert_eq!(s.len(), 4, "expected [O, C, K, K] filter, got {s:?}");
    assert_eq!(s[2], s[3], "filters must be square");
    assert_eq!(s[2] % 2, 1, "filters must have odd side for same padding");
    (s[0], s[1], s[2], s[3])
}

/// Copies one channel into a zero-padded `(h + 2p) × (w + 2p)` buffer.
fn pad_channel<T: Scalar>(src: &[T], h: usize, w: usize, p: usize, dst: &mut [T]) {
    let pw = w + 2 * p;
    dst.iter_mut().for_each(|v| *v = T::zero());
    for y in 0..h {
        let drow = &mut dst[(y + p) * pw + p..(y + p) * pw + p + w];
        drow.copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

/// Dot product with four independent accumulator lanes so the adds do not
/// form one serial dependency chain (and vectorize). The summation order is
/// part of the contract: [`conv2d_forward`] and [`conv2d_single_channel`]
/// must produce bit-identical channels.
#[inline]
fn dot4<T: Scalar>(a: &[T], b: &[T]) -> T {
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [T::zero(); 4];
    for (qa, qb) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += qa[j] * qb[j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// Unfolds the zero-padded input into one row of `c_in · k · k` patch values
/// per output position, so each convolution output is a single long dot
/// product against the (already contiguous) per-channel filter row.
fn im2col<T: Scalar>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let (c_in, h, wd) = dims3(x);
    let p = k / 2;
    let (ph, pw) = (h + 2 * p, wd + 2 * p);
    let mut padded = vec![T::zero(); c_in * ph * pw];
    for c in 0..c_in {
        pad_channel(
            &x.data()[c * h * wd..(c + 1) * h * wd],
            h,
            wd,
            p,
            &mut padded[c * ph * pw..(c + 1) * ph * pw],
        );
    }
    let patch = c_in * k * k;
    let mut cols = vec![T::zero(); h * wd * patch];
    for yy in 0..h {
        for xx in 0..wd {
            let base = (yy * wd + xx) * patch;
            for ic in 0..c_in {
                let chan = &padded[ic * ph * pw..(ic + 1) * ph * pw];
                for ky in 0..k {
                    let row = (yy + ky) * pw + xx;
                    cols[base + ic * k * k + ky * k..base + ic * k * k + ky * k + k]
                        .copy_from_slice(&chan[row..row + k]);
                }
            }
        }
    }
    cols
}

/// Convolution with stride 1 and zero same-padding: input `[C, H, W]`,
/// filters `[O, C, K, K]`, bias `[O]`, output `[O, H, W]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (c_in, h, wd) = dims3(x);
    let (c_out, cw, k, _) = dims4(w);
    assert_eq!(c_in, cw, "conv input channel mismatch");
    assert_eq!(b.len(), c_out, "conv bias width mismatch");
    let patch = c_in * k * k;
    let cols = im2col(x, k);

    let mut y = Tensor::zeros(&[c_out, h, wd]);
    for oc in 0..c_out {
        let wrow = &w.data()[oc * patch..(oc + 1) * patch];
        let bias = b.data()[oc];
        let out = &mut y.data_mut()[oc * h * wd..(oc + 1) * h * wd];
        for (pos, o) in out.iter_mut().enumerate() {
            *o = bias + dot4(wrow, &cols[pos * patch..(pos + 1) * patch]);
        }
    }
    y
}

/// Computes one output channel of [`conv2d_forward`], bit-for-bit. `w_oc` is
/// the filter slice `[C, K, K]` for that channel. Used by staged
/// re-evaluation during gradient verification.
pub fn conv2d_single_channel<T: Scalar>(
    x: &Tensor<T>,
    w_oc: &[T],
    bias: T,
    k: usize,
) -> Vec<T> {
    let (c_in, h, wd) = dims3(x);
    let patch = c_in * k * k;
    assert_eq!(w_oc.len(), patch);
    let cols = im2col(x, k);
    (0..h * wd)
        .map(|pos| bias + dot4(w_oc, &cols[pos * patch..(pos + 1) * patch]))
        .collect()
}

/// Adds to every output channel the contribution of a delta restricted to
/// one input channel: `y[oc] += w[oc, ic] ⊛ delta`. Exploits the linearity
/// of convolution in its input so that staged re-evaluation can propagate a
/// single-channel change without recomputing the full layer.
pub fn conv2d_add_single_input_channel<T: Scalar>(
    y: &mut Tensor<T>,
    w: &Tensor<T>,
    ic: usize,
    delta: &[T],
    h: usize,
    wd: usize,
) {
    let (c_out, c_in, k, _) = dims4(w);
    assert!(ic < c_in);
    assert_eq!(delta.len(), h * wd);
    let p = k / 2;
    let (ph, pw) = (h + 2 * p, wd + 2 * p);
    let mut padded = vec![T::zero(); ph * pw];
    pad_channel(delta, h, wd, p, &mut padded);
    for oc in 0..c_out {
        let out = &mut y.data_mut()[oc * h * wd..(oc + 1) * h * wd];
        let fbase = ((oc * c_in) + ic) * k * k;
        for ky in 0..k {
            for kx in 0..k {
                let wv = w.data()[fbase + ky * k + kx];
                for yy in 0..h {
                    let src = &padded[(yy + ky) * pw + kx..(yy + ky) * pw + kx + wd];
                    let dst = &mut out[yy * wd..(yy + 1) * wd];
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d_forward`]: returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c_in, h, wd) = dims3(x);
    let (c_out, _, k, _) = dims4(w);
    assert_eq!(dy.shape(), &[c_out, h, wd], "conv upstream gradient shape");
    let p = k / 2;
    let (ph, pw) = (h + 2 * p, wd + 2 * p);

    let mut padded = vec![T::zero(); c_in * ph * pw];
    for c in 0..c_in {
        pad_channel(
            &x.data()[c * h * wd..(c + 1) * h * wd],
            h,
            wd,
            p,
            &mut padded[c * ph * pw..(c + 1) * ph * pw],
        );
    }

    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[c_out]);
    // Accumulate dx in padded coordinates, then crop.
    let mut dxp = vec![T::zero(); c_in * ph * pw];

    for oc in 0..c_out {
        let g = &dy.data()[oc * h * wd..(oc + 1) * h * wd];
        db.data_mut()[oc] += g.iter().copied().sum();
        for ic in 0..c_in {
            let chan = &padded[ic * ph * pw..(ic + 1) * ph * pw];
            let dchan = &mut dxp[ic * ph * pw..(ic + 1) * ph * pw];
            let fbase = ((oc * c_in) + ic) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = T::zero();
                    let wv = w.data()[fbase + ky * k + kx];
                    for yy in 0..h {
                        let src = &chan[(yy + ky) * pw + kx..(yy + ky) * pw + kx + wd];
                        let grow = &g[yy * wd..(yy + 1) * wd];
                        for (&s, &gv) in src.iter().zip(grow.iter()) {
                            acc += s * gv;
                        }
                        let drow = &mut dchan[(yy + ky) * pw + kx..(yy + ky) * pw + kx + wd];
                        for (d, &gv) in drow.iter_mut().zip(grow.iter()) {
                            *d += wv * gv;
                        }
                    }
                    dw.data_mut()[fbase + ky * k + kx] += acc;
                }
            }
        }
    }

    let mut dx = Tensor::zeros(&[c_in, h, wd]);
    for c in 0..c_in {
        let dchan = &dxp[c * ph * pw..(c + 1) * ph * pw];
        let out = &mut dx.data_mut()[c * h * wd..(c + 1) * h * wd];
        for y in 0..h {
            out[y * wd..(y + 1) * wd]
                .copy_from_slice(&dchan[(y + p) * pw + p..(y + p) * pw + p + wd]);
        }
    }
    (dx, dw, db)
}

/// 2×2 max pooling with stride 2; trailing rows/columns that do not fill a
/// window are dropped (floor semantics). Returns the pooled activations and
/// the flat input index of each selected maximum (first scanned wins ties).
pub fn maxpool2x2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = dims3(x);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[c, oh, ow]);
    let mut arg = vec![0u32; c * oh * ow];
    for cc in 0..c {
        let chan = &x.data()[cc * h * w..(cc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (oy * 2 + dy) * w + ox * 2 + dx;
                        if chan[idx] > best {
                            best = chan[idx];
                            best_idx = idx;
                        }
                    }
                }
                y.data_mut()[(cc * oh + oy) * ow + ox] = best;
                arg[(cc * oh + oy) * ow + ox] = (cc * h * w + best_idx) as u32;
            }
        }
    }
    (y, arg)
}

/// Smallest gap between the maximum and the runner-up across all pooling
/// windows; infinite when every window has a single candidate. Used to
/// detect selection ties during gradient verification. Windows whose best
/// and runner-up are both exactly 0.0 are ignored: pooling here always runs
/// on rectified maps, where an all-clipped window is locally constant (a
/// sign change of its pre-activations is what moves it, and that is tracked
/// separately), so the 0-vs-0 tie is not a selection ambiguity.
pub fn maxpool2x2_margin<T: Scalar>(x: &Tensor<T>) -> f64 {
    let (c, h, w) = dims3(x);
    let (oh, ow) = (h / 2, w / 2);
    let mut margin = f64::INFINITY;
    for cc in 0..c {
        let chan = &x.data()[cc * h * w..(cc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = chan[(oy * 2 + dy) * w + ox * 2 + dx].as_f64();
                        if v > best {
                            second = best;
                            best = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                if second.is_finite() && !(best == 0.0 && second == 0.0) {
                    margin = margin.min(best - second);
                }
            }
        }
    }
    margin
}

/// Routes pooled gradients back to the positions selected by
/// [`maxpool2x2_forward`].
pub fn maxpool2x2_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    assert_eq!(argmax.len(), dy.len(), "argmax/gradient length mismatch");
    for (&idx, &g) in argmax.iter().zip(dy.data().iter()) {
        dx.data_mut()[idx as usize] += g;
    }
    dx
}
