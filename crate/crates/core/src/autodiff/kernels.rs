//! Raw convolution / pooling / resize kernels shared by the graph ops.
//!
//! All convolutions are stride 1 with `floor(k/2)` zero padding, so spatial
//! dims are preserved for odd kernels. Inner loops are written over zipped
//! contiguous rows (no bounds checks) with lane-split accumulators so they
//! autovectorize; rayon parallelism is over output channels, which keeps
//! writes disjoint and results bit-deterministic regardless of thread count.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Uninitialized buffer; the caller must overwrite every element before the
/// result is read. Activation tensors run to megabytes and are produced
/// thousands of times per training iteration, so the redundant zeroing pass
/// is measurable.
#[inline]
fn uninit_vec<T: Scalar>(n: usize) -> Vec<T> {
    let mut v: Vec<T> = Vec::with_capacity(n);
    // SAFETY: T is a plain float; every element is written before any read
    // (asserted per kernel below, and the conv oracles in the tests would
    // catch a missed region).
    unsafe { v.set_len(n) };
    v
}

/// Zero-pads the trailing spatial dims of a (C, D, H, W) block. Only halo
/// elements are zeroed; the interior is copied, covering the whole buffer.
fn pad3<T: Scalar>(x: &[T], c: usize, d: usize, h: usize, w: usize, p: [usize; 3]) -> Vec<T> {
    let (pd, ph, pw) = (p[0], p[1], p[2]);
    let (dp, hp, wp) = (d + 2 * pd, h + 2 * ph, w + 2 * pw);
    if pd == 0 && ph == 0 && pw == 0 {
        return x[..c * d * h * w].to_vec();
    }
    let mut out = uninit_vec::<T>(c * dp * hp * wp);
    let zero = T::zero();
    for ci in 0..c {
        let cbase = ci * dp * hp * wp;
        // full boundary planes
        out[cbase..cbase + pd * hp * wp].fill(zero);
        out[cbase + (pd + d) * hp * wp..cbase + dp * hp * wp].fill(zero);
        for dd in 0..d {
            let pbase = cbase + (pd + dd) * hp * wp;
            out[pbase..pbase + ph * wp].fill(zero);
            out[pbase + (ph + h) * wp..pbase + hp * wp].fill(zero);
            for hh in 0..h {
                let rbase = pbase + (ph + hh) * wp;
                out[rbase..rbase + pw].fill(zero);
                let src = &x[((ci * d + dd) * h + hh) * w..][..w];
                out[rbase + pw..rbase + pw + w].copy_from_slice(src);
                out[rbase + pw + w..rbase + wp].fill(zero);
            }
        }
    }
    out
}

fn pad2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, p: [usize; 2]) -> Vec<T> {
    let (ph, pw) = (p[0], p[1]);
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    if ph == 0 && pw == 0 {
        return x[..c * h * w].to_vec();
    }
    let mut out = uninit_vec::<T>(c * hp * wp);
    let zero = T::zero();
    for ci in 0..c {
        let cbase = ci * hp * wp;
        out[cbase..cbase + ph * wp].fill(zero);
        out[cbase + (ph + h) * wp..cbase + hp * wp].fill(zero);
        for hh in 0..h {
            let rbase = cbase + (ph + hh) * wp;
            out[rbase..rbase + pw].fill(zero);
            let src = &x[(ci * h + hh) * w..][..w];
            out[rbase + pw..rbase + pw + w].copy_from_slice(src);
            out[rbase + pw + w..rbase + wp].fill(zero);
        }
    }
    out
}

/// `dst[i] += w0*src[i] + w1*src[i+1] + w2*src[i+2]` over a row. Fused
/// multiply-adds map onto the hardware FMA units.
#[inline(always)]
fn row_taps3<T: Scalar>(dst: &mut [T], src: &[T], w0: T, w1: T, w2: T) {
    let n = dst.len();
    let s = &src[..n + 2];
    for i in 0..n {
        dst[i] = w2.mul_add(s[i + 2], w1.mul_add(s[i + 1], w0.mul_add(s[i], dst[i])));
    }
}

#[inline(always)]
fn row_taps1<T: Scalar>(dst: &mut [T], src: &[T], w0: T) {
    let n = dst.len();
    let s = &src[..n];
    for i in 0..n {
        dst[i] = w0.mul_add(s[i], dst[i]);
    }
}

#[inline(always)]
fn row_taps<T: Scalar>(dst: &mut [T], src: &[T], wv: &[T]) {
    match wv.len() {
        1 => row_taps1(dst, src, wv[0]),
        3 => row_taps3(dst, src, wv[0], wv[1], wv[2]),
        k => {
            for (kw, &wval) in wv.iter().enumerate().take(k) {
                row_taps1(dst, &src[kw..], wval);
            }
        }
    }
}

const LANES: usize = 16;

/// Lane-split dot product; the fixed lane count keeps the summation order
/// (and thus the result bits) independent of thread scheduling.
#[inline(always)]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); LANES];
    let chunks = n / LANES;
    for i in 0..chunks {
        let ao = &a[i * LANES..][..LANES];
        let bo = &b[i * LANES..][..LANES];
        for j in 0..LANES {
            lanes[j] = ao[j].mul_add(bo[j], lanes[j]);
        }
    }
    let mut s = T::zero();
    for j in 0..LANES {
        s += lanes[j];
    }
    for i in chunks * LANES..n {
        s = a[i].mul_add(b[i], s);
    }
    s
}

/// `acc[kw] += sum_i a[i] * b[i + kw]` for a 3-tap row, single fused pass.
#[inline(always)]
fn row_dots3<T: Scalar>(acc: &mut [T], a: &[T], b: &[T]) {
    let n = a.len();
    let b = &b[..n + 2];
    let mut l0 = [T::zero(); LANES];
    let mut l1 = [T::zero(); LANES];
    let mut l2 = [T::zero(); LANES];
    let chunks = n / LANES;
    for i in 0..chunks {
        let ao = &a[i * LANES..][..LANES];
        let b0 = &b[i * LANES..][..LANES + 2];
        for j in 0..LANES {
            let av = ao[j];
            l0[j] = av.mul_add(b0[j], l0[j]);
            l1[j] = av.mul_add(b0[j + 1], l1[j]);
            l2[j] = av.mul_add(b0[j + 2], l2[j]);
        }
    }
    let (mut s0, mut s1, mut s2) = (T::zero(), T::zero(), T::zero());
    for j in 0..LANES {
        s0 += l0[j];
        s1 += l1[j];
        s2 += l2[j];
    }
    for i in chunks * LANES..n {
        let av = a[i];
        s0 = av.mul_add(b[i], s0);
        s1 = av.mul_add(b[i + 1], s1);
        s2 = av.mul_add(b[i + 2], s2);
    }
    acc[0] += s0;
    acc[1] += s1;
    acc[2] += s2;
}

#[inline(always)]
fn row_dots<T: Scalar>(acc: &mut [T], a: &[T], b: &[T]) {
    match acc.len() {
        1 => acc[0] += dot(a, &b[..a.len()]),
        3 => row_dots3(acc, a, b),
        k => {
            for kw in 0..k {
                acc[kw] += dot(a, &b[kw..kw + a.len()]);
            }
        }
    }
}

/// Raw pointer wrapper for provably disjoint parallel writes.
#[derive(Clone, Copy)]
struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// Row length below which convolutions switch to the im2col/GEMM path;
/// short rows leave the plane kernel dominated by per-row setup.
const IM2COL_MAX_W: usize = 16;

/// Gathers conv patches: P[(ic,kd,kh,kw), s] over output sites s=(d,h,w) in
/// row-major order, from a padded input block.
fn im2col3d<T: Scalar>(
    xp: &[T],
    ci: usize,
    d: usize,
    h: usize,
    w: usize,
    p: [usize; 3],
    k: [usize; 3],
) -> Vec<T> {
    let (kd, kh, kw) = (k[0], k[1], k[2]);
    let (dp, hp, wp) = (d + 2 * p[0], h + 2 * p[1], w + 2 * p[2]);
    let _ = dp;
    let s_total = d * h * w;
    let mut cols = uninit_vec::<T>(ci * kd * kh * kw * s_total);
    let mut row = 0usize;
    for icc in 0..ci {
        for kdd in 0..kd {
            for khh in 0..kh {
                for kww in 0..kw {
                    let dst_base = row * s_total;
                    for dd in 0..d {
                        let plane = (icc * (d + 2 * p[0]) + dd + kdd) * hp;
                        for hh in 0..h {
                            let src = &xp[(plane + hh + khh) * wp + kww..][..w];
                            let dst = &mut cols[dst_base + (dd * h + hh) * w..][..w];
                            dst.copy_from_slice(src);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// GEMM-based conv core for small spatial dims: out(co, S) = W(co, K) x P(K, S).
fn conv3d_core_gemm<T: Scalar>(
    xp: &[T],
    ci: usize,
    d: usize,
    h: usize,
    w: usize,
    p: [usize; 3],
    weights: &[T],
    co: usize,
    k: [usize; 3],
    bias: Option<&[T]>,
) -> Vec<T> {
    let s_total = d * h * w;
    let kn = ci * k[0] * k[1] * k[2];
    let cols = im2col3d(xp, ci, d, h, w, p, k);
    let mut out = uninit_vec::<T>(co * s_total);
    out.par_chunks_mut(s_total).enumerate().for_each(|(oc, orow)| {
        orow.fill(bias.map(|b| b[oc]).unwrap_or_else(T::zero));
        for kk in 0..kn {
            row_taps1(orow, &cols[kk * s_total..][..s_total], weights[oc * kn + kk]);
        }
    });
    out
}

/// Shared correlation core: xp is a padded (Ci, D+2p0, H+2p1, W+2p2) block,
/// weights are laid out (Co, Ci, Kd, Kh, Kw). Parallelism is over output
/// depth planes so every input row fetched is reused by all Co channels;
/// each thread writes a disjoint (.., dd, ..) slice of the output.
fn conv3d_core<T: Scalar>(
    xp: &[T],
    ci: usize,
    d: usize,
    h: usize,
    w: usize,
    p: [usize; 3],
    weights: &[T],
    co: usize,
    k: [usize; 3],
    bias: Option<&[T]>,
) -> Vec<T> {
    if w < IM2COL_MAX_W {
        return conv3d_core_gemm(xp, ci, d, h, w, p, weights, co, k, bias);
    }
    let (kd, kh, kw) = (k[0], k[1], k[2]);
    let (dp, hp, wp) = (d + 2 * p[0], h + 2 * p[1], w + 2 * p[2]);
    // Every (oc, dd, hh, :) row is written exactly once below.
    let mut out = uninit_vec::<T>(co * d * h * w);
    let out_ptr = SendPtr(out.as_mut_ptr());
    (0..d).into_par_iter().for_each(|dd| {
        let out_ptr = out_ptr;
        // One accumulator row per output channel, reused across hh.
        let mut acc = vec![T::zero(); co * w];
        for hh in 0..h {
            match bias {
                Some(b) => {
                    for oc in 0..co {
                        acc[oc * w..(oc + 1) * w].fill(b[oc]);
                    }
                }
                None => acc.fill(T::zero()),
            }
            for icc in 0..ci {
                for kdd in 0..kd {
                    let plane = (icc * dp + dd + kdd) * hp;
                    for khh in 0..kh {
                        let src = &xp[(plane + hh + khh) * wp..][..w + 2 * p[2]];
                        let wofs = (kdd * kh + khh) * kw;
                        if kw == 3 {
                            for oc in 0..co {
                                let wi = ((oc * ci + icc) * kd) * kh * kw + wofs;
                                row_taps3(
                                    &mut acc[oc * w..][..w],
                                    src,
                                    weights[wi],
                                    weights[wi + 1],
                                    weights[wi + 2],
                                );
                            }
                        } else {
                            for oc in 0..co {
                                let wrow =
                                    &weights[((oc * ci + icc) * kd) * kh * kw + wofs..][..kw];
                                row_taps(&mut acc[oc * w..][..w], src, wrow);
                            }
                        }
                    }
                }
            }
            for oc in 0..co {
                // Disjoint writes: this thread owns depth plane dd.
                unsafe {
                    let dst = out_ptr.0.add(((oc * d + dd) * h + hh) * w);
                    std::ptr::copy_nonoverlapping(acc[oc * w..].as_ptr(), dst, w);
                }
            }
        }
    });
    out
}

/// 3D convolution forward. x: (Ci,D,H,W), w: (Co,Ci,Kd,Kh,Kw), b: (Co).
pub fn conv3d_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ci, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    assert_eq!(w.shape()[1], ci, "conv3d channel mismatch");
    let p = [kd / 2, kh / 2, kw / 2];
    let xp = pad3(x.data(), ci, d, h, wd, p);
    let out = conv3d_core(
        &xp,
        ci,
        d,
        h,
        wd,
        p,
        w.data(),
        co,
        [kd, kh, kw],
        Some(b.data()),
    );
    Tensor::from_vec(&[co, d, h, wd], out)
}

/// Weights flipped in all kernel dims with in/out channel axes swapped:
/// result layout (Ci, Co, Kd, Kh, Kw), ready for the grad-input correlation.
fn flip_weights<T: Scalar>(w: &Tensor<T>, spatial_rank: usize) -> Vec<T> {
    let co = w.shape()[0];
    let ci = w.shape()[1];
    let kdims = &w.shape()[2..];
    let kn: usize = kdims.iter().product();
    let src = w.data();
    let mut out = vec![T::zero(); src.len()];
    for oc in 0..co {
        for ic in 0..ci {
            for t in 0..kn {
                // reverse the multi-index over kernel dims
                let mut rem = t;
                let mut rev = 0usize;
                for (axis, &kd) in kdims.iter().enumerate() {
                    let stride: usize = kdims[axis + 1..].iter().product();
                    let idx = rem / stride;
                    rem %= stride;
                    rev = rev * kd + (kd - 1 - idx);
                }
                out[(ic * co + oc) * kn + rev] = src[(oc * ci + ic) * kn + t];
            }
        }
    }
    let _ = spatial_rank;
    out
}

/// 3D convolution backward. Returns (grad_x, grad_w, grad_b).
pub fn conv3d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (ci, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    let p = [kd / 2, kh / 2, kw / 2];
    let g = gout.data();

    // grad bias
    let mut gb = vec![T::zero(); co];
    for oc in 0..co {
        let mut s = T::zero();
        for &v in &g[oc * d * h * wd..(oc + 1) * d * h * wd] {
            s += v;
        }
        gb[oc] = s;
    }

    // grad weights: correlation of gout rows against padded input rows.
    let xp = pad3(x.data(), ci, d, h, wd, p);
    let (hp, wp) = (h + 2 * p[1], wd + 2 * p[2]);
    let mut gw = vec![T::zero(); w.numel()];
    if wd < IM2COL_MAX_W {
        // gw(oc, k) = dot(gout row oc, patch row k) over all output sites.
        let s_total = d * h * wd;
        let kn = ci * kd * kh * kw;
        let cols = im2col3d(&xp, ci, d, h, wd, p, [kd, kh, kw]);
        gw.par_chunks_mut(kn).enumerate().for_each(|(oc, gw_oc)| {
            let grow = &g[oc * s_total..][..s_total];
            for kk in 0..kn {
                gw_oc[kk] = dot(grow, &cols[kk * s_total..][..s_total]);
            }
        });
    } else {
        // Loop order keeps the gout row hot across all (ci, kd, kh) taps.
        gw.par_chunks_mut(ci * kd * kh * kw)
            .enumerate()
            .for_each(|(oc, gw_oc)| {
                let gout_c = &g[oc * d * h * wd..][..d * h * wd];
                for dd in 0..d {
                    for hh in 0..h {
                        let grow = &gout_c[(dd * h + hh) * wd..][..wd];
                        for icc in 0..ci {
                            for kdd in 0..kd {
                                let plane = (icc * (d + 2 * p[0]) + dd + kdd) * hp;
                                for khh in 0..kh {
                                    let acc =
                                        &mut gw_oc[((icc * kd + kdd) * kh + khh) * kw..][..kw];
                                    let xrow = &xp[(plane + hh + khh) * wp..][..wd + 2 * p[2]];
                                    row_dots(acc, grow, xrow);
                                }
                            }
                        }
                    }
                }
            });
    }

    // grad input: correlation of padded gout with flipped weights
    let pg = [kd - 1 - p[0], kh - 1 - p[1], kw - 1 - p[2]];
    let gp = pad3(g, co, d, h, wd, pg);
    let wflip = flip_weights(w, 3);
    let gx = conv3d_core(&gp, co, d, h, wd, pg, &wflip, ci, [kd, kh, kw], None);

    (
        Tensor::from_vec(x.shape(), gx),
        Tensor::from_vec(w.shape(), gw),
        Tensor::from_vec(&[co], gb),
    )
}

fn conv2d_core<T: Scalar>(
    xp: &[T],
    ci: usize,
    h: usize,
    w: usize,
    p: [usize; 2],
    weights: &[T],
    co: usize,
    k: [usize; 2],
    bias: Option<&[T]>,
    out_c: &mut [T],
    oc: usize,
) {
    let (kh, kw) = (k[0], k[1]);
    let (hp, wp) = (h + 2 * p[0], w + 2 * p[1]);
    let b = bias.map(|b| b[oc]).unwrap_or_else(T::zero);
    let mut acc = vec![T::zero(); w];
    for hh in 0..h {
        acc.fill(b);
        for icc in 0..ci {
            for khh in 0..kh {
                let wrow = &weights[((oc * ci + icc) * kh + khh) * kw..][..kw];
                let src = &xp[(icc * hp + hh + khh) * wp..][..w + 2 * p[1]];
                row_taps(&mut acc, src, wrow);
            }
        }
        out_c[hh * w..][..w].copy_from_slice(&acc);
    }
}

/// Batched 2D convolution forward. x: (N,Ci,H,W), w: (Co,Ci,Kh,Kw), b: (Co).
pub fn conv2d_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    assert_eq!(w.shape()[1], ci, "conv2d channel mismatch");
    let p = [kh / 2, kw / 2];
    // Padded inputs are built once per sample, then shared by its channels.
    let pads: Vec<Vec<T>> = (0..n)
        .map(|ni| pad2(&x.data()[ni * ci * h * wd..][..ci * h * wd], ci, h, wd, p))
        .collect();
    // conv2d_core writes every row of each slab.
    let mut out = uninit_vec::<T>(n * co * h * wd);
    out.par_chunks_mut(h * wd).enumerate().for_each(|(slab, out_c)| {
        let (ni, oc) = (slab / co, slab % co);
        conv2d_core(
            &pads[ni],
            ci,
            h,
            wd,
            p,
            w.data(),
            co,
            [kh, kw],
            Some(b.data()),
            out_c,
            oc,
        );
    });
    Tensor::from_vec(&[n, co, h, wd], out)
}

/// Batched 2D convolution backward. Returns (grad_x, grad_w, grad_b).
pub fn conv2d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let p = [kh / 2, kw / 2];
    let g = gout.data();
    let wdat = w.data();

    let mut gb = vec![T::zero(); co];
    for ni in 0..n {
        for oc in 0..co {
            let mut s = T::zero();
            for &v in &g[(ni * co + oc) * h * wd..][..h * wd] {
                s += v;
            }
            gb[oc] += s;
        }
    }

    // Weight grads: parallel over output channels; the batch loop stays
    // inside so accumulation order is fixed.
    let pads: Vec<Vec<T>> = (0..n)
        .map(|ni| pad2(&x.data()[ni * ci * h * wd..][..ci * h * wd], ci, h, wd, p))
        .collect();
    let (hp, wp) = (h + 2 * p[0], wd + 2 * p[1]);
    let mut gw = vec![T::zero(); w.numel()];
    gw.par_chunks_mut(ci * kh * kw).enumerate().for_each(|(oc, gw_oc)| {
        for ni in 0..n {
            let gc = &g[(ni * co + oc) * h * wd..][..h * wd];
            let xp = &pads[ni];
            for icc in 0..ci {
                for khh in 0..kh {
                    let acc = &mut gw_oc[(icc * kh + khh) * kw..][..kw];
                    for hh in 0..h {
                        let grow = &gc[hh * wd..][..wd];
                        let xrow = &xp[(icc * hp + hh + khh) * wp..][..wd + 2 * p[1]];
                        row_dots(acc, grow, xrow);
                    }
                }
            }
        }
    });

    let pg = [kh - 1 - p[0], kw - 1 - p[1]];
    let wflip = flip_weights(w, 2);
    let gpads: Vec<Vec<T>> = (0..n)
        .map(|ni| pad2(&g[ni * co * h * wd..][..co * h * wd], co, h, wd, pg))
        .collect();
    let mut gx = uninit_vec::<T>(x.numel());
    gx.par_chunks_mut(h * wd).enumerate().for_each(|(slab, gx_c)| {
        let (ni, icc) = (slab / ci, slab % ci);
        conv2d_core(
            &gpads[ni],
            co,
            h,
            wd,
            pg,
            &wflip,
            ci,
            [kh, kw],
            None,
            gx_c,
            icc,
        );
    });
    let _ = wdat;

    (
        Tensor::from_vec(x.shape(), gx),
        Tensor::from_vec(w.shape(), gw),
        Tensor::from_vec(&[co], gb),
    )
}

/// 2x2x2 max pooling on (C,D,H,W); returns pooled tensor and argmax flat
/// indices into the input (first index wins ties).
pub fn maxpool3d2_fwd<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(
        d % 2 == 0 && h % 2 == 0 && w % 2 == 0,
        "maxpool3d2 requires even spatial dims, got {:?}",
        x.shape()
    );
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let src = x.data();
    let mut out = vec![T::zero(); c * od * oh * ow];
    let mut arg = vec![0usize; c * od * oh * ow];
    for ci in 0..c {
        for dd in 0..od {
            for hh in 0..oh {
                for ww in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for (zd, zh, zw) in [
                        (0, 0, 0),
                        (0, 0, 1),
                        (0, 1, 0),
                        (0, 1, 1),
                        (1, 0, 0),
                        (1, 0, 1),
                        (1, 1, 0),
                        (1, 1, 1),
                    ] {
                        let idx = ((ci * d + 2 * dd + zd) * h + 2 * hh + zh) * w + 2 * ww + zw;
                        if src[idx] > best {
                            best = src[idx];
                            best_i = idx;
                        }
                    }
                    let o = ((ci * od + dd) * oh + hh) * ow + ww;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
    (Tensor::from_vec(&[c, od, oh, ow], out), arg)
}

/// 2x2 max pooling on (N,C,H,W).
pub fn maxpool2d2_fwd<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2d2 requires even dims");
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    for nc in 0..n * c {
        for hh in 0..oh {
            for ww in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for (zh, zw) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (nc * h + 2 * hh + zh) * w + 2 * ww + zw;
                    if src[idx] > best {
                        best = src[idx];
                        best_i = idx;
                    }
                }
                let o = (nc * oh + hh) * ow + ww;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (Tensor::from_vec(&[n, c, oh, ow], out), arg)
}

/// Nearest-neighbour 2x upsampling of (C,D,H,W).
pub fn upsample3d2_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![T::zero(); c * od * oh * ow];
    for ci in 0..c {
        for dd in 0..od {
            for hh in 0..oh {
                let srow = &src[((ci * d + dd / 2) * h + hh / 2) * w..][..w];
                let drow = &mut out[((ci * od + dd) * oh + hh) * ow..][..ow];
                for ww in 0..ow {
                    drow[ww] = srow[ww / 2];
                }
            }
        }
    }
    Tensor::from_vec(&[c, od, oh, ow], out)
}

pub fn upsample3d2_bwd<T: Scalar>(gout: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (c, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let g = gout.data();
    let mut gx = vec![T::zero(); c * d * h * w];
    for ci in 0..c {
        for dd in 0..od {
            for hh in 0..oh {
                let grow = &g[((ci * od + dd) * oh + hh) * ow..][..ow];
                let xrow = &mut gx[((ci * d + dd / 2) * h + hh / 2) * w..][..w];
                for ww in 0..ow {
                    xrow[ww / 2] += grow[ww];
                }
            }
        }
    }
    Tensor::from_vec(in_shape, gx)
}

/// Matrix multiply with optional transposes: (m,k) x (k,n) -> (m,n).
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k1, k2, "matmul inner dims {} vs {}", k1, k2);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        if tb {
            // rows of b are the contraction fibres
            for (j, ov) in orow.iter_mut().enumerate() {
                let brow = &bd[j * bc..][..k1];
                let mut s = T::zero();
                if ta {
                    for k in 0..k1 {
                        s += ad[k * ac + i] * brow[k];
                    }
                } else {
                    s = dot(&ad[i * ac..][..k1], brow);
                }
                *ov = s;
            }
        } else {
            for k in 0..k1 {
                let av = if ta { ad[k * ac + i] } else { ad[i * ac + k] };
                if av == T::zero() {
                    continue;
                }
                row_taps1(orow, &bd[k * bc..][..n], av);
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen::<f64>() - 0.5)
    }

    /// Brute-force conv3d used as the oracle.
    fn conv3d_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (ci, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
        let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
        let mut out = Tensor::zeros(&[co, d, h, wd]);
        for oc in 0..co {
            for dd in 0..d {
                for hh in 0..h {
                    for ww in 0..wd {
                        let mut acc = b.data()[oc];
                        for ic in 0..ci {
                            for zd in 0..kd {
                                for zh in 0..kh {
                                    for zw in 0..kw {
                                        let sd = dd as isize + zd as isize - pd as isize;
                                        let sh = hh as isize + zh as isize - ph as isize;
                                        let sw = ww as isize + zw as isize - pw as isize;
                                        if sd < 0
                                            || sh < 0
                                            || sw < 0
                                            || sd >= d as isize
                                            || sh >= h as isize
                                            || sw >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xi = x.at4(ic, sd as usize, sh as usize, sw as usize);
                                        let wi = w.data()
                                            [(((oc * ci + ic) * kd + zd) * kh + zh) * kw + zw];
                                        acc += xi * wi;
                                    }
                                }
                            }
                        }
                        out.set4(oc, dd, hh, ww, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_matches_naive() {
        let x = rand_t(&[3, 4, 5, 6], 1);
        let w = rand_t(&[2, 3, 3, 3, 3], 2);
        let b = rand_t(&[2], 3);
        let fast = conv3d_fwd(&x, &w, &b);
        let slow = conv3d_naive(&x, &w, &b);
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn conv3d_1x1_matches_naive() {
        let x = rand_t(&[3, 2, 3, 4], 4);
        let w = rand_t(&[5, 3, 1, 1, 1], 5);
        let b = rand_t(&[5], 6);
        let fast = conv3d_fwd(&x, &w, &b);
        let slow = conv3d_naive(&x, &w, &b);
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn conv3d_backward_matches_finite_differences() {
        let x = rand_t(&[2, 3, 3, 4], 7);
        let w = rand_t(&[2, 2, 3, 3, 3], 8);
        let b = rand_t(&[2], 9);
        // Loss = weighted sum of outputs so dL/dout is a fixed random tensor.
        let gout = rand_t(&[2, 3, 3, 4], 10);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            conv3d_fwd(x, w, b)
                .data()
                .iter()
                .zip(gout.data())
                .map(|(a, g)| a * g)
                .sum()
        };
        let (gx, gw, gb) = conv3d_bwd(&x, &w, &gout);
        let eps = 1e-6;
        for idx in [0usize, 5, 17, 40] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * eps);
            assert!((fd - gx.data()[idx]).abs() < 1e-6, "gx[{}]", idx);
        }
        for idx in [0usize, 13, 54, 100] {
            let mut wp = w.clone();
            wp.data_mut()[idx] += eps;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= eps;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * eps);
            assert!((fd - gw.data()[idx]).abs() < 1e-6, "gw[{}]", idx);
        }
        for idx in 0..2 {
            let mut bp = b.clone();
            bp.data_mut()[idx] += eps;
            let mut bm = b.clone();
            bm.data_mut()[idx] -= eps;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * eps);
            assert!((fd - gb.data()[idx]).abs() < 1e-6, "gb[{}]", idx);
        }
    }

    #[test]
    fn conv2d_matches_shifted_sum() {
        // Single 3x3 kernel with one hot tap reproduces a shifted image.
        let x = rand_t(&[1, 1, 4, 5], 11);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[2 * 3 + 1] = 1.0; // tap (kh=2, kw=1): shift up by 1
        let b = Tensor::zeros(&[1]);
        let y = conv2d_fwd(&x, &w, &b);
        for hh in 0..3 {
            for ww in 0..5 {
                assert_eq!(y.at4(0, 0, hh, ww), x.at4(0, 0, hh + 1, ww));
            }
        }
        for ww in 0..5 {
            assert_eq!(y.at4(0, 0, 3, ww), 0.0);
        }
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let x = rand_t(&[2, 2, 4, 4], 12);
        let w = rand_t(&[3, 2, 3, 3], 13);
        let b = rand_t(&[3], 14);
        let gout = rand_t(&[2, 3, 4, 4], 15);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            conv2d_fwd(x, w, b)
                .data()
                .iter()
                .zip(gout.data())
                .map(|(a, g)| a * g)
                .sum()
        };
        let (gx, gw, gb) = conv2d_bwd(&x, &w, &gout);
        let eps = 1e-6;
        for idx in [0usize, 9, 31, 63] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * eps);
            assert!((fd - gx.data()[idx]).abs() < 1e-6);
        }
        for idx in [0usize, 17, 53] {
            let mut wp = w.clone();
            wp.data_mut()[idx] += eps;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= eps;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * eps);
            assert!((fd - gw.data()[idx]).abs() < 1e-6);
        }
        let mut bp = b.clone();
        bp.data_mut()[1] += eps;
        let mut bm = b.clone();
        bm.data_mut()[1] -= eps;
        let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * eps);
        assert!((fd - gb.data()[1]).abs() < 1e-6);
    }

    #[test]
    fn maxpool_and_upsample_shapes() {
        let x = rand_t(&[2, 4, 4, 4], 16);
        let (p, arg) = maxpool3d2_fwd(&x);
        assert_eq!(p.shape(), &[2, 2, 2, 2]);
        for (o, &ai) in arg.iter().enumerate() {
            assert_eq!(p.data()[o], x.data()[ai]);
        }
        let u = upsample3d2_fwd(&p);
        assert_eq!(u.shape(), &[2, 4, 4, 4]);
        assert_eq!(u.at4(0, 1, 1, 1), p.at4(0, 0, 0, 0));
    }

    #[test]
    fn matmul_all_transpose_combos() {
        let a = rand_t(&[3, 4], 17);
        let b = rand_t(&[4, 5], 18);
        let c = matmul(&a, &b, false, false);
        for i in 0..3 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at2(i, k) * b.at2(k, j);
                }
                assert!((c.at2(i, j) - s).abs() < 1e-12);
            }
        }
        let at = rand_t(&[4, 3], 19);
        let c2 = matmul(&at, &b, true, false);
        for i in 0..3 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += at.at2(k, i) * b.at2(k, j);
                }
                assert!((c2.at2(i, j) - s).abs() < 1e-12);
            }
        }
        let bt = rand_t(&[5, 4], 20);
        let c3 = matmul(&a, &bt, false, true);
        for i in 0..3 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at2(i, k) * bt.at2(j, k);
                }
                assert!((c3.at2(i, j) - s).abs() < 1e-12);
            }
        }
        let att = rand_t(&[4, 3], 21);
        let btt = rand_t(&[5, 4], 22);
        let c4 = matmul(&att, &btt, true, true);
        for i in 0..3 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += att.at2(k, i) * btt.at2(j, k);
                }
                assert!((c4.at2(i, j) - s).abs() < 1e-12);
            }
        }
    }
}
