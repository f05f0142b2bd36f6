//! Data-parallel numeric kernels.
//!
//! Convolution, transposed convolution, pooling and matmul over dense
//! row-major f64 buffers. The kernels that dominate training cost take an
//! [`Exec`] mode: `Par` hands disjoint output rows to rayon, `Seq` walks the
//! same rows in order on the calling thread. Every output element is written
//! by exactly one task and the inner accumulation order does not depend on
//! the mode, so `Seq` and `Par` produce bit-identical results.
//!
//! Pooling runs sequentially: it is memory-bound and a vanishing fraction of
//! total work next to the convolutions.

use crate::tensor::Tensor;

/// Execution strategy for the heavy kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Seq,
    Par,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Par
        } else {
            Exec::Seq
        }
    }
}

/// Run `fill` over each `row_len` chunk of `out`, possibly in parallel.
pub fn drive_rows<F>(exec: Exec, out: &mut [f64], row_len: usize, fill: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    debug_assert!(row_len > 0 && out.len() % row_len == 0);
    match exec {
        Exec::Seq => {
            for (i, row) in out.chunks_mut(row_len).enumerate() {
                fill(i, row);
            }
        }
        Exec::Par => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                out.par_chunks_mut(row_len)
                    .enumerate()
                    .for_each(|(i, row)| fill(i, row));
            }
            #[cfg(not(feature = "parallel"))]
            for (i, row) in out.chunks_mut(row_len).enumerate() {
                fill(i, row);
            }
        }
    }
}

/// Stride and zero padding for one convolution, ordered (t, h, w).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { stride, pad }
    }

    pub fn unit() -> Self {
        Self { stride: [1; 3], pad: [0; 3] }
    }
}

pub fn conv_out_dim(n: usize, k: usize, s: usize, p: usize) -> usize {
    assert!(n + 2 * p >= k, "kernel {k} larger than padded input {n}+2*{p}");
    (n + 2 * p - k) / s + 1
}

pub fn convt_out_dim(n: usize, k: usize, s: usize, p: usize, op: usize) -> usize {
    assert!(op < s, "output padding {op} must be < stride {s}");
    let full = (n - 1) * s + k + op;
    assert!(full >= 2 * p, "padding {p} swallows transposed-conv output {full}");
    full - 2 * p
}

fn pool_out_dim(n: usize, k: usize, s: usize) -> usize {
    assert!(k >= 1 && k <= n, "pool kernel {k} vs input {n}");
    (n - k) / s + 1
}

fn d5(shape: &[usize]) -> [usize; 5] {
    debug_assert!(shape.iter().all(|&d| d > 0), "zero-sized dim in {shape:?}");
    shape
        .try_into()
        .unwrap_or_else(|_| panic!("expected rank-5 shape, got {shape:?}"))
}

/// Inclusive range of `j` with `0 <= j <= n_out-1` and `0 <= j*s + k - p < n`.
#[inline]
fn tap_range(n: usize, n_out: usize, s: usize, p: usize, k: usize) -> Option<(usize, usize)> {
    let lo = if p > k { (p - k + s - 1) / s } else { 0 };
    if k > n - 1 + p {
        return None;
    }
    let hi = ((n - 1 + p - k) / s).min(n_out - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

/// 3-d convolution. `x`: [N,Ci,T,H,W], `w`: [Co,Ci,Kt,Kh,Kw], `b`: [Co].
pub fn conv3d_fwd(exec: Exec, x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let [n, ci, t, h, wd] = d5(x.shape());
    let [co, wci, kt, kh, kw] = d5(w.shape());
    assert_eq!(ci, wci, "conv3d: input channels {ci} vs weight {wci}");
    if let Some(b) = b {
        assert_eq!(b.shape(), [co], "conv3d: bias shape");
    }
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.pad;
    let to = conv_out_dim(t, kt, st, pt);
    let ho = conv_out_dim(h, kh, sh, ph);
    let wo = conv_out_dim(wd, kw, sw, pw);
    let mut y = Tensor::zeros(&[n, co, to, ho, wo]);
    let xs = x.data();
    let ws = w.data();
    drive_rows(exec, y.data_mut(), wo, |row, out| {
        let oh = row % ho;
        let ot = row / ho % to;
        let oc = row / (ho * to) % co;
        let on = row / (ho * to * co);
        if let Some(b) = b {
            out.fill(b.data()[oc]);
        }
        for ic in 0..ci {
            for dt in 0..kt {
                let ti = (ot * st + dt).wrapping_sub(pt);
                if ti >= t {
                    continue;
                }
                for dh in 0..kh {
                    let hi = (oh * sh + dh).wrapping_sub(ph);
                    if hi >= h {
                        continue;
                    }
                    let xrow = &xs[(((on * ci + ic) * t + ti) * h + hi) * wd..][..wd];
                    let wrow = &ws[(((oc * ci + ic) * kt + dt) * kh + dh) * kw..][..kw];
                    for (dw, &wv) in wrow.iter().enumerate() {
                        let Some((lo, hi_ow)) = tap_range(wd, wo, sw, pw, dw) else {
                            continue;
                        };
                        let xi0 = lo * sw + dw - pw;
                        if sw == 1 {
                            let xseg = &xrow[xi0..xi0 + (hi_ow - lo + 1)];
                            for (o, &xv) in out[lo..=hi_ow].iter_mut().zip(xseg) {
                                *o += wv * xv;
                            }
                        } else {
                            let mut xi = xi0;
                            for o in out[lo..=hi_ow].iter_mut() {
                                *o += wv * xrow[xi];
                                xi += sw;
                            }
                        }
                    }
                }
            }
        }
    });
    y
}

/// Gradient of [`conv3d_fwd`] w.r.t. its input.
pub fn conv3d_bwd_x(exec: Exec, gy: &Tensor, w: &Tensor, x_shape: &[usize], spec: ConvSpec) -> Tensor {
    let [n, ci, t, h, wd] = d5(x_shape);
    let [co, wci, kt, kh, kw] = d5(w.shape());
    assert_eq!(ci, wci);
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.pad;
    let [gn, gc, to, ho, wo] = d5(gy.shape());
    assert_eq!([gn, gc], [n, co], "conv3d_bwd_x: grad batch/channels");
    debug_assert_eq!(to, conv_out_dim(t, kt, st, pt));
    debug_assert_eq!(ho, conv_out_dim(h, kh, sh, ph));
    debug_assert_eq!(wo, conv_out_dim(wd, kw, sw, pw));
    let mut gx = Tensor::zeros(x_shape);
    let gys = gy.data();
    let ws = w.data();
    drive_rows(exec, gx.data_mut(), wd, |row, out| {
        let hi = row % h;
        let ti = row / h % t;
        let ic = row / (h * t) % ci;
        let on = row / (h * t * ci);
        for oc in 0..co {
            for dt in 0..kt {
                let tn = (ti + pt).wrapping_sub(dt);
                let ot = tn / st;
                if tn % st != 0 || ot >= to {
                    continue;
                }
                for dh in 0..kh {
                    let hn = (hi + ph).wrapping_sub(dh);
                    let oh = hn / sh;
                    if hn % sh != 0 || oh >= ho {
                        continue;
                    }
                    let grow = &gys[(((on * co + oc) * to + ot) * ho + oh) * wo..][..wo];
                    let wrow = &ws[(((oc * ci + ic) * kt + dt) * kh + dh) * kw..][..kw];
                    for (dw, &wv) in wrow.iter().enumerate() {
                        let Some((lo, hi_ow)) = tap_range(wd, wo, sw, pw, dw) else {
                            continue;
                        };
                        let xi0 = lo * sw + dw - pw;
                        if sw == 1 {
                            let seg = &mut out[xi0..xi0 + (hi_ow - lo + 1)];
                            for (o, &g) in seg.iter_mut().zip(&grow[lo..=hi_ow]) {
                                *o += wv * g;
                            }
                        } else {
                            let mut xi = xi0;
                            for &g in &grow[lo..=hi_ow] {
                                out[xi] += wv * g;
                                xi += sw;
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Gradient of [`conv3d_fwd`] w.r.t. the weight.
pub fn conv3d_bwd_w(exec: Exec, gy: &Tensor, x: &Tensor, w_shape: &[usize], spec: ConvSpec) -> Tensor {
    let [n, ci, t, h, wd] = d5(x.shape());
    let [co, wci, kt, kh, kw] = d5(w_shape);
    assert_eq!(ci, wci);
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.pad;
    let [gn, gc, to, ho, wo] = d5(gy.shape());
    assert_eq!([gn, gc], [n, co], "conv3d_bwd_w: grad batch/channels");
    let mut gw = Tensor::zeros(w_shape);
    let gys = gy.data();
    let xs = x.data();
    drive_rows(exec, gw.data_mut(), ci * kt * kh * kw, |oc, out| {
        for on in 0..n {
            for ot in 0..to {
                for oh in 0..ho {
                    let grow = &gys[(((on * co + oc) * to + ot) * ho + oh) * wo..][..wo];
                    for ic in 0..ci {
                        for dt in 0..kt {
                            let ti = (ot * st + dt).wrapping_sub(pt);
                            if ti >= t {
                                continue;
                            }
                            for dh in 0..kh {
                                let hi = (oh * sh + dh).wrapping_sub(ph);
                                if hi >= h {
                                    continue;
                                }
                                let xrow = &xs[(((on * ci + ic) * t + ti) * h + hi) * wd..][..wd];
                                let wbase = ((ic * kt + dt) * kh + dh) * kw;
                                for dw in 0..kw {
                                    let Some((lo, hi_ow)) = tap_range(wd, wo, sw, pw, dw) else {
                                        continue;
                                    };
                                    let mut acc = 0.0;
                                    let mut xi = lo * sw + dw - pw;
                                    for &g in &grow[lo..=hi_ow] {
                                        acc += g * xrow[xi];
                                        xi += sw;
                                    }
                                    out[wbase + dw] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gw
}

/// Gradient of a convolution bias: per-channel sum of `gy`.
pub fn conv3d_bwd_b(exec: Exec, gy: &Tensor) -> Tensor {
    let [n, co, to, ho, wo] = d5(gy.shape());
    let plane = to * ho * wo;
    let mut gb = Tensor::zeros(&[co]);
    let gys = gy.data();
    drive_rows(exec, gb.data_mut(), 1, |oc, out| {
        let mut acc = 0.0;
        for on in 0..n {
            let base = (on * co + oc) * plane;
            for &g in &gys[base..base + plane] {
                acc += g;
            }
        }
        out[0] = acc;
    });
    gb
}

/// Transposed 3-d convolution. `x`: [N,Ci,T,H,W], `w`: [Ci,Co,Kt,Kh,Kw].
pub fn convt3d_fwd(
    exec: Exec,
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: ConvSpec,
    out_pad: [usize; 3],
) -> Tensor {
    let [n, ci, t, h, wd] = d5(x.shape());
    let [wci, co, kt, kh, kw] = d5(w.shape());
    assert_eq!(ci, wci, "convt3d: input channels {ci} vs weight {wci}");
    if let Some(b) = b {
        assert_eq!(b.shape(), [co], "convt3d: bias shape");
    }
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.pad;
    let to = convt_out_dim(t, kt, st, pt, out_pad[0]);
    let ho = convt_out_dim(h, kh, sh, ph, out_pad[1]);
    let wo = convt_out_dim(wd, kw, sw, pw, out_pad[2]);
    let mut y = Tensor::zeros(&[n, co, to, ho, wo]);
    let xs = x.data();
    let ws = w.data();
    drive_rows(exec, y.data_mut(), wo, |row, out| {
        let oh = row % ho;
        let ot = row / ho % to;
        let oc = row / (ho * to) % co;
        let on = row / (ho * to * co);
        if let Some(b) = b {
            out.fill(b.data()[oc]);
        }
        for ic in 0..ci {
            for dt in 0..kt {
                let tn = (ot + pt).wrapping_sub(dt);
                let ti = tn / st;
                if tn % st != 0 || ti >= t {
                    continue;
                }
                for dh in 0..kh {
                    let hn = (oh + ph).wrapping_sub(dh);
                    let hi = hn / sh;
                    if hn % sh != 0 || hi >= h {
                        continue;
                    }
                    let xrow = &xs[(((on * ci + ic) * t + ti) * h + hi) * wd..][..wd];
                    let wrow = &ws[(((ic * co + oc) * kt + dt) * kh + dh) * kw..][..kw];
                    for (dw, &wv) in wrow.iter().enumerate() {
                        // wi taps with out column wi*sw + dw - pw inside [0, wo)
                        let Some((lo, hi_wi)) = tap_range(wo, wd, sw, pw, dw) else {
                            continue;
                        };
                        let o0 = lo * sw + dw - pw;
                        if sw == 1 {
                            let seg = &mut out[o0..o0 + (hi_wi - lo + 1)];
                            for (o, &xv) in seg.iter_mut().zip(&xrow[lo..=hi_wi]) {
                                *o += wv * xv;
                            }
                        } else {
                            let mut oi = o0;
                            for &xv in &xrow[lo..=hi_wi] {
                                out[oi] += wv * xv;
                                oi += sw;
                            }
                        }
                    }
                }
            }
        }
    });
    y
}

/// Gradient of [`convt3d_fwd`] w.r.t. its input: a plain convolution of `gy`
/// with the same weight (layout [Ci,Co,...] already matches [out,in,...]).
pub fn convt3d_bwd_x(exec: Exec, gy: &Tensor, w: &Tensor, x_shape: &[usize], spec: ConvSpec) -> Tensor {
    let gx = conv3d_fwd(exec, gy, w, None, spec);
    assert_eq!(gx.shape(), x_shape, "convt3d_bwd_x shape");
    gx
}

/// Gradient of [`convt3d_fwd`] w.r.t. the weight.
pub fn convt3d_bwd_w(exec: Exec, gy: &Tensor, x: &Tensor, w_shape: &[usize], spec: ConvSpec) -> Tensor {
    let [n, ci, t, h, wd] = d5(x.shape());
    let [wci, co, kt, kh, kw] = d5(w_shape);
    assert_eq!(ci, wci);
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.pad;
    let [gn, gc, to, ho, wo] = d5(gy.shape());
    assert_eq!([gn, gc], [n, co], "convt3d_bwd_w: grad batch/channels");
    let mut gw = Tensor::zeros(w_shape);
    let gys = gy.data();
    let xs = x.data();
    drive_rows(exec, gw.data_mut(), co * kt * kh * kw, |ic, out| {
        for on in 0..n {
            for ti in 0..t {
                for hi in 0..h {
                    let xrow = &xs[(((on * ci + ic) * t + ti) * h + hi) * wd..][..wd];
                    for oc in 0..co {
                        for dt in 0..kt {
                            let ot = (ti * st + dt).wrapping_sub(pt);
                            if ot >= to {
                                continue;
                            }
                            for dh in 0..kh {
                                let oh = (hi * sh + dh).wrapping_sub(ph);
                                if oh >= ho {
                                    continue;
                                }
                                let grow = &gys[(((on * co + oc) * to + ot) * ho + oh) * wo..][..wo];
                                let wbase = ((oc * kt + dt) * kh + dh) * kw;
                                for dw in 0..kw {
                                    let Some((lo, hi_wi)) = tap_range(wo, wd, sw, pw, dw) else {
                                        continue;
                                    };
                                    let mut acc = 0.0;
                                    let mut oi = lo * sw + dw - pw;
                                    for &xv in &xrow[lo..=hi_wi] {
                                        acc += xv * grow[oi];
                                        oi += sw;
                                    }
                                    out[wbase + dw] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gw
}

/// Average pooling, no padding. Sequential by design.
pub fn avgpool3d_fwd(x: &Tensor, k: [usize; 3], s: [usize; 3]) -> Tensor {
    let [n, c, t, h, wd] = d5(x.shape());
    let to = pool_out_dim(t, k[0], s[0]);
    let ho = pool_out_dim(h, k[1], s[1]);
    let wo = pool_out_dim(wd, k[2], s[2]);
    let inv = 1.0 / (k[0] * k[1] * k[2]) as f64;
    let mut y = Tensor::zeros(&[n, c, to, ho, wo]);
    let xs = x.data();
    let yd = y.data_mut();
    let mut yi = 0;
    for on in 0..n {
        for oc in 0..c {
            let base_nc = (on * c + oc) * t;
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for dt in 0..k[0] {
                            let ti = ot * s[0] + dt;
                            for dh in 0..k[1] {
                                let hi = oh * s[1] + dh;
                                let row = ((base_nc + ti) * h + hi) * wd + ow * s[2];
                                for dw in 0..k[2] {
                                    acc += xs[row + dw];
                                }
                            }
                        }
                        yd[yi] = acc * inv;
                        yi += 1;
                    }
                }
            }
        }
    }
    y
}

pub fn avgpool3d_bwd(gy: &Tensor, x_shape: &[usize], k: [usize; 3], s: [usize; 3]) -> Tensor {
    let [n, c, t, h, wd] = d5(x_shape);
    let [gn, gc, to, ho, wo] = d5(gy.shape());
    assert_eq!([gn, gc], [n, c]);
    debug_assert_eq!(
        [to, ho, wo],
        [
            pool_out_dim(t, k[0], s[0]),
            pool_out_dim(h, k[1], s[1]),
            pool_out_dim(wd, k[2], s[2])
        ]
    );
    let inv = 1.0 / (k[0] * k[1] * k[2]) as f64;
    let mut gx = Tensor::zeros(x_shape);
    let gd = gx.data_mut();
    let gys = gy.data();
    let mut gi = 0;
    for on in 0..n {
        for oc in 0..c {
            let base_nc = (on * c + oc) * t;
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let g = gys[gi] * inv;
                        gi += 1;
                        for dt in 0..k[0] {
                            let ti = ot * s[0] + dt;
                            for dh in 0..k[1] {
                                let hi = oh * s[1] + dh;
                                let row = ((base_nc + ti) * h + hi) * wd + ow * s[2];
                                for dw in 0..k[2] {
                                    gd[row + dw] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Max pooling, no padding. Returns the output and per-element argmax
/// (linear index into `x`). Ties go to the first tap in scan order.
pub fn maxpool3d_fwd(x: &Tensor, k: [usize; 3], s: [usize; 3]) -> (Tensor, Vec<usize>) {
    let [n, c, t, h, wd] = d5(x.shape());
    let to = pool_out_dim(t, k[0], s[0]);
    let ho = pool_out_dim(h, k[1], s[1]);
    let wo = pool_out_dim(wd, k[2], s[2]);
    let mut y = Tensor::zeros(&[n, c, to, ho, wo]);
    let mut arg = vec![0usize; y.numel()];
    let xs = x.data();
    let yd = y.data_mut();
    let mut yi = 0;
    for on in 0..n {
        for oc in 0..c {
            let base_nc = (on * c + oc) * t;
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dt in 0..k[0] {
                            let ti = ot * s[0] + dt;
                            for dh in 0..k[1] {
                                let hi = oh * s[1] + dh;
                                let row = ((base_nc + ti) * h + hi) * wd + ow * s[2];
                                for dw in 0..k[2] {
                                    let v = xs[row + dw];
                                    if v > best {
                                        best = v;
                                        best_i = row + dw;
                                    }
                                }
                            }
                        }
                        yd[yi] = best;
                        arg[yi] = best_i;
                        yi += 1;
                    }
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool3d_bwd(gy: &Tensor, argmax: &[usize], x_shape: &[usize]) -> Tensor {
    assert_eq!(gy.numel(), argmax.len());
    let mut gx = Tensor::zeros(x_shape);
    let gd = gx.data_mut();
    for (&g, &src) in gy.data().iter().zip(argmax) {
        gd[src] += g;
    }
    gx
}

fn mat_dims(shape: &[usize], t: bool) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "matmul expects rank-2, got {shape:?}");
    if t {
        (shape[1], shape[0])
    } else {
        (shape[0], shape[1])
    }
}

/// `a` logical [m,k] (physical [k,m] if `ta`), `b` logical [k,n]
/// (physical [n,k] if `tb`); returns [m,n].
pub fn matmul(exec: Exec, a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (m, ka) = mat_dims(a.shape(), ta);
    let (kb, n) = mat_dims(b.shape(), tb);
    assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
    let k = ka;
    let mut y = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    drive_rows(exec, y.data_mut(), n, |i, out| match (ta, tb) {
        (false, false) => {
            let arow = &ad[i * k..(i + 1) * k];
            for (kk, &av) in arow.iter().enumerate() {
                for (o, &bv) in out.iter_mut().zip(&bd[kk * n..(kk + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        (false, true) => {
            let arow = &ad[i * k..(i + 1) * k];
            for (j, o) in out.iter_mut().enumerate() {
                let brow = &bd[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                *o = acc;
            }
        }
        (true, false) => {
            for kk in 0..k {
                let av = ad[kk * m + i];
                for (o, &bv) in out.iter_mut().zip(&bd[kk * n..(kk + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        (true, true) => {
            for (j, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += ad[kk * m + i] * bd[j * k + kk];
                }
                *o = acc;
            }
        }
    });
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
            assert!((x - y).abs() <= tol, "elem {i}: {x} vs {y}");
        }
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum()
    }

    fn conv3d_naive(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Tensor {
        let [n, ci, t, h, wd] = d5(x.shape());
        let [co, _, kt, kh, kw] = d5(w.shape());
        let [st, sh, sw] = spec.stride;
        let [pt, ph, pw] = spec.pad;
        let to = conv_out_dim(t, kt, st, pt);
        let ho = conv_out_dim(h, kh, sh, ph);
        let wo = conv_out_dim(wd, kw, sw, pw);
        let idx = |nn: usize, c: usize, a: usize, bb: usize, cc: usize, d1: usize, d2: usize, d3: usize| {
            (((nn * c + a) * d1 + bb) * d2 + cc) * d3
        };
        let _ = idx;
        Tensor::from_fn(&[n, co, to, ho, wo], |i| {
            let ow = i % wo;
            let oh = i / wo % ho;
            let ot = i / (wo * ho) % to;
            let oc = i / (wo * ho * to) % co;
            let on = i / (wo * ho * to * co);
            let mut acc = b.map_or(0.0, |b| b.data()[oc]);
            for ic in 0..ci {
                for dt in 0..kt {
                    let ti = (ot * st + dt) as isize - pt as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    for dh in 0..kh {
                        let hi = (oh * sh + dh) as isize - ph as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for dw in 0..kw {
                            let wi = (ow * sw + dw) as isize - pw as isize;
                            if wi < 0 || wi >= wd as isize {
                                continue;
                            }
                            let xi = (((on * ci + ic) * t + ti as usize) * h + hi as usize) * wd
                                + wi as usize;
                            let wi_ = (((oc * ci + ic) * kt + dt) * kh + dh) * kw + dw;
                            acc += x.data()[xi] * w.data()[wi_];
                        }
                    }
                }
            }
            acc
        })
    }

    fn convt3d_naive(
        x: &Tensor,
        w: &Tensor,
        b: Option<&Tensor>,
        spec: ConvSpec,
        out_pad: [usize; 3],
    ) -> Tensor {
        let [n, ci, t, h, wd] = d5(x.shape());
        let [_, co, kt, kh, kw] = d5(w.shape());
        let [st, sh, sw] = spec.stride;
        let [pt, ph, pw] = spec.pad;
        let to = convt_out_dim(t, kt, st, pt, out_pad[0]);
        let ho = convt_out_dim(h, kh, sh, ph, out_pad[1]);
        let wo = convt_out_dim(wd, kw, sw, pw, out_pad[2]);
        let mut y = Tensor::zeros(&[n, co, to, ho, wo]);
        if let Some(b) = b {
            for on in 0..n {
                for oc in 0..co {
                    let base = (on * co + oc) * to * ho * wo;
                    y.data_mut()[base..base + to * ho * wo].fill(b.data()[oc]);
                }
            }
        }
        for on in 0..n {
            for ic in 0..ci {
                for ti in 0..t {
                    for hi in 0..h {
                        for wi in 0..wd {
                            let xv =
                                x.data()[(((on * ci + ic) * t + ti) * h + hi) * wd + wi];
                            for oc in 0..co {
                                for dt in 0..kt {
                                    let ot = (ti * st + dt) as isize - pt as isize;
                                    if ot < 0 || ot >= to as isize {
                                        continue;
                                    }
                                    for dh in 0..kh {
                                        let oh = (hi * sh + dh) as isize - ph as isize;
                                        if oh < 0 || oh >= ho as isize {
                                            continue;
                                        }
                                        for dw in 0..kw {
                                            let ow = (wi * sw + dw) as isize - pw as isize;
                                            if ow < 0 || ow >= wo as isize {
                                                continue;
                                            }
                                            let yi = (((on * co + oc) * to + ot as usize) * ho
                                                + oh as usize)
                                                * wo
                                                + ow as usize;
                                            let wv = w.data()
                                                [(((ic * co + oc) * kt + dt) * kh + dh) * kw + dw];
                                            y.data_mut()[yi] += xv * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    struct Case {
        x: [usize; 5],
        w: [usize; 5],
        spec: ConvSpec,
    }

    fn cases() -> Vec<Case> {
        vec![
            Case {
                x: [2, 3, 5, 6, 7],
                w: [4, 3, 3, 3, 3],
                spec: ConvSpec::new([1, 1, 1], [1, 1, 1]),
            },
            Case {
                x: [1, 2, 6, 8, 9],
                w: [3, 2, 2, 3, 4],
                spec: ConvSpec::new([1, 2, 2], [0, 1, 2]),
            },
            Case {
                x: [2, 1, 3, 9, 9],
                w: [2, 1, 1, 7, 7],
                spec: ConvSpec::new([1, 1, 1], [0, 3, 3]),
            },
            Case {
                x: [1, 3, 6, 4, 8],
                w: [2, 3, 3, 1, 3],
                spec: ConvSpec::new([2, 2, 2], [1, 0, 1]),
            },
        ]
    }

    #[test]
    fn conv3d_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in cases() {
            let x = rt(&case.x, &mut rng);
            let w = rt(&case.w, &mut rng);
            let b = rt(&[case.w[0]], &mut rng);
            let got = conv3d_fwd(Exec::Seq, &x, &w, Some(&b), case.spec);
            let want = conv3d_naive(&x, &w, Some(&b), case.spec);
            close(&got, &want, 1e-12);
        }
    }

    #[test]
    fn conv3d_adjoint_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in cases() {
            let x = rt(&case.x, &mut rng);
            let w = rt(&case.w, &mut rng);
            let y = conv3d_fwd(Exec::Seq, &x, &w, None, case.spec);
            let gy = rt(y.shape(), &mut rng);
            // <conv(x; w), gy> == <x, bwd_x(gy; w)> == <w, bwd_w(gy; x)>
            let lhs = dot(&y, &gy);
            let gx = conv3d_bwd_x(Exec::Seq, &gy, &w, x.shape(), case.spec);
            let gw = conv3d_bwd_w(Exec::Seq, &gy, &x, w.shape(), case.spec);
            assert!((lhs - dot(&x, &gx)).abs() < 1e-9, "bwd_x adjoint");
            assert!((lhs - dot(&w, &gw)).abs() < 1e-9, "bwd_w adjoint");
        }
    }

    #[test]
    fn convt3d_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let specs = [
            ([1, 1, 1], [0, 0, 0], [0, 0, 0]),
            ([1, 2, 2], [1, 1, 1], [0, 1, 1]),
            ([2, 2, 2], [0, 1, 1], [1, 0, 1]),
        ];
        for (stride, pad, out_pad) in specs {
            let x = rt(&[2, 3, 3, 4, 5], &mut rng);
            let w = rt(&[3, 2, 3, 3, 3], &mut rng);
            let b = rt(&[2], &mut rng);
            let spec = ConvSpec::new(stride, pad);
            let got = convt3d_fwd(Exec::Seq, &x, &w, Some(&b), spec, out_pad);
            let want = convt3d_naive(&x, &w, Some(&b), spec, out_pad);
            close(&got, &want, 1e-12);
        }
    }

    #[test]
    fn convt3d_adjoint_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec::new([1, 2, 2], [1, 1, 1]);
        let out_pad = [0, 1, 1];
        let x = rt(&[2, 3, 4, 5, 5], &mut rng);
        let w = rt(&[3, 2, 3, 3, 3], &mut rng);
        let y = convt3d_fwd(Exec::Seq, &x, &w, None, spec, out_pad);
        let gy = rt(y.shape(), &mut rng);
        let lhs = dot(&y, &gy);
        let gx = convt3d_bwd_x(Exec::Seq, &gy, &w, x.shape(), spec);
        let gw = convt3d_bwd_w(Exec::Seq, &gy, &x, w.shape(), spec);
        assert!((lhs - dot(&x, &gx)).abs() < 1e-9);
        assert!((lhs - dot(&w, &gw)).abs() < 1e-9);
    }

    #[test]
    fn par_matches_seq_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in cases() {
            let x = rt(&case.x, &mut rng);
            let w = rt(&case.w, &mut rng);
            let b = rt(&[case.w[0]], &mut rng);
            let y_s = conv3d_fwd(Exec::Seq, &x, &w, Some(&b), case.spec);
            let y_p = conv3d_fwd(Exec::Par, &x, &w, Some(&b), case.spec);
            assert_eq!(y_s.data(), y_p.data());
            let gy = rt(y_s.shape(), &mut rng);
            assert_eq!(
                conv3d_bwd_x(Exec::Seq, &gy, &w, x.shape(), case.spec).data(),
                conv3d_bwd_x(Exec::Par, &gy, &w, x.shape(), case.spec).data()
            );
            assert_eq!(
                conv3d_bwd_w(Exec::Seq, &gy, &x, w.shape(), case.spec).data(),
                conv3d_bwd_w(Exec::Par, &gy, &x, w.shape(), case.spec).data()
            );
            assert_eq!(
                conv3d_bwd_b(Exec::Seq, &gy).data(),
                conv3d_bwd_b(Exec::Par, &gy).data()
            );
        }
        let a = rt(&[17, 23], &mut rng);
        let b = rt(&[23, 11], &mut rng);
        assert_eq!(
            matmul(Exec::Seq, &a, &b, false, false).data(),
            matmul(Exec::Par, &a, &b, false, false).data()
        );
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 5;
        let k = 7;
        let n = 4;
        let a = rt(&[m, k], &mut rng);
        let at = Tensor::from_fn(&[k, m], |i| a.data()[(i % m) * k + i / m]);
        let b = rt(&[k, n], &mut rng);
        let bt = Tensor::from_fn(&[n, k], |i| b.data()[(i % k) * n + i / k]);
        let want = Tensor::from_fn(&[m, n], |i| {
            let (r, c) = (i / n, i % n);
            (0..k).map(|kk| a.data()[r * k + kk] * b.data()[kk * n + c]).sum()
        });
        close(&matmul(Exec::Seq, &a, &b, false, false), &want, 1e-12);
        close(&matmul(Exec::Seq, &at, &b, true, false), &want, 1e-12);
        close(&matmul(Exec::Seq, &a, &bt, false, true), &want, 1e-12);
        close(&matmul(Exec::Seq, &at, &bt, true, true), &want, 1e-12);
    }

    #[test]
    fn avgpool_and_maxpool_small() {
        // 1x1x2x2x4 with known windows
        let x = Tensor::new(
            &[1, 1, 2, 2, 4],
            vec![
                0., 1., 2., 3., 4., 5., 6., 7., //
                8., 9., 10., 11., 12., 13., 14., 15.,
            ],
        );
        let y = avgpool3d_fwd(&x, [2, 2, 2], [2, 2, 2]);
        assert_eq!(y.shape(), &[1, 1, 1, 1, 2]);
        assert_eq!(y.data(), &[(0. + 1. + 4. + 5. + 8. + 9. + 12. + 13.) / 8.0, 68.0 / 8.0]);
        let (m, arg) = maxpool3d_fwd(&x, [2, 2, 2], [2, 2, 2]);
        assert_eq!(m.data(), &[13.0, 15.0]);
        assert_eq!(arg, vec![13, 15]);
        let gy = Tensor::new(&[1, 1, 1, 1, 2], vec![1.0, 2.0]);
        let gx = maxpool3d_bwd(&gy, &arg, x.shape());
        assert_eq!(gx.data()[13], 1.0);
        assert_eq!(gx.data()[15], 2.0);
        assert_eq!(gx.sum(), 3.0);
        // avgpool adjoint
        let g = avgpool3d_bwd(&gy, x.shape(), [2, 2, 2], [2, 2, 2]);
        assert!((dot(&y, &gy) - dot(&x, &g)).abs() < 1e-12);
    }

    #[test]
    #[ignore = "perf probe, run with --ignored --nocapture"]
    fn conv_throughput_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // (label, x shape, w shape, stride, pad)
        let cases: Vec<(&str, [usize; 5], [usize; 5], [usize; 3], [usize; 3])> = vec![
            ("res 32ch 16^3 1x3x3", [1, 32, 16, 16, 16], [32, 32, 1, 3, 3], [1, 1, 1], [0, 1, 1]),
            ("res 16ch 16^3 1x3x3", [1, 16, 16, 16, 16], [16, 16, 1, 3, 3], [1, 1, 1], [0, 1, 1]),
            ("up 12ch 16x32x32", [1, 12, 16, 32, 32], [12, 12, 1, 3, 3], [1, 1, 1], [0, 1, 1]),
            ("final 4->3 7x7x7 64^2", [1, 4, 16, 64, 64], [3, 4, 7, 7, 7], [1, 1, 1], [3, 3, 3]),
            ("final 4->3 5x5x5 64^2", [1, 4, 16, 64, 64], [3, 4, 5, 5, 5], [1, 1, 1], [2, 2, 2]),
        ];
        for (label, xs, ws, stride, pad) in cases {
            let x = rt(&xs, &mut rng);
            let w = rt(&ws, &mut rng);
            let spec = ConvSpec::new(stride, pad);
            let start = std::time::Instant::now();
            let y = conv3d_fwd(Exec::Seq, &x, &w, None, spec);
            let fwd = start.elapsed();
            let gy = rt(y.shape(), &mut rng);
            let start = std::time::Instant::now();
            let _ = conv3d_bwd_x(Exec::Seq, &gy, &w, x.shape(), spec);
            let bx = start.elapsed();
            let start = std::time::Instant::now();
            let _ = conv3d_bwd_w(Exec::Seq, &gy, &x, w.shape(), spec);
            let bw = start.elapsed();
            let macs = (y.numel() * ws[1] * ws[2] * ws[3] * ws[4]) as f64;
            println!(
                "{label}: fwd {fwd:?} ({:.0} MMAC/s), bwd_x {bx:?}, bwd_w {bw:?}",
                macs / fwd.as_secs_f64() / 1e6
            );
        }
    }

    #[test]
    fn overlapping_avgpool_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rt(&[2, 2, 5, 6, 7], &mut rng);
        let (k, s) = ([2, 3, 3], [1, 2, 2]);
        let y = avgpool3d_fwd(&x, k, s);
        let gy = rt(y.shape(), &mut rng);
        let gx = avgpool3d_bwd(&gy, x.shape(), k, s);
        assert!((dot(&y, &gy) - dot(&x, &gx)).abs() < 1e-10);
    }
}
