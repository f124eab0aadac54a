//! Direct 2-D convolution kernels over `[C][T][F]` row-major buffers.
//!
//! All six entry points (forward / input-grad / kernel-grad, in plain and
//! transposed orientation) reduce to three row primitives: a gather, a
//! scatter and a correlation along the frequency axis. The gather and
//! correlation fuse the taps into a single pass over the row with a
//! branch-free interior, which is what makes the tiny desk-scale shapes
//! fast; sizes never warrant an im2col or FFT path.

/// Geometry of one convolution. For forward mode the kernel layout is
/// `[c_out][c_in][kt][kf]`; for transposed mode it is `[c_in][c_out][kt][kf]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub f_in: usize,
    pub t_out: usize,
    pub f_out: usize,
    pub kt: usize,
    pub kf: usize,
    pub st: usize,
    pub sf: usize,
    pub pt: usize,
    pub pf: usize,
}

/// Forward output extent: floor((n + 2p - k) / s) + 1, or None when empty.
pub(crate) fn conv_out_extent(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = n + 2 * p;
    if padded < k {
        return None;
    }
    Some((padded - k) / s + 1)
}

/// Transposed output extent: (n - 1) * s + k - 2p, or None when empty.
pub(crate) fn tconv_out_extent(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let grown = (n - 1) * s + k;
    if grown <= 2 * p {
        return None;
    }
    Some(grown - 2 * p)
}

/// Interior range `[lo, hi)` of `j < j_max` where every tap index
/// `j*s + k - p` (k in 0..kn) lands inside `[0, extent)`.
#[inline]
fn interior(kn: usize, p: usize, s: usize, extent: usize, j_max: usize) -> (usize, usize) {
    let lo = p.div_ceil(s).min(j_max);
    let hi = if extent + p >= kn {
        (((extent + p - kn) / s) + 1).min(j_max)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// dst[j] += sum_k taps[k] * src[j*s + k - p] over all valid (j, k).
#[inline]
fn row_gather(dst: &mut [f64], src: &[f64], taps: &[f64], s: usize, p: usize) {
    let kn = taps.len();
    let (lo, hi) = interior(kn, p, s, src.len(), dst.len());
    let edge = |dst: &mut [f64], j: usize| {
        let mut acc = 0.0;
        for (k, w) in taps.iter().enumerate() {
            let idx = j * s + k;
            if idx >= p && idx - p < src.len() {
                acc += w * src[idx - p];
            }
        }
        dst[j] += acc;
    };
    for j in 0..lo {
        edge(dst, j);
    }
    if hi > lo {
        if kn == 3 && s == 1 {
            let (w0, w1, w2) = (taps[0], taps[1], taps[2]);
            let base = lo - p; // lo >= p by construction
            let src = &src[base..base + (hi - lo) + 2];
            for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                *d += w0 * src[j] + w1 * src[j + 1] + w2 * src[j + 2];
            }
        } else {
            for j in lo..hi {
                let base = j * s - p;
                let mut acc = 0.0;
                for (k, w) in taps.iter().enumerate() {
                    acc += w * src[base + k];
                }
                dst[j] += acc;
            }
        }
    }
    for j in hi..dst.len() {
        edge(dst, j);
    }
}

/// dst[j*s + k - p] += taps[k] * src[j] over all valid (j, k).
#[inline]
fn row_scatter(dst: &mut [f64], src: &[f64], taps: &[f64], s: usize, p: usize) {
    let kn = taps.len();
    if s == 1 && p < kn {
        // equivalent gather with flipped taps: dst[d] += sum_k' flip[k'] * src[d - (kn-1-p) + k']
        let flipped: [f64; 8];
        let taps_f: &[f64] = if kn <= 8 {
            let mut buf = [0.0; 8];
            for (i, w) in taps.iter().rev().enumerate() {
                buf[i] = *w;
            }
            flipped = buf;
            &flipped[..kn]
        } else {
            return row_scatter_slow(dst, src, taps, s, p);
        };
        row_gather(dst, src, taps_f, 1, kn - 1 - p);
        return;
    }
    row_scatter_slow(dst, src, taps, s, p);
}

fn row_scatter_slow(dst: &mut [f64], src: &[f64], taps: &[f64], s: usize, p: usize) {
    for (k, w) in taps.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        for (j, v) in src.iter().enumerate() {
            let idx = j * s + k;
            if idx >= p && idx - p < dst.len() {
                dst[idx - p] += w * v;
            }
        }
    }
}

/// acc[k] += sum_j a[j] * src[j*s + k - p] over all valid (j, k).
#[inline]
fn row_correlate(acc: &mut [f64], a: &[f64], src: &[f64], s: usize, p: usize) {
    let kn = acc.len();
    let (lo, hi) = interior(kn, p, s, src.len(), a.len());
    let edge = |acc: &mut [f64], j: usize| {
        for (k, w) in acc.iter_mut().enumerate() {
            let idx = j * s + k;
            if idx >= p && idx - p < src.len() {
                *w += a[j] * src[idx - p];
            }
        }
    };
    for j in 0..lo {
        edge(acc, j);
    }
    if hi > lo {
        if kn == 3 && s == 1 {
            let base = lo - p;
            let src = &src[base..base + (hi - lo) + 2];
            let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
            for (j, &av) in a[lo..hi].iter().enumerate() {
                a0 += av * src[j];
                a1 += av * src[j + 1];
                a2 += av * src[j + 2];
            }
            acc[0] += a0;
            acc[1] += a1;
            acc[2] += a2;
        } else {
            for j in lo..hi {
                let base = j * s - p;
                for (k, w) in acc.iter_mut().enumerate() {
                    *w += a[j] * src[base + k];
                }
            }
        }
    }
    for j in hi..a.len() {
        edge(acc, j);
    }
}

#[inline]
fn src_row_index(o: usize, stride: usize, k: usize, pad: usize) -> Option<usize> {
    let idx = o * stride + k;
    if idx >= pad {
        Some(idx - pad)
    } else {
        None
    }
}

pub(crate) fn conv2d_forward(
    g: ConvGeom,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let plane_out = g.t_out * g.f_out;
    for co in 0..g.c_out {
        let b = bias.map_or(0.0, |b| b[co]);
        out[co * plane_out..(co + 1) * plane_out].fill(b);
    }
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for kt in 0..g.kt {
                let taps = &kernel[((co * g.c_in + ci) * g.kt + kt) * g.kf..][..g.kf];
                for ot in 0..g.t_out {
                    let Some(it) = src_row_index(ot, g.st, kt, g.pt) else {
                        continue;
                    };
                    if it >= g.t_in {
                        continue;
                    }
                    row_gather(
                        &mut out[(co * g.t_out + ot) * g.f_out..][..g.f_out],
                        &input[(ci * g.t_in + it) * g.f_in..][..g.f_in],
                        taps,
                        g.sf,
                        g.pf,
                    );
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_input(g: ConvGeom, kernel: &[f64], gout: &[f64], gin: &mut [f64]) {
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for kt in 0..g.kt {
                let taps = &kernel[((co * g.c_in + ci) * g.kt + kt) * g.kf..][..g.kf];
                for ot in 0..g.t_out {
                    let Some(it) = src_row_index(ot, g.st, kt, g.pt) else {
                        continue;
                    };
                    if it >= g.t_in {
                        continue;
                    }
                    row_scatter(
                        &mut gin[(ci * g.t_in + it) * g.f_in..][..g.f_in],
                        &gout[(co * g.t_out + ot) * g.f_out..][..g.f_out],
                        taps,
                        g.sf,
                        g.pf,
                    );
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_kernel(g: ConvGeom, input: &[f64], gout: &[f64], gk: &mut [f64]) {
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for kt in 0..g.kt {
                let acc = &mut gk[((co * g.c_in + ci) * g.kt + kt) * g.kf..][..g.kf];
                for ot in 0..g.t_out {
                    let Some(it) = src_row_index(ot, g.st, kt, g.pt) else {
                        continue;
                    };
                    if it >= g.t_in {
                        continue;
                    }
                    row_correlate(
                        acc,
                        &gout[(co * g.t_out + ot) * g.f_out..][..g.f_out],
                        &input[(ci * g.t_in + it) * g.f_in..][..g.f_in],
                        g.sf,
                        g.pf,
                    );
                }
            }
        }
    }
}

/// Transposed convolution: out[it*st + kt - pt][if*sf + kf - pf] +=
/// k[ci][co][kt][kf] * in[it][if]. `t_in/f_in` are the small input extents,
/// `t_out/f_out` the upsampled ones.
pub(crate) fn tconv2d_forward(
    g: ConvGeom,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let plane_out = g.t_out * g.f_out;
    for co in 0..g.c_out {
        let b = bias.map_or(0.0, |b| b[co]);
        out[co * plane_out..(co + 1) * plane_out].fill(b);
    }
    for ci in 0..g.c_in {
        for co in 0..g.c_out {
            for kt in 0..g.kt {
                let taps = &kernel[((ci * g.c_out + co) * g.kt + kt) * g.kf..][..g.kf];
                for it in 0..g.t_in {
                    let Some(ot) = src_row_index(it, g.st, kt, g.pt) else {
                        continue;
                    };
                    if ot >= g.t_out {
                        continue;
                    }
                    row_scatter(
                        &mut out[(co * g.t_out + ot) * g.f_out..][..g.f_out],
                        &input[(ci * g.t_in + it) * g.f_in..][..g.f_in],
                        taps,
                        g.sf,
                        g.pf,
                    );
                }
            }
        }
    }
}

pub(crate) fn tconv2d_grad_input(g: ConvGeom, kernel: &[f64], gout: &[f64], gin: &mut [f64]) {
    for ci in 0..g.c_in {
        for co in 0..g.c_out {
            for kt in 0..g.kt {
                let taps = &kernel[((ci * g.c_out + co) * g.kt + kt) * g.kf..][..g.kf];
                for it in 0..g.t_in {
                    let Some(ot) = src_row_index(it, g.st, kt, g.pt) else {
                        continue;
                    };
                    if ot >= g.t_out {
                        continue;
                    }
                    row_gather(
                        &mut gin[(ci * g.t_in + it) * g.f_in..][..g.f_in],
                        &gout[(co * g.t_out + ot) * g.f_out..][..g.f_out],
                        taps,
                        g.sf,
                        g.pf,
                    );
                }
            }
        }
    }
}

pub(crate) fn tconv2d_grad_kernel(g: ConvGeom, input: &[f64], gout: &[f64], gk: &mut [f64]) {
    for ci in 0..g.c_in {
        for co in 0..g.c_out {
            for kt in 0..g.kt {
                let acc = &mut gk[((ci * g.c_out + co) * g.kt + kt) * g.kf..][..g.kf];
                for it in 0..g.t_in {
                    let Some(ot) = src_row_index(it, g.st, kt, g.pt) else {
                        continue;
                    };
                    if ot >= g.t_out {
                        continue;
                    }
                    row_correlate(
                        acc,
                        &input[(ci * g.t_in + it) * g.f_in..][..g.f_in],
                        &gout[(co * g.t_out + ot) * g.f_out..][..g.f_out],
                        g.sf,
                        g.pf,
                    );
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(c_in: usize, c_out: usize, t: usize, f: usize, k: usize, s: usize, p: usize) -> ConvGeom {
        ConvGeom {
            c_in,
            c_out,
            t_in: t,
            f_in: f,
            t_out: conv_out_extent(t, k, s, p).unwrap(),
            f_out: conv_out_extent(f, k, s, p).unwrap(),
            kt: k,
            kf: k,
            st: s,
            sf: s,
            pt: p,
            pf: p,
        }
    }

    #[test]
    fn identity_kernel_scales() {
        // 1x1 kernel [2] on [[1,2],[3,4]] -> [[2,4],[6,8]]
        let g = geom(1, 1, 2, 2, 1, 1, 0);
        let mut out = vec![0.0; 4];
        conv2d_forward(g, &[1.0, 2.0, 3.0, 4.0], &[2.0], None, &mut out);
        assert_eq!(out, vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn transposed_spreads_single_element() {
        // input 1x1x1 [3], 2x2 ones kernel, stride 1, pad 0 -> 2x2 all threes
        let g = ConvGeom {
            c_in: 1,
            c_out: 1,
            t_in: 1,
            f_in: 1,
            t_out: tconv_out_extent(1, 2, 1, 0).unwrap(),
            f_out: tconv_out_extent(1, 2, 1, 0).unwrap(),
            kt: 2,
            kf: 2,
            st: 1,
            sf: 1,
            pt: 0,
            pf: 0,
        };
        assert_eq!((g.t_out, g.f_out), (2, 2));
        let mut out = vec![0.0; 4];
        tconv2d_forward(g, &[3.0], &[1.0; 4], None, &mut out);
        assert_eq!(out, vec![3.0; 4]);
    }

    #[test]
    fn strided_shape_rule() {
        // 8x8, kernel 3, stride 2, pad 1 -> 4x4
        assert_eq!(conv_out_extent(8, 3, 2, 1), Some(4));
        // ceil rule used by the nets: k3 s2 p1 maps n -> ceil(n/2)
        for n in 2..40 {
            assert_eq!(conv_out_extent(n, 3, 2, 1), Some(n.div_ceil(2)));
        }
    }

    #[test]
    fn conv_forward_matches_naive() {
        for (s, p) in [(1, 0), (1, 1), (2, 1), (2, 0), (1, 2)] {
            let t = 7;
            let f = 9;
            if conv_out_extent(t, 3, s, p).is_none() {
                continue;
            }
            let g = geom(2, 3, t, f, 3, s, p);
            let mut rngval = 0.37f64;
            let mut next = || {
                rngval = (rngval * 9.7 + 0.31) % 1.0;
                rngval - 0.5
            };
            let input: Vec<f64> = (0..g.c_in * g.t_in * g.f_in).map(|_| next()).collect();
            let kernel: Vec<f64> = (0..g.c_out * g.c_in * g.kt * g.kf).map(|_| next()).collect();
            let bias: Vec<f64> = (0..g.c_out).map(|_| next()).collect();
            let mut out = vec![0.0; g.c_out * g.t_out * g.f_out];
            conv2d_forward(g, &input, &kernel, Some(&bias), &mut out);

            for co in 0..g.c_out {
                for ot in 0..g.t_out {
                    for of in 0..g.f_out {
                        let mut acc = bias[co];
                        for ci in 0..g.c_in {
                            for kt in 0..g.kt {
                                for kf in 0..g.kf {
                                    let it = (ot * g.st + kt) as isize - g.pt as isize;
                                    let fi = (of * g.sf + kf) as isize - g.pf as isize;
                                    if it < 0
                                        || fi < 0
                                        || it as usize >= g.t_in
                                        || fi as usize >= g.f_in
                                    {
                                        continue;
                                    }
                                    acc += kernel[((co * g.c_in + ci) * g.kt + kt) * g.kf + kf]
                                        * input
                                            [(ci * g.t_in + it as usize) * g.f_in + fi as usize];
                                }
                            }
                        }
                        let got = out[(co * g.t_out + ot) * g.f_out + of];
                        assert!(
                            (got - acc).abs() < 1e-12,
                            "s={s} p={p} ({co},{ot},{of}): {got} vs {acc}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn scatter_matches_slow_path() {
        let taps = [0.3, -0.7, 1.1];
        let src: Vec<f64> = (0..9).map(|i| 0.1 * f64::from(i) - 0.4).collect();
        for (s, p, dst_len) in [(1, 1, 9), (1, 0, 11), (2, 1, 18), (2, 0, 19)] {
            let mut fast = vec![0.0; dst_len];
            let mut slow = vec![0.0; dst_len];
            row_scatter(&mut fast, &src, &taps, s, p);
            row_scatter_slow(&mut slow, &src, &taps, s, p);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "s={s} p={p}: {fast:?} vs {slow:?}");
            }
        }
    }
}
