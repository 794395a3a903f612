//! Direct convolution kernels (forward and backward) on CHW f64 buffers.
//!
//! Loops are arranged so the innermost dimension walks rows contiguously
//! wherever the stride allows, and channel-level parallelism writes disjoint
//! chunks, keeping results bit-identical with or without rayon.

use crate::par;

/// Range `lo..hi` of out-indices `t < len` with `0 <= t*stride + off < limit`.
fn tap_range(limit: usize, off: isize, stride: usize, len: usize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
    let max = limit as isize - 1 - off;
    if max < 0 {
        return (0, 0);
    }
    let hi = ((max as usize) / stride + 1).min(len);
    (lo.min(hi), hi)
}

/// Output spatial size of a stride-`s`, pad-`p` convolution.
pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output spatial size of a transposed convolution.
pub(crate) fn convt_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((input - 1) * stride + kernel).checked_sub(2 * pad)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_fwd(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    wgt: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; co * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |o, out_ch| {
        if let Some(b) = bias {
            out_ch.fill(b[o]);
        }
        for c in 0..ci {
            let x_ch = &x[c * h * w..][..h * w];
            for ky in 0..kh {
                let y_off = ky as isize - pad as isize;
                let (oy_lo, oy_hi) = tap_range(h, y_off, stride, oh);
                for kx in 0..kw {
                    let x_off = kx as isize - pad as isize;
                    let (ox_lo, ox_hi) = tap_range(w, x_off, stride, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let wv = wgt[((o * ci + c) * kh + ky) * kw + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * stride) as isize + y_off) as usize;
                        let x_row = &x_ch[iy * w..][..w];
                        let out_row = &mut out_ch[oy * ow..][..ow];
                        if stride == 1 {
                            let ix0 = (ox_lo as isize + x_off) as usize;
                            let n = ox_hi - ox_lo;
                            for (ov, xv) in out_row[ox_lo..ox_hi].iter_mut().zip(&x_row[ix0..ix0 + n]) {
                                *ov += wv * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * stride) as isize + x_off) as usize;
                                out_row[ox] += wv * x_row[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_dx(
    dy: &[f64],
    wgt: &[f64],
    (ci, h, w): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut dx = vec![0.0; ci * h * w];
    par::for_each_chunk_mut(&mut dx, h * w, |c, dx_ch| {
        for o in 0..co {
            let dy_ch = &dy[o * oh * ow..][..oh * ow];
            for ky in 0..kh {
                let y_off = ky as isize - pad as isize;
                let (oy_lo, oy_hi) = tap_range(h, y_off, stride, oh);
                for kx in 0..kw {
                    let x_off = kx as isize - pad as isize;
                    let (ox_lo, ox_hi) = tap_range(w, x_off, stride, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let wv = wgt[((o * ci + c) * kh + ky) * kw + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * stride) as isize + y_off) as usize;
                        let dy_row = &dy_ch[oy * ow..][..ow];
                        let dx_row = &mut dx_ch[iy * w..][..w];
                        if stride == 1 {
                            let ix0 = (ox_lo as isize + x_off) as usize;
                            for (i, g) in dy_row[ox_lo..ox_hi].iter().enumerate() {
                                dx_row[ix0 + i] += wv * g;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * stride) as isize + x_off) as usize;
                                dx_row[ix] += wv * dy_row[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_dw(
    x: &[f64],
    dy: &[f64],
    (ci, h, w): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut dw = vec![0.0; co * ci * kh * kw];
    par::for_each_chunk_mut(&mut dw, ci * kh * kw, |o, dw_o| {
        let dy_ch = &dy[o * oh * ow..][..oh * ow];
        for c in 0..ci {
            let x_ch = &x[c * h * w..][..h * w];
            for ky in 0..kh {
                let y_off = ky as isize - pad as isize;
                let (oy_lo, oy_hi) = tap_range(h, y_off, stride, oh);
                for kx in 0..kw {
                    let x_off = kx as isize - pad as isize;
                    let (ox_lo, ox_hi) = tap_range(w, x_off, stride, ow);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * stride) as isize + y_off) as usize;
                        let dy_row = &dy_ch[oy * ow..][..ow];
                        let x_row = &x_ch[iy * w..][..w];
                        if stride == 1 {
                            let ix0 = (ox_lo as isize + x_off) as usize;
                            let n = ox_hi - ox_lo;
                            acc += dy_row[ox_lo..ox_hi]
                                .iter()
                                .zip(&x_row[ix0..ix0 + n])
                                .map(|(g, xv)| g * xv)
                                .sum::<f64>();
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * stride) as isize + x_off) as usize;
                                acc += dy_row[ox] * x_row[ix];
                            }
                        }
                    }
                    dw_o[(c * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });
    dw
}

pub(crate) fn reduce_channel_sums(dy: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    (0..channels).map(|o| dy[o * plane..][..plane].iter().sum()).collect()
}

/// Transposed convolution forward. Weight layout is `[c_in, c_out, kh, kw]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn convt2d_fwd(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    wgt: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; co * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |o, out_ch| {
        if let Some(b) = bias {
            out_ch.fill(b[o]);
        }
        for c in 0..ci {
            let x_ch = &x[c * h * w..][..h * w];
            for ky in 0..kh {
                let y_off = ky as isize - pad as isize;
                let (iy_lo, iy_hi) = tap_range(oh, y_off, stride, h);
                for kx in 0..kw {
                    let x_off = kx as isize - pad as isize;
                    let (ix_lo, ix_hi) = tap_range(ow, x_off, stride, w);
                    if ix_lo >= ix_hi {
                        continue;
                    }
                    let wv = wgt[((c * co + o) * kh + ky) * kw + kx];
                    for iy in iy_lo..iy_hi {
                        let oy = ((iy * stride) as isize + y_off) as usize;
                        let x_row = &x_ch[iy * w..][..w];
                        let out_row = &mut out_ch[oy * ow..][..ow];
                        for ix in ix_lo..ix_hi {
                            let ox = ((ix * stride) as isize + x_off) as usize;
                            out_row[ox] += wv * x_row[ix];
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn convt2d_dx(
    dy: &[f64],
    wgt: &[f64],
    (ci, h, w): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut dx = vec![0.0; ci * h * w];
    par::for_each_chunk_mut(&mut dx, h * w, |c, dx_ch| {
        for o in 0..co {
            let dy_ch = &dy[o * oh * ow..][..oh * ow];
            for ky in 0..kh {
                let y_off = ky as isize - pad as isize;
                let (iy_lo, iy_hi) = tap_range(oh, y_off, stride, h);
                for kx in 0..kw {
                    let x_off = kx as isize - pad as isize;
                    let (ix_lo, ix_hi) = tap_range(ow, x_off, stride, w);
                    if ix_lo >= ix_hi {
                        continue;
                    }
                    let wv = wgt[((c * co + o) * kh + ky) * kw + kx];
                    for iy in iy_lo..iy_hi {
                        let oy = ((iy * stride) as isize + y_off) as usize;
                        let dy_row = &dy_ch[oy * ow..][..ow];
                        let dx_row = &mut dx_ch[iy * w..][..w];
                        for ix in ix_lo..ix_hi {
                            let ox = ((ix * stride) as isize + x_off) as usize;
                            dx_row[ix] += wv * dy_row[ox];
                        }
                    }
                }
            }
        }
    });
    dx
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn convt2d_dw(
    x: &[f64],
    dy: &[f64],
    (ci, h, w): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut dw = vec![0.0; ci * co * kh * kw];
    par::for_each_chunk_mut(&mut dw, co * kh * kw, |c, dw_c| {
        let x_ch = &x[c * h * w..][..h * w];
        for o in 0..co {
            let dy_ch = &dy[o * oh * ow..][..oh * ow];
            for ky in 0..kh {
                let y_off = ky as isize - pad as isize;
                let (iy_lo, iy_hi) = tap_range(oh, y_off, stride, h);
                for kx in 0..kw {
                    let x_off = kx as isize - pad as isize;
                    let (ix_lo, ix_hi) = tap_range(ow, x_off, stride, w);
                    let mut acc = 0.0;
                    for iy in iy_lo..iy_hi {
                        let oy = ((iy * stride) as isize + y_off) as usize;
                        let x_row = &x_ch[iy * w..][..w];
                        let dy_row = &dy_ch[oy * ow..][..ow];
                        for ix in ix_lo..ix_hi {
                            let ox = ((ix * stride) as isize + x_off) as usize;
                            acc += x_row[ix] * dy_row[ox];
                        }
                    }
                    dw_c[(o * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });
    dw
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook triple-loop convolution, kept as an independent reference.
    fn naive_conv2d(
        x: &[f64],
        (ci, h, w): (usize, usize, usize),
        wgt: &[f64],
        (co, kh, kw): (usize, usize, usize),
        bias: Option<&[f64]>,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = conv_out_dim(h, kh, stride, pad).unwrap();
        let ow = conv_out_dim(w, kw, stride, pad).unwrap();
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    acc += wgt[((o * ci + c) * kh + ky) * kw + kx]
                                        * x[(c * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn naive_convt2d(
        x: &[f64],
        (ci, h, w): (usize, usize, usize),
        wgt: &[f64],
        (co, kh, kw): (usize, usize, usize),
        bias: Option<&[f64]>,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = convt_out_dim(h, kh, stride, pad).unwrap();
        let ow = convt_out_dim(w, kw, stride, pad).unwrap();
        let mut out = vec![0.0; co * oh * ow];
        if let Some(b) = bias {
            for o in 0..co {
                out[o * oh * ow..][..oh * ow].fill(b[o]);
            }
        }
        for c in 0..ci {
            for iy in 0..h {
                for ix in 0..w {
                    let xv = x[(c * h + iy) * w + ix];
                    for o in 0..co {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy >= 0 && (oy as usize) < oh && ox >= 0 && (ox as usize) < ow {
                                    out[(o * oh + oy as usize) * ow + ox as usize] +=
                                        xv * wgt[((c * co + o) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = crate::splitmix64(s);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = vec![1.0; 9];
        let w = vec![1.0; 9];
        let out = conv2d_fwd(&x, (1, 3, 3), &w, (1, 3, 3), None, 1, 1, (3, 3));
        assert_eq!(out, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn matches_naive_conv_over_shapes() {
        for (ci, h, w, co, k, stride, pad, seed) in [
            (2, 7, 7, 3, 3, 1, 1, 1u64),
            (3, 8, 8, 4, 3, 2, 1, 2),
            (1, 5, 6, 2, 4, 2, 1, 3),
            (2, 6, 5, 2, 3, 1, 0, 4),
        ] {
            let x = pseudo_random(ci * h * w, seed);
            let wt = pseudo_random(co * ci * k * k, seed + 10);
            let b = pseudo_random(co, seed + 20);
            let oh = conv_out_dim(h, k, stride, pad).unwrap();
            let ow = conv_out_dim(w, k, stride, pad).unwrap();
            let fast = conv2d_fwd(&x, (ci, h, w), &wt, (co, k, k), Some(&b), stride, pad, (oh, ow));
            let slow = naive_conv2d(&x, (ci, h, w), &wt, (co, k, k), Some(&b), stride, pad);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "conv mismatch: {a} vs {e}");
            }
        }
    }

    #[test]
    fn matches_naive_transposed_conv_over_shapes() {
        for (ci, h, w, co, k, stride, pad, seed) in [
            (2, 4, 4, 3, 4, 2, 1, 5u64),
            (3, 5, 4, 2, 4, 2, 1, 6),
            (1, 6, 6, 2, 3, 1, 1, 7),
        ] {
            let x = pseudo_random(ci * h * w, seed);
            let wt = pseudo_random(ci * co * k * k, seed + 10);
            let b = pseudo_random(co, seed + 20);
            let oh = convt_out_dim(h, k, stride, pad).unwrap();
            let ow = convt_out_dim(w, k, stride, pad).unwrap();
            let fast = convt2d_fwd(&x, (ci, h, w), &wt, (co, k, k), Some(&b), stride, pad, (oh, ow));
            let slow = naive_convt2d(&x, (ci, h, w), &wt, (co, k, k), Some(&b), stride, pad);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "convt mismatch: {a} vs {e}");
            }
        }
    }

    #[test]
    fn transposed_conv_doubles_spatial_size() {
        assert_eq!(convt_out_dim(8, 4, 2, 1), Some(16));
        assert_eq!(conv_out_dim(16, 3, 2, 1), Some(8));
    }
}
