//! Numeric kernels behind the graph ops.
//!
//! Conventions shared by every kernel:
//!
//! * arithmetic is f32 with f64 accumulation inside reductions;
//! * reductions run in a fixed order (8 interleaved f64 lanes combined in a
//!   fixed tree, never re-associated by thread count), so results are
//!   bit-reproducible and independent of the `parallel` feature;
//! * parallel loops split only over disjoint output slices;
//! * gradient outputs accumulate (`+=`) so a second backward pass doubles
//!   them exactly.

use crate::par;

const LANES: usize = 8;
/// Elementwise kernels parallelize over chunks of this many values.
const EW_CHUNK: usize = 16_384;
/// Row-block sizes keep the streamed operand (weights or activations) in
/// cache while the blocked side stays hot.
const FWD_ROWS: usize = 32;
const BWD_ROWS: usize = 8;

/// Dot product with 8 f64 accumulator lanes combined in a fixed order.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            lanes[l] += xa[l] as f64 * xb[l] as f64;
        }
    }
    let mut tail = 0.0f64;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x as f64 * *y as f64;
    }
    ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6]))
        + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]))
        + tail
}

/// Lane-accumulated sum.
pub fn sum_f64(a: &[f32]) -> f64 {
    let mut lanes = [0.0f64; LANES];
    let chunks = a.chunks_exact(LANES);
    let rem = chunks.remainder();
    for xa in chunks {
        for l in 0..LANES {
            lanes[l] += xa[l] as f64;
        }
    }
    let mut tail = 0.0f64;
    for x in rem {
        tail += *x as f64;
    }
    ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6]))
        + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]))
        + tail
}

/// Lane-accumulated sum of squared deviations from `mean`.
pub fn sum_sq_dev_f64(a: &[f32], mean: f64) -> f64 {
    let mut lanes = [0.0f64; LANES];
    let chunks = a.chunks_exact(LANES);
    let rem = chunks.remainder();
    for xa in chunks {
        for l in 0..LANES {
            let d = xa[l] as f64 - mean;
            lanes[l] += d * d;
        }
    }
    let mut tail = 0.0f64;
    for x in rem {
        let d = *x as f64 - mean;
        tail += d * d;
    }
    ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6]))
        + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]))
        + tail
}

#[inline]
fn axpy_into_f64(buf: &mut [f64], c: f64, x: &[f32]) {
    debug_assert_eq!(buf.len(), x.len());
    for (d, s) in buf.iter_mut().zip(x) {
        *d += c * *s as f64;
    }
}

/// out[b,i] = dot(w[i,:], x[b,:]) + bias[i] for x: [batch,n], w: [m,n].
pub fn dense_forward(x: &[f32], batch: usize, n: usize, w: &[f32], m: usize, bias: &[f32], out: &mut [f32]) {
    debug_assert_eq!(x.len(), batch * n);
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(bias.len(), m);
    debug_assert_eq!(out.len(), batch * m);
    par::for_each_chunk_mut(out, FWD_ROWS * m, |idx, chunk| {
        let base = idx * FWD_ROWS;
        for i in 0..m {
            let wrow = &w[i * n..(i + 1) * n];
            let bias_i = bias[i] as f64;
            for (r, orow) in chunk.chunks_exact_mut(m).enumerate() {
                let xrow = &x[(base + r) * n..(base + r + 1) * n];
                orow[i] = (dot_f64(wrow, xrow) + bias_i) as f32;
            }
        }
    });
}

/// dx[b,:] += sum_i dout[b,i] * w[i,:].
pub fn dense_backward_dx(dout: &[f32], batch: usize, m: usize, w: &[f32], n: usize, dx: &mut [f32]) {
    debug_assert_eq!(dout.len(), batch * m);
    debug_assert_eq!(dx.len(), batch * n);
    par::for_each_chunk_mut(dx, BWD_ROWS * n, |idx, chunk| {
        let base = idx * BWD_ROWS;
        let rows = chunk.len() / n;
        let mut bufs = vec![0.0f64; rows * n];
        for i in 0..m {
            let wrow = &w[i * n..(i + 1) * n];
            for r in 0..rows {
                let c = dout[(base + r) * m + i] as f64;
                axpy_into_f64(&mut bufs[r * n..(r + 1) * n], c, wrow);
            }
        }
        for (d, s) in chunk.iter_mut().zip(&bufs) {
            *d += *s as f32;
        }
    });
}

/// dw[i,:] += sum_b dout[b,i] * x[b,:].
pub fn dense_backward_dw(dout: &[f32], x: &[f32], batch: usize, m: usize, n: usize, dw: &mut [f32]) {
    debug_assert_eq!(dw.len(), m * n);
    par::for_each_chunk_mut(dw, BWD_ROWS * n, |idx, chunk| {
        let i_base = idx * BWD_ROWS;
        let rows = chunk.len() / n;
        let mut bufs = vec![0.0f64; rows * n];
        for b in 0..batch {
            let xrow = &x[b * n..(b + 1) * n];
            for r in 0..rows {
                let c = dout[b * m + i_base + r] as f64;
                axpy_into_f64(&mut bufs[r * n..(r + 1) * n], c, xrow);
            }
        }
        for (d, s) in chunk.iter_mut().zip(&bufs) {
            *d += *s as f32;
        }
    });
}

/// acc[i] += sum_b v[b,i]; used for dense bias and codeword-bias gradients.
pub fn col_sums_into(v: &[f32], batch: usize, m: usize, acc: &mut [f32]) {
    debug_assert_eq!(v.len(), batch * m);
    debug_assert_eq!(acc.len(), m);
    let mut sums = vec![0.0f64; m];
    for b in 0..batch {
        for (s, x) in sums.iter_mut().zip(&v[b * m..(b + 1) * m]) {
            *s += *x as f64;
        }
    }
    for (a, s) in acc.iter_mut().zip(&sums) {
        *a += *s as f32;
    }
}

/// Valid output-row/col range for a 3x3 same-padding offset `d` in {-1,0,1}:
/// positions where the tapped input index stays in bounds.
#[inline]
fn tap_range(extent: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = ((extent as isize) - d.max(0)).max(0) as usize;
    (lo, hi)
}

/// Cross-correlation with 3x3 kernels and zero same-padding.
/// x: [batch,c_in,h,w], weights: [f_cnt,c_in,3,3], out: [batch,f_cnt,h,w].
pub fn conv2d_forward(
    x: &[f32],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f32],
    f_cnt: usize,
    bias: &[f32],
    out: &mut [f32],
) {
    let hw = h * w;
    debug_assert_eq!(x.len(), batch * c_in * hw);
    debug_assert_eq!(weights.len(), f_cnt * c_in * 9);
    debug_assert_eq!(out.len(), batch * f_cnt * hw);
    par::for_each_chunk_mut(out, hw, |pi, plane| {
        let b = pi / f_cnt;
        let f = pi % f_cnt;
        let mut buf = vec![bias[f] as f64; hw];
        for c in 0..c_in {
            let xp = &x[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(w, dx);
                    if x0 >= x1 || y0 >= y1 {
                        continue;
                    }
                    let wv = weights[((f * c_in + c) * 3 + ky) * 3 + kx] as f64;
                    for y in y0..y1 {
                        let src_off = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                        let src = &xp[src_off..src_off + (x1 - x0)];
                        let dst = &mut buf[y * w + x0..y * w + x1];
                        axpy_into_f64(dst, wv, src);
                    }
                }
            }
        }
        for (o, v) in plane.iter_mut().zip(&buf) {
            *o = *v as f32;
        }
    });
}

/// dx[b,c,:,:] += correlation of dout with the flipped kernels.
pub fn conv2d_backward_dx(
    dout: &[f32],
    batch: usize,
    f_cnt: usize,
    h: usize,
    w: usize,
    weights: &[f32],
    c_in: usize,
    dx: &mut [f32],
) {
    let hw = h * w;
    debug_assert_eq!(dout.len(), batch * f_cnt * hw);
    debug_assert_eq!(dx.len(), batch * c_in * hw);
    par::for_each_chunk_mut(dx, hw, |pi, plane| {
        let b = pi / c_in;
        let c = pi % c_in;
        let mut buf = vec![0.0f64; hw];
        for f in 0..f_cnt {
            let dp = &dout[(b * f_cnt + f) * hw..(b * f_cnt + f + 1) * hw];
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                // din[y] pulls from dout[y - dy]; valid while y - dy is in range.
                let (y0, y1) = tap_range(h, -dy);
                for kx in 0..3usize {
                    let dxo = kx as isize - 1;
                    let (x0, x1) = tap_range(w, -dxo);
                    if x0 >= x1 || y0 >= y1 {
                        continue;
                    }
                    let wv = weights[((f * c_in + c) * 3 + ky) * 3 + kx] as f64;
                    for y in y0..y1 {
                        let src_off = (y as isize - dy) as usize * w + (x0 as isize - dxo) as usize;
                        let src = &dp[src_off..src_off + (x1 - x0)];
                        let dst = &mut buf[y * w + x0..y * w + x1];
                        axpy_into_f64(dst, wv, src);
                    }
                }
            }
        }
        for (d, s) in plane.iter_mut().zip(&buf) {
            *d += *s as f32;
        }
    });
}

/// dw[f,c,ky,kx] += sum over batch and valid positions of dout * x.
pub fn conv2d_backward_dw(
    dout: &[f32],
    x: &[f32],
    batch: usize,
    f_cnt: usize,
    c_in: usize,
    h: usize,
    w: usize,
    dw: &mut [f32],
) {
    let hw = h * w;
    debug_assert_eq!(dw.len(), f_cnt * c_in * 9);
    par::for_each_chunk_mut(dw, c_in * 9, |f, chunk| {
        for c in 0..c_in {
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(w, dx);
                    let mut acc = 0.0f64;
                    if x0 < x1 && y0 < y1 {
                        for b in 0..batch {
                            let dp = &dout[(b * f_cnt + f) * hw..(b * f_cnt + f + 1) * hw];
                            let xp = &x[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
                            for y in y0..y1 {
                                let xoff = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                                acc += dot_f64(
                                    &dp[y * w + x0..y * w + x1],
                                    &xp[xoff..xoff + (x1 - x0)],
                                );
                            }
                        }
                    }
                    chunk[(c * 3 + ky) * 3 + kx] += acc as f32;
                }
            }
        }
    });
}

/// db[f] += sum of dout over batch and spatial positions.
pub fn conv2d_backward_db(dout: &[f32], batch: usize, f_cnt: usize, hw: usize, db: &mut [f32]) {
    debug_assert_eq!(db.len(), f_cnt);
    let mut sums = vec![0.0f64; f_cnt];
    for b in 0..batch {
        for (f, s) in sums.iter_mut().enumerate() {
            *s += sum_f64(&dout[(b * f_cnt + f) * hw..(b * f_cnt + f + 1) * hw]);
        }
    }
    for (d, s) in db.iter_mut().zip(&sums) {
        *d += *s as f32;
    }
}

/// Per-channel mean and biased variance over batch and spatial dims.
pub fn channel_stats(x: &[f32], batch: usize, c_cnt: usize, hw: usize) -> Vec<(f64, f64)> {
    let n = (batch * hw) as f64;
    let mut stats = vec![(0.0f64, 0.0f64); c_cnt];
    par::fill_indexed(&mut stats, |c| {
        let mut total = 0.0f64;
        for b in 0..batch {
            total += sum_f64(&x[(b * c_cnt + c) * hw..(b * c_cnt + c + 1) * hw]);
        }
        let mean = total / n;
        let mut dev = 0.0f64;
        for b in 0..batch {
            dev += sum_sq_dev_f64(&x[(b * c_cnt + c) * hw..(b * c_cnt + c + 1) * hw], mean);
        }
        (mean, dev / n)
    });
    stats
}

/// out = x * scale[c] + shift[c], per channel.
pub fn channel_affine(
    x: &[f32],
    batch: usize,
    c_cnt: usize,
    hw: usize,
    scale: &[f64],
    shift: &[f64],
    out: &mut [f32],
) {
    debug_assert_eq!(out.len(), batch * c_cnt * hw);
    par::for_each_chunk_mut(out, hw, |pi, plane| {
        let c = pi % c_cnt;
        let (a, s) = (scale[c], shift[c]);
        let xp = &x[pi * hw..(pi + 1) * hw];
        for (o, v) in plane.iter_mut().zip(xp) {
            *o = (*v as f64 * a + s) as f32;
        }
    });
}

/// Per-channel sums s1[c] = sum(dout), sxd[c] = sum(dout * x) used by the
/// batch-norm backward pass.
pub fn channel_grad_sums(
    dout: &[f32],
    x: &[f32],
    batch: usize,
    c_cnt: usize,
    hw: usize,
) -> Vec<(f64, f64)> {
    let mut sums = vec![(0.0f64, 0.0f64); c_cnt];
    par::fill_indexed(&mut sums, |c| {
        let mut s1 = 0.0f64;
        let mut sxd = 0.0f64;
        for b in 0..batch {
            let off = (b * c_cnt + c) * hw;
            s1 += sum_f64(&dout[off..off + hw]);
            sxd += dot_f64(&dout[off..off + hw], &x[off..off + hw]);
        }
        (s1, sxd)
    });
    sums
}

/// dx += ka[c]*dout + kb[c]*x + kc[c], per channel.
pub fn channel_backward_combine(
    dout: &[f32],
    x: &[f32],
    batch: usize,
    c_cnt: usize,
    hw: usize,
    ka: &[f64],
    kb: &[f64],
    kc: &[f64],
    dx: &mut [f32],
) {
    debug_assert_eq!(dx.len(), batch * c_cnt * hw);
    par::for_each_chunk_mut(dx, hw, |pi, plane| {
        let c = pi % c_cnt;
        let (a, b, k) = (ka[c], kb[c], kc[c]);
        let dp = &dout[pi * hw..(pi + 1) * hw];
        let xp = &x[pi * hw..(pi + 1) * hw];
        for ((d, g), v) in plane.iter_mut().zip(dp).zip(xp) {
            *d += (a * *g as f64 + b * *v as f64 + k) as f32;
        }
    });
}

pub fn leaky_relu_forward(x: &[f32], alpha: f32, out: &mut [f32]) {
    par::for_each_chunk_mut(out, EW_CHUNK, |i, chunk| {
        let src = &x[i * EW_CHUNK..i * EW_CHUNK + chunk.len()];
        for (o, v) in chunk.iter_mut().zip(src) {
            *o = if *v >= 0.0 { *v } else { alpha * *v };
        }
    });
}

pub fn leaky_relu_backward(dout: &[f32], x: &[f32], alpha: f32, dx: &mut [f32]) {
    par::for_each_chunk_mut(dx, EW_CHUNK, |i, chunk| {
        let off = i * EW_CHUNK;
        for (j, d) in chunk.iter_mut().enumerate() {
            let slope = if x[off + j] >= 0.0 { 1.0 } else { alpha };
            *d += dout[off + j] * slope;
        }
    });
}

pub fn sigmoid_forward(x: &[f32], out: &mut [f32]) {
    par::for_each_chunk_mut(out, EW_CHUNK, |i, chunk| {
        let src = &x[i * EW_CHUNK..i * EW_CHUNK + chunk.len()];
        for (o, v) in chunk.iter_mut().zip(src) {
            // Split by sign so exp never overflows.
            *o = if *v >= 0.0 {
                1.0 / (1.0 + (-*v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            };
        }
    });
}

/// Sigmoid gradient in terms of the forward output.
pub fn sigmoid_backward(dout: &[f32], out: &[f32], dx: &mut [f32]) {
    par::for_each_chunk_mut(dx, EW_CHUNK, |i, chunk| {
        let off = i * EW_CHUNK;
        for (j, d) in chunk.iter_mut().enumerate() {
            let o = out[off + j];
            *d += dout[off + j] * o * (1.0 - o);
        }
    });
}

pub fn add_forward(a: &[f32], b: &[f32], out: &mut [f32]) {
    par::for_each_chunk_mut(out, EW_CHUNK, |i, chunk| {
        let off = i * EW_CHUNK;
        for (j, o) in chunk.iter_mut().enumerate() {
            *o = a[off + j] + b[off + j];
        }
    });
}

pub fn accumulate(into: &mut [f32], from: &[f32]) {
    debug_assert_eq!(into.len(), from.len());
    par::for_each_chunk_mut(into, EW_CHUNK, |i, chunk| {
        let off = i * EW_CHUNK;
        for (j, d) in chunk.iter_mut().enumerate() {
            *d += from[off + j];
        }
    });
}

/// out[b,:] = x[b,:] + bias for a broadcast row bias.
pub fn row_bias_forward(x: &[f32], batch: usize, m: usize, bias: &[f32], out: &mut [f32]) {
    debug_assert_eq!(bias.len(), m);
    debug_assert_eq!(out.len(), batch * m);
    par::for_each_chunk_mut(out, m, |b, row| {
        let src = &x[b * m..(b + 1) * m];
        for ((o, v), p) in row.iter_mut().zip(src).zip(bias) {
            *o = v + p;
        }
    });
}

/// Mean of squared differences, accumulated in f64.
pub fn mse_value(pred: &[f32], target: &[f32]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    let mut lanes = [0.0f64; LANES];
    let cp = pred.chunks_exact(LANES);
    let ct = target.chunks_exact(LANES);
    let (rp, rt) = (cp.remainder(), ct.remainder());
    for (xa, xb) in cp.zip(ct) {
        for l in 0..LANES {
            let d = xa[l] as f64 - xb[l] as f64;
            lanes[l] += d * d;
        }
    }
    let mut tail = 0.0f64;
    for (x, y) in rp.iter().zip(rt) {
        let d = *x as f64 - *y as f64;
        tail += d * d;
    }
    let total = ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6]))
        + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]))
        + tail;
    total / pred.len() as f64
}

/// dpred += go * 2 (pred - target) / count; dtarget gets the negation.
pub fn mse_backward(
    pred: &[f32],
    target: &[f32],
    go: f64,
    dpred: &mut [f32],
    dtarget: &mut [f32],
) {
    let scale = go * 2.0 / pred.len() as f64;
    par::for_each_chunk_mut(dpred, EW_CHUNK, |i, chunk| {
        let off = i * EW_CHUNK;
        for (j, d) in chunk.iter_mut().enumerate() {
            *d += (scale * (pred[off + j] as f64 - target[off + j] as f64)) as f32;
        }
    });
    par::for_each_chunk_mut(dtarget, EW_CHUNK, |i, chunk| {
        let off = i * EW_CHUNK;
        for (j, d) in chunk.iter_mut().enumerate() {
            *d -= (scale * (pred[off + j] as f64 - target[off + j] as f64)) as f32;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f32> = (0..37).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..37).map(|i| (i as f32 * 0.71).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        assert!((dot_f64(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn tap_ranges_cover_same_padding() {
        assert_eq!(tap_range(5, -1), (1, 5));
        assert_eq!(tap_range(5, 0), (0, 5));
        assert_eq!(tap_range(5, 1), (0, 4));
    }

    #[test]
    fn parallel_and_sequential_dense_agree_bit_for_bit() {
        let batch = 17;
        let n = 53;
        let m = 29;
        let x: Vec<f32> = (0..batch * n).map(|i| ((i * 2654435761) as f32).sin()).collect();
        let w: Vec<f32> = (0..m * n).map(|i| ((i * 40503) as f32).cos()).collect();
        let bias: Vec<f32> = (0..m).map(|i| i as f32 * 0.01).collect();
        let mut out_par = vec![0.0f32; batch * m];
        let mut out_seq = vec![0.0f32; batch * m];
        dense_forward(&x, batch, n, &w, m, &bias, &mut out_par);
        let prev = crate::par::set_parallel(false);
        dense_forward(&x, batch, n, &w, m, &bias, &mut out_seq);
        crate::par::set_parallel(prev);
        assert_eq!(out_par, out_seq);
    }
}
