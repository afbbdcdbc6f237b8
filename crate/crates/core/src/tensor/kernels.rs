//! Raw loops behind the graph operators. Each parallel work unit owns a
//! disjoint output chunk and accumulates in a fixed order.

use crate::par;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

/// Row span `[lo, hi)` of output positions whose shifted source `pos + shift`
/// stays within `[0, len)`.
#[inline]
fn valid_span(len: usize, shift: isize) -> (usize, usize) {
    let len = len as isize;
    let lo = (-shift).max(0);
    let hi = (len - shift).min(len);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn conv2d_forward(input: &[f64], weight: &[f64], bias: &[f64], d: ConvDims) -> Vec<f64> {
    let plane = d.height * d.width;
    let kk = d.kernel * d.kernel;
    let pad = (d.kernel / 2) as isize;
    let mut out = vec![0.0; d.batch * d.c_out * plane];
    par::for_each_chunk(&mut out, plane, |idx, o| {
        let (b, oc) = (idx / d.c_out, idx % d.c_out);
        o.fill(bias[oc]);
        for ic in 0..d.c_in {
            let src = &input[(b * d.c_in + ic) * plane..][..plane];
            let wk = &weight[(oc * d.c_in + ic) * kk..][..kk];
            for ky in 0..d.kernel {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_span(d.height, dy);
                for kx in 0..d.kernel {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_span(d.width, dx);
                    if x0 == x1 {
                        continue;
                    }
                    let wv = wk[ky * d.kernel + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        axpy(
                            wv,
                            &src[sy * d.width + sx0..][..x1 - x0],
                            &mut o[y * d.width + x0..y * d.width + x1],
                        );
                    }
                }
            }
        }
    });
    out
}

/// Returns (grad_input, grad_weight, grad_bias); the input gradient is only
/// computed when `need_input` is set.
pub(crate) fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    d: ConvDims,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let grad_in = need_input.then(|| conv2d_input_grad(weight, grad_out, d));
    let grad_w = conv2d_weight_grad(input, grad_out, d);

    let plane = d.height * d.width;
    let mut grad_b = vec![0.0; d.c_out];
    par::for_each_chunk(&mut grad_b, 1, |oc, gb| {
        let mut acc = 0.0;
        for b in 0..d.batch {
            acc += grad_out[(b * d.c_out + oc) * plane..][..plane]
                .iter()
                .sum::<f64>();
        }
        gb[0] = acc;
    });

    (grad_in, grad_w, grad_b)
}

fn conv2d_input_grad(weight: &[f64], grad_out: &[f64], d: ConvDims) -> Vec<f64> {
    let plane = d.height * d.width;
    let kk = d.kernel * d.kernel;
    let pad = (d.kernel / 2) as isize;
    let mut grad_in = vec![0.0; d.batch * d.c_in * plane];
    par::for_each_chunk(&mut grad_in, plane, |idx, gi| {
        let (b, ic) = (idx / d.c_in, idx % d.c_in);
        for oc in 0..d.c_out {
            let go = &grad_out[(b * d.c_out + oc) * plane..][..plane];
            let wk = &weight[(oc * d.c_in + ic) * kk..][..kk];
            for ky in 0..d.kernel {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_span(d.height, dy);
                for kx in 0..d.kernel {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_span(d.width, dx);
                    if x0 == x1 {
                        continue;
                    }
                    let wv = wk[ky * d.kernel + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        axpy(
                            wv,
                            &go[y * d.width + x0..y * d.width + x1],
                            &mut gi[sy * d.width + sx0..][..x1 - x0],
                        );
                    }
                }
            }
        }
    });
    grad_in
}

fn conv2d_weight_grad(input: &[f64], grad_out: &[f64], d: ConvDims) -> Vec<f64> {
    let plane = d.height * d.width;
    let kk = d.kernel * d.kernel;
    let pad = (d.kernel / 2) as isize;
    let mut grad_w = vec![0.0; d.c_out * d.c_in * kk];
    par::for_each_chunk(&mut grad_w, d.c_in * kk, |oc, gw| {
        for ic in 0..d.c_in {
            for ky in 0..d.kernel {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_span(d.height, dy);
                for kx in 0..d.kernel {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_span(d.width, dx);
                    if x0 == x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for b in 0..d.batch {
                        let go = &grad_out[(b * d.c_out + oc) * plane..][..plane];
                        let src = &input[(b * d.c_in + ic) * plane..][..plane];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            acc += dot(
                                &go[y * d.width + x0..y * d.width + x1],
                                &src[sy * d.width + sx0..][..x1 - x0],
                            );
                        }
                    }
                    gw[(ic * d.kernel + ky) * d.kernel + kx] = acc;
                }
            }
        }
    });
    grad_w
}

/// 2x2 max pooling over `planes` planes of `height x width`. Returns pooled
/// values and the flat input index that won each window (first maximum in
/// scan order).
pub(crate) fn maxpool2_forward(
    input: &[f64],
    planes: usize,
    height: usize,
    width: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * width + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * width + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward(input: &[f64], planes: usize, height: usize, width: usize) -> Vec<f64> {
    let (oh, ow) = (height * 2, width * 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * height * width..][..height * width];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            let row = &src[(y / 2) * width..][..width];
            for x in 0..ow {
                dst[y * ow + x] = row[x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(grad_out: &[f64], planes: usize, height: usize, width: usize) -> Vec<f64> {
    let (oh, ow) = (height * 2, width * 2);
    let mut gi = vec![0.0; planes * height * width];
    for p in 0..planes {
        let src = &grad_out[p * oh * ow..][..oh * ow];
        let dst = &mut gi[p * height * width..][..height * width];
        for y in 0..height {
            for x in 0..width {
                let r0 = (2 * y) * ow + 2 * x;
                let r1 = r0 + ow;
                dst[y * width + x] = (src[r0] + src[r0 + 1]) + (src[r1] + src[r1 + 1]);
            }
        }
    }
    gi
}

/// `a[n,k] . b[k,m]`
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    par::for_each_chunk(&mut out, m.max(1), |i, row| {
        if i >= n {
            return;
        }
        for p in 0..k {
            axpy(a[i * k + p], &b[p * m..][..m], row);
        }
    });
    out
}

/// Gradients of `a[n,k] . b[k,m]` given `g[n,m]`.
pub(crate) fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    n: usize,
    k: usize,
    m: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; n * k];
    par::for_each_chunk(&mut ga, k.max(1), |i, row| {
        let gi = &g[i * m..][..m];
        for (p, v) in row.iter_mut().enumerate() {
            *v = dot(gi, &b[p * m..][..m]);
        }
    });
    let mut gb = vec![0.0; k * m];
    par::for_each_chunk(&mut gb, m.max(1), |p, row| {
        for i in 0..n {
            axpy(a[i * k + p], &g[i * m..][..m], row);
        }
    });
    (ga, gb)
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Target rows per work unit of the fused attention kernels.
const ATT_BLOCK: usize = 64;

/// Fills `beta` with row `i` of `softmax_rows(xᵀp · inv_tau)`.
fn attention_row(x: &[f64], p: &[f64], i: usize, n: usize, inv_tau: f64, beta: &mut [f64]) {
    let m = beta.len();
    beta.fill(0.0);
    for (c, pc) in p.chunks_exact(m).enumerate() {
        axpy(x[c * n + i], pc, beta);
    }
    let mut top = f64::NEG_INFINITY;
    for b in beta.iter_mut() {
        *b *= inv_tau;
        top = top.max(*b);
    }
    let mut total = 0.0;
    for b in beta.iter_mut() {
        *b = (*b - top).exp();
        total += *b;
    }
    for b in beta.iter_mut() {
        *b /= total;
    }
}

/// `o = q · softmax_rows(xᵀp · inv_tau)ᵀ` for `x: [D, N]`, `p: [D, M]`,
/// `q: [K, M]`, streaming one target row at a time. Returns `o: [K, N]`.
pub(crate) fn attention_forward(x: &[f64], p: &[f64], q: &[f64], n: usize, m: usize, inv_tau: f64) -> Vec<f64> {
    let k = q.len() / m.max(1);
    let mut ot = vec![0.0; n * k];
    par::for_each_chunk(&mut ot, ATT_BLOCK * k.max(1), |blk, rows| {
        let mut beta = vec![0.0; m];
        for (r, out) in rows.chunks_exact_mut(k).enumerate() {
            attention_row(x, p, blk * ATT_BLOCK + r, n, inv_tau, &mut beta);
            for (o, qk) in out.iter_mut().zip(q.chunks_exact(m)) {
                *o = dot(qk, &beta);
            }
        }
    });
    transpose(&ot, n, k)
}

/// Gradients `(dx, dp, dq)` of [`attention_forward`] given `g: [K, N]`.
/// Partial sums over target blocks are combined in block order.
pub(crate) fn attention_backward(
    x: &[f64],
    p: &[f64],
    q: &[f64],
    g: &[f64],
    n: usize,
    m: usize,
    inv_tau: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = p.len() / m.max(1);
    let k = q.len() / m.max(1);
    let gt = transpose(g, k, n);
    let blocks: Vec<usize> = (0..n.div_ceil(ATT_BLOCK)).collect();
    let parts = par::map(&blocks, |&blk| {
        let rows = blk * ATT_BLOCK..((blk + 1) * ATT_BLOCK).min(n);
        let mut dxt = vec![0.0; rows.len() * d];
        let (mut dp, mut dq) = (vec![0.0; d * m], vec![0.0; k * m]);
        let (mut beta, mut ds) = (vec![0.0; m], vec![0.0; m]);
        for (r, i) in rows.enumerate() {
            attention_row(x, p, i, n, inv_tau, &mut beta);
            let gi = &gt[i * k..][..k];
            ds.fill(0.0);
            for (&gk, qk) in gi.iter().zip(q.chunks_exact(m)) {
                axpy(gk, qk, &mut ds);
            }
            let mean = dot(&beta, &ds);
            for (s, &b) in ds.iter_mut().zip(&beta) {
                *s = b * (*s - mean) * inv_tau;
            }
            for c in 0..d {
                dxt[r * d + c] = dot(&ds, &p[c * m..][..m]);
                axpy(x[c * n + i], &ds, &mut dp[c * m..][..m]);
            }
            for (kk, &gk) in gi.iter().enumerate() {
                axpy(gk, &beta, &mut dq[kk * m..][..m]);
            }
        }
        (dxt, dp, dq)
    });
    let mut dxt = Vec::with_capacity(n * d);
    let (mut dp, mut dq) = (vec![0.0; d * m], vec![0.0; k * m]);
    for (bx, bp, bq) in parts {
        dxt.extend_from_slice(&bx);
        dp.iter_mut().zip(&bp).for_each(|(a, b)| *a += b);
        dq.iter_mut().zip(&bq).for_each(|(a, b)| *a += b);
    }
    (transpose(&dxt, n, d), dp, dq)
}
