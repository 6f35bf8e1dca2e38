//! Raw slice kernels shared by the tape and by tape-free inference code.

use crate::counters;

pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `c[m×n] (+)= op(a) · op(b)` where `op` optionally transposes.
///
/// `a` is stored as `m×k` (or `k×m` when `trans_a`), `b` as `k×n` (or `n×k`
/// when `trans_b`). With `accumulate` false, `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    counters::add_macs((m * k * n) as u64);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths checked above; strides describe in-bounds
    // row-major layouts of the given extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, false, b, false, &mut c, false);
    c
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Normalizes each row of length `d`; returns `(out, mean, rstd)` where `out`
/// already has `gamma`/`beta` applied.
pub fn layernorm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// Softmax along one axis of a tensor viewed as `outer × len × inner`.
pub fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    out
}

/// Window extents used when pooling `h×w` down to `out_h×out_w`.
///
/// Windows tile the top-left `(h / out_h)·out_h × (w / out_w)·out_w` region;
/// trailing rows and columns are dropped.
pub fn pool_windows(h: usize, w: usize, out_h: usize, out_w: usize) -> (usize, usize) {
    (h / out_h, w / out_w)
}

/// Average pooling of `n` planes of `h×w` into `out_h×out_w`.
pub fn avg_pool2d(x: &[f64], n: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let (kh, kw) = pool_windows(h, w, out_h, out_w);
    let area = (kh * kw) as f64;
    let mut out = vec![0.0; n * out_h * out_w];
    for p in 0..n {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut s = 0.0;
                for y in oy * kh..(oy + 1) * kh {
                    let row = &plane[y * w + ox * kw..y * w + (ox + 1) * kw];
                    s += row.iter().sum::<f64>();
                }
                out[(p * out_h + oy) * out_w + ox] = s / area;
            }
        }
    }
    out
}

/// Bilinear resize of one `h×w` plane to `out_h×out_w`, half-pixel centers
/// (`align_corners = false`), edge-clamped.
pub fn bilinear_resize(x: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    counters::add_upsample_call();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = x[y0 * w + x0] * (1.0 - tx) + x[y0 * w + x1] * tx;
            let bot = x[y1 * w + x0] * (1.0 - tx) + x[y1 * w + x1] * tx;
            out[oy * out_w + ox] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Numerically stable `-[y·log σ(z) + (1-y)·log(1-σ(z))]`.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
