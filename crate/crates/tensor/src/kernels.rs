//! Raw numeric loops. Inner loops are written in `y += a * x` form so the
//! compiler can vectorize them without reassociating floating-point sums.

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

/// `out[k×n] += aᵀ · g` with `a[m×k]`, `g[m×n]`.
pub fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, grow, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` with `b[k×n]`.
pub fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut bt = vec![0.0; k * n];
    transpose(b, k, n, &mut bt);
    matmul_acc(g, &bt, m, n, k, out);
}

/// Local window `[start, end)` of length `min(window, len)` for position `i`,
/// shifted inward at the sequence edges so it never leaves `[0, len)`.
pub fn window_bounds(i: usize, window: usize, len: usize) -> (usize, usize) {
    let w = window.clamp(1, len);
    let half = w / 2;
    let start = i.saturating_sub(half).min(len - w);
    (start, start + w)
}

/// Banded single-head attention. Returns output and the per-row weights
/// (row `i` holds weights for keys `window_bounds(i)`).
pub struct AttentionCache {
    pub starts: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
}

pub fn local_attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    dk: usize,
    dv: usize,
    window: usize,
    out: &mut [f64],
) -> AttentionCache {
    let scale = 1.0 / (dk as f64).sqrt();
    let mut kt = vec![0.0; t * dk];
    transpose(k, t, dk, &mut kt);
    let mut starts = Vec::with_capacity(t);
    let mut weights = Vec::with_capacity(t);
    for i in 0..t {
        let (s, e) = window_bounds(i, window, t);
        let mut scores = vec![0.0; e - s];
        let qrow = &q[i * dk..(i + 1) * dk];
        for (d, &qv) in qrow.iter().enumerate() {
            axpy(qv * scale, &kt[d * t + s..d * t + e], &mut scores);
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in scores.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        let orow = &mut out[i * dv..(i + 1) * dv];
        for (j, x) in scores.iter_mut().enumerate() {
            *x /= total;
            axpy(*x, &v[(s + j) * dv..(s + j + 1) * dv], orow);
        }
        starts.push(s);
        weights.push(scores);
    }
    AttentionCache { starts, weights }
}

#[allow(clippy::too_many_arguments)]
pub fn local_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    cache: &AttentionCache,
    grad_out: &[f64],
    t: usize,
    dk: usize,
    dv: usize,
    dq: &mut [f64],
    dk_out: &mut [f64],
    dv_out: &mut [f64],
) {
    let scale = 1.0 / (dk as f64).sqrt();
    let mut vt = vec![0.0; t * dv];
    transpose(v, t, dv, &mut vt);
    for i in 0..t {
        let s = cache.starts[i];
        let a = &cache.weights[i];
        let w = a.len();
        let go = &grad_out[i * dv..(i + 1) * dv];
        let mut da = vec![0.0; w];
        for (d, &g) in go.iter().enumerate() {
            if g != 0.0 {
                axpy(g, &vt[d * t + s..d * t + s + w], &mut da);
            }
        }
        let inner: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
        let qrow = &q[i * dk..(i + 1) * dk];
        for j in 0..w {
            axpy(a[j], go, &mut dv_out[(s + j) * dv..(s + j + 1) * dv]);
            let ds = a[j] * (da[j] - inner) * scale;
            if ds != 0.0 {
                axpy(ds, &k[(s + j) * dk..(s + j + 1) * dk], &mut dq[i * dk..(i + 1) * dk]);
                axpy(ds, qrow, &mut dk_out[(s + j) * dk..(s + j + 1) * dk]);
            }
        }
    }
}

/// Offsets of the taps of a centred kernel of odd length `taps`.
fn tap_offset(tap: usize, taps: usize, dilation: usize) -> isize {
    (tap as isize - (taps / 2) as isize) * dilation as isize
}

/// Length-preserving dilated convolution over time with zero padding.
/// `x[t×cin]`, `w[taps×cin×cout]`, `out[t×cout]`.
pub fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    t: usize,
    cin: usize,
    cout: usize,
    taps: usize,
    dilation: usize,
    out: &mut [f64],
) {
    for tap in 0..taps {
        let off = tap_offset(tap, taps, dilation);
        let wt = &w[tap * cin * cout..(tap + 1) * cin * cout];
        for ti in 0..t {
            let src = ti as isize + off;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            let xrow = &x[src * cin..(src + 1) * cin];
            let orow = &mut out[ti * cout..(ti + 1) * cout];
            for (c, &xv) in xrow.iter().enumerate() {
                if xv != 0.0 {
                    axpy(xv, &wt[c * cout..(c + 1) * cout], orow);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    t: usize,
    cin: usize,
    cout: usize,
    taps: usize,
    dilation: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        let mut wt_t = vec![0.0; cin * cout];
        for tap in 0..taps {
            let off = tap_offset(tap, taps, dilation);
            transpose(&w[tap * cin * cout..(tap + 1) * cin * cout], cin, cout, &mut wt_t);
            for ti in 0..t {
                let src = ti as isize + off;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let go = &grad_out[ti * cout..(ti + 1) * cout];
                let dxrow = &mut dx[src * cin..(src + 1) * cin];
                for (o, &g) in go.iter().enumerate() {
                    if g != 0.0 {
                        axpy(g, &wt_t[o * cin..(o + 1) * cin], dxrow);
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        for tap in 0..taps {
            let off = tap_offset(tap, taps, dilation);
            let dwt = &mut dw[tap * cin * cout..(tap + 1) * cin * cout];
            for ti in 0..t {
                let src = ti as isize + off;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let go = &grad_out[ti * cout..(ti + 1) * cout];
                for (c, &xv) in x[src * cin..(src + 1) * cin].iter().enumerate() {
                    if xv != 0.0 {
                        axpy(xv, go, &mut dwt[c * cout..(c + 1) * cout]);
                    }
                }
            }
        }
    }
}
