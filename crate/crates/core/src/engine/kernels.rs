//! Forward and backward kernels on plain slices.
//!
//! Every kernel accumulates each output element in an order that depends
//! only on that element's own inputs, never on how many rows are computed
//! at once. Streaming inference relies on this: evaluating a chunk of rows
//! produces the same bits as evaluating the whole sequence.

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_t(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `out[k,n] = a[m,k]ᵀ · b[m,n]`
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

pub struct LayerNormOut {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_rows(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> LayerNormOut {
    let cols = gamma.len();
    let rows = x.len() / cols;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for c in 0..cols {
            let h = (row[c] - mean) * is;
            xhat[r * cols + c] = h;
            y[r * cols + c] = h * gamma[c] + beta[c];
        }
    }
    LayerNormOut { y, xhat, inv_std }
}

/// Output length of a strided, explicitly padded window op.
pub fn conv_out_len(
    len: usize,
    kernel: usize,
    stride: usize,
    pad_l: usize,
    pad_r: usize,
) -> Option<usize> {
    let padded = len + pad_l + pad_r;
    if stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub len: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_l: usize,
    pub pad_r: usize,
    pub out_len: usize,
}

impl Conv1dGeom {
    #[inline]
    fn src(&self, t: usize, kk: usize) -> Option<usize> {
        let pos = (t * self.stride + kk) as isize - self.pad_l as isize;
        (pos >= 0 && (pos as usize) < self.len).then_some(pos as usize)
    }
}

/// x: [len, cin], w: [kernel, cin, cout], b: [cout] -> [out_len, cout]
pub fn conv1d(x: &[f64], w: &[f64], b: &[f64], g: &Conv1dGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.out_len * g.cout];
    for t in 0..g.out_len {
        let orow = &mut out[t * g.cout..(t + 1) * g.cout];
        orow.copy_from_slice(b);
        for kk in 0..g.kernel {
            let Some(src) = g.src(t, kk) else { continue };
            let xrow = &x[src * g.cin..(src + 1) * g.cin];
            for (ci, &xv) in xrow.iter().enumerate() {
                let wrow = &w[(kk * g.cin + ci) * g.cout..(kk * g.cin + ci + 1) * g.cout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
    out
}

/// Returns (dx, dw, db).
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    g: &Conv1dGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.cout];
    for t in 0..g.out_len {
        let grow = &grad[t * g.cout..(t + 1) * g.cout];
        for (d, &gv) in db.iter_mut().zip(grow) {
            *d += gv;
        }
        for kk in 0..g.kernel {
            let Some(src) = g.src(t, kk) else { continue };
            for ci in 0..g.cin {
                let widx = (kk * g.cin + ci) * g.cout;
                let wrow = &w[widx..widx + g.cout];
                let xv = x[src * g.cin + ci];
                let mut acc = 0.0;
                for co in 0..g.cout {
                    acc += grow[co] * wrow[co];
                    dw[widx + co] += xv * grow[co];
                }
                dx[src * g.cin + ci] += acc;
            }
        }
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub time: Conv1dGeom,
    pub freq: usize,
    pub kernel_f: usize,
    pub stride_f: usize,
    pub pad_f: usize,
    pub out_freq: usize,
}

impl Conv2dGeom {
    #[inline]
    fn src_f(&self, f: usize, kf: usize) -> Option<usize> {
        let pos = (f * self.stride_f + kf) as isize - self.pad_f as isize;
        (pos >= 0 && (pos as usize) < self.freq).then_some(pos as usize)
    }
}

/// x: [len, freq, cin], w: [kt, kf, cin, cout], b: [cout] -> [out_len, out_freq, cout].
/// Frequency padding is symmetric (`pad_f` on both sides).
pub fn conv2d(x: &[f64], w: &[f64], b: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let tg = &g.time;
    let (cin, cout) = (tg.cin, tg.cout);
    let mut out = vec![0.0; tg.out_len * g.out_freq * cout];
    for t in 0..tg.out_len {
        for f in 0..g.out_freq {
            let obase = (t * g.out_freq + f) * cout;
            let orow = &mut out[obase..obase + cout];
            orow.copy_from_slice(b);
            for kt in 0..tg.kernel {
                let Some(st) = tg.src(t, kt) else { continue };
                for kf in 0..g.kernel_f {
                    let Some(sf) = g.src_f(f, kf) else { continue };
                    let xbase = (st * g.freq + sf) * cin;
                    for ci in 0..cin {
                        let xv = x[xbase + ci];
                        let wbase = ((kt * g.kernel_f + kf) * cin + ci) * cout;
                        for (o, &wv) in orow.iter_mut().zip(&w[wbase..wbase + cout]) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    g: &Conv2dGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let tg = &g.time;
    let (cin, cout) = (tg.cin, tg.cout);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for t in 0..tg.out_len {
        for f in 0..g.out_freq {
            let gbase = (t * g.out_freq + f) * cout;
            let grow = &grad[gbase..gbase + cout];
            for (d, &gv) in db.iter_mut().zip(grow) {
                *d += gv;
            }
            for kt in 0..tg.kernel {
                let Some(st) = tg.src(t, kt) else { continue };
                for kf in 0..g.kernel_f {
                    let Some(sf) = g.src_f(f, kf) else { continue };
                    let xbase = (st * g.freq + sf) * cin;
                    for ci in 0..cin {
                        let xv = x[xbase + ci];
                        let wbase = ((kt * g.kernel_f + kf) * cin + ci) * cout;
                        let mut acc = 0.0;
                        for co in 0..cout {
                            acc += grow[co] * w[wbase + co];
                            dw[wbase + co] += xv * grow[co];
                        }
                        dx[xbase + ci] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Numerically stable `log(exp(a) + exp(b))` with exact handling of -inf.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
