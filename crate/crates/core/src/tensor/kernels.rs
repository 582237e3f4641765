//! Raw f64 math kernels shared by forward and backward rules.
//!
//! All matrices are dense row-major slices. The three matmul variants cover
//! every product the backward rules need without materializing transposes.

/// C[m,n] = A[m,k] · B[k,n]
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ  (rows of B are the columns of the product)
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            let e = (v - max).exp();
            *ov = e;
            sum += e;
        }
        for ov in o.iter_mut() {
            *ov /= sum;
        }
    }
    out
}

/// Softmax over the unmasked columns of each row; masked columns get exact 0.
/// `mask[j] == true` marks a live column. Returns None if a row has no live
/// column to normalize over.
pub fn masked_softmax_rows(x: &[f64], rows: usize, cols: usize, mask: &[bool]) -> Option<Vec<f64>> {
    if !mask.iter().any(|&m| m) {
        return None;
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for ((ov, &v), &m) in o.iter_mut().zip(row).zip(mask) {
            if m {
                let e = (v - max).exp();
                *ov = e;
                sum += e;
            }
        }
        for ov in o.iter_mut() {
            *ov /= sum;
        }
    }
    Some(out)
}

/// log(Σ exp(row)) with max subtraction, per row.
pub fn log_sum_exp_row(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn conv1d_out_len(l: usize, width: usize, pad_l: usize, pad_r: usize) -> usize {
    (l + pad_l + pad_r).saturating_sub(width - 1)
}

/// 1-D convolution over the sequence axis.
///
/// `input` is L×c_in, `weight` is [c_out, width, c_in], `bias` is c_out.
/// Zero padding of `pad_l`/`pad_r` rows on each end; see [`conv1d_out_len`]
/// for the output length.
pub fn conv1d_padded(
    input: &[f64],
    l: usize,
    c_in: usize,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    width: usize,
    pad_l: usize,
    pad_r: usize,
) -> Vec<f64> {
    let out_len = conv1d_out_len(l, width, pad_l, pad_r);
    let mut out = vec![0.0; out_len * c_out];
    for pos in 0..out_len {
        for co in 0..c_out {
            let w_f = &weight[co * width * c_in..(co + 1) * width * c_in];
            let mut acc = bias[co];
            for dm in 0..width {
                // input row index, shifted left by the padding
                let src = (pos + dm) as isize - pad_l as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let in_row = &input[src as usize * c_in..(src as usize + 1) * c_in];
                let w_row = &w_f[dm * c_in..(dm + 1) * c_in];
                for (&iv, &wv) in in_row.iter().zip(w_row) {
                    acc += iv * wv;
                }
            }
            out[pos * c_out + co] = acc;
        }
    }
    out
}

/// Backward of [`conv1d_padded`] w.r.t. input, weight and bias.
pub fn conv1d_backward(
    d_out: &[f64],
    input: &[f64],
    l: usize,
    c_in: usize,
    weight: &[f64],
    c_out: usize,
    width: usize,
    pad_l: usize,
    pad_r: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out_len = conv1d_out_len(l, width, pad_l, pad_r);
    let mut d_in = vec![0.0; l * c_in];
    let mut d_w = vec![0.0; c_out * width * c_in];
    let mut d_b = vec![0.0; c_out];
    for pos in 0..out_len {
        for co in 0..c_out {
            let g = d_out[pos * c_out + co];
            if g == 0.0 {
                continue;
            }
            d_b[co] += g;
            for dm in 0..width {
                let src = (pos + dm) as isize - pad_l as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let src = src as usize;
                let w_off = co * width * c_in + dm * c_in;
                for ci in 0..c_in {
                    d_in[src * c_in + ci] += g * weight[w_off + ci];
                    d_w[w_off + ci] += g * input[src * c_in + ci];
                }
            }
        }
    }
    (d_in, d_w, d_b)
}

/// Max-pool window 3 / stride 2 over rows, output length ⌈L/2⌉.
/// Windows starting past the end are clipped, which matches right-padding
/// with −∞. Returns (values, argmax row per output cell).
pub fn halving_pool(input: &[f64], l: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let out_len = l.div_ceil(2);
    let mut out = vec![0.0; out_len * c];
    let mut arg = vec![0usize; out_len * c];
    for k in 0..out_len {
        let start = 2 * k;
        let end = (start + 3).min(l);
        for ch in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_row = start;
            for row in start..end {
                let v = input[row * c + ch];
                if v > best {
                    best = v;
                    best_row = row;
                }
            }
            out[k * c + ch] = best;
            arg[k * c + ch] = best_row;
        }
    }
    (out, arg)
}

/// Column-wise max over all rows; ties resolve to the first row.
pub fn global_max_rows(input: &[f64], l: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![f64::NEG_INFINITY; c];
    let mut arg = vec![0usize; c];
    for row in 0..l {
        for ch in 0..c {
            let v = input[row * c + ch];
            if v > out[ch] {
                out[ch] = v;
                arg[ch] = row;
            }
        }
    }
    (out, arg)
}
