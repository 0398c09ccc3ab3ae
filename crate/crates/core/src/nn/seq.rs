//! Row-level sequence kernels shared between the autodiff tape and the
//! incremental rollout paths. Training evaluates whole sequences through
//! tape ops and rollout evaluates one step at a time; both call into these
//! functions so the two paths agree bit for bit.

use super::act::sigmoid;
use super::linalg::dot;
use super::tensor::Tensor;

/// Project `x + offset` onto the sphere of radius `scale`:
/// `out = scale * (x + offset) / |x + offset|`. Returns the pre-projection
/// norm so callers can reject near-zero inputs.
pub fn hypersphere_row(x: &[f64], offset: &[f64], scale: f64, out: &mut [f64]) -> f64 {
    debug_assert_eq!(x.len(), offset.len());
    debug_assert_eq!(x.len(), out.len());
    let mut sq = 0.0;
    for ((o, &xv), &pv) in out.iter_mut().zip(x).zip(offset) {
        let u = xv + pv;
        *o = u;
        sq = u.mul_add(u, sq);
    }
    let norm = sq.sqrt();
    if norm > 0.0 {
        let s = scale / norm;
        for o in out.iter_mut() {
            *o *= s;
        }
    }
    norm
}

/// One LSTM cell step. `w_ih` is `n x 4h`, `w_hh` is `h x 4h`, `b` has `4h`
/// entries; gate blocks are ordered input, forget, cell, output. Writes the
/// new hidden/cell rows and, when `gates_out` is given, the post-activation
/// gate values needed for backprop.
pub fn lstm_cell(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    w_ih: &Tensor,
    w_hh: &Tensor,
    b: &[f64],
    h_out: &mut [f64],
    c_out: &mut [f64],
    mut gates_out: Option<&mut [f64]>,
) {
    let h = h_prev.len();
    debug_assert_eq!(w_ih.shape(), &[x.len(), 4 * h]);
    debug_assert_eq!(w_hh.shape(), &[h, 4 * h]);
    debug_assert_eq!(b.len(), 4 * h);

    let mut z = b.to_vec();
    let wih = w_ih.as_slice();
    for (k, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = &wih[k * 4 * h..(k + 1) * 4 * h];
        for (zv, &wv) in z.iter_mut().zip(row) {
            *zv = xv.mul_add(wv, *zv);
        }
    }
    let whh = w_hh.as_slice();
    for (k, &hv) in h_prev.iter().enumerate() {
        if hv == 0.0 {
            continue;
        }
        let row = &whh[k * 4 * h..(k + 1) * 4 * h];
        for (zv, &wv) in z.iter_mut().zip(row) {
            *zv = hv.mul_add(wv, *zv);
        }
    }

    for j in 0..h {
        let i_g = sigmoid(z[j]);
        let f_g = sigmoid(z[h + j]);
        let g_g = z[2 * h + j].tanh();
        let o_g = sigmoid(z[3 * h + j]);
        let c_new = f_g * c_prev[j] + i_g * g_g;
        c_out[j] = c_new;
        h_out[j] = o_g * c_new.tanh();
        if let Some(g) = gates_out.as_deref_mut() {
            g[j] = i_g;
            g[h + j] = f_g;
            g[2 * h + j] = g_g;
            g[3 * h + j] = o_g;
        }
    }
}

/// Scaled dot-product attention of one query over `t_len` cached key/value
/// rows (flat `t_len x dim` buffers). Softmax is computed with the usual
/// max shift. `probs` is scratch, resized as needed; it holds the attention
/// weights on return so the backward pass can reuse this function.
pub fn attn_row(
    q: &[f64],
    keys: &[f64],
    vals: &[f64],
    t_len: usize,
    scale: f64,
    out: &mut [f64],
    probs: &mut Vec<f64>,
) {
    let dim = q.len();
    debug_assert!(t_len > 0, "attention over an empty cache");
    debug_assert_eq!(keys.len(), t_len * dim);
    debug_assert_eq!(vals.len(), t_len * dim);
    probs.clear();
    probs.reserve(t_len);
    let mut max = f64::NEG_INFINITY;
    for j in 0..t_len {
        let s = dot(q, &keys[j * dim..(j + 1) * dim]) * scale;
        probs.push(s);
        if s > max {
            max = s;
        }
    }
    let mut z = 0.0;
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        z += *p;
    }
    let inv = 1.0 / z;
    out.fill(0.0);
    for (j, p) in probs.iter_mut().enumerate() {
        *p *= inv;
        let vrow = &vals[j * dim..(j + 1) * dim];
        for (o, &vv) in out.iter_mut().zip(vrow) {
            *o = p.mul_add(vv, *o);
        }
    }
}

/// Layer norm of a single row with learned gain and bias; returns
/// `(mean, inv_std)` for reuse in backprop.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let mut var = 0.0;
    for &v in x {
        let d = v - mean;
        var = d.mul_add(d, var);
    }
    var /= n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    for ((o, &xv), (&g, &b)) in out.iter_mut().zip(x).zip(gain.iter().zip(bias)) {
        *o = (xv - mean) * inv_std * g + b;
    }
    (mean, inv_std)
}

pub const LN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hypersphere_row_has_requested_norm() {
        let x = [3.0, 0.0, -4.0];
        let psi = [0.0, 1.0, 0.0];
        let mut out = [0.0; 3];
        let norm = hypersphere_row(&x, &psi, 2.0, &mut out);
        assert!((norm - (9.0f64 + 1.0 + 16.0).sqrt()).abs() < 1e-12);
        let got: f64 = out.iter().map(|v| v * v).sum::<f64>();
        assert!((got.sqrt() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn attn_row_weights_sum_to_one_and_interpolate() {
        let q = [1.0, 0.0];
        let keys = [5.0, 0.0, -5.0, 0.0];
        let vals = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 2];
        let mut probs = Vec::new();
        attn_row(&q, &keys, &vals, 2, 1.0, &mut out, &mut probs);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // First key dominates, so output is close to the first value row.
        assert!((out[0] - 1.0).abs() < 1e-3 && (out[1] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn layer_norm_row_standardizes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let gain = [1.0; 4];
        let bias = [0.0; 4];
        let mut out = [0.0; 4];
        layer_norm_row(&x, &gain, &bias, &mut out);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // off by the stabilizer epsilon
    }
}
