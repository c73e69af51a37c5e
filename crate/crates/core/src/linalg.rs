//! Row-wise dense kernels.
//!
//! Every product is computed one row at a time in a fixed summation order,
//! so a token's result is bit-identical whether it is processed alone or
//! inside a batch. The oracle-equivalence checks rely on that.

use ndarray::{Array2, ArrayView2};

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out = x * w` for a single row `x` (len = w.nrows()).
pub(crate) fn vecmat(x: &[f32], w: ArrayView2<'_, f32>, out: &mut [f32]) {
    debug_assert_eq!(x.len(), w.nrows());
    debug_assert_eq!(out.len(), w.ncols());
    out.fill(0.0);
    for (xi, wrow) in x.iter().zip(w.rows()) {
        if *xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(wrow.iter()) {
            *o += xi * wv;
        }
    }
}

/// Row-by-row `x * w`.
pub(crate) fn matmul_rows(x: ArrayView2<'_, f32>, w: ArrayView2<'_, f32>) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((x.nrows(), w.ncols()));
    for (xr, mut or) in x.rows().into_iter().zip(out.rows_mut()) {
        let xs = xr.to_vec();
        vecmat(
            &xs,
            w,
            or.as_slice_mut().expect("fresh arrays are contiguous"),
        );
    }
    out
}

pub(crate) fn rms_norm_rows(x: ArrayView2<'_, f32>) -> Array2<f32> {
    const EPS: f32 = 1e-5;
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
        let scale = 1.0 / (ms + EPS).sqrt();
        row.mapv_inplace(|v| v * scale);
    }
    out
}

pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Numerically stable softmax in place.
pub(crate) fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Single-query scaled dot-product attention over `keys`/`values` stored as
/// consecutive `d`-wide rows. Writes the weighted value sum into `out` and
/// leaves the softmax weights in `weights`.
pub(crate) fn attend_one(
    query: &[f32],
    keys: &[f32],
    values: &[f32],
    d: usize,
    weights: &mut Vec<f32>,
    out: &mut [f32],
) {
    let scale = 1.0 / (query.len() as f32).sqrt();
    weights.clear();
    weights.extend(keys.chunks_exact(query.len()).map(|k| dot(query, k) * scale));
    softmax_in_place(weights);
    out.fill(0.0);
    for (w, v) in weights.iter().zip(values.chunks_exact(d)) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
}
