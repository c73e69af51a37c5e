//! Chunk summaries built from the attention's own states.
//!
//! A chunk's query vector is the mean of its bidirectional self-attention
//! outputs; its representation is that query attending over the chunk's keys,
//! with the keys serving as values too. The representation is therefore a
//! convex combination of the chunk's key rows. Neither step uses positions.

use ndarray::ArrayView2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{attend_one, dot};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkRepr {
    pub layer: usize,
    pub head: usize,
    pub chunk: usize,
    /// The representation compared against queries during selection.
    pub c: Vec<f32>,
    /// The chunk query that weighted the keys into `c`.
    pub q_c: Vec<f32>,
    /// Softmax weights over the chunk's key rows; kept only in debug mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f32>>,
}

fn check_nonempty(m: &ArrayView2<'_, f32>) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        Err(Error::EmptyChunk)
    } else {
        Ok(())
    }
}

fn check_finite(xs: &[f32], what: &'static str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Mean over rows of `softmax(Q K^T / sqrt(d)) V`, with no causal mask.
pub fn chunk_query(
    q: ArrayView2<'_, f32>,
    k: ArrayView2<'_, f32>,
    v: ArrayView2<'_, f32>,
) -> Result<Vec<f32>> {
    check_nonempty(&q)?;
    if k.dim() != q.dim() || v.nrows() != q.nrows() {
        return Err(Error::shape(
            format!("Q, K and V with {} rows x {} cols", q.nrows(), q.ncols()),
            format!("K {:?}, V {:?}", k.dim(), v.dim()),
        ));
    }
    let rows = q.nrows();
    let dv = v.ncols();
    let k = k.as_standard_layout();
    let v = v.as_standard_layout();
    let keys = k.as_slice().unwrap();
    let values = v.as_slice().unwrap();
    let mut weights = Vec::with_capacity(rows);
    let mut out = vec![0.0f32; dv];
    let mut sum = vec![0.0f32; dv];
    for qr in q.rows() {
        let qs = qr.to_vec();
        attend_one(&qs, keys, values, dv, &mut weights, &mut out);
        for (s, o) in sum.iter_mut().zip(&out) {
            *s += o;
        }
    }
    sum.iter_mut().for_each(|s| *s /= rows as f32);
    check_finite(&sum, "chunk query")?;
    Ok(sum)
}

/// `softmax(q_c K^T / sqrt(d)) K` together with the softmax weights.
pub fn chunk_representation_weighted(
    q_c: &[f32],
    k: ArrayView2<'_, f32>,
) -> Result<(Vec<f32>, Vec<f32>)> {
    check_nonempty(&k)?;
    if q_c.len() != k.ncols() {
        return Err(Error::shape(
            format!("query of width {}", k.ncols()),
            format!("width {}", q_c.len()),
        ));
    }
    let k = k.as_standard_layout();
    let keys = k.as_slice().unwrap();
    let mut weights = Vec::with_capacity(k.nrows());
    let mut c = vec![0.0f32; k.ncols()];
    attend_one(q_c, keys, keys, k.ncols(), &mut weights, &mut c);
    check_finite(&c, "chunk representation")?;
    Ok((c, weights))
}

pub fn chunk_representation(q_c: &[f32], k: ArrayView2<'_, f32>) -> Result<Vec<f32>> {
    chunk_representation_weighted(q_c, k).map(|(c, _)| c)
}

/// Column mean of the keys; the plain pooling alternative, kept for comparison.
pub fn mean_pool_baseline(k: ArrayView2<'_, f32>) -> Result<Vec<f32>> {
    check_nonempty(&k)?;
    let rows = k.nrows() as f32;
    Ok(k.columns()
        .into_iter()
        .map(|col| col.iter().sum::<f32>() / rows)
        .collect())
}

/// Runs both steps for one chunk of one head.
pub fn compute_repr(
    (layer, head, chunk): (usize, usize, usize),
    q: ArrayView2<'_, f32>,
    k: ArrayView2<'_, f32>,
    v: ArrayView2<'_, f32>,
    keep_weights: bool,
) -> Result<ChunkRepr> {
    let q_c = chunk_query(q, k, v)?;
    let (c, weights) = chunk_representation_weighted(&q_c, k)?;
    Ok(ChunkRepr {
        layer,
        head,
        chunk,
        c,
        q_c,
        weights: keep_weights.then_some(weights),
    })
}

/// Dot-product relevance of a chunk to a query.
pub fn score(query: &[f32], repr: &ChunkRepr) -> f32 {
    dot(query, &repr.c)
}
