//! Query-aware chunk selection.
//!
//! Every head picks its own set of at most `k` sealed chunks for each query:
//! the first chunk and the most recent sealed chunk are always taken, and the
//! remaining `k - 2` slots go to the candidates whose representations have the
//! largest dot product with the query. The ablation policies swap out how
//! those slots are filled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HeadConstraint, SelectionPolicy};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::repr::ChunkRepr;

/// `(chunk, q . c)` pairs.
pub type Scores = Vec<(usize, f32)>;

/// Chunks chosen by one head for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSet {
    pub layer: usize,
    pub head: usize,
    pub query_token: usize,
    /// Strictly ascending chunk indices.
    pub chunks: Vec<usize>,
    /// `(chunk, q . c)` for every non-mandatory candidate, in candidate order.
    pub scores: Scores,
}

impl SelectionSet {
    pub fn empty(layer: usize, head: usize, query_token: usize) -> Self {
        Self {
            layer,
            head,
            query_token,
            chunks: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn contains(&self, chunk: usize) -> bool {
        self.chunks.binary_search(&chunk).is_ok()
    }
}

/// Candidates ranked best first: score descending, lower chunk index on ties.
pub fn rank_candidates(scores: &[(usize, f32)]) -> Vec<usize> {
    let mut ranked: Vec<(usize, f32)> = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().map(|(c, _)| c).collect()
}

/// Core selection over an explicit candidate list.
///
/// `first` is `None` when the first chunk is not mandatory. Candidates equal
/// to a mandatory chunk are ignored. Returns the ascending chunk list and the
/// per-candidate scores.
pub fn select_among<R: Rng + ?Sized>(
    query: &[f32],
    candidates: &[(usize, &[f32])],
    first: Option<usize>,
    last: usize,
    k: usize,
    policy: SelectionPolicy,
    rng: &mut R,
) -> Result<(Vec<usize>, Scores)> {
    if k < 2 {
        return Err(Error::BudgetTooSmall(k));
    }
    if query.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !query.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("query"));
    }
    let mut mandatory: Vec<usize> = first.into_iter().chain([last]).collect();
    mandatory.dedup();

    let mut scores = Vec::with_capacity(candidates.len());
    for &(chunk, repr) in candidates {
        if repr.is_empty() {
            return Err(Error::EmptyChunk);
        }
        if repr.len() != query.len() {
            return Err(Error::shape(
                format!("representation of width {}", query.len()),
                format!("chunk {chunk} of width {}", repr.len()),
            ));
        }
        if !mandatory.contains(&chunk) {
            scores.push((chunk, dot(query, repr)));
        }
    }

    let slots = k.saturating_sub(mandatory.len()).min(scores.len());
    let picked: Vec<usize> = match policy {
        SelectionPolicy::TopK | SelectionPolicy::NoFirst => {
            rank_candidates(&scores).into_iter().take(slots).collect()
        }
        SelectionPolicy::Random => rand::seq::index::sample(rng, scores.len(), slots)
            .into_iter()
            .map(|i| scores[i].0)
            .collect(),
        SelectionPolicy::LastK => {
            let mut ids: Vec<usize> = scores.iter().map(|s| s.0).collect();
            ids.sort_unstable_by(|a, b| b.cmp(a));
            ids.truncate(slots);
            ids
        }
    };

    let mut chunks = mandatory;
    chunks.extend(picked);
    chunks.sort_unstable();
    chunks.dedup();
    Ok((chunks, scores))
}

/// Selects among sealed chunks `reprs` (ascending by chunk index) for one query.
///
/// The first entry is the mandatory first chunk (except under
/// [`SelectionPolicy::NoFirst`], where it competes with the other
/// candidates), and the last entry is the mandatory most-recent chunk.
pub fn select<R: Rng + ?Sized>(
    (layer, head, query_token): (usize, usize, usize),
    query: &[f32],
    reprs: &[ChunkRepr],
    k: usize,
    policy: SelectionPolicy,
    rng: &mut R,
) -> Result<SelectionSet> {
    if k < 2 {
        return Err(Error::BudgetTooSmall(k));
    }
    let (Some(first), Some(last)) = (reprs.first(), reprs.last()) else {
        return Ok(SelectionSet::empty(layer, head, query_token));
    };
    let first = (policy != SelectionPolicy::NoFirst).then_some(first.chunk);
    let candidates: Vec<(usize, &[f32])> = reprs
        .iter()
        .map(|r| (r.chunk, r.c.as_slice()))
        .collect();
    let (chunks, scores) = select_among(query, &candidates, first, last.chunk, k, policy, rng)?;
    Ok(SelectionSet {
        layer,
        head,
        query_token,
        chunks,
        scores,
    })
}

/// Replaces `base`'s chunks with those of the canonical unit the constraint
/// points at (head 0 of the same layer, the same head of layer 0, or head 0
/// of layer 0).
pub fn apply_head_constraints(
    base: SelectionSet,
    mode: HeadConstraint,
    reference: Option<&SelectionSet>,
) -> Result<SelectionSet> {
    let (want_layer, want_head) = match mode {
        HeadConstraint::None => return Ok(base),
        HeadConstraint::FixHead => (base.layer, 0),
        HeadConstraint::FixLayer => (0, base.head),
        HeadConstraint::FixHeadAndLayer => (0, 0),
    };
    let reference = reference
        .filter(|r| r.layer == want_layer && r.head == want_head)
        .ok_or_else(|| {
            Error::MissingReference(format!("layer {want_layer} head {want_head}"))
        })?;
    Ok(SelectionSet {
        chunks: reference.chunks.clone(),
        ..base
    })
}

/// Deterministic per-(layer, head, step) stream for the random policy.
pub fn selection_rng(seed: u64, layer: usize, head: usize, step: usize) -> ChaCha8Rng {
    // splitmix64 finalizer over the packed coordinates
    let mut z = seed
        ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (head as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (step as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}
