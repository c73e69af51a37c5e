//! Per-(layer, head) chunked KV storage with a hot tier and an offload tier.
//!
//! Tokens accumulate in a recent buffer that also keeps their query rows.
//! When the buffer reaches the chunk size it is sealed: the chunk
//! representation is computed, the query rows are dropped, and the key/value
//! rows become an immutable slab. Slabs may live hot (as `f32` rows) or in
//! the offload tier (as encoded bytes that must be decoded on every use).
//! Representations and the recent buffer are always hot.
//!
//! Gathers count how many rows they materialize and how many of those had
//! to be loaded from the offload tier.

use std::hash::{DefaultHasher, Hasher};

use ndarray::ArrayView2;
use serde::Serialize;

use crate::config::ResidencyPolicy;
use crate::error::{Error, Result};
use crate::repr::{compute_repr, ChunkRepr};

#[derive(Debug, Clone)]
enum SlabData {
    Hot { k: Vec<f32>, v: Vec<f32> },
    Offloaded(Vec<u8>),
}

#[derive(Debug, Clone)]
struct Slab {
    data: SlabData,
    last_used: u64,
}

fn encode(k: &[f32], v: &[f32]) -> Vec<u8> {
    k.iter().chain(v).flat_map(|x| x.to_le_bytes()).collect()
}

fn decode(bytes: &[u8]) -> (Vec<f32>, Vec<f32>) {
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let half = vals.len() / 2;
    let v = vals[half..].to_vec();
    let mut k = vals;
    k.truncate(half);
    (k, v)
}

/// Row counters for one (layer, head) or summed over a whole store.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheCounters {
    /// Key/value rows handed to attention (selected slabs plus recent rows).
    pub rows_gathered: u64,
    /// Of those, rows decoded from the offload tier.
    pub rows_loaded: u64,
    pub slab_fetches: u64,
    pub evictions: u64,
}

impl CacheCounters {
    fn add(&mut self, other: &CacheCounters) {
        self.rows_gathered += other.rows_gathered;
        self.rows_loaded += other.rows_loaded;
        self.slab_fetches += other.slab_fetches;
        self.evictions += other.evictions;
    }
}

/// Key/value rows for one attention call, in selection order then recent rows.
#[derive(Debug, Clone, Default)]
pub struct Gathered {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    /// `(chunk, rows)` per segment; `None` marks the recent region.
    pub segments: Vec<(Option<usize>, usize)>,
}

impl Gathered {
    pub fn clear(&mut self) {
        self.k.clear();
        self.v.clear();
        self.segments.clear();
    }

    pub fn rows(&self) -> usize {
        self.segments.iter().map(|s| s.1).sum()
    }

    /// Source chunk of every row (`None` for recent rows).
    pub fn row_chunk_ids(&self) -> Vec<Option<usize>> {
        self.segments
            .iter()
            .flat_map(|&(c, n)| std::iter::repeat_n(c, n))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct HeadStore {
    layer: usize,
    head: usize,
    d: usize,
    chunk_size: usize,
    working_set: usize,
    keep_weights: bool,
    residency: ResidencyPolicy,
    slabs: Vec<Slab>,
    reprs: Vec<ChunkRepr>,
    recent_q: Vec<f32>,
    recent_k: Vec<f32>,
    recent_v: Vec<f32>,
    clock: u64,
    hot_slabs: usize,
    peak_hot_tokens: usize,
    step: CacheCounters,
    total: CacheCounters,
    eviction_log: Vec<usize>,
}

impl HeadStore {
    fn new(layer: usize, head: usize, d: usize, chunk_size: usize, working_set: usize) -> Self {
        Self {
            layer,
            head,
            d,
            chunk_size,
            working_set,
            keep_weights: false,
            residency: ResidencyPolicy::AllHot,
            slabs: Vec::new(),
            reprs: Vec::new(),
            recent_q: Vec::new(),
            recent_k: Vec::new(),
            recent_v: Vec::new(),
            clock: 0,
            hot_slabs: 0,
            peak_hot_tokens: 0,
            step: CacheCounters::default(),
            total: CacheCounters::default(),
            eviction_log: Vec::new(),
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn d_head(&self) -> usize {
        self.d
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn sealed_chunks(&self) -> usize {
        self.slabs.len()
    }

    pub fn reprs(&self) -> &[ChunkRepr] {
        &self.reprs
    }

    pub fn recent_len(&self) -> usize {
        self.recent_k.len() / self.d
    }

    /// Query rows currently retained; only unsealed tokens keep theirs.
    pub fn stored_q_rows(&self) -> usize {
        self.recent_q.len() / self.d
    }

    pub fn recent_keys(&self) -> &[f32] {
        &self.recent_k
    }

    pub fn recent_values(&self) -> &[f32] {
        &self.recent_v
    }

    pub fn hot_tokens(&self) -> usize {
        self.hot_slabs * self.chunk_size + self.recent_len()
    }

    pub fn peak_hot_tokens(&self) -> usize {
        self.peak_hot_tokens
    }

    pub fn step_counters(&self) -> CacheCounters {
        self.step
    }

    pub fn total_counters(&self) -> CacheCounters {
        self.total
    }

    /// Chunks evicted from the hot tier, in eviction order.
    pub fn eviction_log(&self) -> &[usize] {
        &self.eviction_log
    }

    pub fn is_hot(&self, chunk: usize) -> Option<bool> {
        self.slabs
            .get(chunk)
            .map(|s| matches!(s.data, SlabData::Hot { .. }))
    }

    fn note_peak(&mut self) {
        self.peak_hot_tokens = self.peak_hot_tokens.max(self.hot_tokens());
    }

    /// Adds one token. Returns the chunk id when this token completes a chunk.
    pub fn append_token(&mut self, q: &[f32], k: &[f32], v: &[f32]) -> Result<Option<usize>> {
        for (name, row) in [("q", q), ("k", k), ("v", v)] {
            if row.len() != self.d {
                return Err(Error::shape(
                    format!("{name} of width {}", self.d),
                    format!("width {}", row.len()),
                ));
            }
        }
        self.recent_q.extend_from_slice(q);
        self.recent_k.extend_from_slice(k);
        self.recent_v.extend_from_slice(v);
        self.note_peak();
        if self.recent_len() < self.chunk_size {
            return Ok(None);
        }
        self.seal().map(Some)
    }

    fn seal(&mut self) -> Result<usize> {
        let chunk = self.slabs.len();
        let rows = self.chunk_size;
        let shape = (rows, self.d);
        let repr = {
            let q = ArrayView2::from_shape(shape, &self.recent_q).expect("recent buffer shape");
            let k = ArrayView2::from_shape(shape, &self.recent_k).expect("recent buffer shape");
            let v = ArrayView2::from_shape(shape, &self.recent_v).expect("recent buffer shape");
            compute_repr((self.layer, self.head, chunk), q, k, v, self.keep_weights)?
        };
        self.reprs.push(repr);
        self.recent_q.clear();
        let k = std::mem::take(&mut self.recent_k);
        let v = std::mem::take(&mut self.recent_v);
        self.clock += 1;
        let data = match self.residency {
            ResidencyPolicy::AllOffloaded => SlabData::Offloaded(encode(&k, &v)),
            _ => {
                self.hot_slabs += 1;
                SlabData::Hot { k, v }
            }
        };
        self.slabs.push(Slab {
            data,
            last_used: self.clock,
        });
        self.note_peak();
        self.enforce_budget(&[]);
        Ok(chunk)
    }

    fn enforce_budget(&mut self, pinned: &[usize]) {
        let ResidencyPolicy::Budget(max_hot) = self.residency else {
            return;
        };
        while self.hot_slabs * self.chunk_size > max_hot {
            let victim = self
                .slabs
                .iter()
                .enumerate()
                .filter(|(i, s)| matches!(s.data, SlabData::Hot { .. }) && !pinned.contains(i))
                .min_by_key(|(i, s)| (s.last_used, *i))
                .map(|(i, _)| i);
            let Some(victim) = victim else { break };
            self.offload(victim);
            self.eviction_log.push(victim);
            self.step.evictions += 1;
            self.total.evictions += 1;
        }
    }

    fn offload(&mut self, chunk: usize) {
        let slab = &mut self.slabs[chunk];
        if let SlabData::Hot { k, v } = &slab.data {
            slab.data = SlabData::Offloaded(encode(k, v));
            self.hot_slabs -= 1;
        }
    }

    fn promote(&mut self, chunk: usize) {
        let slab = &mut self.slabs[chunk];
        if let SlabData::Offloaded(bytes) = &slab.data {
            let (k, v) = decode(bytes);
            slab.data = SlabData::Hot { k, v };
            self.hot_slabs += 1;
        }
    }

    pub fn set_residency(&mut self, policy: ResidencyPolicy) -> Result<()> {
        if let ResidencyPolicy::Budget(max_hot) = policy {
            if max_hot < self.working_set {
                return Err(Error::BudgetBelowWorkingSet {
                    budget: max_hot,
                    working_set: self.working_set,
                });
            }
        }
        self.residency = policy;
        match policy {
            ResidencyPolicy::AllHot => (0..self.slabs.len()).for_each(|c| self.promote(c)),
            ResidencyPolicy::AllOffloaded => (0..self.slabs.len()).for_each(|c| self.offload(c)),
            ResidencyPolicy::Budget(_) => self.enforce_budget(&[]),
        }
        Ok(())
    }

    pub fn begin_step(&mut self) {
        self.step = CacheCounters::default();
    }

    /// Copies the key/value rows of `chunks` (ascending) and optionally the
    /// recent buffer into `out`.
    pub fn gather_into(&mut self, chunks: &[usize], include_recent: bool, out: &mut Gathered) -> Result<()> {
        out.clear();
        let sealed = self.slabs.len();
        if let Some(&chunk) = chunks.iter().find(|&&c| c >= sealed) {
            return Err(Error::UnknownChunk { chunk, sealed });
        }
        self.clock += 1;
        let mut counters = CacheCounters::default();
        for &chunk in chunks {
            let slab = &mut self.slabs[chunk];
            slab.last_used = self.clock;
            match &slab.data {
                SlabData::Hot { k, v } => {
                    out.k.extend_from_slice(k);
                    out.v.extend_from_slice(v);
                }
                SlabData::Offloaded(bytes) => {
                    let (k, v) = decode(bytes);
                    out.k.extend_from_slice(&k);
                    out.v.extend_from_slice(&v);
                    counters.rows_loaded += self.chunk_size as u64;
                    counters.slab_fetches += 1;
                }
            }
            out.segments.push((Some(chunk), self.chunk_size));
        }
        if include_recent && self.recent_len() > 0 {
            out.k.extend_from_slice(&self.recent_k);
            out.v.extend_from_slice(&self.recent_v);
            out.segments.push((None, self.recent_len()));
        }
        counters.rows_gathered = out.rows() as u64;
        self.step.add(&counters);
        self.total.add(&counters);
        if matches!(self.residency, ResidencyPolicy::Budget(_)) {
            for &chunk in chunks {
                self.promote(chunk);
            }
            self.note_peak();
            self.enforce_budget(chunks);
        }
        Ok(())
    }

    pub fn gather(&mut self, chunks: &[usize], include_recent: bool) -> Result<Gathered> {
        let mut out = Gathered::default();
        self.gather_into(chunks, include_recent, &mut out)?;
        Ok(out)
    }

    /// Every cached key/value row in token order, read without touching
    /// counters or residency.
    pub fn all_rows(&self) -> (Vec<f32>, Vec<f32>) {
        let mut k = Vec::with_capacity((self.slabs.len() * self.chunk_size + self.recent_len()) * self.d);
        let mut v = Vec::with_capacity(k.capacity());
        for slab in &self.slabs {
            match &slab.data {
                SlabData::Hot { k: sk, v: sv } => {
                    k.extend_from_slice(sk);
                    v.extend_from_slice(sv);
                }
                SlabData::Offloaded(bytes) => {
                    let (sk, sv) = decode(bytes);
                    k.extend_from_slice(&sk);
                    v.extend_from_slice(&sv);
                }
            }
        }
        k.extend_from_slice(&self.recent_k);
        v.extend_from_slice(&self.recent_v);
        (k, v)
    }

    /// Hash of a sealed slab's key and value bits, independent of residency.
    pub fn slab_checksum(&self, chunk: usize) -> Option<u64> {
        let slab = self.slabs.get(chunk)?;
        let (k, v) = match &slab.data {
            SlabData::Hot { k, v } => (k.clone(), v.clone()),
            SlabData::Offloaded(bytes) => decode(bytes),
        };
        let mut h = DefaultHasher::new();
        k.iter().chain(&v).for_each(|x| h.write_u32(x.to_bits()));
        Some(h.finish())
    }
}

/// Store for every (layer, head) of a model.
#[derive(Debug, Clone)]
pub struct ChunkStore {
    n_heads: usize,
    chunk_size: usize,
    heads: Vec<HeadStore>,
}

/// Dimensions a store is built for.
#[derive(Debug, Clone, Copy)]
pub struct StoreShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub chunk_size: usize,
    /// Selection budget k; the residency budget may not go below `k * l`.
    pub num_selected: usize,
}

impl ChunkStore {
    pub fn new(shape: StoreShape) -> Self {
        let working_set = shape.num_selected * shape.chunk_size;
        let heads = (0..shape.n_layers)
            .flat_map(|layer| {
                (0..shape.n_heads).map(move |head| {
                    HeadStore::new(layer, head, shape.d_head, shape.chunk_size, working_set)
                })
            })
            .collect();
        Self {
            n_heads: shape.n_heads,
            chunk_size: shape.chunk_size,
            heads,
        }
    }

    /// Keep the softmax weights of every chunk representation (debug mode).
    pub fn keep_repr_weights(&mut self, keep: bool) {
        self.heads.iter_mut().for_each(|h| h.keep_weights = keep);
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadStore {
        &self.heads[layer * self.n_heads + head]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut HeadStore {
        &mut self.heads[layer * self.n_heads + head]
    }

    /// All heads of one layer, in head order.
    pub fn layer_mut(&mut self, layer: usize) -> &mut [HeadStore] {
        &mut self.heads[layer * self.n_heads..(layer + 1) * self.n_heads]
    }

    pub fn heads(&self) -> &[HeadStore] {
        &self.heads
    }

    pub fn append_token(
        &mut self,
        layer: usize,
        head: usize,
        q: &[f32],
        k: &[f32],
        v: &[f32],
    ) -> Result<Option<usize>> {
        self.head_mut(layer, head).append_token(q, k, v)
    }

    pub fn gather(&mut self, layer: usize, head: usize, chunks: &[usize], include_recent: bool) -> Result<Gathered> {
        self.head_mut(layer, head).gather(chunks, include_recent)
    }

    pub fn set_residency(&mut self, policy: ResidencyPolicy) -> Result<()> {
        self.heads.iter_mut().try_for_each(|h| h.set_residency(policy))
    }

    pub fn begin_step(&mut self) {
        self.heads.iter_mut().for_each(HeadStore::begin_step);
    }

    pub fn step_counters(&self) -> CacheCounters {
        let mut c = CacheCounters::default();
        self.heads.iter().for_each(|h| c.add(&h.step));
        c
    }

    pub fn total_counters(&self) -> CacheCounters {
        let mut c = CacheCounters::default();
        self.heads.iter().for_each(|h| c.add(&h.total));
        c
    }

    pub fn peak_hot_tokens(&self) -> usize {
        self.heads.iter().map(|h| h.peak_hot_tokens).sum()
    }
}
