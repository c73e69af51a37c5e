//! Seeded decoder-only transformer used as the substrate for chunk selection
//! and as the full-attention oracle.
//!
//! Pre-norm blocks (RMS norm without gain), per-head rotary attention, a SiLU
//! MLP of width `4 * d_model`, and an untied output head. All weights are
//! drawn from `N(0, 1/sqrt(d_model))` with zero biases, from a ChaCha stream
//! seeded by the config, so `(config, seed)` fixes every bit.

use std::hash::{DefaultHasher, Hasher};

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::{dot, matmul_rows, rms_norm_rows, silu, softmax_in_place};
use crate::rotary::RotaryTable;

/// Query, key and value states of one head, before any rotary transform.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStates {
    pub layer: usize,
    pub head: usize,
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub bq: Array1<f32>,
    pub bk: Array1<f32>,
    pub bv: Array1<f32>,
    pub wo: Array2<f32>,
    pub w_up: Array2<f32>,
    pub w_down: Array2<f32>,
}

#[derive(Debug)]
pub struct HostModel {
    config: ModelConfig,
    embedding: Array2<f32>,
    layers: Vec<LayerWeights>,
    lm_head: Array2<f32>,
    rotary: RotaryTable,
}

fn random_matrix(rng: &mut ChaCha8Rng, dist: &Normal<f32>, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl HostModel {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let d_ff = 4 * d;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dist = Normal::new(0.0f32, 1.0 / (d as f32).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;

        let embedding = random_matrix(&mut rng, &dist, config.vocab_size, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: random_matrix(&mut rng, &dist, d, d),
                wk: random_matrix(&mut rng, &dist, d, d),
                wv: random_matrix(&mut rng, &dist, d, d),
                bq: Array1::zeros(d),
                bk: Array1::zeros(d),
                bv: Array1::zeros(d),
                wo: random_matrix(&mut rng, &dist, d, d),
                w_up: random_matrix(&mut rng, &dist, d, d_ff),
                w_down: random_matrix(&mut rng, &dist, d_ff, d),
            })
            .collect();
        let lm_head = random_matrix(&mut rng, &dist, d, config.vocab_size);
        let rotary = RotaryTable::new(config.d_head, config.pretrain_length)?;
        Ok(Self {
            config,
            embedding,
            layers,
            lm_head,
            rotary,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rotary(&self) -> &RotaryTable {
        &self.rotary
    }

    pub fn layer(&self, layer: usize) -> &LayerWeights {
        &self.layers[layer]
    }

    /// Hash over every weight's bit pattern.
    pub fn weights_checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let mut feed = |a: &[f32]| a.iter().for_each(|x| h.write_u32(x.to_bits()));
        feed(self.embedding.as_slice().unwrap());
        for l in &self.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_up, &l.w_down] {
                feed(m.as_slice().unwrap());
            }
            for b in [&l.bq, &l.bk, &l.bv] {
                feed(b.as_slice().unwrap());
            }
        }
        feed(self.lm_head.as_slice().unwrap());
        h.finish()
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            Some(&token) => Err(Error::TokenOutOfVocab {
                token,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Embedding rows for `tokens`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Array2<f32>> {
        self.check_tokens(tokens)?;
        let mut out = Array2::zeros((tokens.len(), self.config.d_model));
        for (mut row, &t) in out.rows_mut().into_iter().zip(tokens) {
            row.assign(&self.embedding.row(t as usize));
        }
        Ok(out)
    }

    /// Normalizes the residual stream and splits the Q/K/V projections per head.
    /// No positional rotation is applied.
    pub fn project_qkv(&self, layer: usize, hidden: ArrayView2<'_, f32>) -> Result<Vec<HeadStates>> {
        let d = self.config.d_model;
        if hidden.ncols() != d {
            return Err(Error::shape(format!("{d} columns"), format!("{} columns", hidden.ncols())));
        }
        let w = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} out of range")))?;
        let normed = rms_norm_rows(hidden);
        let q = matmul_rows(normed.view(), w.wq.view()) + &w.bq;
        let k = matmul_rows(normed.view(), w.wk.view()) + &w.bk;
        let v = matmul_rows(normed.view(), w.wv.view()) + &w.bv;
        let dh = self.config.d_head;
        Ok((0..self.config.n_heads)
            .map(|h| {
                let cols = s![.., h * dh..(h + 1) * dh];
                HeadStates {
                    layer,
                    head: h,
                    q: q.slice(cols).to_owned(),
                    k: k.slice(cols).to_owned(),
                    v: v.slice(cols).to_owned(),
                }
            })
            .collect())
    }

    /// Output projection of the concatenated head outputs, residual add, then
    /// the MLP sub-block with its own residual.
    pub fn finish_layer(
        &self,
        layer: usize,
        residual: ArrayView2<'_, f32>,
        heads_concat: ArrayView2<'_, f32>,
    ) -> Array2<f32> {
        let w = &self.layers[layer];
        let attn = matmul_rows(heads_concat, w.wo.view());
        let mid = &residual + &attn;
        let normed = rms_norm_rows(mid.view());
        let up = matmul_rows(normed.view(), w.w_up.view()).mapv_into(silu);
        let down = matmul_rows(up.view(), w.w_down.view());
        mid + down
    }

    pub fn logits(&self, hidden: ArrayView2<'_, f32>) -> Array2<f32> {
        let normed = rms_norm_rows(hidden);
        matmul_rows(normed.view(), self.lm_head.view())
    }

    /// Vanilla causal attention over every token at positions `0..n`.
    pub fn full_attention_forward(&self, tokens: &[u32]) -> Result<Array2<f32>> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if n > self.config.pretrain_length {
            return Err(Error::SequenceTooLong {
                len: n,
                limit: self.config.pretrain_length,
            });
        }
        let positions: Vec<usize> = (0..n).collect();
        let dh = self.config.d_head;
        let mut hidden = self.embed(tokens)?;
        for layer in 0..self.config.n_layers {
            let heads = self.project_qkv(layer, hidden.view())?;
            let mut concat = Array2::<f32>::zeros((n, self.config.d_model));
            for hs in &heads {
                let q = self.rotary.apply(&hs.q, &positions)?;
                let k = self.rotary.apply(&hs.k, &positions)?;
                let out = causal_attention(&q, &k, &hs.v);
                concat
                    .slice_mut(s![.., hs.head * dh..(hs.head + 1) * dh])
                    .assign(&out);
            }
            hidden = self.finish_layer(layer, hidden.view(), concat.view());
        }
        Ok(self.logits(hidden.view()))
    }

    /// Greedy continuation by re-running the full-attention forward pass
    /// after every token.
    pub fn full_attention_greedy(&self, prompt: &[u32], steps: usize) -> Result<(Vec<u32>, Vec<Vec<f32>>)> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(steps);
        let mut step_logits = Vec::with_capacity(steps);
        let mut last = self.full_attention_forward(&seq)?.row(seq.len() - 1).to_vec();
        for _ in 0..steps {
            let next = argmax(&last);
            out.push(next);
            seq.push(next);
            last = self.full_attention_forward(&seq)?.row(seq.len() - 1).to_vec();
            step_logits.push(last.clone());
        }
        Ok((out, step_logits))
    }
}

fn causal_attention(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>) -> Array2<f32> {
    let (n, d) = q.dim();
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = Array2::<f32>::zeros((n, v.ncols()));
    let mut scores = Vec::with_capacity(n);
    for t in 0..n {
        let qt = q.row(t);
        let qs = qt.as_slice().unwrap();
        scores.clear();
        for j in 0..=t {
            scores.push(dot(qs, k.row(j).as_slice().unwrap()) * scale);
        }
        softmax_in_place(&mut scores);
        let mut row = out.row_mut(t);
        for (j, w) in scores.iter().enumerate() {
            row.scaled_add(*w, &v.row(j));
        }
    }
    out
}

/// Index of the largest logit; ties go to the lower token id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}
