//! Synthetic passkey retrieval at the key-state level.
//!
//! Each (layer, head) gets `m` chunks of noisy key rows and a unit probe
//! direction `u`. Every row's component along `u` is confined to
//! `[-noise, noise]`; the target chunk's rows are shifted by `gap * u`. A
//! chunk representation is a convex combination of its key rows, so with the
//! probe as query the target outscores every distractor by at least
//! `gap - 2 * noise`. With `gap = 0` all chunks are exchangeable and the
//! target ranks first by chance only.
//!
//! The rows are loaded into a real [`ChunkStore`] (Q = K = V) and probed
//! through [`head_step`], so selection, gathering, remapping and attention
//! all run exactly as in the engine.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::metrics::{containment_rate, cover_rate, gini, hit_rate, ranked_within, selection_counts};
use crate::config::{HeadConstraint, PolicyTag, ResidencyPolicy};
use crate::engine::{head_step, HeadContext, Scratch};
use crate::error::{Error, Result};
use crate::kv_cache::{ChunkStore, StoreShape};
use crate::rotary::RotaryTable;
use crate::selector::SelectionSet;
use crate::trace::{Phase, RunMeta, SelectionTrace, TraceRecord};

/// Dimensions of the synthetic key states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PasskeyShape {
    pub chunk_size: usize,
    pub d_head: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Scale of the distractor noise, and bound on its probe component.
    pub noise: f32,
}

impl Default for PasskeyShape {
    fn default() -> Self {
        Self {
            chunk_size: 16,
            d_head: 16,
            n_layers: 2,
            n_heads: 4,
            noise: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PasskeyInstance {
    pub m: usize,
    pub target: usize,
    pub gap: f32,
    pub shape: PasskeyShape,
    /// Unit probe per (layer, head), indexed `layer * n_heads + head`.
    pub probes: Vec<Vec<f32>>,
    /// `m * chunk_size` key rows per (layer, head).
    pub keys: Vec<Array2<f32>>,
    /// The target is the first or last chunk, which every selection includes anyway.
    pub mandatory_target: bool,
}

pub fn build_passkey(m: usize, target: usize, gap: f32, noise_seed: u64, shape: PasskeyShape) -> Result<PasskeyInstance> {
    if m < 3 {
        return Err(Error::Config(format!("passkey needs at least 3 chunks, got {m}")));
    }
    if target >= m {
        return Err(Error::UnknownChunk { chunk: target, sealed: m });
    }
    if !gap.is_finite() || !shape.noise.is_finite() || shape.noise < 0.0 {
        return Err(Error::NonFinite("passkey gap or noise"));
    }
    if shape.chunk_size == 0 || shape.d_head == 0 || shape.n_layers == 0 || shape.n_heads == 0 {
        return Err(Error::Config("passkey dimensions must be positive".into()));
    }
    let (l, d) = (shape.chunk_size, shape.d_head);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let std_normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let noise = Normal::new(0.0f32, shape.noise.max(f32::MIN_POSITIVE)).expect("positive scale");
    let along = Uniform::new_inclusive(-shape.noise, shape.noise).expect("ordered bounds");
    let units = shape.n_layers * shape.n_heads;
    let mut probes = Vec::with_capacity(units);
    let mut keys = Vec::with_capacity(units);
    for _ in 0..units {
        let mut u: Vec<f32> = (0..d).map(|_| std_normal.sample(&mut rng)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f32>().sqrt();
        u.iter_mut().for_each(|x| *x /= norm);
        let mut rows = Array2::<f32>::zeros((m * l, d));
        for (i, mut row) in rows.rows_mut().into_iter().enumerate() {
            let z: Vec<f32> = (0..d).map(|_| noise.sample(&mut rng)).collect();
            let proj: f32 = z.iter().zip(&u).map(|(a, b)| a * b).sum();
            let mut a: f32 = along.sample(&mut rng);
            if i / l == target {
                a += gap;
            }
            for j in 0..d {
                row[j] = z[j] - proj * u[j] + a * u[j];
            }
        }
        probes.push(u);
        keys.push(rows);
    }
    Ok(PasskeyInstance {
        m,
        target,
        gap,
        shape,
        probes,
        keys,
        mandatory_target: target == 0 || target == m - 1,
    })
}

impl PasskeyInstance {
    /// A store holding every chunk of the instance, sealed.
    pub fn load(&self, num_selected: usize, residency: ResidencyPolicy) -> Result<ChunkStore> {
        let s = self.shape;
        let mut store = ChunkStore::new(StoreShape {
            n_layers: s.n_layers,
            n_heads: s.n_heads,
            d_head: s.d_head,
            chunk_size: s.chunk_size,
            num_selected,
        });
        store.set_residency(residency)?;
        for (unit, rows) in self.keys.iter().enumerate() {
            let head = store.head_mut(unit / s.n_heads, unit % s.n_heads);
            for row in rows.rows() {
                let r = row.as_slice().expect("owned rows are contiguous");
                head.append_token(r, r, r)?;
            }
        }
        Ok(store)
    }
}

/// One passkey experiment: `trials` fresh instances, each probed for `steps` tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PasskeyConfig {
    pub m: usize,
    pub num_selected: usize,
    pub gap: f32,
    pub trials: usize,
    pub steps: usize,
    pub seed: u64,
    pub policy: PolicyTag,
    /// Fixed target chunk; drawn uniformly per trial when absent.
    pub target: Option<usize>,
    /// Draw targets only from candidates older than the last `k - 2`, so the
    /// last-k policy cannot reach them.
    pub distant_only: bool,
    pub residency: ResidencyPolicy,
    pub shape: PasskeyShape,
}

impl Default for PasskeyConfig {
    fn default() -> Self {
        Self {
            m: 16,
            num_selected: 8,
            gap: 10.0,
            trials: 50,
            steps: 1,
            seed: 0,
            policy: PolicyTag::TopK,
            target: None,
            distant_only: false,
            residency: ResidencyPolicy::AllHot,
            shape: PasskeyShape::default(),
        }
    }
}

impl PasskeyConfig {
    fn target_range(&self) -> Result<(usize, usize)> {
        let hi = if self.distant_only {
            self.m.saturating_sub(self.num_selected)
        } else {
            self.m.saturating_sub(2)
        };
        if hi < 1 {
            return Err(Error::Config(format!(
                "no eligible target chunk for m = {} and k = {}",
                self.m, self.num_selected
            )));
        }
        Ok((1, hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PasskeyReport {
    pub m: usize,
    pub num_selected: usize,
    pub chunk_size: usize,
    pub gap: f32,
    pub policy: PolicyTag,
    pub seed: u64,
    pub trials: usize,
    pub steps: usize,
    /// One per (trial, step, layer, head).
    pub records: usize,
    pub hit_rate_top1: f64,
    pub hit_rate_top5: f64,
    /// Trials in which the target ranked first in at least one record.
    pub example_hit_rate_top1: f64,
    /// Records whose selection set contains the target.
    pub retrieval_rate: f64,
    /// Top-1 rate expected when scores carry no signal: `1 / (m - 2)`.
    pub chance_top1: f64,
    pub cover_rate: f64,
    pub gini: f64,
    /// Key/value rows gathered per (layer, head) on the first probe step.
    pub rows_gathered_per_head_step: u64,
    pub rows_loaded_per_head_step: u64,
    pub mandatory_target_trials: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PasskeyOutcome {
    pub report: PasskeyReport,
    pub trace: SelectionTrace,
    pub targets: Vec<usize>,
}

fn reference_unit(constraint: HeadConstraint, layer: usize, head: usize) -> Option<(usize, usize)> {
    let unit = match constraint {
        HeadConstraint::None => return None,
        HeadConstraint::FixHead => (layer, 0),
        HeadConstraint::FixLayer => (0, head),
        HeadConstraint::FixHeadAndLayer => (0, 0),
    };
    (unit != (layer, head)).then_some(unit)
}

/// Probes a loaded store `steps` times with each unit's probe direction.
pub fn probe_store(
    instance: &PasskeyInstance,
    store: &mut ChunkStore,
    rotary: &RotaryTable,
    cfg: &PasskeyConfig,
    seed: u64,
) -> Result<(Vec<TraceRecord>, Vec<crate::kv_cache::CacheCounters>)> {
    let s = instance.shape;
    let ctx = HeadContext {
        rotary,
        num_selected: cfg.num_selected,
        policy: cfg.policy.selection(),
        constraint: cfg.policy.constraint(),
        seed,
    };
    let mut scratch = Scratch::default();
    let mut out = vec![0.0f32; s.d_head];
    let mut records = Vec::new();
    let mut counters = Vec::new();
    let start = instance.m * s.chunk_size;
    for step in 0..cfg.steps {
        store.begin_step();
        let mut chosen: Vec<Option<SelectionSet>> = vec![None; s.n_layers * s.n_heads];
        for layer in 0..s.n_layers {
            for head in 0..s.n_heads {
                let unit = layer * s.n_heads + head;
                let u = instance.probes[unit].as_slice();
                let reference = reference_unit(ctx.constraint, layer, head)
                    .and_then(|(rl, rh)| chosen[rl * s.n_heads + rh].as_ref());
                let hs = head_step(
                    &ctx,
                    store.head_mut(layer, head),
                    start + step,
                    (u, u, u),
                    reference,
                    &mut scratch,
                    &mut out,
                )?;
                if let Some(sel) = hs.selection {
                    records.push(TraceRecord {
                        phase: Phase::Decode,
                        step,
                        position: start + step,
                        layer,
                        head,
                        chunks: sel.chunks.clone(),
                        scores: Some(sel.scores.clone()),
                    });
                    chosen[unit] = Some(sel);
                }
            }
        }
        counters.push(store.step_counters());
    }
    Ok((records, counters))
}

fn trial_seeds(seed: u64, trials: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials).map(|_| rng.random()).collect()
}

pub fn run_passkey(cfg: &PasskeyConfig) -> Result<PasskeyOutcome> {
    if cfg.trials == 0 || cfg.steps == 0 {
        return Err(Error::Config("passkey needs at least one trial and one step".into()));
    }
    if cfg.num_selected < 2 {
        return Err(Error::BudgetTooSmall(cfg.num_selected));
    }
    let (lo, hi) = cfg.target_range()?;
    let s = cfg.shape;
    let units = (s.n_layers * s.n_heads) as u64;
    let rotary = RotaryTable::new(s.d_head, (cfg.num_selected + 1) * s.chunk_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let seeds = trial_seeds(cfg.seed, cfg.trials);

    let mut trace = SelectionTrace::new(RunMeta {
        n: cfg.m * s.chunk_size + cfg.steps,
        chunk_size: s.chunk_size,
        num_selected: cfg.num_selected,
        policy: Some(cfg.policy),
        seed: cfg.seed,
        n_chunks: cfg.m + cfg.steps / s.chunk_size,
        n_layers: s.n_layers,
        n_heads: s.n_heads,
    });
    let mut targets = Vec::with_capacity(cfg.trials);
    let mut example_hits = 0usize;
    let mut hit_records = (0usize, 0usize, 0usize, 0usize);
    let mut first_step = None;
    let mut mandatory = 0usize;
    let mut warnings = Vec::new();
    for (trial, &trial_seed) in seeds.iter().enumerate() {
        let target = match cfg.target {
            Some(t) => t,
            None => rng.random_range(lo..=hi),
        };
        let instance = build_passkey(cfg.m, target, cfg.gap, trial_seed, s)?;
        if instance.mandatory_target {
            mandatory += 1;
            if warnings.is_empty() {
                warnings.push(format!(
                    "target chunk {target} is always selected (first or last chunk); its hit rate says nothing about scoring"
                ));
            }
        }
        let mut store = instance.load(cfg.num_selected, cfg.residency)?;
        let (records, counters) = probe_store(&instance, &mut store, &rotary, cfg, trial_seed)?;
        if first_step.is_none() {
            first_step = counters.first().copied();
        }
        let mut any_top1 = false;
        for r in &records {
            let top1 = ranked_within(r, target, 1)?;
            any_top1 |= top1;
            hit_records.0 += top1 as usize;
            hit_records.1 += ranked_within(r, target, 5)? as usize;
            hit_records.2 += r.chunks.binary_search(&target).is_ok() as usize;
            hit_records.3 += 1;
        }
        example_hits += any_top1 as usize;
        targets.push(target);
        trace.records.extend(records.into_iter().map(|mut r| {
            r.step += trial * cfg.steps;
            r
        }));
    }
    let n_rec = hit_records.3.max(1) as f64;
    let m_total = trace.meta.n_chunks;
    let counts = selection_counts(&trace, m_total)?;
    let first_step = first_step.unwrap_or_default();
    let report = PasskeyReport {
        m: cfg.m,
        num_selected: cfg.num_selected,
        chunk_size: s.chunk_size,
        gap: cfg.gap,
        policy: cfg.policy,
        seed: cfg.seed,
        trials: cfg.trials,
        steps: cfg.steps,
        records: trace.len(),
        hit_rate_top1: hit_records.0 as f64 / n_rec,
        hit_rate_top5: hit_records.1 as f64 / n_rec,
        example_hit_rate_top1: example_hits as f64 / cfg.trials as f64,
        retrieval_rate: hit_records.2 as f64 / n_rec,
        chance_top1: 1.0 / (cfg.m - 2) as f64,
        cover_rate: cover_rate(&trace, m_total)?,
        gini: gini(&counts)?,
        rows_gathered_per_head_step: first_step.rows_gathered / units,
        rows_loaded_per_head_step: first_step.rows_loaded / units,
        mandatory_target_trials: mandatory,
        warnings,
    };
    Ok(PasskeyOutcome {
        report,
        trace,
        targets,
    })
}

/// Hit and retrieval rates of a passkey trace for a single fixed target.
pub fn trace_rates(trace: &SelectionTrace, target: usize) -> Result<(f64, f64, f64)> {
    Ok((
        hit_rate(trace, target, 1)?,
        hit_rate(trace, target, 5)?,
        containment_rate(trace, target)?,
    ))
}

/// Two-proportion z statistic for `p1 > p2` (unpooled standard error).
/// Infinite when both proportions are degenerate and differ.
pub fn z_score(p1: f64, n1: usize, p2: f64, n2: usize) -> f64 {
    let se = (p1 * (1.0 - p1) / n1 as f64 + p2 * (1.0 - p2) / n2 as f64).sqrt();
    let diff = p1 - p2;
    if se == 0.0 {
        return if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
    }
    diff / se
}
