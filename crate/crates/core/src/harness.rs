//! Run descriptors and the experiment drivers behind the command-line tool.
//!
//! Every driver is deterministic given its seeds. Wall times are reported
//! only in `counters.json` and `scaling.json`; all other outputs are
//! byte-identical across reruns.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::ablation::{run_ablation, AblationConfig, AblationReport};
use crate::analysis::passkey::{run_passkey, PasskeyConfig, PasskeyOutcome};
use crate::analysis::{export_heatmap, MetricsReport};
use crate::config::{EngineConfig, ModelConfig, ResidencyPolicy};
use crate::engine::{CountersReport, Engine, EngineOptions};
use crate::error::{Error, Result};
use crate::model::{argmax, HostModel};

fn json_err(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> Error {
    let context = context.into();
    move |source| Error::Json { context, source }
}

/// Writes `value` as pretty JSON to `dir/name`.
pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).map_err(json_err(name))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Uniform token ids in `0..vocab`.
pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Reads a JSON array of token ids.
pub fn read_tokens(path: &Path) -> Result<Vec<u32>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(json_err(path.display().to_string()))
}

/// Either a token file or a seeded random sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputSpec {
    File(PathBuf),
    Random { n: usize, seed: u64 },
}

impl InputSpec {
    pub fn tokens(&self, vocab: usize) -> Result<Vec<u32>> {
        match self {
            InputSpec::File(path) => read_tokens(path),
            InputSpec::Random { n, seed } => Ok(random_tokens(*n, vocab, *seed)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunDescriptor {
    pub model: ModelConfig,
    pub engine: EngineConfig,
    pub input: InputSpec,
    #[serde(default)]
    pub steps: usize,
    #[serde(default = "default_residency")]
    pub residency: ResidencyPolicy,
}

fn default_residency() -> ResidencyPolicy {
    ResidencyPolicy::AllHot
}

impl RunDescriptor {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(json_err("run descriptor"))
    }

    /// Loads a descriptor; a relative token-file path is resolved against
    /// the descriptor's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut desc: Self = serde_json::from_str(&text).map_err(json_err(path.display().to_string()))?;
        if let InputSpec::File(p) = &mut desc.input {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(desc)
    }
}

#[derive(Debug, Clone, Serialize)]
struct TokensFile<'a> {
    input: &'a [u32],
    generated: &'a [u32],
}

#[derive(Debug, Clone, Serialize)]
struct TimedCounters<'a> {
    #[serde(flatten)]
    counters: &'a CountersReport,
    wall_time_ms: f64,
    decode_step_ms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub input_len: usize,
    pub generated: Vec<u32>,
    pub metrics: MetricsReport,
    pub counters: CountersReport,
}

/// Encodes the input, generates `steps` tokens, and writes `tokens.json`,
/// `trace.json`, `counters.json`, `metrics.json` and `heatmap.csv` to `out`.
pub fn run(desc: &RunDescriptor, out: &Path) -> Result<RunSummary> {
    let started = Instant::now();
    let model = HostModel::build(desc.model.clone())?;
    let tokens = desc.input.tokens(desc.model.vocab_size)?;
    let options = EngineOptions {
        residency: desc.residency,
        ..EngineOptions::default()
    };
    let mut engine = Engine::new(&model, desc.engine.clone(), options)?;
    engine.encode(&tokens)?;
    let generated = engine.generate(desc.steps)?;
    let trace = engine.trace();
    let m = trace.meta.n_chunks;
    if trace.is_empty() || m == 0 {
        return Err(Error::Config(format!(
            "{} tokens never fill a chunk of {}; nothing was selected",
            engine.tokens().len(),
            desc.engine.chunk_size
        )));
    }
    let metrics = MetricsReport::from_trace(trace, m, None)?;
    let counters = engine.counters_report();

    ensure_dir(out)?;
    write_json(
        out,
        "tokens.json",
        &TokensFile {
            input: &tokens,
            generated: &generated,
        },
    )?;
    trace.write_json(&out.join("trace.json"))?;
    write_json(out, "metrics.json", &metrics)?;
    export_heatmap(trace, m, &out.join("heatmap.csv"))?;
    write_json(
        out,
        "counters.json",
        &TimedCounters {
            counters: &counters,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            decode_step_ms: engine.step_times().iter().map(|d| d.as_secs_f64() * 1e3).collect(),
        },
    )?;
    Ok(RunSummary {
        input_len: tokens.len(),
        generated,
        metrics,
        counters,
    })
}

/// Largest absolute difference tolerated between the two paths' logits.
pub const EQUIVALENCE_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub n: usize,
    pub steps: usize,
    pub chunk_size: usize,
    pub num_selected: usize,
    pub max_abs_logit_diff: f32,
    pub tolerance: f32,
    pub tokens_match: bool,
    pub engine_tokens: Vec<u32>,
    pub oracle_tokens: Vec<u32>,
    pub pass: bool,
}

/// Refuses configurations in which some query would see more than `k`
/// sealed chunks, or in which full attention cannot run.
pub fn check_saturated(model: &ModelConfig, engine: &EngineConfig, n: usize, steps: usize) -> Result<()> {
    let (l, k) = (engine.chunk_size, engine.num_selected);
    let total = n + steps;
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if total > model.pretrain_length {
        return Err(Error::Precondition(format!(
            "n + steps = {total} exceeds the pretraining length {}; full attention cannot run",
            model.pretrain_length
        )));
    }
    let needed = n.div_ceil(l).max((total - 1) / l);
    if needed > k {
        return Err(Error::Precondition(format!(
            "selection is not saturated: {needed} chunks exceed k = {k}, so outputs are not expected to match full attention"
        )));
    }
    Ok(())
}

/// Compares chunk-selective logits and greedy tokens against full attention.
pub fn equivalence(model_cfg: &ModelConfig, engine_cfg: &EngineConfig, tokens: &[u32], steps: usize) -> Result<EquivalenceReport> {
    check_saturated(model_cfg, engine_cfg, tokens.len(), steps)?;
    let model = HostModel::build(model_cfg.clone())?;
    let mut engine = Engine::new(&model, engine_cfg.clone(), EngineOptions::default())?;
    let got = engine.encode(tokens)?;
    let want = model.full_attention_forward(tokens)?;
    let mut diff = got
        .iter()
        .zip(want.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);

    let (oracle_tokens, oracle_logits) = model.full_attention_greedy(tokens, steps)?;
    let mut engine_tokens = Vec::with_capacity(steps);
    for want_row in &oracle_logits {
        let next = argmax(engine.last_logits().expect("encoded"));
        engine_tokens.push(next);
        let row = engine.decode_step(next)?;
        diff = row
            .iter()
            .zip(want_row)
            .map(|(a, b)| (a - b).abs())
            .fold(diff, f32::max);
    }
    let tokens_match = engine_tokens == oracle_tokens;
    Ok(EquivalenceReport {
        n: tokens.len(),
        steps,
        chunk_size: engine_cfg.chunk_size,
        num_selected: engine_cfg.num_selected,
        max_abs_logit_diff: diff,
        tolerance: EQUIVALENCE_TOLERANCE,
        tokens_match,
        engine_tokens,
        oracle_tokens,
        pass: tokens_match && diff <= EQUIVALENCE_TOLERANCE,
    })
}

/// Runs the passkey harness and writes `metrics.json`, `trace.json` and `heatmap.csv`.
pub fn passkey(cfg: &PasskeyConfig, out: &Path) -> Result<PasskeyOutcome> {
    let outcome = run_passkey(cfg)?;
    ensure_dir(out)?;
    write_json(out, "metrics.json", &outcome.report)?;
    outcome.trace.write_json(&out.join("trace.json"))?;
    export_heatmap(&outcome.trace, outcome.trace.meta.n_chunks, &out.join("heatmap.csv"))?;
    Ok(outcome)
}

/// Runs the ablation table and writes `metrics.json` and `ablation.csv`.
pub fn ablate(cfg: &AblationConfig, out: &Path) -> Result<AblationReport> {
    let report = run_ablation(cfg)?;
    ensure_dir(out)?;
    write_json(out, "metrics.json", &report)?;
    let mut csv = String::from(
        "variant,policy,k,l,window,hit_rate_top1,hit_rate_top5,retrieval_rate,cover_rate,gini,rows_gathered_per_head_step,degenerate\n",
    );
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.policy,
            r.num_selected,
            r.chunk_size,
            r.window,
            r.hit_rate_top1,
            r.hit_rate_top5,
            r.retrieval_rate,
            r.cover_rate,
            r.gini,
            r.rows_gathered_per_head_step,
            r.degenerate
        ));
    }
    let path = out.join("ablation.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub model: ModelConfig,
    pub engine: EngineConfig,
    pub ns: Vec<usize>,
    pub steps: usize,
    pub seed: u64,
    pub residency: ResidencyPolicy,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    /// Rows gathered by chunk-selective attention at each decode step, summed over layers and heads.
    pub rows_gathered: Vec<u64>,
    pub rows_loaded: Vec<u64>,
    /// Rows full attention would attend per (layer, head) at each step: every cached token plus the query.
    pub oracle_rows_per_head: Vec<u64>,
    pub max_key_rows: usize,
    pub max_query_position: usize,
    pub engine_step_ms: f64,
    pub oracle_step_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub num_selected: usize,
    pub chunk_size: usize,
    pub steps: usize,
    pub rows: Vec<ScalingRow>,
    /// Per-step gathered and loaded rows are identical for every `n`.
    pub constant_load: bool,
}

/// Decodes `steps` tokens after prompts of each length and compares the
/// per-step load with the rows full attention would touch. The lengths
/// should share `n mod l`, otherwise the recent region differs between runs.
pub fn scaling(cfg: &ScalingConfig) -> Result<ScalingReport> {
    if cfg.ns.is_empty() || cfg.steps == 0 {
        return Err(Error::Config("scaling needs at least one length and one step".into()));
    }
    let model = HostModel::build(cfg.model.clone())?;
    let options = EngineOptions {
        residency: cfg.residency,
        trace_encode: false,
        trace_decode: false,
        ..EngineOptions::default()
    };
    let mut rows = Vec::with_capacity(cfg.ns.len());
    for &n in &cfg.ns {
        let mut engine = Engine::new(&model, cfg.engine.clone(), options.clone())?;
        engine.encode(&random_tokens(n, cfg.model.vocab_size, cfg.seed))?;
        let mut oracle_rows = Vec::with_capacity(cfg.steps);
        let mut oracle_time = 0.0;
        for _ in 0..cfg.steps {
            let next = argmax(engine.last_logits().expect("encoded"));
            engine.decode_step(next)?;
            let t = Instant::now();
            oracle_rows.push(engine.full_window_probe() as u64);
            oracle_time += t.elapsed().as_secs_f64();
        }
        let stats = engine.step_stats();
        let engine_time: f64 = engine.step_times().iter().map(|d| d.as_secs_f64()).sum();
        rows.push(ScalingRow {
            n,
            rows_gathered: stats.iter().map(|s| s.rows_gathered).collect(),
            rows_loaded: stats.iter().map(|s| s.rows_loaded).collect(),
            oracle_rows_per_head: oracle_rows,
            max_key_rows: stats.iter().map(|s| s.max_key_rows).max().unwrap_or(0),
            max_query_position: stats.iter().map(|s| s.max_query_position).max().unwrap_or(0),
            engine_step_ms: engine_time * 1e3 / cfg.steps as f64,
            oracle_step_ms: oracle_time * 1e3 / cfg.steps as f64,
        });
    }
    let constant_load = rows
        .windows(2)
        .all(|w| w[0].rows_gathered == w[1].rows_gathered && w[0].rows_loaded == w[1].rows_loaded);
    Ok(ScalingReport {
        num_selected: cfg.engine.num_selected,
        chunk_size: cfg.engine.chunk_size,
        steps: cfg.steps,
        rows,
        constant_load,
    })
}
