//! `chunkattn` command-line tool.
//!
//! Exit status: 0 on success, 1 when a checked property fails, 2 on a bad
//! configuration or input.

use std::path::PathBuf;
use std::process::ExitCode;

use chunkattn::analysis::ablation::AblationConfig;
use chunkattn::analysis::passkey::{PasskeyConfig, PasskeyShape};
use chunkattn::harness::{self, InputSpec, RunDescriptor, ScalingConfig};
use chunkattn::{EngineConfig, Error, ModelConfig, PolicyTag, ResidencyPolicy};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chunkattn", version, about = "Chunk-selective attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode an input, generate greedily, and write trace, metrics, heatmap and counters.
    Run(RunArgs),
    /// Compare against full attention in the saturated regime.
    Equivalence(EquivalenceArgs),
    /// Synthetic passkey retrieval over engineered key states.
    Passkey(PasskeyArgs),
    /// Compare selection policies and budgets on identical passkey instances.
    Ablate(AblateArgs),
    /// Per-step load of decoding after prompts of increasing length.
    Scaling(ScalingArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Model config JSON; defaults to 2 layers, 4 heads, d_head 16, vocab 64, L 1024.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Engine config JSON; defaults to l = 64, k = 8, top-k.
    #[arg(long)]
    engine_config: Option<PathBuf>,
    /// Overrides the engine's chunks per query.
    #[arg(long)]
    k: Option<usize>,
    /// Overrides the engine's chunk size.
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Overrides the engine's selection policy.
    #[arg(long)]
    policy: Option<PolicyTag>,
}

impl ModelArgs {
    fn load(&self, seed: Option<u64>) -> Result<(ModelConfig, EngineConfig), Error> {
        let model = match &self.model_config {
            Some(p) => ModelConfig::load(p)?,
            None => ModelConfig::new(2, 4, 16, 64, 1024, 0),
        };
        model.validate()?;
        let mut engine = match &self.engine_config {
            Some(p) => EngineConfig::load(p)?,
            None => EngineConfig::new(64, 8),
        };
        if let Some(k) = self.k {
            engine.num_selected = k;
        }
        if let Some(l) = self.chunk_size {
            engine.chunk_size = l;
        }
        if let Some(p) = self.policy {
            engine.policy = p;
        }
        if let Some(s) = seed {
            engine.seed = s;
        }
        engine.validate_for(&model)?;
        Ok((model, engine))
    }
}

#[derive(Args)]
struct RunArgs {
    /// Run descriptor JSON `{model, engine, input, steps, residency}`; replaces the individual flags.
    #[arg(long, conflicts_with_all = ["model_config", "engine_config"])]
    descriptor: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// JSON array of token ids.
    #[arg(long, conflicts_with = "n")]
    input: Option<PathBuf>,
    /// Length of a seeded random input.
    #[arg(long)]
    n: Option<usize>,
    /// Seed of the random input and of the random policy.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    residency: Option<ResidencyPolicy>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EquivalenceArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    /// Seed of the random input.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report to DIR/metrics.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PasskeyArgs {
    /// Chunks per instance.
    #[arg(long, default_value_t = 16)]
    m: usize,
    /// Fixed target chunk; random per trial when omitted.
    #[arg(long)]
    target: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    gap: f32,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    chunk_size: usize,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Probe tokens decoded per trial.
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "top-k")]
    policy: PolicyTag,
    #[arg(long, default_value = "hot")]
    residency: ResidencyPolicy,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated policy tags.
    #[arg(long, value_delimiter = ',', default_value = "top-k,random,last-k")]
    policy: Vec<PolicyTag>,
    #[arg(long, default_value_t = 32)]
    m: usize,
    #[arg(long, default_value_t = 6)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    chunk_size: usize,
    #[arg(long, default_value_t = 10.0)]
    gap: f32,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated k values swept with top-k.
    #[arg(long, value_delimiter = ',')]
    k_sweep: Vec<usize>,
    /// Comma-separated chunk sizes swept at a fixed window.
    #[arg(long, value_delimiter = ',')]
    l_sweep: Vec<usize>,
    /// Window `k * l` held fixed by the chunk-size sweep.
    #[arg(long, default_value_t = 1024)]
    window: usize,
    /// Trials per sweep point.
    #[arg(long, default_value_t = 10)]
    sweep_trials: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ScalingArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated prompt lengths.
    #[arg(long, value_delimiter = ',', default_value = "1024,4096,16384")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "offload")]
    residency: ResidencyPolicy,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

enum Outcome {
    Pass,
    Fail(String),
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
}

fn cmd_run(a: RunArgs) -> Result<Outcome, Error> {
    let desc = match &a.descriptor {
        Some(path) => {
            let mut d = RunDescriptor::load(path)?;
            if let Some(s) = a.steps {
                d.steps = s;
            }
            if let Some(r) = a.residency {
                d.residency = r;
            }
            d
        }
        None => {
            let (model, engine) = a.model.load(a.seed)?;
            let input = match (&a.input, a.n) {
                (Some(p), _) => InputSpec::File(p.clone()),
                (None, Some(n)) => InputSpec::Random {
                    n,
                    seed: a.seed.unwrap_or(0),
                },
                (None, None) => return Err(Error::Config("run needs --descriptor, --input or --n".into())),
            };
            RunDescriptor {
                model,
                engine,
                input,
                steps: a.steps.unwrap_or(0),
                residency: a.residency.unwrap_or(ResidencyPolicy::AllHot),
            }
        }
    };
    let summary = harness::run(&desc, &a.out)?;
    println!(
        "encoded {} tokens, generated {}, cover rate {:.4}, gini {:.4}; outputs in {}",
        summary.input_len,
        summary.generated.len(),
        summary.metrics.cover_rate,
        summary.metrics.gini,
        a.out.display()
    );
    Ok(Outcome::Pass)
}

fn cmd_equivalence(a: EquivalenceArgs) -> Result<Outcome, Error> {
    let (model, engine) = a.model.load(None)?;
    let tokens = harness::random_tokens(a.n, model.vocab_size, a.seed);
    let report = harness::equivalence(&model, &engine, &tokens, a.steps)?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        harness::write_json(out, "metrics.json", &report)?;
    }
    print_json(&report);
    Ok(if report.pass {
        Outcome::Pass
    } else {
        Outcome::Fail(format!(
            "max |logit diff| {:e}, tokens match: {}",
            report.max_abs_logit_diff, report.tokens_match
        ))
    })
}

fn cmd_passkey(a: PasskeyArgs) -> Result<Outcome, Error> {
    let cfg = PasskeyConfig {
        m: a.m,
        num_selected: a.k,
        gap: a.gap,
        trials: a.trials,
        steps: a.steps,
        seed: a.seed,
        policy: a.policy,
        target: a.target,
        distant_only: false,
        residency: a.residency,
        shape: PasskeyShape {
            chunk_size: a.chunk_size,
            ..PasskeyShape::default()
        },
    };
    let outcome = harness::passkey(&cfg, &a.out)?;
    for w in &outcome.report.warnings {
        eprintln!("warning: {w}");
    }
    print_json(&outcome.report);
    Ok(Outcome::Pass)
}

fn cmd_ablate(a: AblateArgs) -> Result<Outcome, Error> {
    let cfg = AblationConfig {
        base: PasskeyConfig {
            m: a.m,
            num_selected: a.k,
            gap: a.gap,
            trials: a.trials,
            seed: a.seed,
            distant_only: true,
            shape: PasskeyShape {
                chunk_size: a.chunk_size,
                ..PasskeyShape::default()
            },
            ..PasskeyConfig::default()
        },
        policies: a.policy,
        k_sweep: a.k_sweep,
        l_sweep: a.l_sweep,
        window: a.window,
        sweep_trials: a.sweep_trials,
    };
    let report = harness::ablate(&cfg, &a.out)?;
    for r in report.rows.iter().filter(|r| r.degenerate) {
        eprintln!("warning: {} is degenerate: {}", r.variant, r.note.as_deref().unwrap_or(""));
    }
    print_json(&report);
    Ok(Outcome::Pass)
}

fn cmd_scaling(a: ScalingArgs) -> Result<Outcome, Error> {
    let (model, engine) = a.model.load(None)?;
    let cfg = ScalingConfig {
        model,
        engine,
        ns: a.n,
        steps: a.steps,
        seed: a.seed,
        residency: a.residency,
    };
    let report = harness::scaling(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    harness::write_json(&a.out, "scaling.json", &report)?;
    print_json(&report);
    Ok(if report.constant_load {
        Outcome::Pass
    } else {
        Outcome::Fail("per-step gathered rows differ across lengths".into())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Equivalence(a) => cmd_equivalence(a),
        Command::Passkey(a) => cmd_passkey(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Scaling(a) => cmd_scaling(a),
    };
    match result {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail(msg)) => {
            eprintln!("FAIL: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 1 })
        }
    }
}
