//! Model and engine configuration, plus the policy and residency tags shared
//! by the engine, the harness and the CLI.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of the host transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    /// Number of positions the rotary table covers; no position at or past
    /// this value may ever reach the rotary transform.
    pub pretrain_length: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Builds a config with `d_model = n_heads * d_head`.
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_head: usize,
        vocab_size: usize,
        pretrain_length: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_layers,
            n_heads,
            d_head,
            d_model: n_heads * d_head,
            vocab_size,
            pretrain_length,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("pretrain_length", self.pretrain_length),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::IndivisibleHeads {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_head {} must be even for the rotary transform",
                self.d_head
            )));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "model config".into(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Json { source, .. } => Error::Json {
                context: path.display().to_string(),
                source,
            },
            other => other,
        })
    }
}

/// How the non-mandatory chunks are picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SelectionPolicy {
    /// First and last chunk plus the k-2 best-scoring candidates.
    TopK,
    /// First and last chunk plus k-2 candidates drawn uniformly.
    Random,
    /// First and last chunk plus the k-2 most recent candidates.
    LastK,
    /// Last chunk plus the k-1 best-scoring chunks; the first chunk is not forced.
    NoFirst,
}

/// Restricts how freely heads may choose their own chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadConstraint {
    None,
    /// Every head of a layer reuses head 0's selection.
    FixHead,
    /// Every layer reuses layer 0's per-head selections.
    FixLayer,
    /// One selection (layer 0, head 0) is shared by all heads everywhere.
    FixHeadAndLayer,
}

/// Policy tag as it appears in configs and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyTag {
    TopK,
    Random,
    LastK,
    NoFirst,
    FixHead,
    FixLayer,
    FixHeadAndLayer,
}

impl PolicyTag {
    pub const ALL: [PolicyTag; 7] = [
        PolicyTag::TopK,
        PolicyTag::Random,
        PolicyTag::LastK,
        PolicyTag::NoFirst,
        PolicyTag::FixHead,
        PolicyTag::FixLayer,
        PolicyTag::FixHeadAndLayer,
    ];

    pub fn selection(self) -> SelectionPolicy {
        match self {
            PolicyTag::Random => SelectionPolicy::Random,
            PolicyTag::LastK => SelectionPolicy::LastK,
            PolicyTag::NoFirst => SelectionPolicy::NoFirst,
            _ => SelectionPolicy::TopK,
        }
    }

    pub fn constraint(self) -> HeadConstraint {
        match self {
            PolicyTag::FixHead => HeadConstraint::FixHead,
            PolicyTag::FixLayer => HeadConstraint::FixLayer,
            PolicyTag::FixHeadAndLayer => HeadConstraint::FixHeadAndLayer,
            _ => HeadConstraint::None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyTag::TopK => "top-k",
            PolicyTag::Random => "random",
            PolicyTag::LastK => "last-k",
            PolicyTag::NoFirst => "no-first",
            PolicyTag::FixHead => "fix-head",
            PolicyTag::FixLayer => "fix-layer",
            PolicyTag::FixHeadAndLayer => "fix-head-and-layer",
        }
    }
}

impl fmt::Display for PolicyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyTag::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownPolicy(s.to_string()))
    }
}

/// Chunking and selection parameters of the engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub chunk_size: usize,
    /// Chunks each head may attend per query, mandatory ones included.
    pub num_selected: usize,
    #[serde(default = "default_policy")]
    pub policy: PolicyTag,
    #[serde(default)]
    pub seed: u64,
}

fn default_policy() -> PolicyTag {
    PolicyTag::TopK
}

impl EngineConfig {
    pub fn new(chunk_size: usize, num_selected: usize) -> Self {
        Self {
            chunk_size,
            num_selected,
            policy: PolicyTag::TopK,
            seed: 0,
        }
    }

    pub fn with_policy(mut self, policy: PolicyTag) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// `k * l`: the most selected-chunk rows any query can see.
    pub fn attention_window(&self) -> usize {
        self.num_selected * self.chunk_size
    }

    /// Checks the config on its own and against the model it will run on.
    ///
    /// A query sees up to `k * l` selected rows, up to `l - 1` recent rows and
    /// itself, so `(k + 1) * l <= L` is required for every remapped position
    /// to stay inside the rotary table.
    pub fn validate_for(&self, model: &ModelConfig) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be positive".into()));
        }
        if self.num_selected < 2 {
            return Err(Error::BudgetTooSmall(self.num_selected));
        }
        let needed = (self.num_selected + 1) * self.chunk_size;
        if needed > model.pretrain_length {
            return Err(Error::Config(format!(
                "(k + 1) * l = {needed} exceeds pretrain length {}",
                model.pretrain_length
            )));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            context: "engine config".into(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })
    }
}

/// Where sealed KV slabs live between gathers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidencyPolicy {
    AllHot,
    AllOffloaded,
    /// Keep at most this many sealed tokens hot per (layer, head).
    Budget(usize),
}

impl fmt::Display for ResidencyPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResidencyPolicy::AllHot => f.write_str("hot"),
            ResidencyPolicy::AllOffloaded => f.write_str("offload"),
            ResidencyPolicy::Budget(n) => write!(f, "budget:{n}"),
        }
    }
}

impl FromStr for ResidencyPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hot" => Ok(ResidencyPolicy::AllHot),
            "offload" => Ok(ResidencyPolicy::AllOffloaded),
            _ => s
                .strip_prefix("budget:")
                .and_then(|n| n.parse().ok())
                .map(ResidencyPolicy::Budget)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "residency `{s}` is not one of hot, offload, budget:N"
                    ))
                }),
        }
    }
}

impl Serialize for ResidencyPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ResidencyPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
