//! Policy and budget comparisons on identical passkey instances.
//!
//! Rank-based hit rates do not depend on the selection policy, since every
//! policy sees the same scores. Policies are therefore compared on
//! retrieval: how often the target chunk ends up in the selection set.

use serde::Serialize;

use super::passkey::{run_passkey, z_score, PasskeyConfig, PasskeyReport, PasskeyShape};
use crate::config::PolicyTag;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub policy: PolicyTag,
    pub num_selected: usize,
    pub chunk_size: usize,
    /// `k * l`.
    pub window: usize,
    pub trials: usize,
    pub hit_rate_top1: f64,
    pub hit_rate_top5: f64,
    pub retrieval_rate: f64,
    pub cover_rate: f64,
    pub gini: f64,
    pub rows_gathered_per_head_step: u64,
    pub degenerate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl AblationRow {
    fn new(variant: String, r: &PasskeyReport) -> Self {
        let degenerate = r.policy == PolicyTag::NoFirst;
        Self {
            variant,
            policy: r.policy,
            num_selected: r.num_selected,
            chunk_size: r.chunk_size,
            window: r.num_selected * r.chunk_size,
            trials: r.trials,
            hit_rate_top1: r.hit_rate_top1,
            hit_rate_top5: r.hit_rate_top5,
            retrieval_rate: r.retrieval_rate,
            cover_rate: r.cover_rate,
            gini: r.gini,
            rows_gathered_per_head_step: r.rows_gathered_per_head_step,
            degenerate,
            note: degenerate.then(|| {
                "first chunk not forced; its role as an attention sink only matters with pretrained weights, so this row is not comparable"
                    .to_string()
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub better: PolicyTag,
    pub worse: PolicyTag,
    pub better_rate: f64,
    pub worse_rate: f64,
    /// `None` when both rates are 0 or 1 and differ, i.e. the statistic is unbounded.
    pub z: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub base: PasskeyConfig,
    pub rows: Vec<AblationRow>,
    /// Pairwise retrieval-rate tests for top-k > random > last-k, when present.
    pub comparisons: Vec<Comparison>,
    /// Every comparison holds at three standard errors.
    pub ordering_holds: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationConfig {
    pub base: PasskeyConfig,
    pub policies: Vec<PolicyTag>,
    pub k_sweep: Vec<usize>,
    /// Chunk sizes swept at a fixed window; `k = window / l`.
    pub l_sweep: Vec<usize>,
    pub window: usize,
    pub sweep_trials: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            base: PasskeyConfig {
                m: 32,
                num_selected: 6,
                trials: 200,
                distant_only: true,
                ..PasskeyConfig::default()
            },
            policies: vec![PolicyTag::TopK, PolicyTag::Random, PolicyTag::LastK],
            k_sweep: Vec::new(),
            l_sweep: Vec::new(),
            window: 1024,
            sweep_trials: 10,
        }
    }
}

const SIGMAS: f64 = 3.0;

fn compare(rows: &[AblationRow], better: PolicyTag, worse: PolicyTag) -> Option<Comparison> {
    let b = rows.iter().find(|r| r.policy == better && r.variant == better.as_str())?;
    let w = rows.iter().find(|r| r.policy == worse && r.variant == worse.as_str())?;
    let z = z_score(b.retrieval_rate, b.trials, w.retrieval_rate, w.trials);
    Some(Comparison {
        better,
        worse,
        better_rate: b.retrieval_rate,
        worse_rate: w.retrieval_rate,
        z: z.is_finite().then_some(z),
        significant: z >= SIGMAS,
    })
}

pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &policy in &cfg.policies {
        let run = run_passkey(&PasskeyConfig {
            policy,
            ..cfg.base.clone()
        })?;
        rows.push(AblationRow::new(policy.as_str().to_string(), &run.report));
    }
    for &k in &cfg.k_sweep {
        let run = run_passkey(&PasskeyConfig {
            num_selected: k,
            trials: cfg.sweep_trials,
            policy: PolicyTag::TopK,
            ..cfg.base.clone()
        })?;
        rows.push(AblationRow::new(format!("k={k}"), &run.report));
    }
    for &l in &cfg.l_sweep {
        if l == 0 || !cfg.window.is_multiple_of(l) || cfg.window / l < 2 {
            return Err(Error::Config(format!(
                "chunk size {l} does not split window {} into at least two chunks",
                cfg.window
            )));
        }
        let run = run_passkey(&PasskeyConfig {
            num_selected: cfg.window / l,
            trials: cfg.sweep_trials,
            policy: PolicyTag::TopK,
            shape: PasskeyShape {
                chunk_size: l,
                ..cfg.base.shape
            },
            ..cfg.base.clone()
        })?;
        rows.push(AblationRow::new(format!("l={l}"), &run.report));
    }
    let comparisons: Vec<Comparison> = [
        (PolicyTag::TopK, PolicyTag::Random),
        (PolicyTag::Random, PolicyTag::LastK),
    ]
    .into_iter()
    .filter_map(|(b, w)| compare(&rows, b, w))
    .collect();
    let ordering_holds = (comparisons.len() == 2).then(|| comparisons.iter().all(|c| c.significant));
    Ok(AblationReport {
        base: cfg.base.clone(),
        rows,
        comparisons,
        ordering_holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_and_sweeps() {
        let cfg = AblationConfig {
            base: PasskeyConfig {
                trials: 200,
                ..AblationConfig::default().base
            },
            policies: PolicyTag::ALL.to_vec(),
            k_sweep: vec![4, 8],
            l_sweep: vec![8, 16],
            window: 64,
            sweep_trials: 2,
        };
        let report = run_ablation(&cfg).unwrap();
        assert_eq!(report.rows.len(), 7 + 2 + 2);
        let row = |v: &str| report.rows.iter().find(|r| r.variant == v).unwrap();
        assert_eq!(row("top-k").retrieval_rate, 1.0);
        assert_eq!(row("last-k").retrieval_rate, 0.0);
        assert!(row("random").retrieval_rate > 0.0 && row("random").retrieval_rate < 1.0);
        assert!(row("no-first").degenerate);
        assert_eq!(row("k=4").rows_gathered_per_head_step, 4 * 16);
        assert_eq!(row("k=8").rows_gathered_per_head_step, 8 * 16);
        assert_eq!(row("l=8").window, 64);
        assert_eq!(row("l=16").window, 64);
        assert_eq!(row("l=8").rows_gathered_per_head_step, 64);
        assert_eq!(report.ordering_holds, Some(true));
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"degenerate\":true"));
    }

    #[test]
    fn rejects_bad_sweep() {
        let cfg = AblationConfig {
            policies: vec![],
            l_sweep: vec![48],
            window: 64,
            ..AblationConfig::default()
        };
        assert!(run_ablation(&cfg).is_err());
    }
}
