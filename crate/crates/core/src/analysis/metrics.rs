//! Selection-quality metrics over a [`SelectionTrace`].

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::selector::rank_candidates;
use crate::trace::{SelectionTrace, TraceRecord};

fn check_chunk(chunk: usize, m: usize) -> Result<()> {
    if chunk >= m {
        return Err(Error::UnknownChunk { chunk, sealed: m });
    }
    Ok(())
}

/// How often each of the `m` chunks appears in a selection set.
pub fn selection_counts(trace: &SelectionTrace, m: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; m];
    for r in &trace.records {
        for &c in &r.chunks {
            check_chunk(c, m)?;
            counts[c] += 1;
        }
    }
    Ok(counts)
}

/// Fraction of the `m` chunks selected at least once by any head, layer or step.
pub fn cover_rate(trace: &SelectionTrace, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Config("cover rate needs at least one chunk".into()));
    }
    if trace.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut seen = BTreeSet::new();
    for r in &trace.records {
        for &c in &r.chunks {
            check_chunk(c, m)?;
            seen.insert(c);
        }
    }
    Ok(seen.len() as f64 / m as f64)
}

/// Gini coefficient of per-chunk counts: `sum_i sum_j |x_i - x_j| / (2 m^2 mean)`.
///
/// Evaluated in integer arithmetic through the sorted form
/// `sum_i (2i - m + 1) x_(i) / (m sum x)`, so the only rounding is the final
/// division.
pub fn gini(counts: &[u64]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return Err(Error::AllZeroCounts);
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let m = sorted.len() as i128;
    let num: i128 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (2 * i as i128 - m + 1) * x as i128)
        .sum();
    let den = m * total as i128;
    Ok(num as f64 / den as f64)
}

fn scores(r: &TraceRecord) -> Result<&[(usize, f32)]> {
    r.scores.as_deref().ok_or(Error::MissingScores)
}

/// Whether `target` is among the `top` best-scoring non-mandatory candidates of `r`.
pub fn ranked_within(r: &TraceRecord, target: usize, top: usize) -> Result<bool> {
    Ok(rank_candidates(scores(r)?)
        .iter()
        .take(top)
        .any(|&c| c == target))
}

/// Fraction of records whose `top` best-scoring candidates include `target`.
pub fn hit_rate(trace: &SelectionTrace, target: usize, top: usize) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut hits = 0usize;
    for r in &trace.records {
        hits += ranked_within(r, target, top)? as usize;
    }
    Ok(hits as f64 / trace.len() as f64)
}

/// Fraction of records whose selection set contains `target`.
pub fn containment_rate(trace: &SelectionTrace, target: usize) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = trace
        .records
        .iter()
        .filter(|r| r.chunks.binary_search(&target).is_ok())
        .count();
    Ok(hits as f64 / trace.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub cover_rate: f64,
    pub gini: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_rate_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_rate_top5: Option<f64>,
    pub records: usize,
    pub n_chunks: usize,
    pub counts: Vec<u64>,
}

impl MetricsReport {
    /// Hit rates are filled in only when `target` is given.
    pub fn from_trace(trace: &SelectionTrace, m: usize, target: Option<usize>) -> Result<Self> {
        let counts = selection_counts(trace, m)?;
        let (hit_rate_top1, hit_rate_top5) = match target {
            Some(t) => (Some(hit_rate(trace, t, 1)?), Some(hit_rate(trace, t, 5)?)),
            None => (None, None),
        };
        Ok(Self {
            cover_rate: cover_rate(trace, m)?,
            gini: gini(&counts)?,
            hit_rate_top1,
            hit_rate_top5,
            records: trace.len(),
            n_chunks: m,
            counts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Phase;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(chunks: Vec<usize>, scores: Option<Vec<(usize, f32)>>) -> TraceRecord {
        TraceRecord {
            phase: Phase::Decode,
            step: 0,
            position: 0,
            layer: 0,
            head: 0,
            chunks,
            scores,
        }
    }

    fn trace(records: Vec<TraceRecord>) -> SelectionTrace {
        SelectionTrace {
            records,
            ..SelectionTrace::default()
        }
    }

    fn naive_gini(x: &[u64]) -> f64 {
        let m = x.len() as f64;
        let mean = x.iter().sum::<u64>() as f64 / m;
        let mut s = 0.0;
        for a in x {
            for b in x {
                s += (*a as f64 - *b as f64).abs();
            }
        }
        s / (2.0 * m * m * mean)
    }

    #[test]
    fn gini_reference_values() {
        assert_eq!(gini(&[7; 12]).unwrap(), 0.0);
        assert_eq!(gini(&[1, 2, 3, 4]).unwrap(), 0.25);
        let mut delta = vec![0u64; 100];
        delta[17] = 5;
        assert!((gini(&delta).unwrap() - 0.99).abs() <= 1e-12);
        assert!(matches!(gini(&[0, 0]), Err(Error::AllZeroCounts)));
        assert!(gini(&[]).is_err());
    }

    #[test]
    fn cover_rate_examples() {
        let all = trace((0..10).map(|c| record(vec![c], None)).collect());
        assert_eq!(cover_rate(&all, 10).unwrap(), 1.0);
        let ends = trace(vec![record(vec![0, 9], None); 5]);
        assert_eq!(cover_rate(&ends, 10).unwrap(), 0.2);
        assert!(cover_rate(&ends, 0).is_err());
        assert!(cover_rate(&trace(vec![]), 10).is_err());
        assert!(matches!(
            cover_rate(&ends, 5),
            Err(Error::UnknownChunk { chunk: 9, .. })
        ));
    }

    #[test]
    fn hit_rate_examples() {
        let s = vec![(1, 0.5), (2, 3.0), (3, 1.0), (4, 2.0)];
        let t = trace(vec![record(vec![0, 2, 5], Some(s.clone())); 3]);
        assert_eq!(hit_rate(&t, 2, 1).unwrap(), 1.0);
        assert_eq!(hit_rate(&t, 4, 1).unwrap(), 0.0);
        assert_eq!(hit_rate(&t, 4, 5).unwrap(), 1.0);
        assert_eq!(hit_rate(&t, 7, 5).unwrap(), 0.0);
        assert_eq!(containment_rate(&t, 5).unwrap(), 1.0);
        let bare = trace(vec![record(vec![0], None)]);
        assert!(matches!(hit_rate(&bare, 0, 1), Err(Error::MissingScores)));
    }

    #[test]
    fn report_keys() {
        let t = trace(vec![record(vec![0, 3], Some(vec![(1, 1.0), (2, 0.0)]))]);
        let json = serde_json::to_value(MetricsReport::from_trace(&t, 4, Some(1)).unwrap()).unwrap();
        for key in ["cover_rate", "gini", "hit_rate_top1", "hit_rate_top5", "counts"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let json = serde_json::to_value(MetricsReport::from_trace(&t, 4, None).unwrap()).unwrap();
        assert!(json.get("hit_rate_top1").is_none());
    }

    #[test]
    fn cover_rate_matches_recount_on_random_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let m = rng.random_range(1..40);
            let records: Vec<TraceRecord> = (0..rng.random_range(1..30))
                .map(|_| {
                    let mut c: Vec<usize> = (0..rng.random_range(0..6)).map(|_| rng.random_range(0..m)).collect();
                    c.sort_unstable();
                    c.dedup();
                    record(c, None)
                })
                .collect();
            let mut hit = vec![false; m];
            for r in &records {
                for &c in &r.chunks {
                    hit[c] = true;
                }
            }
            let want = hit.iter().filter(|&&h| h).count() as f64 / m as f64;
            assert_eq!(cover_rate(&trace(records), m).unwrap(), want);
        }
    }

    proptest! {
        #[test]
        fn gini_matches_double_sum_and_bounds(x in prop::collection::vec(0u64..50, 1..40)) {
            prop_assume!(x.iter().any(|&v| v > 0));
            let g = gini(&x).unwrap();
            prop_assert!((g - naive_gini(&x)).abs() <= 1e-12);
            prop_assert!(g >= 0.0);
            prop_assert!(g <= 1.0 - 1.0 / x.len() as f64 + 1e-12);
        }

        #[test]
        fn gini_scale_invariant(x in prop::collection::vec(0u64..50, 1..40), s in 1u64..1000) {
            prop_assume!(x.iter().any(|&v| v > 0));
            let scaled: Vec<u64> = x.iter().map(|v| v * s).collect();
            prop_assert_eq!(gini(&x).unwrap(), gini(&scaled).unwrap());
        }

        #[test]
        fn cover_rate_monotone_and_top5_dominates(
            seq in prop::collection::vec(prop::collection::btree_set(0usize..20, 0..5), 1..20),
            target in 0usize..20,
        ) {
            let mut records = Vec::new();
            let mut prev = 0.0;
            for set in seq {
                let chunks: Vec<usize> = set.into_iter().collect();
                let scores = chunks.iter().map(|&c| (c, (c * 7 % 11) as f32)).collect();
                records.push(record(chunks, Some(scores)));
                let t = trace(records.clone());
                let cr = cover_rate(&t, 20).unwrap();
                prop_assert!(cr >= prev);
                prev = cr;
                prop_assert!(hit_rate(&t, target, 5).unwrap() >= hit_rate(&t, target, 1).unwrap());
            }
        }
    }
}
