//! Rotary position embeddings over a fixed table of `L` positions.
//!
//! The table refuses any position at or past `L`. Every call is also
//! recorded in [`RotaryStats`] so runs can prove after the fact that no
//! out-of-range position was ever requested.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};

const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Default)]
struct RotaryStats {
    rows: AtomicU64,
    calls: AtomicU64,
    rejected: AtomicU64,
    // position + 1 of the largest position rotated, 0 when none
    max_position_plus_one: AtomicUsize,
}

/// Counters describing every rotation requested from a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RotarySnapshot {
    pub rows: u64,
    pub calls: u64,
    /// Requests refused because a position was `>= L`.
    pub rejected: u64,
    pub max_position: Option<usize>,
}

#[derive(Debug)]
pub struct RotaryTable {
    d_head: usize,
    limit: usize,
    // limit x d_head/2, row-major
    cos: Vec<f32>,
    sin: Vec<f32>,
    stats: RotaryStats,
}

impl RotaryTable {
    pub fn new(d_head: usize, limit: usize) -> Result<Self> {
        if d_head == 0 || !d_head.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary needs an even positive head dim, got {d_head}"
            )));
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(limit * half);
        let mut sin = Vec::with_capacity(limit * half);
        for pos in 0..limit {
            for i in 0..half {
                let inv_freq = ROPE_BASE.powf(-2.0 * i as f64 / d_head as f64);
                let angle = pos as f64 * inv_freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Ok(Self {
            d_head,
            limit,
            cos,
            sin,
            stats: RotaryStats::default(),
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    /// Number of positions covered (`L`).
    pub fn limit(&self) -> usize {
        self.limit
    }

    /// Rotates consecutive rows of `data` (each `d_head` wide) in place, row
    /// `i` at `positions[i]`. Nothing is modified if any position is out of range.
    pub fn rotate_rows(&self, data: &mut [f32], positions: &[usize]) -> Result<()> {
        if data.len() != positions.len() * self.d_head {
            return Err(Error::shape(
                format!("{} rows of width {}", positions.len(), self.d_head),
                format!("{} values", data.len()),
            ));
        }
        self.stats.calls.fetch_add(1, Ordering::Relaxed);
        let Some(&max) = positions.iter().max() else {
            return Ok(());
        };
        if max >= self.limit {
            self.stats.rejected.fetch_add(1, Ordering::Relaxed);
            return Err(Error::PositionOutOfRange {
                position: max,
                limit: self.limit,
            });
        }
        let half = self.d_head / 2;
        for (row, &pos) in data.chunks_exact_mut(self.d_head).zip(positions) {
            let cos = &self.cos[pos * half..(pos + 1) * half];
            let sin = &self.sin[pos * half..(pos + 1) * half];
            let (lo, hi) = row.split_at_mut(half);
            for i in 0..half {
                let (a, b) = (lo[i], hi[i]);
                lo[i] = a * cos[i] - b * sin[i];
                hi[i] = a * sin[i] + b * cos[i];
            }
        }
        self.stats
            .rows
            .fetch_add(positions.len() as u64, Ordering::Relaxed);
        self.stats
            .max_position_plus_one
            .fetch_max(max + 1, Ordering::Relaxed);
        Ok(())
    }

    pub fn rotate_row(&self, row: &mut [f32], position: usize) -> Result<()> {
        self.rotate_rows(row, &[position])
    }

    /// Returns a copy of `states` with row `i` rotated to `positions[i]`.
    pub fn apply(&self, states: &Array2<f32>, positions: &[usize]) -> Result<Array2<f32>> {
        if states.ncols() != self.d_head || states.nrows() != positions.len() {
            return Err(Error::shape(
                format!("{} x {}", positions.len(), self.d_head),
                format!("{} x {}", states.nrows(), states.ncols()),
            ));
        }
        let mut out = states.as_standard_layout().into_owned();
        let data = out
            .as_slice_mut()
            .expect("standard layout arrays are contiguous");
        self.rotate_rows(data, positions)?;
        Ok(out)
    }

    pub fn stats(&self) -> RotarySnapshot {
        let max = self.stats.max_position_plus_one.load(Ordering::Relaxed);
        RotarySnapshot {
            rows: self.stats.rows.load(Ordering::Relaxed),
            calls: self.stats.calls.load(Ordering::Relaxed),
            rejected: self.stats.rejected.load(Ordering::Relaxed),
            max_position: max.checked_sub(1),
        }
    }

    pub fn reset_stats(&self) {
        self.stats.rows.store(0, Ordering::Relaxed);
        self.stats.calls.store(0, Ordering::Relaxed);
        self.stats.rejected.store(0, Ordering::Relaxed);
        self.stats.max_position_plus_one.store(0, Ordering::Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dot64(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn position_zero_is_identity() {
        let table = RotaryTable::new(8, 16).unwrap();
        let row: Vec<f32> = (0..8).map(|i| i as f32 * 0.37 - 1.0).collect();
        let mut rotated = row.clone();
        table.rotate_row(&mut rotated, 0).unwrap();
        assert_eq!(rotated, row);
    }

    #[test]
    fn rejects_position_at_limit() {
        let table = RotaryTable::new(4, 16).unwrap();
        let mut row = vec![1.0; 4];
        table.rotate_row(&mut row, 15).unwrap();
        let before = row.clone();
        assert!(matches!(
            table.rotate_row(&mut row, 16),
            Err(Error::PositionOutOfRange {
                position: 16,
                limit: 16
            })
        ));
        assert_eq!(row, before);
        let s = table.stats();
        assert_eq!(s.rejected, 1);
        assert_eq!(s.max_position, Some(15));
        assert_eq!(s.rows, 1);
    }

    #[test]
    fn odd_head_dim_rejected() {
        assert!(RotaryTable::new(5, 8).is_err());
    }

    #[test]
    fn apply_checks_shape() {
        let table = RotaryTable::new(4, 8).unwrap();
        let states = Array2::<f32>::zeros((3, 4));
        assert!(table.apply(&states, &[0, 1]).is_err());
        assert!(table.apply(&states, &[0, 1, 2]).is_ok());
    }

    #[test]
    fn preserves_norm() {
        let table = RotaryTable::new(16, 128).unwrap();
        let row: Vec<f32> = (0..16).map(|i| ((i * 7) % 5) as f32 - 2.0).collect();
        let mut r = row.clone();
        table.rotate_row(&mut r, 97).unwrap();
        assert!((dot64(&r, &r) - dot64(&row, &row)).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn scores_depend_only_on_offset(
            q in prop::collection::vec(-1.0f32..1.0, 16),
            k in prop::collection::vec(-1.0f32..1.0, 16),
            p1 in 0usize..256,
            p2 in 0usize..256,
            shift in 0usize..256,
        ) {
            let table = RotaryTable::new(16, 512).unwrap();
            let score = |a: usize, b: usize| {
                let (mut qr, mut kr) = (q.clone(), k.clone());
                table.rotate_row(&mut qr, a).unwrap();
                table.rotate_row(&mut kr, b).unwrap();
                dot64(&qr, &kr)
            };
            let base = score(p1, p2);
            let shifted = score(p1 + shift, p2 + shift);
            prop_assert!((base - shifted).abs() < 1e-6, "{base} vs {shifted}");
        }
    }
}
