//! Contiguous position assignment for a head's selected context.
//!
//! Selected chunks are laid out back to back from position 0 in their
//! original order, followed by the unsealed recent region and finally the
//! query token. Gaps between chunks are simply dropped, so the largest
//! position is bounded by the window size rather than by the text length.

use std::ops::Range;

use serde::Serialize;

use crate::chunker::ChunkLayout;
use crate::error::{Error, Result};
use crate::selector::SelectionSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentId {
    Chunk(usize),
    Recent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub id: SegmentId,
    pub original: Range<usize>,
    pub remapped: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PositionMap {
    pub segments: Vec<Segment>,
    /// Next free slot after every segment.
    pub query_position: usize,
}

impl PositionMap {
    /// Remapped position of every key row, segment by segment (query excluded).
    pub fn key_positions(&self) -> Vec<usize> {
        self.segments
            .iter()
            .flat_map(|s| s.remapped.clone())
            .collect()
    }

    /// Original token index of every key row, in the same order.
    pub fn original_positions(&self) -> Vec<usize> {
        self.segments
            .iter()
            .flat_map(|s| s.original.clone())
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.segments.iter().all(|s| s.original == s.remapped)
            && self
                .segments
                .last()
                .is_none_or(|s| s.original.end == self.query_position)
    }
}

/// Remaps the ascending `chunks` of `layout` plus `recent_len` trailing tokens.
///
/// The recent region is taken to start right after the last complete chunk
/// of `layout`. Fails when the query would land at or past `limit`.
pub fn remap_chunks(
    chunks: &[usize],
    layout: &ChunkLayout,
    recent_len: usize,
    limit: usize,
) -> Result<PositionMap> {
    let sealed = layout.complete_chunks();
    let mut segments = Vec::with_capacity(chunks.len() + 1);
    let mut next = 0;
    let mut prev: Option<usize> = None;
    for &chunk in chunks {
        if chunk >= sealed {
            return Err(Error::UnknownChunk { chunk, sealed });
        }
        if prev.is_some_and(|p| p >= chunk) {
            return Err(Error::Precondition(format!(
                "selected chunks must be strictly ascending, got {chunks:?}"
            )));
        }
        prev = Some(chunk);
        let original = layout
            .chunk_bounds(chunk)
            .expect("complete chunks have bounds");
        let len = original.len();
        segments.push(Segment {
            id: SegmentId::Chunk(chunk),
            original,
            remapped: next..next + len,
        });
        next += len;
    }
    if recent_len > 0 {
        let start = sealed * layout.chunk_size();
        segments.push(Segment {
            id: SegmentId::Recent,
            original: start..start + recent_len,
            remapped: next..next + recent_len,
        });
        next += recent_len;
    }
    if next + 1 > limit {
        return Err(Error::CapacityExceeded {
            needed: next + 1,
            limit,
        });
    }
    Ok(PositionMap {
        segments,
        query_position: next,
    })
}

pub fn remap(
    set: &SelectionSet,
    layout: &ChunkLayout,
    recent_len: usize,
    limit: usize,
) -> Result<PositionMap> {
    remap_chunks(&set.chunks, layout, recent_len, limit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn collapses_gaps_between_chunks() {
        let l = 16;
        let layout = ChunkLayout::new(8 * l, l).unwrap();
        let map = remap_chunks(&[0, 1, 6, 7], &layout, 0, 1024).unwrap();
        let remapped: Vec<_> = map.segments.iter().map(|s| s.remapped.clone()).collect();
        let original: Vec<_> = map.segments.iter().map(|s| s.original.clone()).collect();
        assert_eq!(remapped, vec![0..l, l..2 * l, 2 * l..3 * l, 3 * l..4 * l]);
        assert_eq!(original, vec![0..l, l..2 * l, 6 * l..7 * l, 7 * l..8 * l]);
        assert_eq!(map.query_position, 4 * l);
        assert!(!map.is_identity());
    }

    #[test]
    fn chunk_then_recent() {
        let layout = ChunkLayout::new(8, 5).unwrap();
        let map = remap_chunks(&[0], &layout, 3, 64).unwrap();
        assert_eq!(map.segments[0].remapped, 0..5);
        assert_eq!(map.segments[1].remapped, 5..8);
        assert_eq!(map.segments[1].original, 5..8);
        assert_eq!(map.query_position, 8);
        assert!(map.is_identity());
    }

    #[test]
    fn saturated_selection_is_identity() {
        let layout = ChunkLayout::new(70, 16).unwrap();
        let map = remap_chunks(&[0, 1, 2, 3], &layout, 6, 128).unwrap();
        assert!(map.is_identity());
        assert_eq!(map.key_positions(), (0..70).collect::<Vec<_>>());
        assert_eq!(map.query_position, 70);
    }

    #[test]
    fn capacity_and_unknown_chunks() {
        let layout = ChunkLayout::new(64, 16).unwrap();
        assert!(remap_chunks(&[0, 1, 2, 3], &layout, 0, 65).is_ok());
        assert!(matches!(
            remap_chunks(&[0, 1, 2, 3], &layout, 0, 64),
            Err(Error::CapacityExceeded { needed: 65, limit: 64 })
        ));
        assert!(matches!(
            remap_chunks(&[0, 4], &layout, 0, 1000),
            Err(Error::UnknownChunk { chunk: 4, sealed: 4 })
        ));
        assert!(remap_chunks(&[2, 1], &layout, 0, 1000).is_err());
    }

    proptest! {
        #[test]
        fn positions_contiguous_bounded_and_ordered(
            sealed in 1usize..60,
            l in 1usize..20,
            picks in prop::collection::btree_set(0usize..60, 0..10),
            recent in 0usize..20,
        ) {
            let recent = recent % l;
            let layout = ChunkLayout::new(sealed * l + recent, l).unwrap();
            let chunks: Vec<usize> = picks.into_iter().filter(|&c| c < sealed).collect();
            let limit = chunks.len() * l + recent + 1;
            let map = remap_chunks(&chunks, &layout, recent, limit).unwrap();
            let pos = map.key_positions();
            prop_assert_eq!(&pos, &(0..pos.len()).collect::<Vec<_>>());
            prop_assert_eq!(map.query_position, pos.len());
            prop_assert!(map.query_position < limit);
            let orig = map.original_positions();
            prop_assert!(orig.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
