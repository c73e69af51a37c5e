//! Fixed-size segmentation of a token stream.
//!
//! Chunk `i` covers tokens `[i*l, (i+1)*l)`. A trailing partial chunk is part
//! of the layout but stays unsealed; its tokens form the recent region.

use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLayout {
    n: usize,
    chunk_size: usize,
}

impl ChunkLayout {
    pub fn new(n: usize, chunk_size: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let mut layout = Self::empty(chunk_size)?;
        layout.n = n;
        Ok(layout)
    }

    /// A layout with no tokens yet, for streaming with [`ChunkLayout::advance`].
    pub fn empty(chunk_size: usize) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::Config("chunk size must be positive".into()));
        }
        Ok(Self { n: 0, chunk_size })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    /// Chunks holding exactly `l` tokens; these are the sealed ones.
    pub fn complete_chunks(&self) -> usize {
        self.n / self.chunk_size
    }

    pub fn tail_len(&self) -> usize {
        self.n % self.chunk_size
    }

    /// `ceil(n / l)`.
    pub fn num_chunks(&self) -> usize {
        self.n.div_ceil(self.chunk_size)
    }

    pub fn chunk_bounds(&self, chunk: usize) -> Option<Range<usize>> {
        let start = chunk * self.chunk_size;
        (start < self.n).then(|| start..(start + self.chunk_size).min(self.n))
    }

    pub fn bounds(&self) -> Vec<Range<usize>> {
        (0..self.num_chunks())
            .filter_map(|c| self.chunk_bounds(c))
            .collect()
    }

    /// Token range of the unsealed tail.
    pub fn recent_range(&self) -> Range<usize> {
        self.complete_chunks() * self.chunk_size..self.n
    }

    /// Appends token `index`, which must equal the current length. Returns the
    /// chunk sealed by this token, if it completed one.
    pub fn advance(&mut self, index: usize) -> Result<Option<usize>> {
        if index != self.n {
            return Err(Error::NonMonotonic {
                expected: self.n,
                got: index,
            });
        }
        self.n += 1;
        Ok(self.n.is_multiple_of(self.chunk_size).then(|| self.n / self.chunk_size - 1))
    }
}
