//! Flat storage for fixed-width keys.
//!
//! Every encoded key produced under one [`Theta`](crate::codec::Theta) has
//! the same length, so a batch of keys is kept as one contiguous byte buffer
//! instead of a vector of strings. The buffer length is also the key bytes
//! charged against the trusted region.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq, Default)]
pub struct KeyBlock {
    width: usize,
    bytes: Vec<u8>,
}

impl KeyBlock {
    pub fn new(width: usize) -> Self {
        KeyBlock {
            width,
            bytes: Vec::new(),
        }
    }

    pub fn with_capacity(width: usize, keys: usize) -> Self {
        KeyBlock {
            width,
            bytes: Vec::with_capacity(width * keys),
        }
    }

    /// Wraps an already concatenated buffer.
    pub fn from_bytes(width: usize, bytes: Vec<u8>) -> Result<Self> {
        if width == 0 {
            if !bytes.is_empty() {
                return Err(Error::invalid("zero-width block with payload"));
            }
        } else if !bytes.len().is_multiple_of(width) {
            return Err(Error::invalid(format!(
                "buffer of {} bytes is not a multiple of key width {width}",
                bytes.len()
            )));
        }
        Ok(KeyBlock { width, bytes })
    }

    pub fn from_strs<S: AsRef<str>>(width: usize, keys: &[S]) -> Result<Self> {
        let mut block = KeyBlock::with_capacity(width, keys.len());
        for key in keys {
            block.push(key.as_ref().as_bytes())?;
        }
        Ok(block)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.bytes.len() / self.width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn push(&mut self, key: &[u8]) -> Result<()> {
        if key.len() != self.width {
            return Err(Error::invalid(format!(
                "key of length {} in block of width {}",
                key.len(),
                self.width
            )));
        }
        self.bytes.extend_from_slice(key);
        Ok(())
    }

    #[inline]
    pub fn get(&self, index: usize) -> &[u8] {
        &self.bytes[index * self.width..(index + 1) * self.width]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[u8]> + '_ {
        // chunks_exact panics on zero width; an empty block has no keys anyway.
        self.bytes.chunks_exact(self.width.max(1))
    }

    pub fn append(&mut self, other: &KeyBlock) -> Result<()> {
        if other.width != self.width && !other.is_empty() {
            return Err(Error::invalid("appending blocks of different widths"));
        }
        self.bytes.extend_from_slice(&other.bytes);
        Ok(())
    }

    pub fn is_strictly_sorted(&self) -> bool {
        let mut prev: Option<&[u8]> = None;
        for key in self.iter() {
            if let Some(p) = prev {
                if p >= key {
                    return false;
                }
            }
            prev = Some(key);
        }
        true
    }

    /// Sorts bytewise and removes duplicates in place.
    pub fn sort_dedup(&mut self) {
        let n = self.len();
        if n < 2 {
            return;
        }
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_unstable_by(|&a, &b| self.get(a as usize).cmp(self.get(b as usize)));
        let mut out = Vec::with_capacity(self.bytes.len());
        let mut last: Option<usize> = None;
        for idx in order {
            let key = self.get(idx as usize);
            if let Some(l) = last {
                if &out[l..l + self.width] == key {
                    continue;
                }
            }
            last = Some(out.len());
            out.extend_from_slice(key);
        }
        self.bytes = out;
    }

    /// Binary search; the block must be sorted.
    pub fn binary_search(&self, key: &[u8]) -> std::result::Result<usize, usize> {
        let (mut lo, mut hi) = (0usize, self.len());
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            match self.get(mid).cmp(key) {
                Ordering::Less => lo = mid + 1,
                Ordering::Greater => hi = mid,
                Ordering::Equal => return Ok(mid),
            }
        }
        Err(lo)
    }

    /// Index of the first key `>= key` in a sorted block.
    pub fn lower_bound(&self, key: &[u8]) -> usize {
        match self.binary_search(key) {
            Ok(i) | Err(i) => i,
        }
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.iter()
            .map(|k| String::from_utf8_lossy(k).into_owned())
            .collect()
    }
}

impl fmt::Debug for KeyBlock {
    // Keys are client trajectory data; never print them.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyBlock")
            .field("width", &self.width)
            .field("len", &self.len())
            .finish()
    }
}
