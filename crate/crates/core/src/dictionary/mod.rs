//! Exact-membership dictionaries over fixed-width keys.
//!
//! Two backends share one contract: a minimal acyclic automaton
//! ([`FsaAutomaton`]) and a hash-set baseline ([`HashDictionary`]). Both
//! answer `contains` exactly, with no false positives or negatives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod fsa;
pub mod hash;

pub use fsa::{build_fsa, FsaAutomaton, FsaBuilder, FsaStats};
pub use hash::{build_hash_baseline, serialize_sorted_block, HashDictionary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Fsa,
    Hash,
}

impl Backend {
    pub fn file_extension(self) -> &'static str {
        match self {
            Backend::Fsa => "fsa",
            Backend::Hash => "pcth",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Fsa => "fsa",
            Backend::Hash => "hash",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fsa" => Ok(Backend::Fsa),
            "hash" | "ht" => Ok(Backend::Hash),
            other => Err(Error::invalid(format!("unknown backend {other:?}"))),
        }
    }
}

/// A loaded chunk of the corpus, whichever backend built it.
#[derive(Debug, Clone)]
pub enum KeyDictionary {
    Fsa(FsaAutomaton),
    Hash(HashDictionary),
}

impl KeyDictionary {
    /// Builds from strictly increasing keys of equal length.
    pub fn build_sorted<I, K>(backend: Backend, key_length: usize, keys: I) -> Result<Self>
    where
        I: IntoIterator<Item = K>,
        K: AsRef<[u8]>,
    {
        match backend {
            Backend::Fsa => {
                let mut b = FsaBuilder::with_key_length(key_length);
                for k in keys {
                    b.insert(k.as_ref())?;
                }
                Ok(KeyDictionary::Fsa(b.finish()))
            }
            Backend::Hash => Ok(KeyDictionary::Hash(HashDictionary::from_keys(
                key_length, keys,
            )?)),
        }
    }

    pub fn backend(&self) -> Backend {
        match self {
            KeyDictionary::Fsa(_) => Backend::Fsa,
            KeyDictionary::Hash(_) => Backend::Hash,
        }
    }

    #[inline]
    pub fn contains(&self, key: &[u8]) -> bool {
        match self {
            KeyDictionary::Fsa(a) => a.contains(key),
            KeyDictionary::Hash(h) => h.contains(key),
        }
    }

    pub fn key_count(&self) -> u64 {
        match self {
            KeyDictionary::Fsa(a) => a.key_count(),
            KeyDictionary::Hash(h) => h.key_count(),
        }
    }

    pub fn key_length(&self) -> usize {
        match self {
            KeyDictionary::Fsa(a) => a.key_length(),
            KeyDictionary::Hash(h) => h.key_length(),
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        match self {
            KeyDictionary::Fsa(a) => a.serialize(),
            KeyDictionary::Hash(h) => h.serialize(),
        }
    }

    pub fn serialized_len(&self) -> u64 {
        match self {
            KeyDictionary::Fsa(a) => a.stats().serialized_bytes,
            KeyDictionary::Hash(h) => h.serialized_len(),
        }
    }

    /// Dispatches on the file magic.
    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        match bytes.get(..4) {
            Some(m) if m == fsa::MAGIC => Ok(KeyDictionary::Fsa(FsaAutomaton::deserialize(bytes)?)),
            Some(m) if m == hash::MAGIC => Ok(KeyDictionary::Hash(HashDictionary::deserialize(bytes)?)),
            _ => Err(Error::format("unrecognized dictionary magic")),
        }
    }

    /// All keys in ascending order.
    pub fn sorted_keys(&self) -> Vec<Vec<u8>> {
        match self {
            KeyDictionary::Fsa(a) => a.keys().collect(),
            KeyDictionary::Hash(h) => h.sorted_keys().into_iter().map(<[u8]>::to_vec).collect(),
        }
    }
}

pub(crate) fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

pub(crate) fn varint_len(mut v: u64) -> u64 {
    let mut n = 1;
    while v >= 0x80 {
        v >>= 7;
        n += 1;
    }
    n
}

/// Byte cursor over a serialized dictionary; every short read is a format error.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format("truncated input"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn varint(&mut self) -> Result<u64> {
        let mut v: u64 = 0;
        for shift in (0..64).step_by(7) {
            let b = self.u8()?;
            v |= ((b & 0x7f) as u64) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(Error::format("varint overflow"))
    }
}

/// Splits off and checks the trailing CRC32. `min_len` covers magic and
/// version so those are reported as format errors before integrity is checked.
pub(crate) fn check_crc(bytes: &[u8], min_len: usize) -> Result<&[u8]> {
    if bytes.len() < min_len + 4 {
        return Err(Error::format("truncated input"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Integrity(format!(
            "crc32 mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    Ok(body)
}

pub(crate) fn append_crc(out: &mut Vec<u8>) {
    let crc = crc32fast::hash(out);
    out.extend_from_slice(&crc.to_le_bytes());
}
