//! Hash-set baseline dictionary.

use std::hash::Hasher;

use rustc_hash::FxHasher;

use super::{append_crc, check_crc, Reader};
use crate::error::{Error, Result};
use crate::keys::KeyBlock;

pub const MAGIC: &[u8; 4] = b"PCTH";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 2 + 8;

const EMPTY: u32 = u32::MAX;

/// Open-addressing hash set over fixed-width keys stored back to back.
#[derive(Clone)]
pub struct HashDictionary {
    key_length: usize,
    keys: Vec<u8>,
    slots: Vec<u32>,
}

impl std::fmt::Debug for HashDictionary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HashDictionary")
            .field("key_length", &self.key_length)
            .field("key_count", &self.key_count())
            .finish()
    }
}

impl PartialEq for HashDictionary {
    fn eq(&self, other: &Self) -> bool {
        self.key_length == other.key_length && self.sorted_keys() == other.sorted_keys()
    }
}

impl Eq for HashDictionary {}

/// Builds from any key multiset; duplicates collapse. All keys must share one length.
pub fn build_hash_baseline<I, K>(keys: I) -> Result<HashDictionary>
where
    I: IntoIterator<Item = K>,
    K: AsRef<[u8]>,
{
    let mut it = keys.into_iter().peekable();
    let key_length = it.peek().map(|k| k.as_ref().len()).unwrap_or(0);
    HashDictionary::from_keys(key_length, it)
}

#[inline]
fn hash_key(key: &[u8]) -> u64 {
    let mut h = FxHasher::default();
    h.write(key);
    h.finish()
}

impl HashDictionary {
    fn with_capacity(key_length: usize, n: usize) -> Self {
        let cap = (n.max(1) * 2).next_power_of_two();
        HashDictionary {
            key_length,
            keys: Vec::with_capacity(n * key_length),
            slots: vec![EMPTY; cap],
        }
    }

    fn key_at(&self, i: u32) -> &[u8] {
        let start = i as usize * self.key_length;
        &self.keys[start..start + self.key_length]
    }

    /// Slot holding `key`, or the empty slot where it would go.
    #[inline]
    fn find_slot(&self, key: &[u8]) -> usize {
        let mask = self.slots.len() - 1;
        let mut pos = hash_key(key) as usize & mask;
        loop {
            let s = self.slots[pos];
            if s == EMPTY || self.key_at(s) == key {
                return pos;
            }
            pos = (pos + 1) & mask;
        }
    }

    fn grow(&mut self) {
        let cap = self.slots.len() * 2;
        let mut slots = vec![EMPTY; cap];
        let mask = cap - 1;
        for i in 0..self.key_count() as u32 {
            let mut pos = hash_key(self.key_at(i)) as usize & mask;
            while slots[pos] != EMPTY {
                pos = (pos + 1) & mask;
            }
            slots[pos] = i;
        }
        self.slots = slots;
    }

    /// Returns false if the key was already present.
    fn insert(&mut self, key: &[u8]) -> bool {
        if (self.key_count() as usize + 1) * 2 > self.slots.len() {
            self.grow();
        }
        let pos = self.find_slot(key);
        if self.slots[pos] != EMPTY {
            return false;
        }
        self.slots[pos] = self.key_count() as u32;
        self.keys.extend_from_slice(key);
        true
    }

    pub fn from_keys<I, K>(key_length: usize, keys: I) -> Result<Self>
    where
        I: IntoIterator<Item = K>,
        K: AsRef<[u8]>,
    {
        let keys = keys.into_iter();
        let mut d = Self::with_capacity(key_length, keys.size_hint().0);
        for k in keys {
            let k = k.as_ref();
            if k.len() != key_length {
                return Err(Error::invalid(format!(
                    "key of length {} in a dictionary of {key_length}-byte keys",
                    k.len()
                )));
            }
            if d.key_count() >= (u32::MAX - 1) as u64 {
                return Err(Error::invalid("hash dictionary holds at most 2^32 - 2 keys"));
            }
            d.insert(k);
        }
        Ok(d)
    }

    pub fn key_length(&self) -> usize {
        self.key_length
    }

    pub fn key_count(&self) -> u64 {
        if self.key_length == 0 {
            // at most the empty key
            return (!self.slots.iter().all(|&s| s == EMPTY)) as u64;
        }
        (self.keys.len() / self.key_length) as u64
    }

    #[inline]
    pub fn contains(&self, key: &[u8]) -> bool {
        key.len() == self.key_length && self.slots[self.find_slot(key)] != EMPTY
    }

    pub fn sorted_keys(&self) -> Vec<&[u8]> {
        let mut keys: Vec<&[u8]> = (0..self.key_count() as u32).map(|i| self.key_at(i)).collect();
        keys.sort_unstable();
        keys
    }

    pub fn serialized_len(&self) -> u64 {
        (HEADER_LEN + self.key_count() as usize * self.key_length + 4) as u64
    }

    pub fn serialize(&self) -> Vec<u8> {
        let keys = self.sorted_keys();
        serialize_keys(self.key_length, keys.len(), keys.into_iter())
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::format("bad hash dictionary magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::format(format!("unsupported hash dictionary version {version}")));
        }
        let body = check_crc(bytes, HEADER_LEN)?;
        let mut r = Reader::new(body);
        r.take(6)?;
        let key_length = r.u16()? as usize;
        let key_count = r.u64()?;
        let expected = (key_count as u128) * (key_length as u128);
        if r.remaining() as u128 != expected {
            return Err(Error::format("key payload length does not match header"));
        }
        if key_length == 0 && key_count > 1 || key_count >= (u32::MAX - 1) as u64 {
            return Err(Error::format("impossible key count in hash dictionary file"));
        }
        let payload = r.take(r.remaining())?;
        let mut d = Self::with_capacity(key_length, key_count as usize);
        if key_length == 0 {
            if key_count == 1 {
                d.insert(&[]);
            }
        } else {
            for k in payload.chunks_exact(key_length) {
                if !d.insert(k) {
                    return Err(Error::format("duplicate keys in hash dictionary file"));
                }
            }
        }
        Ok(d)
    }
}

fn serialize_keys<'a>(key_length: usize, count: usize, keys: impl Iterator<Item = &'a [u8]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + count * key_length + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(key_length as u16).to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for k in keys {
        out.extend_from_slice(k);
    }
    append_crc(&mut out);
    out
}

/// Writes the `PCTH` image straight from a sorted, duplicate-free block,
/// skipping the hash table. Same bytes as building and serializing.
pub fn serialize_sorted_block(block: &KeyBlock) -> Result<Vec<u8>> {
    if !block.is_strictly_sorted() {
        return Err(Error::Ordering("hash dictionary block is not sorted and unique".into()));
    }
    Ok(serialize_keys(block.width(), block.len(), block.iter()))
}
