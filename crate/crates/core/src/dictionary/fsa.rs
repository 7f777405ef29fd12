//! Minimal deterministic acyclic automaton over equal-length keys.
//!
//! Construction is incremental over sorted input: the states along the
//! previous key that can no longer change are frozen bottom-up and merged
//! with an existing equivalent state when the register already holds one
//! (same accept flag, same ordered transitions). For acyclic input this
//! yields the minimal automaton without a separate minimization pass.

use std::hash::{Hash, Hasher};

use rustc_hash::{FxHashMap, FxHasher};

use super::{append_crc, check_crc, put_varint, varint_len, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCTF";
pub const VERSION: u16 = 1;
/// magic, version, key_length, key_count, state_count, transition_count
pub const HEADER_LEN: usize = 4 + 2 + 2 + 8 + 8 + 8;
const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FsaStats {
    pub state_count: u64,
    pub transition_count: u64,
    pub serialized_bytes: u64,
}

/// An immutable automaton; state 0 is the start and every transition
/// points to a higher-numbered state.
#[derive(Clone, PartialEq, Eq)]
pub struct FsaAutomaton {
    key_length: usize,
    key_count: u64,
    accept: Vec<bool>,
    /// `offsets[s]..offsets[s + 1]` indexes `labels`/`targets` for state `s`.
    offsets: Vec<u32>,
    labels: Vec<u8>,
    targets: Vec<u32>,
}

impl std::fmt::Debug for FsaAutomaton {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FsaAutomaton")
            .field("key_length", &self.key_length)
            .field("key_count", &self.key_count)
            .field("states", &self.state_count())
            .field("transitions", &self.labels.len())
            .finish()
    }
}

#[derive(Default)]
struct Unfinished {
    accept: bool,
    trans: Vec<(u8, u32)>,
    /// Label of the trailing transition whose target is the next stack entry.
    pending: Option<u8>,
}

/// Sorted-input builder. Keys must be strictly increasing, equal length and
/// ASCII (so a state's out-degree always fits the one-byte field on disk).
pub struct FsaBuilder {
    key_length: Option<usize>,
    key_count: u64,
    last: Vec<u8>,
    stack: Vec<Unfinished>,
    // frozen states in creation order; children are always created before parents
    accept: Vec<bool>,
    offsets: Vec<u32>,
    labels: Vec<u8>,
    targets: Vec<u32>,
    register: FxHashMap<u64, u32>,
    chain: Vec<u32>,
}

impl Default for FsaBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl FsaBuilder {
    pub fn new() -> Self {
        FsaBuilder {
            key_length: None,
            key_count: 0,
            last: Vec::new(),
            stack: vec![Unfinished::default()],
            accept: Vec::new(),
            offsets: vec![0],
            labels: Vec::new(),
            targets: Vec::new(),
            register: FxHashMap::default(),
            chain: Vec::new(),
        }
    }

    /// Builder that rejects keys of any other length, and records the length
    /// in the header even when no key is inserted.
    pub fn with_key_length(key_length: usize) -> Self {
        let mut b = Self::new();
        b.key_length = Some(key_length);
        b
    }

    pub fn len(&self) -> u64 {
        self.key_count
    }

    pub fn is_empty(&self) -> bool {
        self.key_count == 0
    }

    pub fn insert(&mut self, key: &[u8]) -> Result<()> {
        match self.key_length {
            Some(len) if len != key.len() => {
                return Err(Error::invalid(format!(
                    "key of length {} in a dictionary of {len}-byte keys",
                    key.len()
                )))
            }
            None if key.is_empty() => return Err(Error::invalid("empty key")),
            None => self.key_length = Some(key.len()),
            _ => {}
        }
        if let Some(b) = key.iter().find(|b| !b.is_ascii()) {
            return Err(Error::invalid(format!("non-ASCII key byte 0x{b:02x}")));
        }
        if self.key_count > 0 && key <= self.last.as_slice() {
            return Err(Error::Ordering(format!(
                "key #{} is not greater than its predecessor",
                self.key_count
            )));
        }

        let prefix = if self.key_count == 0 {
            0
        } else {
            key.iter().zip(&self.last).take_while(|(a, b)| a == b).count()
        };
        self.freeze_down_to(prefix + 1);
        for &b in &key[prefix..] {
            self.stack.last_mut().unwrap().pending = Some(b);
            self.stack.push(Unfinished::default());
        }
        self.stack.last_mut().unwrap().accept = true;

        self.last.clear();
        self.last.extend_from_slice(key);
        self.key_count += 1;
        Ok(())
    }

    fn freeze_down_to(&mut self, depth: usize) {
        while self.stack.len() > depth {
            let node = self.stack.pop().unwrap();
            let id = self.intern(&node);
            let parent = self.stack.last_mut().unwrap();
            let label = parent.pending.take().expect("parent has a pending edge");
            parent.trans.push((label, id));
        }
    }

    fn signature_hash(accept: bool, trans: &[(u8, u32)]) -> u64 {
        let mut h = FxHasher::default();
        accept.hash(&mut h);
        trans.hash(&mut h);
        h.finish()
    }

    fn same_as(&self, id: u32, accept: bool, trans: &[(u8, u32)]) -> bool {
        let s = id as usize;
        if self.accept[s] != accept {
            return false;
        }
        let (lo, hi) = (self.offsets[s] as usize, self.offsets[s + 1] as usize);
        hi - lo == trans.len()
            && trans
                .iter()
                .zip(lo..hi)
                .all(|(&(l, t), i)| self.labels[i] == l && self.targets[i] == t)
    }

    fn intern(&mut self, node: &Unfinished) -> u32 {
        let h = Self::signature_hash(node.accept, &node.trans);
        let mut cur = self.register.get(&h).copied().unwrap_or(NONE);
        let head = cur;
        while cur != NONE {
            if self.same_as(cur, node.accept, &node.trans) {
                return cur;
            }
            cur = self.chain[cur as usize];
        }
        let id = self.accept.len() as u32;
        self.accept.push(node.accept);
        for &(l, t) in &node.trans {
            self.labels.push(l);
            self.targets.push(t);
        }
        self.offsets.push(self.labels.len() as u32);
        self.chain.push(head);
        self.register.insert(h, id);
        id
    }

    pub fn finish(mut self) -> FsaAutomaton {
        self.freeze_down_to(1);
        let root = self.stack.pop().unwrap();
        let root_id = self.intern(&root);
        debug_assert_eq!(root_id as usize, self.accept.len() - 1);

        // Reverse creation order so the start is 0 and edges point forward.
        let n = self.accept.len();
        let mut accept = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(n + 1);
        let mut labels = Vec::with_capacity(self.labels.len());
        let mut targets = Vec::with_capacity(self.targets.len());
        offsets.push(0u32);
        for new_id in 0..n {
            let old = n - 1 - new_id;
            accept.push(self.accept[old]);
            let (lo, hi) = (self.offsets[old] as usize, self.offsets[old + 1] as usize);
            for i in lo..hi {
                labels.push(self.labels[i]);
                targets.push((n - 1 - self.targets[i] as usize) as u32);
            }
            offsets.push(labels.len() as u32);
        }
        FsaAutomaton {
            key_length: self.key_length.unwrap_or(0),
            key_count: self.key_count,
            accept,
            offsets,
            labels,
            targets,
        }
    }
}

/// Builds from strictly increasing, equal-length keys.
pub fn build_fsa<I, K>(sorted_keys: I) -> Result<FsaAutomaton>
where
    I: IntoIterator<Item = K>,
    K: AsRef<[u8]>,
{
    let mut b = FsaBuilder::new();
    for k in sorted_keys {
        b.insert(k.as_ref())?;
    }
    Ok(b.finish())
}

impl FsaAutomaton {
    pub fn empty(key_length: usize) -> Self {
        FsaBuilder::with_key_length(key_length).finish()
    }

    pub fn key_length(&self) -> usize {
        self.key_length
    }

    pub fn key_count(&self) -> u64 {
        self.key_count
    }

    pub fn state_count(&self) -> usize {
        self.accept.len()
    }

    pub fn transition_count(&self) -> usize {
        self.labels.len()
    }

    pub fn is_accepting(&self, state: usize) -> bool {
        self.accept[state]
    }

    /// Outgoing `(label, target)` pairs of a state, sorted by label.
    pub fn transitions(&self, state: usize) -> impl Iterator<Item = (u8, usize)> + '_ {
        let (lo, hi) = (self.offsets[state] as usize, self.offsets[state + 1] as usize);
        (lo..hi).map(move |i| (self.labels[i], self.targets[i] as usize))
    }

    #[inline]
    pub fn contains(&self, key: &[u8]) -> bool {
        if key.len() != self.key_length {
            return false;
        }
        let mut state = 0usize;
        for &b in key {
            let lo = self.offsets[state] as usize;
            let hi = self.offsets[state + 1] as usize;
            match self.labels[lo..hi].iter().position(|&l| l == b) {
                Some(i) => state = self.targets[lo + i] as usize,
                None => return false,
            }
        }
        self.accept[state]
    }

    /// Accepted keys in ascending order.
    pub fn keys(&self) -> Keys<'_> {
        Keys {
            fsa: self,
            stack: if self.key_count == 0 { vec![] } else { vec![(0, 0)] },
            key: Vec::with_capacity(self.key_length),
        }
    }

    pub fn stats(&self) -> FsaStats {
        let mut bytes = HEADER_LEN as u64 + 4;
        if self.key_count > 0 {
            bytes += 2 * self.state_count() as u64 + self.labels.len() as u64;
            for s in 0..self.state_count() {
                for i in self.offsets[s] as usize..self.offsets[s + 1] as usize {
                    bytes += varint_len(self.targets[i] as u64 - s as u64);
                }
            }
        }
        FsaStats {
            state_count: self.state_count() as u64,
            transition_count: self.labels.len() as u64,
            serialized_bytes: bytes,
        }
    }

    /// The `PCTF` file image. An automaton with no keys is written without
    /// state records; its lone non-accepting start state is implied.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 3 * self.labels.len() + 2 * self.accept.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.key_length as u16).to_le_bytes());
        out.extend_from_slice(&self.key_count.to_le_bytes());
        out.extend_from_slice(&(self.state_count() as u64).to_le_bytes());
        out.extend_from_slice(&(self.labels.len() as u64).to_le_bytes());
        if self.key_count > 0 {
            for s in 0..self.state_count() {
                let (lo, hi) = (self.offsets[s] as usize, self.offsets[s + 1] as usize);
                out.push(self.accept[s] as u8);
                out.push((hi - lo) as u8);
                for i in lo..hi {
                    out.push(self.labels[i]);
                    put_varint(&mut out, self.targets[i] as u64 - s as u64);
                }
            }
        }
        append_crc(&mut out);
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::format("bad FSA magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::format(format!("unsupported FSA version {version}")));
        }
        if bytes.len() < HEADER_LEN + 4 {
            return Err(Error::format("truncated FSA header"));
        }
        let body = check_crc(bytes, HEADER_LEN)?;
        let mut r = Reader::new(body);
        r.take(6)?;
        let key_length = r.u16()? as usize;
        let key_count = r.u64()?;
        let state_count = r.u64()?;
        let transition_count = r.u64()?;

        if key_count == 0 {
            if state_count != 1 || transition_count != 0 || r.remaining() != 0 {
                return Err(Error::format("empty automaton must be header-only"));
            }
            return Ok(FsaAutomaton::empty(key_length));
        }
        if state_count == 0 || state_count >= NONE as u64 || transition_count >= NONE as u64 {
            return Err(Error::format("state or transition count out of range"));
        }
        // each state record takes at least two bytes, each transition two more
        if (r.remaining() as u64) < 2 * state_count + 2 * transition_count {
            return Err(Error::format("truncated state records"));
        }
        let n = state_count as usize;
        let mut accept = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(n + 1);
        let mut labels = Vec::with_capacity(transition_count as usize);
        let mut targets = Vec::with_capacity(transition_count as usize);
        offsets.push(0u32);
        for s in 0..n {
            let flag = r.u8()?;
            if flag > 1 {
                return Err(Error::format(format!("bad accept flag {flag}")));
            }
            accept.push(flag == 1);
            let degree = r.u8()? as usize;
            let mut prev: Option<u8> = None;
            for _ in 0..degree {
                let label = r.u8()?;
                if prev.is_some_and(|p| p >= label) {
                    return Err(Error::format(format!("state {s}: labels not strictly increasing")));
                }
                prev = Some(label);
                let delta = r.varint()?;
                let target = s as u64 + delta;
                if delta == 0 || target >= state_count {
                    return Err(Error::format(format!("state {s}: target out of range")));
                }
                labels.push(label);
                targets.push(target as u32);
            }
            if labels.len() as u64 > transition_count {
                return Err(Error::format("more transitions than declared"));
            }
            offsets.push(labels.len() as u32);
        }
        if labels.len() as u64 != transition_count {
            return Err(Error::format("transition count mismatch"));
        }
        if r.remaining() != 0 {
            return Err(Error::format("trailing bytes after state records"));
        }
        let fsa = FsaAutomaton {
            key_length,
            key_count,
            accept,
            offsets,
            labels,
            targets,
        };
        fsa.check_language_shape()?;
        Ok(fsa)
    }

    /// Verifies that every accepted path has `key_length` symbols and that
    /// the number of accepted paths matches the declared key count.
    fn check_language_shape(&self) -> Result<()> {
        let n = self.state_count();
        const UNSEEN: u32 = u32::MAX;
        let mut depth = vec![UNSEEN; n];
        let mut paths = vec![0u64; n];
        depth[0] = 0;
        paths[0] = 1;
        // forward edges only, so index order is a topological order
        for s in 0..n {
            if depth[s] == UNSEEN {
                return Err(Error::format(format!("state {s} unreachable from start")));
            }
            for (_, t) in self.transitions(s) {
                let d = depth[s] + 1;
                if depth[t] == UNSEEN {
                    depth[t] = d;
                } else if depth[t] != d {
                    return Err(Error::format("states reachable at different depths"));
                }
                paths[t] = paths[t].saturating_add(paths[s]);
            }
        }
        let mut accepted = 0u64;
        for s in 0..n {
            if self.accept[s] {
                if depth[s] as usize != self.key_length {
                    return Err(Error::format("accepting state at wrong depth"));
                }
                accepted = accepted.saturating_add(paths[s]);
            }
        }
        if accepted != self.key_count {
            return Err(Error::format(format!(
                "declared {} keys, automaton accepts {accepted}",
                self.key_count
            )));
        }
        Ok(())
    }
}

pub struct Keys<'a> {
    fsa: &'a FsaAutomaton,
    /// (state, next transition index to follow)
    stack: Vec<(usize, usize)>,
    key: Vec<u8>,
}

impl Iterator for Keys<'_> {
    type Item = Vec<u8>;

    fn next(&mut self) -> Option<Vec<u8>> {
        let fsa = self.fsa;
        while let Some(&mut (state, ref mut next)) = self.stack.last_mut() {
            let hi = fsa.offsets[state + 1] as usize;
            let i = fsa.offsets[state] as usize + *next;
            if i < hi {
                *next += 1;
                let target = fsa.targets[i] as usize;
                self.key.push(fsa.labels[i]);
                self.stack.push((target, 0));
                if fsa.accept[target] {
                    return Some(self.key.clone());
                }
            } else {
                self.stack.pop();
                self.key.pop();
            }
        }
        None
    }
}
