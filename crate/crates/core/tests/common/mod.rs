//! Reference implementations used as test oracles. None of them share code
//! with the library paths they check.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};

const BASE32: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";

/// Geohash by direct quantization: the latitude and longitude cell indices
/// are computed arithmetically and their bits interleaved, longitude first.
pub fn geohash_by_quantization(lat: f64, lon: f64, digits: u32) -> String {
    let (lat_idx, lon_idx, lat_bits, lon_bits) = cell_indices(lat, lon, digits);
    let mut bits = Vec::with_capacity((lat_bits + lon_bits) as usize);
    let (mut li, mut oi) = (lat_bits, lon_bits);
    for i in 0..lat_bits + lon_bits {
        if i % 2 == 0 {
            oi -= 1;
            bits.push(((lon_idx >> oi) & 1) as u8);
        } else {
            li -= 1;
            bits.push(((lat_idx >> li) & 1) as u8);
        }
    }
    bits.chunks(5)
        .map(|c| BASE32[c.iter().fold(0usize, |a, &b| a * 2 + b as usize)] as char)
        .collect()
}

/// Cell indices along each axis at `digits` base-32 characters.
pub fn cell_indices(lat: f64, lon: f64, digits: u32) -> (u64, u64, u32, u32) {
    let total = 5 * digits;
    let lon_bits = total.div_ceil(2);
    let lat_bits = total / 2;
    let q = |v: f64, lo: f64, span: f64, bits: u32| -> u64 {
        let n = 1u64 << bits;
        let x = ((v - lo) / span * n as f64).floor();
        (x.max(0.0) as u64).min(n - 1)
    };
    (q(lat, -90.0, 180.0, lat_bits), q(lon, -180.0, 360.0, lon_bits), lat_bits, lon_bits)
}

/// Plaintext contact cell: (lat cell, lon cell, time segment), or None if
/// the time is outside the period.
pub fn cell_tuple(lat: f64, lon: f64, t: i64, geo_digits: u32, start: i64, end: i64, seg: u64) -> Option<(u64, u64, i64)> {
    if t < start || t >= end {
        return None;
    }
    let (a, b, _, _) = cell_indices(lat, lon, geo_digits);
    Some((a, b, (t - start).div_euclid(seg as i64)))
}

/// Trie over the keys: per state a label → child map and an accept flag.
pub struct Trie {
    pub edges: Vec<BTreeMap<u8, usize>>,
    pub accept: Vec<bool>,
}

pub fn build_trie<K: AsRef<[u8]>>(keys: &[K]) -> Trie {
    let mut t = Trie {
        edges: vec![BTreeMap::new()],
        accept: vec![false],
    };
    for k in keys {
        let mut s = 0;
        for &b in k.as_ref() {
            s = match t.edges[s].get(&b) {
                Some(&n) => n,
                None => {
                    let n = t.edges.len();
                    t.edges.push(BTreeMap::new());
                    t.accept.push(false);
                    t.edges[s].insert(b, n);
                    n
                }
            };
        }
        t.accept[s] = true;
    }
    t
}

/// States of the minimal DFA for the trie's language, by Hopcroft partition
/// refinement over the trie completed with a dead state. The dead class is
/// not counted, except that the empty language keeps its start state.
pub fn hopcroft_state_count(trie: &Trie) -> usize {
    let n = trie.edges.len() + 1;
    let dead = n - 1;
    let alphabet: Vec<u8> = {
        let mut s: Vec<u8> = trie.edges.iter().flat_map(|e| e.keys().copied()).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let delta = |q: usize, c: u8| -> usize {
        if q == dead {
            dead
        } else {
            trie.edges[q].get(&c).copied().unwrap_or(dead)
        }
    };
    // inverse transitions per symbol
    let mut inv: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); n]; alphabet.len()];
    for (ci, &c) in alphabet.iter().enumerate() {
        for q in 0..n {
            inv[ci][delta(q, c)].push(q);
        }
    }
    let accepting: Vec<usize> = (0..n).filter(|&q| q != dead && trie.accept[q]).collect();
    let rejecting: Vec<usize> = (0..n).filter(|&q| q == dead || !trie.accept[q]).collect();
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut block_of = vec![0usize; n];
    for b in [accepting, rejecting] {
        if !b.is_empty() {
            for &q in &b {
                block_of[q] = blocks.len();
            }
            blocks.push(b);
        }
    }
    let mut work: Vec<usize> = (0..blocks.len()).collect();
    let mut in_work = vec![true; blocks.len()];
    while let Some(a) = work.pop() {
        in_work[a] = false;
        let splitter: Vec<usize> = blocks[a].clone();
        for ci in 0..alphabet.len() {
            let mut hit: HashMap<usize, Vec<usize>> = HashMap::new();
            for &t in &splitter {
                for &q in &inv[ci][t] {
                    hit.entry(block_of[q]).or_default().push(q);
                }
            }
            for (y, xs) in hit {
                if xs.len() == blocks[y].len() {
                    continue;
                }
                let xs_set: HashSet<usize> = xs.iter().copied().collect();
                let (inside, outside): (Vec<usize>, Vec<usize>) = blocks[y].iter().partition(|q| xs_set.contains(q));
                let new_id = blocks.len();
                let (keep, moved) = if inside.len() <= outside.len() { (outside, inside) } else { (inside, outside) };
                for &q in &moved {
                    block_of[q] = new_id;
                }
                blocks[y] = keep;
                blocks.push(moved);
                // if y was pending both halves now are; otherwise the smaller
                // half is enough, and `moved` is the smaller one
                work.push(new_id);
                in_work.push(true);
            }
        }
    }
    if block_of[0] == block_of[dead] {
        // empty language
        return 1;
    }
    blocks.len() - 1
}

/// Myhill-Nerode by brute force: count distinct right languages of trie states.
pub fn right_language_count(trie: &Trie) -> usize {
    fn lang(t: &Trie, s: usize, memo: &mut HashMap<usize, Vec<Vec<u8>>>) -> Vec<Vec<u8>> {
        if let Some(v) = memo.get(&s) {
            return v.clone();
        }
        let mut out = Vec::new();
        if t.accept[s] {
            out.push(Vec::new());
        }
        for (&c, &n) in &t.edges[s] {
            for mut suf in lang(t, n, memo) {
                suf.insert(0, c);
                out.push(suf);
            }
        }
        memo.insert(s, out.clone());
        out
    }
    let mut memo = HashMap::new();
    let langs: HashSet<Vec<Vec<u8>>> = (0..trie.edges.len()).map(|s| lang(trie, s, &mut memo)).collect();
    langs.len()
}

/// Lower bound search over a sorted slice of keys, written out by hand.
pub fn sorted_contains(sorted: &[Vec<u8>], key: &[u8]) -> bool {
    let (mut lo, mut hi) = (0usize, sorted.len());
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if sorted[mid].as_slice() < key {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo < sorted.len() && sorted[lo] == key
}

/// Plaintext point: (t, lat, lon).
pub type RawPoint = (i64, f64, f64);

/// Contact by comparing every client point with every corpus point's cell.
pub fn nested_loop_contact(client: &[RawPoint], corpus: &[RawPoint], geo_digits: u32, start: i64, end: i64, seg: u64) -> bool {
    let corpus_cells: Vec<(u64, u64, i64)> = corpus
        .iter()
        .filter_map(|&(t, la, lo)| cell_tuple(la, lo, t, geo_digits, start, end, seg))
        .collect();
    client.iter().any(|&(t, la, lo)| match cell_tuple(la, lo, t, geo_digits, start, end, seg) {
        Some(c) => corpus_cells.contains(&c),
        None => false,
    })
}

/// Same answer as `nested_loop_contact` with the corpus cells in a hash set.
pub fn set_contact(client: &[RawPoint], corpus_cells: &HashSet<(u64, u64, i64)>, geo_digits: u32, start: i64, end: i64, seg: u64) -> bool {
    client
        .iter()
        .filter_map(|&(t, la, lo)| cell_tuple(la, lo, t, geo_digits, start, end, seg))
        .any(|c| corpus_cells.contains(&c))
}

pub mod instance {
    use super::{cell_tuple, set_contact, RawPoint};
    use pct_core::channel::AttestationKey;
    use pct_core::chunk::{map_to_chunked_dictionary, ChunkBuildOptions};
    use pct_core::codec::{encode_points, Theta, TrajectoryPoint};
    use pct_core::dictionary::Backend;
    use pct_core::enclave::{EnclaveConfig, PagingMode, TrustedRegion};
    use pct_core::psi::{execute_batch, BatchSettings, ClientQuery, PsiOptions, QueryBatch};
    use rand::rngs::StdRng;
    use rand::Rng;
    use std::collections::HashSet;

    /// A randomized PSI problem in plaintext form.
    pub struct Instance {
        pub theta: Theta,
        pub corpus: Vec<RawPoint>,
        pub clients: Vec<Vec<RawPoint>>,
    }

    fn log_uniform(rng: &mut StdRng, max: usize) -> usize {
        let x: f64 = rng.gen_range(0.0..(max as f64).ln());
        (x.exp() as usize).clamp(1, max)
    }

    /// Points near one center so that cells collide; a few land outside the period.
    pub fn random_instance(rng: &mut StdRng, max_corpus: usize, max_clients: usize, max_points: usize) -> Instance {
        let geo_digits = rng.gen_range(4..=9u8);
        let segment_seconds = [60u64, 300, 600, 3600][rng.gen_range(0..4)];
        let segments = rng.gen_range(10..=2000u64);
        let start = rng.gen_range(0..2_000_000_000i64);
        let end = start + (segments * segment_seconds) as i64 - rng.gen_range(0..segment_seconds as i64);
        let width = (segments.to_string().len() as u8).max(rng.gen_range(1..=5));
        let theta = Theta::new(geo_digits, start, end, segment_seconds, width).unwrap();
        let center = (rng.gen_range(-60.0..60.0), rng.gen_range(-170.0..170.0));
        // spread of a few cells at this precision
        let cell = 180.0 / 2f64.powi((5 * geo_digits as i32) / 2);
        let spread = cell * rng.gen_range(1.0..20.0);
        let span = end - start;
        let point = |rng: &mut StdRng| -> RawPoint {
            let t = if rng.gen_bool(0.02) {
                if rng.gen_bool(0.5) { start - rng.gen_range(1..1000) } else { end + rng.gen_range(0..1000) }
            } else {
                start + rng.gen_range(0..span)
            };
            (
                t.max(0),
                (center.0 + rng.gen_range(-spread..spread)).clamp(-90.0, 90.0),
                (center.1 + rng.gen_range(-spread..spread)).clamp(-180.0, 180.0),
            )
        };
        let corpus: Vec<RawPoint> = (0..log_uniform(rng, max_corpus)).map(|_| point(rng)).collect();
        let n_clients = rng.gen_range(1..=max_clients);
        let clients = (0..n_clients)
            .map(|_| {
                let n = log_uniform(rng, max_points);
                (0..n)
                    .map(|_| {
                        if rng.gen_bool(0.01) {
                            corpus[rng.gen_range(0..corpus.len())]
                        } else {
                            point(rng)
                        }
                    })
                    .collect()
            })
            .collect();
        Instance { theta, corpus, clients }
    }

    pub fn to_points(raw: &[RawPoint]) -> Vec<TrajectoryPoint> {
        raw.iter().map(|&(t, la, lo)| TrajectoryPoint::new(t, la, lo).unwrap()).collect()
    }

    impl Instance {
        pub fn oracle(&self) -> Vec<bool> {
            let th = &self.theta;
            let cells: HashSet<(u64, u64, i64)> = self
                .corpus
                .iter()
                .filter_map(|&(t, la, lo)| cell_tuple(la, lo, t, th.geo_digits as u32, th.period_start, th.period_end, th.segment_seconds))
                .collect();
            self.clients
                .iter()
                .map(|c| set_contact(c, &cells, th.geo_digits as u32, th.period_start, th.period_end, th.segment_seconds))
                .collect()
        }

        pub fn batch(&self) -> QueryBatch {
            let mut b = QueryBatch::new();
            for (i, c) in self.clients.iter().enumerate() {
                let (keys, _) = encode_points(&to_points(c), &self.theta).unwrap();
                b.push(ClientQuery { client_id: i as u64, keys }).unwrap();
            }
            b
        }
    }

    pub struct RunResult {
        pub contacts: Vec<bool>,
        pub peak_trusted_bytes: u64,
        pub probe_count: u64,
        pub corpus_keys: u64,
    }

    /// Ingests the corpus to disk and answers the batch under a STRICT budget.
    pub fn run_instance(inst: &Instance, backend: Backend, chunk_entries: u64, budget: u64, pruning: bool) -> pct_core::Result<RunResult> {
        let dir = tempfile::tempdir()?;
        let opts = ChunkBuildOptions::new(inst.theta, chunk_entries, backend);
        let report = map_to_chunked_dictionary(&to_points(&inst.corpus), &opts, dir.path())?;
        let mut region = TrustedRegion::new(EnclaveConfig {
            budget_bytes: budget,
            paging_mode: PagingMode::Strict,
            penalty_ns_per_byte: 0,
        })?;
        let settings = BatchSettings {
            psi: PsiOptions { range_pruning: pruning },
            emit_matched_count: false,
        };
        let out = execute_batch(&inst.batch(), &inst.theta, &report.manifest, &mut region, &AttestationKey::stub(), 1, settings)?;
        let mut contacts = vec![false; inst.clients.len()];
        for r in &out.responses {
            contacts[r.client_id as usize] = r.contact;
        }
        assert_eq!(out.responses.len(), inst.clients.len());
        assert_eq!(region.used_bytes(), 0);
        Ok(RunResult {
            contacts,
            peak_trusted_bytes: out.report.peak_trusted_bytes,
            probe_count: out.report.probe_count,
            corpus_keys: report.manifest.corpus_key_count,
        })
    }
}
