//! Batched set intersection inside the trusted region: merge client keys into
//! one sorted unique array, stream corpus chunks through it one at a time,
//! then join the matches back to clients.

use std::borrow::Cow;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use crate::channel::{verify_response_tag, AttestationKey};
use crate::chunk::ChunkManifest;
use crate::codec::Theta;
use crate::dictionary::KeyDictionary;
use crate::enclave::{Handle, TrustedRegion};
use crate::error::{Error, Result};
use crate::keys::KeyBlock;

pub const RESPONSE_LEN: usize = 8 + 1 + 1 + 4 + 8 + 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientQuery {
    pub client_id: u64,
    pub keys: KeyBlock,
}

#[derive(Debug, Clone, Default)]
pub struct QueryBatch {
    entries: Vec<ClientQuery>,
    ids: HashSet<u64>,
}

impl QueryBatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = ClientQuery>) -> Result<Self> {
        let mut b = Self::new();
        for e in entries {
            b.push(e)?;
        }
        Ok(b)
    }

    pub fn push(&mut self, q: ClientQuery) -> Result<()> {
        if !self.ids.insert(q.client_id) {
            return Err(Error::invalid(format!("client {} appears twice in one batch", q.client_id)));
        }
        self.entries.push(q);
        Ok(())
    }

    /// N_C.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClientQuery] {
        &self.entries
    }

    pub fn total_keys(&self) -> usize {
        self.entries.iter().map(|e| e.keys.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedClient {
    pub client_id: u64,
    pub reason: String,
}

/// Q with a key → clients reverse index in CSR form.
#[derive(Debug)]
pub struct UniqueQuerySet {
    keys: KeyBlock,
    offsets: Vec<u32>,
    owners: Vec<u32>,
    clients: Vec<u64>,
    rejected: Vec<RejectedClient>,
    handles: Vec<Handle>,
}

impl UniqueQuerySet {
    /// N_Q.
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &KeyBlock {
        &self.keys
    }

    /// Clients (accepted, in batch order) that submitted Q[index].
    pub fn clients_of(&self, index: usize) -> impl Iterator<Item = u64> + '_ {
        let lo = self.offsets[index] as usize;
        let hi = self.offsets[index + 1] as usize;
        self.owners[lo..hi].iter().map(|&s| self.clients[s as usize])
    }

    pub fn accepted_clients(&self) -> &[u64] {
        &self.clients
    }

    pub fn rejected(&self) -> &[RejectedClient] {
        &self.rejected
    }

    /// Returns the trusted allocations made for this set.
    pub fn release(self, region: &mut TrustedRegion) -> Result<()> {
        for h in self.handles {
            region.load_from_enclave(h)?;
        }
        Ok(())
    }
}

fn check_client(q: &ClientQuery, theta: &Theta) -> std::result::Result<(), String> {
    let want = theta.key_length();
    if q.keys.width() != want {
        return Err(format!("keys are {} bytes, corpus keys are {want}", q.keys.width()));
    }
    if let Some(i) = q.keys.iter().position(|k| !theta.is_well_formed_key(k)) {
        return Err(format!("key {i} is not a well-formed encoded key"));
    }
    if q.keys.len() > u32::MAX as usize {
        return Err("too many keys".into());
    }
    Ok(())
}

/// Merges the batch into the sorted, deduplicated array Q. Payloads, Q and
/// the reverse index are charged to `region`; a client whose keys fail the
/// length or alphabet check is excluded and listed in `rejected`.
pub fn map_to_unique_array(batch: &QueryBatch, theta: &Theta, region: &mut TrustedRegion) -> Result<UniqueQuerySet> {
    let width = theta.key_length();
    let mut rejected = Vec::new();
    let mut accepted: Vec<&ClientQuery> = Vec::with_capacity(batch.len());
    for q in batch.entries() {
        match check_client(q, theta) {
            Ok(()) => accepted.push(q),
            Err(reason) => rejected.push(RejectedClient {
                client_id: q.client_id,
                reason,
            }),
        }
    }
    let total: usize = accepted.iter().map(|q| q.keys.len()).sum();
    if total >= u32::MAX as usize {
        return Err(Error::invalid("batch holds more than 2^32 keys"));
    }

    let mut handles = Vec::with_capacity(3);
    let batch_err = |e: Error| match e {
        Error::BudgetExceeded { requested, used, budget, .. } => Error::BudgetExceeded {
            what: "query batch (shrink the batch size)".into(),
            requested,
            used,
            budget,
        },
        e => e,
    };
    handles.push(region.load_to_enclave("client payloads", (total * width) as u64).map_err(batch_err)?);

    let mut all: Vec<(&[u8], u32)> = Vec::with_capacity(total);
    for (slot, q) in accepted.iter().enumerate() {
        all.extend(q.keys.iter().map(|k| (k, slot as u32)));
    }
    all.sort_unstable();

    let mut keys = KeyBlock::with_capacity(width, total);
    let mut offsets = Vec::with_capacity(total + 1);
    let mut owners = Vec::with_capacity(total);
    let mut prev: Option<(&[u8], u32)> = None;
    for &(k, slot) in &all {
        match prev {
            Some((pk, ps)) if pk == k => {
                if ps != slot {
                    owners.push(slot);
                }
            }
            _ => {
                offsets.push(owners.len() as u32);
                keys.push(k)?;
                owners.push(slot);
            }
        }
        prev = Some((k, slot));
    }
    offsets.push(owners.len() as u32);
    drop(all);

    let mut set = UniqueQuerySet {
        keys,
        offsets,
        owners,
        clients: accepted.iter().map(|q| q.client_id).collect(),
        rejected,
        handles,
    };
    let q_bytes = (set.keys.len() * width) as u64;
    match region.load_to_enclave("unique query array", q_bytes) {
        Ok(h) => set.handles.push(h),
        Err(e) => {
            set.release(region)?;
            return Err(batch_err(e));
        }
    }
    let index_bytes = ((set.offsets.len() + set.owners.len()) * 4) as u64;
    match region.load_to_enclave("query reverse index", index_bytes) {
        Ok(h) => set.handles.push(h),
        Err(e) => {
            set.release(region)?;
            return Err(batch_err(e));
        }
    }
    Ok(set)
}

/// Where run_psi gets its chunks from.
pub trait ChunkSource {
    fn key_length(&self) -> usize;
    fn chunk_count(&self) -> usize;
    fn chunk_label(&self, index: usize) -> String;
    /// Inclusive key range of a chunk, when known.
    fn chunk_range(&self, index: usize) -> Option<(&[u8], &[u8])>;
    fn chunk_bytes(&self, index: usize) -> Result<Cow<'_, [u8]>>;
    fn chunk_size_hint(&self, index: usize) -> Option<u64>;
}

impl ChunkSource for ChunkManifest {
    fn key_length(&self) -> usize {
        self.theta.key_length()
    }

    fn chunk_count(&self) -> usize {
        ChunkManifest::chunk_count(self)
    }

    fn chunk_label(&self, index: usize) -> String {
        format!("chunk {index} ({})", self.chunks[index].path.display())
    }

    fn chunk_range(&self, index: usize) -> Option<(&[u8], &[u8])> {
        let c = &self.chunks[index];
        Some((c.first_key.as_bytes(), c.last_key.as_bytes()))
    }

    fn chunk_bytes(&self, index: usize) -> Result<Cow<'_, [u8]>> {
        self.read_chunk_bytes(index).map(Cow::Owned)
    }

    fn chunk_size_hint(&self, index: usize) -> Option<u64> {
        Some(self.chunks[index].bytes)
    }
}

/// Serialized chunks held in memory; used by benchmarks and tests.
#[derive(Debug, Clone, Default)]
pub struct MemoryChunks {
    key_length: usize,
    chunks: Vec<(Vec<u8>, Vec<u8>, Vec<u8>)>,
}

impl MemoryChunks {
    pub fn new(key_length: usize) -> Self {
        MemoryChunks {
            key_length,
            chunks: Vec::new(),
        }
    }

    /// Adds a serialized chunk whose keys span `first..=last`.
    pub fn push(&mut self, bytes: Vec<u8>, first: &[u8], last: &[u8]) {
        self.chunks.push((bytes, first.to_vec(), last.to_vec()));
    }

    /// Splits a sorted, unique corpus into chunks of `chunk_entries` keys.
    pub fn from_sorted(keys: &KeyBlock, chunk_entries: usize, backend: crate::dictionary::Backend) -> Result<Self> {
        if chunk_entries == 0 {
            return Err(Error::config("chunk_entries must be at least 1"));
        }
        let mut out = MemoryChunks::new(keys.width());
        let mut start = 0;
        while start < keys.len() {
            let end = (start + chunk_entries).min(keys.len());
            let mut block = KeyBlock::with_capacity(keys.width(), end - start);
            for i in start..end {
                block.push(keys.get(i))?;
            }
            let bytes = crate::chunk::serialize_chunk(&block, backend)?;
            out.push(bytes, keys.get(start), keys.get(end - 1));
            start = end;
        }
        Ok(out)
    }

    pub fn total_bytes(&self) -> u64 {
        self.chunks.iter().map(|c| c.0.len() as u64).sum()
    }
}

impl ChunkSource for MemoryChunks {
    fn key_length(&self) -> usize {
        self.key_length
    }

    fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    fn chunk_label(&self, index: usize) -> String {
        format!("chunk {index}")
    }

    fn chunk_range(&self, index: usize) -> Option<(&[u8], &[u8])> {
        let c = &self.chunks[index];
        Some((&c.1, &c.2))
    }

    fn chunk_bytes(&self, index: usize) -> Result<Cow<'_, [u8]>> {
        Ok(Cow::Borrowed(&self.chunks[index].0))
    }

    fn chunk_size_hint(&self, index: usize) -> Option<u64> {
        Some(self.chunks[index].0.len() as u64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PsiOptions {
    /// Probe only the part of Q inside each chunk's key range.
    pub range_pruning: bool,
}

/// Matched entries of Q plus counters from the chunk loop.
#[derive(Debug)]
pub struct PsiResults {
    /// Ascending indices into Q.
    pub matched: Vec<u32>,
    pub probe_count: u64,
    pub chunks_loaded: usize,
    handle: Option<Handle>,
}

impl PsiResults {
    pub fn release(self, region: &mut TrustedRegion) -> Result<()> {
        if let Some(h) = self.handle {
            region.load_from_enclave(h)?;
        }
        Ok(())
    }
}

/// The chunk loop: each chunk is loaded, probed with every key of Q (or the
/// in-range part under pruning) and released before the next one.
pub fn run_psi<S: ChunkSource + ?Sized>(source: &S, qset: &UniqueQuerySet, region: &mut TrustedRegion, opts: PsiOptions) -> Result<PsiResults> {
    if !qset.is_empty() && source.key_length() != qset.keys.width() {
        return Err(Error::config(format!(
            "corpus keys are {} bytes, query keys are {}",
            source.key_length(),
            qset.keys.width()
        )));
    }
    let width = qset.keys.width() as u64;
    let results_handle = region.load_to_enclave("results", 0)?;
    let mut found = vec![false; qset.len()];
    let mut matched_total = 0u64;
    let mut probes = 0u64;
    let mut loaded = 0;

    let outcome = (|| -> Result<()> {
        for i in 0..source.chunk_count() {
            let (lo, hi) = match (opts.range_pruning, source.chunk_range(i)) {
                (true, Some((first, last))) => {
                    let lo = qset.keys.lower_bound(first);
                    let hi = lo + qset.keys_range_len(lo, last);
                    if lo == hi {
                        continue;
                    }
                    (lo, hi)
                }
                _ => (0, qset.len()),
            };
            let label = source.chunk_label(i);
            let size = match source.chunk_size_hint(i) {
                Some(s) => s,
                None => source.chunk_bytes(i)?.len() as u64,
            };
            let h = region.load_to_enclave(&label, size).map_err(|e| match e {
                Error::BudgetExceeded { requested, used, budget, .. } => Error::BudgetExceeded {
                    what: format!("{label}; rebuild with a smaller chunk_entries or raise the budget"),
                    requested,
                    used,
                    budget,
                },
                e => e,
            })?;
            let dict = KeyDictionary::deserialize(&source.chunk_bytes(i)?)?;
            if dict.key_length() != qset.keys.width() && dict.key_count() > 0 {
                return Err(Error::Integrity(format!("{label} has {}-byte keys", dict.key_length())));
            }
            loaded += 1;
            let mut new = 0u64;
            for (j, hit) in found[lo..hi].iter_mut().enumerate() {
                if !*hit && dict.contains(qset.keys.get(lo + j)) {
                    *hit = true;
                    new += 1;
                }
            }
            probes += (hi - lo) as u64;
            drop(dict);
            region.load_from_enclave(h)?;
            if new > 0 {
                matched_total += new;
                region.resize(results_handle, matched_total * width)?;
            }
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        region.load_from_enclave(results_handle)?;
        return Err(e);
    }
    let matched = found
        .iter()
        .enumerate()
        .filter_map(|(i, &f)| f.then_some(i as u32))
        .collect();
    Ok(PsiResults {
        matched,
        probe_count: probes,
        chunks_loaded: loaded,
        handle: Some(results_handle),
    })
}

impl UniqueQuerySet {
    /// Number of keys from `start` that are ≤ `last`.
    fn keys_range_len(&self, start: usize, last: &[u8]) -> usize {
        let (mut lo, mut hi) = (start, self.keys.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.keys.get(mid) <= last {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo - start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContactResponse {
    pub client_id: u64,
    pub contact: bool,
    /// Only emitted when the server runs with matched-count diagnostics on.
    pub matched_count: Option<u32>,
    pub timestamp: u64,
    pub attestation_tag: [u8; 64],
}

impl ContactResponse {
    pub fn to_bytes(&self) -> [u8; RESPONSE_LEN] {
        let mut out = [0u8; RESPONSE_LEN];
        out[..8].copy_from_slice(&self.client_id.to_le_bytes());
        out[8] = self.contact as u8;
        out[9] = self.matched_count.is_some() as u8;
        out[10..14].copy_from_slice(&self.matched_count.unwrap_or(0).to_le_bytes());
        out[14..22].copy_from_slice(&self.timestamp.to_le_bytes());
        out[22..].copy_from_slice(&self.attestation_tag);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != RESPONSE_LEN {
            return Err(Error::protocol(format!("response must be {RESPONSE_LEN} bytes, got {}", b.len())));
        }
        if b[8] > 1 || b[9] > 1 {
            return Err(Error::protocol("bad flag byte in response"));
        }
        let count = u32::from_le_bytes(b[10..14].try_into().unwrap());
        Ok(ContactResponse {
            client_id: u64::from_le_bytes(b[..8].try_into().unwrap()),
            contact: b[8] == 1,
            matched_count: (b[9] == 1).then_some(count),
            timestamp: u64::from_le_bytes(b[14..22].try_into().unwrap()),
            attestation_tag: b[22..].try_into().unwrap(),
        })
    }

    pub fn verify(&self, key: &ed25519_dalek::VerifyingKey) -> Result<()> {
        verify_response_tag(key, self.client_id, self.contact, self.timestamp, &self.attestation_tag)
    }
}

/// Joins Results back to clients through the reverse index. Responses are
/// in the accepted clients' batch order.
pub fn construct_responses(qset: &UniqueQuerySet, results: &PsiResults, signer: &AttestationKey, timestamp: u64, emit_matched_count: bool) -> Vec<ContactResponse> {
    let mut counts = vec![0u32; qset.clients.len()];
    for &m in &results.matched {
        let lo = qset.offsets[m as usize] as usize;
        let hi = qset.offsets[m as usize + 1] as usize;
        for &slot in &qset.owners[lo..hi] {
            counts[slot as usize] += 1;
        }
    }
    qset.clients
        .iter()
        .zip(counts)
        .map(|(&client_id, n)| {
            let contact = n > 0;
            ContactResponse {
                client_id,
                contact,
                matched_count: emit_matched_count.then_some(n),
                timestamp,
                attestation_tag: signer.sign_response(client_id, contact, timestamp),
            }
        })
        .collect()
}

/// One row of the batch run report.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchReport {
    pub n_c: usize,
    pub n_q: usize,
    pub n_d: usize,
    pub probe_count: u64,
    pub peak_trusted_bytes: u64,
    pub assemble_ms: f64,
    pub psi_ms: f64,
    pub respond_ms: f64,
    pub paging_penalty_ms: f64,
}

impl BatchReport {
    pub const CSV_HEADER: &'static str =
        "n_c,n_q,n_d,probe_count,peak_trusted_bytes,assemble_ms,psi_ms,respond_ms,paging_penalty_ms";

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{:.3},{:.3},{:.3},{:.3}",
            self.n_c,
            self.n_q,
            self.n_d,
            self.probe_count,
            self.peak_trusted_bytes,
            self.assemble_ms,
            self.psi_ms,
            self.respond_ms,
            self.paging_penalty_ms
        );
        s
    }
}

#[derive(Debug)]
pub struct BatchOutcome {
    pub responses: Vec<ContactResponse>,
    pub rejected: Vec<RejectedClient>,
    pub report: BatchReport,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BatchSettings {
    pub psi: PsiOptions,
    pub emit_matched_count: bool,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Assemble, intersect and respond for one batch on `region`. The region
/// holds nothing from this batch afterwards, whether it succeeds or not.
pub fn execute_batch<S: ChunkSource + ?Sized>(
    batch: &QueryBatch,
    theta: &Theta,
    source: &S,
    region: &mut TrustedRegion,
    signer: &AttestationKey,
    timestamp: u64,
    settings: BatchSettings,
) -> Result<BatchOutcome> {
    let baseline = region.used_bytes();
    region.reset_counters();
    let res = execute_inner(batch, theta, source, region, signer, timestamp, settings);
    if res.is_err() && region.used_bytes() != baseline {
        log::warn!("batch failed with trusted allocations outstanding; clearing region");
        region.release_all();
    }
    res
}

fn execute_inner<S: ChunkSource + ?Sized>(
    batch: &QueryBatch,
    theta: &Theta,
    source: &S,
    region: &mut TrustedRegion,
    signer: &AttestationKey,
    timestamp: u64,
    settings: BatchSettings,
) -> Result<BatchOutcome> {
    let t0 = Instant::now();
    let qset = map_to_unique_array(batch, theta, region)?;
    let assemble_ms = ms_since(t0);

    let t1 = Instant::now();
    let results = match run_psi(source, &qset, region, settings.psi) {
        Ok(r) => r,
        Err(e) => {
            qset.release(region)?;
            return Err(e);
        }
    };
    let psi_ms = ms_since(t1);

    let t2 = Instant::now();
    let responses = construct_responses(&qset, &results, signer, timestamp, settings.emit_matched_count);
    let out = region.load_to_enclave("responses", (responses.len() * RESPONSE_LEN) as u64);
    let n_q = qset.len();
    let probe_count = results.probe_count;
    let rejected = qset.rejected().to_vec();
    results.release(region)?;
    qset.release(region)?;
    region.load_from_enclave(out?)?;
    let respond_ms = ms_since(t2);

    let stats = region.stats();
    Ok(BatchOutcome {
        responses,
        rejected,
        report: BatchReport {
            n_c: batch.len(),
            n_q,
            n_d: source.chunk_count(),
            probe_count,
            peak_trusted_bytes: stats.peak_bytes,
            assemble_ms,
            psi_ms,
            respond_ms,
            paging_penalty_ms: stats.paging_penalty_ms(),
        },
    })
}
