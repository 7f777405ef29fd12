//! Corpus ingest: encode, sort, deduplicate and split into per-chunk
//! dictionaries sized for the trusted region.

use std::fs;
use std::path::Path;

use crate::codec::{encode_point_into, EncodeStats, Theta, TrajectoryPoint};
use crate::dictionary::{serialize_sorted_block, Backend, FsaBuilder, KeyDictionary};
use crate::error::{Error, Result};
use crate::extsort::{ExternalSorter, SortedKeys, DEFAULT_RUN_CAPACITY};
use crate::keys::KeyBlock;

mod manifest;

pub use manifest::{ChunkEntry, ChunkManifest, MANIFEST_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkBuildOptions {
    pub theta: Theta,
    pub chunk_entries: u64,
    pub backend: Backend,
    /// Keys held in memory before the sorter spills a run.
    pub sort_run_capacity: usize,
}

impl ChunkBuildOptions {
    pub fn new(theta: Theta, chunk_entries: u64, backend: Backend) -> Self {
        ChunkBuildOptions {
            theta,
            chunk_entries,
            backend,
            sort_run_capacity: DEFAULT_RUN_CAPACITY,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub manifest: ChunkManifest,
    pub encode: EncodeStats,
    /// Keys dropped by the retention window during an update.
    pub expired_keys: u64,
}

/// Step ② of the pipeline: encodes `points`, sorts and deduplicates the
/// keys, and writes one dictionary file per `chunk_entries` keys plus the
/// manifest into `out_dir`. Out-of-period records are dropped and counted.
pub fn map_to_chunked_dictionary<'a, I>(points: I, opts: &ChunkBuildOptions, out_dir: &Path) -> Result<IngestReport>
where
    I: IntoIterator<Item = &'a TrajectoryPoint>,
{
    check_options(opts)?;
    let mut sorter = ExternalSorter::with_run_capacity(opts.theta.key_length(), opts.sort_run_capacity);
    let encode = push_points(&mut sorter, points, &opts.theta, None)?;
    let mut keys = sorter.finish()?;
    let manifest = write_chunks(&mut keys, opts, out_dir)?;
    Ok(IngestReport {
        manifest,
        encode,
        expired_keys: 0,
    })
}

/// Same as [`map_to_chunked_dictionary`] for keys that are already encoded.
pub fn chunk_encoded_keys(keys: &KeyBlock, opts: &ChunkBuildOptions, out_dir: &Path) -> Result<ChunkManifest> {
    check_options(opts)?;
    let mut sorter = ExternalSorter::with_run_capacity(opts.theta.key_length(), opts.sort_run_capacity);
    sorter.push_block(keys)?;
    write_chunks(&mut sorter.finish()?, opts, out_dir)
}

/// Batch rebuild: retained keys whose time segment ends after
/// `expire_before`, plus the encoded `add` points. With no manifest in
/// `dir` this is a fresh build.
pub fn update_corpus<'a, I>(dir: &Path, opts: &ChunkBuildOptions, add: I, expire_before: i64) -> Result<IngestReport>
where
    I: IntoIterator<Item = &'a TrajectoryPoint>,
{
    check_options(opts)?;
    let theta = opts.theta;
    let mut sorter = ExternalSorter::with_run_capacity(theta.key_length(), opts.sort_run_capacity);
    let mut expired = 0u64;
    if ChunkManifest::exists(dir) {
        let old = ChunkManifest::load(dir)?;
        if old.theta != theta {
            return Err(Error::config(format!(
                "theta mismatch: corpus built with {:?}, update requested {:?}",
                old.theta, theta
            )));
        }
        for i in 0..old.chunk_count() {
            for key in old.load_chunk(i)?.sorted_keys() {
                if retained(&theta, &key, expire_before)? {
                    sorter.push(&key)?;
                } else {
                    expired += 1;
                }
            }
        }
    }
    let encode = push_points(&mut sorter, add, &theta, Some(expire_before))?;
    let manifest = write_chunks(&mut sorter.finish()?, opts, dir)?;
    Ok(IngestReport {
        manifest,
        encode,
        expired_keys: expired,
    })
}

fn retained(theta: &Theta, key: &[u8], expire_before: i64) -> Result<bool> {
    let seg = theta
        .segment_of_key(key)
        .ok_or_else(|| Error::Integrity("corpus key without a valid time label".into()))?;
    Ok(theta.segment_end(seg) > expire_before)
}

fn check_options(opts: &ChunkBuildOptions) -> Result<()> {
    opts.theta.validate()?;
    if opts.chunk_entries == 0 {
        return Err(Error::config("chunk_entries must be at least 1"));
    }
    Ok(())
}

fn push_points<'a, I>(sorter: &mut ExternalSorter, points: I, theta: &Theta, expire_before: Option<i64>) -> Result<EncodeStats>
where
    I: IntoIterator<Item = &'a TrajectoryPoint>,
{
    let mut stats = EncodeStats::default();
    let mut buf = Vec::with_capacity(theta.key_length());
    for p in points {
        buf.clear();
        match encode_point_into(p, theta, &mut buf) {
            Ok(()) => {}
            Err(Error::OutOfPeriod { .. }) => {
                stats.dropped_out_of_period += 1;
                continue;
            }
            Err(e) => return Err(e),
        }
        if let Some(cut) = expire_before {
            if !retained(theta, &buf, cut)? {
                stats.dropped_out_of_period += 1;
                continue;
            }
        }
        sorter.push(&buf)?;
        stats.encoded += 1;
    }
    Ok(stats)
}

fn chunk_file_name(generation: u64, index: usize, backend: Backend) -> String {
    format!("chunk-g{generation:06}-{index:05}.{}", backend.file_extension())
}

fn chunk_generation(name: &str) -> Option<u64> {
    name.strip_prefix("chunk-g")?.get(..6)?.parse().ok()
}

/// Serializes one sorted, duplicate-free slice of the corpus.
pub fn serialize_chunk(block: &KeyBlock, backend: Backend) -> Result<Vec<u8>> {
    match backend {
        Backend::Fsa => {
            let mut b = FsaBuilder::with_key_length(block.width());
            for k in block.iter() {
                b.insert(k)?;
            }
            Ok(b.finish().serialize())
        }
        Backend::Hash => serialize_sorted_block(block),
    }
}

fn write_chunks(keys: &mut SortedKeys, opts: &ChunkBuildOptions, out_dir: &Path) -> Result<ChunkManifest> {
    fs::create_dir_all(out_dir)?;
    let generation = if ChunkManifest::exists(out_dir) {
        ChunkManifest::load(out_dir).map(|m| m.generation + 1).unwrap_or(1)
    } else {
        1
    };
    let width = opts.theta.key_length();
    let mut manifest = ChunkManifest::new(opts.theta, opts.chunk_entries, opts.backend, generation, out_dir);
    let mut block = KeyBlock::with_capacity(width, opts.chunk_entries.min(1 << 20) as usize);

    let flush = |block: &mut KeyBlock, manifest: &mut ChunkManifest| -> Result<()> {
        if block.is_empty() {
            return Ok(());
        }
        let index = manifest.chunks.len();
        let bytes = serialize_chunk(block, opts.backend)?;
        let name = chunk_file_name(generation, index, opts.backend);
        fs::write(out_dir.join(&name), &bytes)?;
        manifest.chunks.push(ChunkEntry {
            index,
            path: name.into(),
            first_key: String::from_utf8_lossy(block.get(0)).into_owned(),
            last_key: String::from_utf8_lossy(block.get(block.len() - 1)).into_owned(),
            key_count: block.len() as u64,
            bytes: bytes.len() as u64,
        });
        manifest.corpus_key_count += block.len() as u64;
        *block = KeyBlock::new(width);
        Ok(())
    };

    while let Some(k) = keys.next_key()? {
        block.push(k)?;
        if block.len() as u64 == opts.chunk_entries {
            flush(&mut block, &mut manifest)?;
        }
    }
    flush(&mut block, &mut manifest)?;
    manifest.validate()?;
    manifest.write_atomic()?;
    remove_stale_generations(out_dir, generation)?;
    log::info!(
        "wrote {} chunks ({} keys, {} bytes) to {}",
        manifest.chunk_count(),
        manifest.corpus_key_count,
        manifest.total_bytes(),
        out_dir.display()
    );
    Ok(manifest)
}

/// Keeps the current and previous generation; readers still on the old
/// manifest finish their batch against the previous files.
fn remove_stale_generations(dir: &Path, current: u64) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(g) = name.to_str().and_then(chunk_generation) else {
            continue;
        };
        if g + 1 < current {
            fs::remove_file(entry.path())?;
        }
    }
    Ok(())
}

/// Serialized size of each chunk when `keys` is cut into consecutive slices
/// of `chunk_entries` in the order given. Each slice is sorted before it is
/// built, so a globally sorted input gives the sorted-chunking layout and a
/// shuffled input gives the unsorted baseline.
pub fn chunk_serialized_sizes(keys: &KeyBlock, chunk_entries: usize, backend: Backend) -> Result<Vec<u64>> {
    if chunk_entries == 0 {
        return Err(Error::config("chunk_entries must be at least 1"));
    }
    let width = keys.width();
    let mut sizes = Vec::new();
    for slice in keys.as_bytes().chunks(chunk_entries * width.max(1)) {
        let mut block = KeyBlock::from_bytes(width, slice.to_vec())?;
        block.sort_dedup();
        sizes.push(serialize_chunk(&block, backend)?.len() as u64);
    }
    Ok(sizes)
}

/// Loads every chunk and returns the union of their languages, sorted.
pub fn corpus_keys(manifest: &ChunkManifest) -> Result<KeyBlock> {
    let mut out = KeyBlock::new(manifest.theta.key_length());
    for i in 0..manifest.chunk_count() {
        match manifest.load_chunk(i)? {
            KeyDictionary::Fsa(a) => {
                for k in a.keys() {
                    out.push(&k)?;
                }
            }
            KeyDictionary::Hash(h) => {
                for k in h.sorted_keys() {
                    out.push(k)?;
                }
            }
        }
    }
    Ok(out)
}
