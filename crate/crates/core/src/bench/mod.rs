//! Experiment drivers and their CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::prelude::*;
use rand::rngs::StdRng;
use serde::Deserialize;

use crate::channel::AttestationKey;
use crate::chunk::{chunk_encoded_keys, chunk_serialized_sizes, ChunkBuildOptions, ChunkManifest};
use crate::codec::{encode_points, Theta};
use crate::dictionary::{Backend, KeyDictionary};
use crate::enclave::{EnclaveConfig, TrustedRegion};
use crate::error::{Error, Result};
use crate::keys::KeyBlock;
use crate::psi::{execute_batch, map_to_unique_array, BatchReport, BatchSettings, ChunkSource, ClientQuery, ContactResponse, PsiOptions, QueryBatch};

pub mod generator;

pub use generator::{BoundingBox, Generator, GeneratorConfig, MobilityModel};

pub const SCHEMA: &str = "pct-bench-v1";

/// Person indices for query clients start here so they never coincide with
/// the people whose keys make up the corpus.
pub const QUERY_PERSON_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub kind: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    pub fn new(kind: &str, columns: &[&str]) -> Self {
        Report {
            kind: kind.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# schema={SCHEMA} kind={}", self.kind);
        let _ = writeln!(s, "{}", self.columns.join(","));
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn f3(v: f64) -> String {
    format!("{v:.3}")
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn shuffled(keys: &KeyBlock, seed: u64) -> KeyBlock {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.shuffle(&mut StdRng::seed_from_u64(seed));
    let mut out = KeyBlock::with_capacity(keys.width(), keys.len());
    for i in order {
        out.push(keys.get(i)).expect("same width");
    }
    out
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionBench {
    pub sizes: Vec<usize>,
    pub backends: Vec<Backend>,
    pub chunk_entries: usize,
    pub shuffle_seed: u64,
}

impl Default for CompressionBench {
    fn default() -> Self {
        CompressionBench {
            sizes: vec![100_000, 500_000, 1_000_000],
            backends: vec![Backend::Fsa, Backend::Hash],
            chunk_entries: 100_000,
            shuffle_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsiBench {
    pub corpus_keys: usize,
    pub chunk_entries: Vec<u64>,
    pub backends: Vec<Backend>,
    pub clients: usize,
    pub points_per_client: usize,
    pub repetitions: usize,
    pub warmups: usize,
    pub range_pruning: bool,
    /// Scratch space for chunk files; a temporary directory when unset.
    pub work_dir: Option<String>,
}

impl Default for PsiBench {
    fn default() -> Self {
        PsiBench {
            corpus_keys: 1_000_000,
            chunk_entries: vec![100_000, 250_000, 1_000_000],
            backends: vec![Backend::Fsa, Backend::Hash],
            clients: 100,
            points_per_client: 1440,
            repetitions: 5,
            warmups: 1,
            range_pruning: false,
            work_dir: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssembleBench {
    pub batch_sizes: Vec<usize>,
    pub points_per_client: usize,
    pub repetitions: usize,
}

impl Default for AssembleBench {
    fn default() -> Self {
        AssembleBench {
            batch_sizes: vec![250, 500, 1000, 1500, 2000, 2500, 3000],
            points_per_client: 1440,
            repetitions: 3,
        }
    }
}

/// Contents of a `pct bench --config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub generator: GeneratorConfig,
    pub enclave: EnclaveConfig,
    pub compression: CompressionBench,
    pub psi: PsiBench,
    pub assemble: AssembleBench,
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.generator.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

/// Serialized bytes per backend and corpus size, whole and chunked, with
/// chunks cut from the sorted corpus and from a shuffled copy.
pub fn bench_compression(cfg: &CompressionBench, gen: &GeneratorConfig) -> Result<Report> {
    let mut report = Report::new(
        "compression",
        &[
            "model",
            "keys",
            "backend",
            "serialized_bytes",
            "bytes_per_key",
            "chunk_entries",
            "sorted_chunk_bytes",
            "shuffled_chunk_bytes",
        ],
    );
    let g = Generator::new(gen.clone())?;
    let theta = gen.theta();
    for &size in &cfg.sizes {
        let keys = g.unique_keys(&theta, size)?;
        let mixed = shuffled(&keys, cfg.shuffle_seed);
        for &backend in &cfg.backends {
            let whole = KeyDictionary::build_sorted(backend, keys.width(), keys.iter())?.serialized_len();
            let sorted: u64 = chunk_serialized_sizes(&keys, cfg.chunk_entries, backend)?.iter().sum();
            let unsorted: u64 = chunk_serialized_sizes(&mixed, cfg.chunk_entries, backend)?.iter().sum();
            report.push(vec![
                gen.model.to_string(),
                size.to_string(),
                backend.to_string(),
                whole.to_string(),
                f3(whole as f64 / size.max(1) as f64),
                cfg.chunk_entries.to_string(),
                sorted.to_string(),
                unsorted.to_string(),
            ]);
        }
    }
    Ok(report)
}

/// Encodes `count` query clients drawn from the same city as the corpus.
pub fn make_query_batch(gen: &GeneratorConfig, theta: &Theta, count: usize, points: usize) -> Result<QueryBatch> {
    let g = Generator::new(GeneratorConfig {
        points_per_person: points,
        ..gen.clone()
    })?;
    let mut batch = QueryBatch::new();
    for i in 0..count as u64 {
        let (keys, _) = encode_points(&g.person(QUERY_PERSON_OFFSET + i), theta)?;
        batch.push(ClientQuery { client_id: i, keys })?;
    }
    Ok(batch)
}

/// Contact bits by direct lookup of every client key in the sorted corpus.
pub fn oracle_contacts(batch: &QueryBatch, corpus: &KeyBlock) -> Vec<(u64, bool)> {
    batch
        .entries()
        .iter()
        .map(|q| (q.client_id, q.keys.iter().any(|k| corpus.binary_search(k).is_ok())))
        .collect()
}

fn check_against_oracle(responses: &[ContactResponse], expected: &[(u64, bool)]) -> Result<()> {
    let got: Vec<(u64, bool)> = responses.iter().map(|r| (r.client_id, r.contact)).collect();
    if got != expected {
        let bad = got.iter().zip(expected).filter(|(a, b)| a != b).count();
        return Err(Error::Logic(format!("PSI disagrees with the oracle for {bad} clients")));
    }
    Ok(())
}

/// Median-of-repetitions timing for one batch against one chunked corpus,
/// after checking the responses against `expected`.
pub fn time_batch<S: ChunkSource + ?Sized>(
    batch: &QueryBatch,
    theta: &Theta,
    source: &S,
    enclave: &EnclaveConfig,
    settings: BatchSettings,
    expected: Option<&[(u64, bool)]>,
    warmups: usize,
    repetitions: usize,
) -> Result<BatchReport> {
    let signer = AttestationKey::stub();
    let mut runs = Vec::with_capacity(repetitions);
    for i in 0..warmups + repetitions.max(1) {
        let mut region = TrustedRegion::new(*enclave)?;
        let out = execute_batch(batch, theta, source, &mut region, &signer, 0, settings)?;
        if i == 0 {
            if let Some(exp) = expected {
                check_against_oracle(&out.responses, exp)?;
            }
        }
        if i >= warmups {
            runs.push(out.report);
        }
    }
    let med = |f: fn(&BatchReport) -> f64| median(&mut runs.iter().map(f).collect::<Vec<_>>());
    Ok(BatchReport {
        assemble_ms: med(|r| r.assemble_ms),
        psi_ms: med(|r| r.psi_ms),
        respond_ms: med(|r| r.respond_ms),
        paging_penalty_ms: med(|r| r.paging_penalty_ms),
        peak_trusted_bytes: runs.iter().map(|r| r.peak_trusted_bytes).max().unwrap_or(0),
        ..runs[0]
    })
}

/// PSI time per backend and chunk size; marks the fastest chunk size of each backend.
pub fn bench_psi(cfg: &PsiBench, gen: &GeneratorConfig, enclave: &EnclaveConfig) -> Result<Report> {
    let mut report = Report::new(
        "psi",
        &[
            "backend",
            "corpus_keys",
            "chunk_entries",
            "n_d",
            "largest_chunk_bytes",
            "n_c",
            "n_q",
            "probe_count",
            "peak_trusted_bytes",
            "assemble_ms",
            "psi_ms",
            "respond_ms",
            "paging_penalty_ms",
            "queries_per_s",
            "best",
        ],
    );
    let theta = gen.theta();
    let corpus = Generator::new(gen.clone())?.unique_keys(&theta, cfg.corpus_keys)?;
    let batch = make_query_batch(gen, &theta, cfg.clients, cfg.points_per_client)?;
    let expected = oracle_contacts(&batch, &corpus);
    let tmp;
    let root = match &cfg.work_dir {
        Some(d) => Path::new(d).to_path_buf(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let settings = BatchSettings {
        psi: PsiOptions {
            range_pruning: cfg.range_pruning,
        },
        emit_matched_count: false,
    };
    for &backend in &cfg.backends {
        let first_row = report.rows.len();
        let mut best = (f64::INFINITY, first_row);
        for &entries in &cfg.chunk_entries {
            let dir = root.join(format!("{backend}-{entries}"));
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            let manifest: ChunkManifest = chunk_encoded_keys(&corpus, &ChunkBuildOptions::new(theta, entries, backend), &dir)?;
            let r = time_batch(&batch, &theta, &manifest, enclave, settings, Some(&expected), cfg.warmups, cfg.repetitions)?;
            if r.psi_ms < best.0 {
                best = (r.psi_ms, report.rows.len());
            }
            let total_s = (r.assemble_ms + r.psi_ms + r.respond_ms) / 1e3;
            report.push(vec![
                backend.to_string(),
                corpus.len().to_string(),
                entries.to_string(),
                r.n_d.to_string(),
                manifest.largest_chunk_bytes().to_string(),
                r.n_c.to_string(),
                r.n_q.to_string(),
                r.probe_count.to_string(),
                r.peak_trusted_bytes.to_string(),
                f3(r.assemble_ms),
                f3(r.psi_ms),
                f3(r.respond_ms),
                f3(r.paging_penalty_ms),
                f3(r.n_c as f64 / total_s.max(1e-9)),
                "0".into(),
            ]);
            fs::remove_dir_all(&dir)?;
        }
        if best.0.is_finite() {
            let col = report.columns.len() - 1;
            report.rows[best.1][col] = "1".into();
        }
    }
    Ok(report)
}

/// Time to build Q inside the region as the batch grows.
pub fn bench_assemble(cfg: &AssembleBench, gen: &GeneratorConfig, enclave: &EnclaveConfig) -> Result<Report> {
    let mut report = Report::new(
        "assemble",
        &[
            "n_c",
            "total_keys",
            "n_q",
            "trusted_bytes",
            "budget_bytes",
            "assemble_ms",
            "paging_penalty_ms",
            "effective_ms",
        ],
    );
    let theta = gen.theta();
    let largest = cfg.batch_sizes.iter().copied().max().unwrap_or(0);
    let all = make_query_batch(gen, &theta, largest, cfg.points_per_client)?;
    for &n in &cfg.batch_sizes {
        let batch = QueryBatch::from_entries(all.entries()[..n].iter().cloned())?;
        let mut times = Vec::new();
        let mut penalties = Vec::new();
        let mut n_q = 0;
        let mut used = 0;
        for _ in 0..cfg.repetitions.max(1) {
            let mut region = TrustedRegion::new(*enclave)?;
            let t = Instant::now();
            let set = map_to_unique_array(&batch, &theta, &mut region)?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
            penalties.push(region.stats().paging_penalty_ms());
            n_q = set.len();
            used = region.used_bytes();
            set.release(&mut region)?;
        }
        let a = median(&mut times);
        let p = median(&mut penalties);
        report.push(vec![
            n.to_string(),
            batch.total_keys().to_string(),
            n_q.to_string(),
            used.to_string(),
            enclave.budget_bytes.to_string(),
            f3(a),
            f3(p),
            f3(a + p),
        ]);
    }
    Ok(report)
}
