//! Python module `pct`: encoding, dictionaries, chunked corpora and batch
//! intersection over a simulated trusted region.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use pct_core::channel::AttestationKey;
use pct_core::chunk::{map_to_chunked_dictionary, update_corpus, ChunkBuildOptions, ChunkManifest};
use pct_core::codec::{self, TrajectoryPoint};
use pct_core::dictionary::{build_fsa, Backend, FsaAutomaton, KeyDictionary};
use pct_core::enclave::{EnclaveConfig, PagingMode};
use pct_core::keys::KeyBlock;
use pct_core::psi::{execute_batch, BatchSettings, ClientQuery, PsiOptions, QueryBatch};
use pct_core::Error;

create_exception!(pct, PctError, PyException, "Base class for pct errors.");
create_exception!(pct, BudgetExceededError, PctError, "The trusted region budget would be exceeded.");
create_exception!(pct, IntegrityError, PctError, "Stored data failed a format or checksum check.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidInput(_) | Error::Parse { .. } | Error::OutOfPeriod { .. } | Error::Ordering(_) => PyValueError::new_err(e.to_string()),
        Error::BudgetExceeded { .. } => BudgetExceededError::new_err(e.to_string()),
        Error::Format(_) | Error::Integrity(_) => IntegrityError::new_err(e.to_string()),
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        e => PctError::new_err(e.to_string()),
    }
}

fn backend(name: &str) -> PyResult<Backend> {
    name.parse().map_err(to_py)
}

fn points(raw: Vec<(i64, f64, f64)>) -> PyResult<Vec<TrajectoryPoint>> {
    raw.into_iter().map(|(t, lat, lon)| TrajectoryPoint::new(t, lat, lon).map_err(to_py)).collect()
}

fn key_block(width: usize, keys: &[String]) -> PyResult<KeyBlock> {
    KeyBlock::from_strs(width, keys).map_err(to_py)
}

/// Spatial and temporal granularity plus the retention period.
#[pyclass(module = "pct", frozen, eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct Theta(codec::Theta);

#[pymethods]
impl Theta {
    #[new]
    #[pyo3(signature = (period_start, period_end, geo_digits=10, segment_seconds=600, time_width=4))]
    fn new(period_start: i64, period_end: i64, geo_digits: u8, segment_seconds: u64, time_width: u8) -> PyResult<Self> {
        codec::Theta::new(geo_digits, period_start, period_end, segment_seconds, time_width)
            .map(Theta)
            .map_err(to_py)
    }

    /// 10 Geohash digits and 4-digit labels over 14 days of 10-minute segments.
    #[staticmethod]
    fn fourteen_day(period_start: i64) -> Self {
        Theta(codec::Theta::fourteen_day(period_start))
    }

    #[getter]
    fn geo_digits(&self) -> u8 {
        self.0.geo_digits
    }

    #[getter]
    fn period_start(&self) -> i64 {
        self.0.period_start
    }

    #[getter]
    fn period_end(&self) -> i64 {
        self.0.period_end
    }

    #[getter]
    fn segment_seconds(&self) -> u64 {
        self.0.segment_seconds
    }

    #[getter]
    fn time_width(&self) -> u8 {
        self.0.time_width
    }

    #[getter]
    fn key_length(&self) -> usize {
        self.0.key_length()
    }

    fn __repr__(&self) -> String {
        let t = &self.0;
        format!(
            "Theta(period_start={}, period_end={}, geo_digits={}, segment_seconds={}, time_width={})",
            t.period_start, t.period_end, t.geo_digits, t.segment_seconds, t.time_width
        )
    }
}

#[pyfunction]
fn geohash(lat: f64, lon: f64, digits: u8) -> PyResult<String> {
    codec::geohash_encode(lat, lon, digits).map_err(to_py)
}

/// Key of one `(t, lat, lon)` record.
#[pyfunction]
fn encode_point(t: i64, lat: f64, lon: f64, theta: &Theta) -> PyResult<String> {
    let p = TrajectoryPoint::new(t, lat, lon).map_err(to_py)?;
    codec::encode_point(&p, &theta.0).map(|k| k.into_string()).map_err(to_py)
}

/// Keys of every in-period record, plus the number of records dropped for
/// falling outside the period.
#[pyfunction]
fn encode_points(trajectory: Vec<(i64, f64, f64)>, theta: &Theta) -> PyResult<(Vec<String>, u64)> {
    let (keys, stats) = codec::encode_points(&points(trajectory)?, &theta.0).map_err(to_py)?;
    Ok((keys.to_strings(), stats.dropped_out_of_period))
}

/// Minimal acyclic automaton over a set of equal-length ASCII keys.
#[pyclass(module = "pct", frozen)]
struct Fsa(FsaAutomaton);

#[pymethods]
impl Fsa {
    /// Builds from keys in any order; duplicates are dropped.
    #[new]
    fn new(mut keys: Vec<String>) -> PyResult<Self> {
        keys.sort_unstable();
        keys.dedup();
        build_fsa(&keys).map(Fsa).map_err(to_py)
    }

    #[staticmethod]
    fn deserialize(data: &[u8]) -> PyResult<Self> {
        FsaAutomaton::deserialize(data).map(Fsa).map_err(to_py)
    }

    fn serialize<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.serialize())
    }

    fn __contains__(&self, key: &str) -> bool {
        self.0.contains(key.as_bytes())
    }

    fn __len__(&self) -> usize {
        self.0.key_count() as usize
    }

    fn keys(&self) -> Vec<String> {
        self.0.keys().map(|k| String::from_utf8_lossy(&k).into_owned()).collect()
    }

    #[getter]
    fn key_length(&self) -> usize {
        self.0.key_length()
    }

    #[getter]
    fn state_count(&self) -> usize {
        self.0.state_count()
    }

    #[getter]
    fn transition_count(&self) -> usize {
        self.0.transition_count()
    }

    fn __repr__(&self) -> String {
        format!("Fsa(keys={}, states={}, transitions={})", self.0.key_count(), self.0.state_count(), self.0.transition_count())
    }
}

/// Serialized size in bytes of a dictionary over `keys` ("fsa" or "hash").
#[pyfunction]
#[pyo3(signature = (keys, backend="fsa"))]
fn dictionary_size(mut keys: Vec<String>, backend: &str) -> PyResult<u64> {
    let b = self::backend(backend)?;
    keys.sort_unstable();
    keys.dedup();
    let width = keys.first().map_or(0, |k| k.len());
    KeyDictionary::build_sorted(b, width, &keys).map(|d| d.serialized_len()).map_err(to_py)
}

/// Settings of the simulated trusted region.
#[pyclass(module = "pct", frozen, from_py_object)]
#[derive(Clone)]
struct TrustedRegion(EnclaveConfig);

#[pymethods]
impl TrustedRegion {
    #[new]
    #[pyo3(signature = (budget_bytes=pct_core::enclave::DEFAULT_BUDGET_BYTES, paging_mode="strict", penalty_ns_per_byte=1))]
    fn new(budget_bytes: u64, paging_mode: &str, penalty_ns_per_byte: u64) -> PyResult<Self> {
        let mode: PagingMode = paging_mode.parse().map_err(to_py)?;
        let cfg = EnclaveConfig {
            budget_bytes,
            paging_mode: mode,
            penalty_ns_per_byte,
        };
        pct_core::enclave::TrustedRegion::new(cfg).map_err(to_py)?;
        Ok(TrustedRegion(cfg))
    }

    #[getter]
    fn budget_bytes(&self) -> u64 {
        self.0.budget_bytes
    }

    #[getter]
    fn paging_mode(&self) -> String {
        self.0.paging_mode.to_string()
    }

    fn __repr__(&self) -> String {
        format!("TrustedRegion(budget_bytes={}, paging_mode={:?})", self.0.budget_bytes, self.0.paging_mode.to_string())
    }
}

/// A chunked corpus on disk.
#[pyclass(module = "pct")]
struct Corpus(ChunkManifest);

fn build_options(theta: &Theta, chunk_entries: u64, backend: &str) -> PyResult<ChunkBuildOptions> {
    Ok(ChunkBuildOptions::new(theta.0, chunk_entries, self::backend(backend)?))
}

#[pymethods]
impl Corpus {
    /// Encodes `(t, lat, lon)` records and writes a new corpus to `directory`.
    #[staticmethod]
    #[pyo3(signature = (directory, trajectory, theta, chunk_entries=1_000_000, backend="fsa"))]
    fn build(py: Python<'_>, directory: PathBuf, trajectory: Vec<(i64, f64, f64)>, theta: &Theta, chunk_entries: u64, backend: &str) -> PyResult<Self> {
        let opts = build_options(theta, chunk_entries, backend)?;
        let pts = points(trajectory)?;
        py.detach(|| map_to_chunked_dictionary(&pts, &opts, &directory))
            .map(|r| Corpus(r.manifest))
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(directory: PathBuf) -> PyResult<Self> {
        ChunkManifest::load(directory).map(Corpus).map_err(to_py)
    }

    /// Adds records and drops keys whose segment ended at or before
    /// `expire_before`, writing the next generation in place.
    #[pyo3(signature = (trajectory, expire_before=None))]
    fn update(&mut self, py: Python<'_>, trajectory: Vec<(i64, f64, f64)>, expire_before: Option<i64>) -> PyResult<u64> {
        let m = &self.0;
        let opts = ChunkBuildOptions::new(m.theta, m.chunk_entries, m.backend);
        let pts = points(trajectory)?;
        let dir = m.dir().to_path_buf();
        let r = py
            .detach(|| update_corpus(&dir, &opts, &pts, expire_before.unwrap_or(i64::MIN)))
            .map_err(to_py)?;
        self.0 = r.manifest;
        Ok(r.expired_keys)
    }

    #[getter]
    fn theta(&self) -> Theta {
        Theta(self.0.theta)
    }

    #[getter]
    fn generation(&self) -> u64 {
        self.0.generation
    }

    #[getter]
    fn key_count(&self) -> u64 {
        self.0.corpus_key_count
    }

    #[getter]
    fn chunk_count(&self) -> usize {
        self.0.chunk_count()
    }

    #[getter]
    fn total_bytes(&self) -> u64 {
        self.0.total_bytes()
    }

    #[getter]
    fn backend(&self) -> String {
        self.0.backend.to_string()
    }

    /// Answers one batch. `queries` maps client id to that client's encoded
    /// keys. Returns `{client_id: contact}` and a report dict; clients whose
    /// keys are malformed are listed under the report's "rejected" entry.
    #[pyo3(signature = (queries, region=None, range_pruning=false))]
    fn query<'py>(&self, py: Python<'py>, queries: Vec<(u64, Vec<String>)>, region: Option<TrustedRegion>, range_pruning: bool) -> PyResult<(Bound<'py, PyDict>, Bound<'py, PyDict>)> {
        let theta = self.0.theta;
        let mut batch = QueryBatch::new();
        for (id, keys) in &queries {
            let width = keys.first().map_or(theta.key_length(), |k| k.len());
            batch
                .push(ClientQuery {
                    client_id: *id,
                    keys: key_block(width, keys)?,
                })
                .map_err(to_py)?;
        }
        let cfg = region.map(|r| r.0).unwrap_or_default();
        let settings = BatchSettings {
            psi: PsiOptions { range_pruning },
            emit_matched_count: false,
        };
        let manifest = &self.0;
        let out = py
            .detach(|| {
                let mut region = pct_core::enclave::TrustedRegion::new(cfg)?;
                execute_batch(&batch, &theta, manifest, &mut region, &AttestationKey::stub(), pct_core::channel::now_secs(), settings)
            })
            .map_err(to_py)?;
        let contacts = PyDict::new(py);
        for r in &out.responses {
            contacts.set_item(r.client_id, r.contact)?;
        }
        let rep = PyDict::new(py);
        let r = &out.report;
        rep.set_item("n_c", r.n_c)?;
        rep.set_item("n_q", r.n_q)?;
        rep.set_item("n_d", r.n_d)?;
        rep.set_item("probe_count", r.probe_count)?;
        rep.set_item("peak_trusted_bytes", r.peak_trusted_bytes)?;
        rep.set_item("assemble_ms", r.assemble_ms)?;
        rep.set_item("psi_ms", r.psi_ms)?;
        rep.set_item("respond_ms", r.respond_ms)?;
        rep.set_item("paging_penalty_ms", r.paging_penalty_ms)?;
        let rejected: Vec<(u64, String)> = out.rejected.iter().map(|x| (x.client_id, x.reason.clone())).collect();
        rep.set_item("rejected", rejected)?;
        Ok((contacts, rep))
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus(generation={}, keys={}, chunks={}, backend={})",
            self.0.generation,
            self.0.corpus_key_count,
            self.0.chunk_count(),
            self.0.backend
        )
    }
}

#[pymodule]
fn pct(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("PctError", py.get_type::<PctError>())?;
    m.add("BudgetExceededError", py.get_type::<BudgetExceededError>())?;
    m.add("IntegrityError", py.get_type::<IntegrityError>())?;
    m.add_class::<Theta>()?;
    m.add_class::<Fsa>()?;
    m.add_class::<TrustedRegion>()?;
    m.add_class::<Corpus>()?;
    m.add_function(wrap_pyfunction!(geohash, m)?)?;
    m.add_function(wrap_pyfunction!(encode_point, m)?)?;
    m.add_function(wrap_pyfunction!(encode_points, m)?)?;
    m.add_function(wrap_pyfunction!(dictionary_size, m)?)?;
    Ok(())
}
