//! The query daemon.
//!
//! Connection threads only ever hold sealed frames. A single enclave worker
//! owns everything trusted: the attestation key, the sessions, the trusted
//! region and the loaded manifest. It answers handshakes, and runs a batch
//! once `batch_count` queries are pending or the oldest has waited
//! `batch_wait_ms`.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::protocol::{decode_query, error_payload, read_message, write_message, ErrorCode, MsgType};
use crate::channel::{frame_session_id, hex16, now_secs, AttestationKey, Attestor, ClientHello, EnclavePolicy, Session, DEFAULT_SESSION_TTL_SECS, FRAME_HEADER_LEN};
use crate::chunk::ChunkManifest;
use crate::enclave::{EnclaveConfig, TrustedRegion};
use crate::error::{Error, Result};
use crate::psi::{execute_batch, BatchReport, BatchSettings, ClientQuery, PsiOptions, QueryBatch};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: String,
    pub batch_count: usize,
    pub batch_wait_ms: u64,
    pub enclave: EnclaveConfig,
    pub session_ttl_secs: u64,
    pub policy: EnclavePolicy,
    pub psi: PsiOptions,
    /// Loopback address for the admin command listener, if any.
    pub admin_listen: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen: "127.0.0.1:7878".into(),
            batch_count: 64,
            batch_wait_ms: 200,
            enclave: EnclaveConfig::default(),
            session_ttl_secs: DEFAULT_SESSION_TTL_SECS,
            policy: EnclavePolicy::default(),
            psi: PsiOptions::default(),
            admin_listen: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServerStats {
    pub batches: u64,
    pub queries_answered: u64,
    pub queries_failed: u64,
    pub handshakes: u64,
    pub live_sessions: usize,
    pub queue_len: usize,
    pub manifest_generation: u64,
    pub corpus_keys: u64,
    pub last_batch: Option<BatchReport>,
}

impl ServerStats {
    pub fn to_lines(&self) -> Vec<String> {
        let mut v = vec![
            format!("batches={}", self.batches),
            format!("queries_answered={}", self.queries_answered),
            format!("queries_failed={}", self.queries_failed),
            format!("handshakes={}", self.handshakes),
            format!("live_sessions={}", self.live_sessions),
            format!("queue_len={}", self.queue_len),
            format!("manifest_generation={}", self.manifest_generation),
            format!("corpus_keys={}", self.corpus_keys),
        ];
        if let Some(r) = &self.last_batch {
            v.push(format!("last_batch={}", BatchReport::CSV_HEADER));
            v.push(format!("last_batch={}", r.csv_row()));
        }
        v
    }
}

type Reply = (MsgType, Vec<u8>);

struct PendingQuery {
    session_id: [u8; 16],
    frame: Vec<u8>,
    enqueued: Instant,
    reply: mpsc::Sender<Reply>,
}

struct HandshakeJob {
    hello: ClientHello,
    reply: mpsc::Sender<Result<([u8; 16], Vec<u8>)>>,
}

#[derive(Default)]
struct QueueState {
    queries: VecDeque<PendingQuery>,
    handshakes: VecDeque<HandshakeJob>,
    reloads: VecDeque<mpsc::Sender<Result<u64>>>,
    shutdown: bool,
}

struct Shared {
    state: Mutex<QueueState>,
    cv: Condvar,
    stats: Mutex<ServerStats>,
    stopping: AtomicBool,
}

/// Local control plane: manifest reload, stats and queue inspection.
#[derive(Clone)]
pub struct AdminHandle {
    shared: Arc<Shared>,
}

impl AdminHandle {
    /// Swaps in the manifest currently on disk before the next batch starts.
    /// Returns the new generation.
    pub fn reload_manifest(&self) -> Result<u64> {
        let (tx, rx) = mpsc::channel();
        {
            let mut st = self.shared.state.lock().unwrap();
            if st.shutdown {
                return Err(Error::Logic("server is shutting down".into()));
            }
            st.reloads.push_back(tx);
        }
        self.shared.cv.notify_all();
        rx.recv().map_err(|_| Error::Logic("enclave worker stopped".into()))?
    }

    pub fn stats(&self) -> ServerStats {
        let mut s = self.shared.stats.lock().unwrap().clone();
        s.queue_len = self.shared.state.lock().unwrap().queries.len();
        s
    }

    /// One line per pending query. Frames are sealed; only the header and a
    /// ciphertext prefix are shown.
    pub fn queue_dump(&self) -> Vec<String> {
        let st = self.shared.state.lock().unwrap();
        st.queries
            .iter()
            .map(|q| {
                let body = &q.frame[FRAME_HEADER_LEN.min(q.frame.len())..];
                let prefix: String = body.iter().take(32).map(|b| format!("{b:02x}")).collect();
                format!(
                    "session={} frame_bytes={} waited_ms={} ciphertext_prefix={prefix}",
                    hex16(&q.session_id),
                    q.frame.len(),
                    q.enqueued.elapsed().as_millis()
                )
            })
            .collect()
    }
}

pub struct ServerHandle {
    admin: AdminHandle,
    addr: SocketAddr,
    admin_addr: Option<SocketAddr>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn admin_addr(&self) -> Option<SocketAddr> {
        self.admin_addr
    }

    pub fn admin(&self) -> AdminHandle {
        self.admin.clone()
    }

    pub fn reload_manifest(&self) -> Result<u64> {
        self.admin.reload_manifest()
    }

    pub fn stats(&self) -> ServerStats {
        self.admin.stats()
    }

    pub fn queue_dump(&self) -> Vec<String> {
        self.admin.queue_dump()
    }

    /// Blocks until the server stops (after `shutdown` from another thread
    /// or a fatal listener error).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(self) {
        let shared = &self.admin.shared;
        shared.stopping.store(true, Ordering::SeqCst);
        shared.state.lock().unwrap().shutdown = true;
        shared.cv.notify_all();
        // wake the blocking accept calls
        let _ = TcpStream::connect(self.addr);
        if let Some(a) = self.admin_addr {
            let _ = TcpStream::connect(a);
        }
        self.wait();
    }
}

/// Loads the manifest in `manifest_dir` and starts serving.
pub fn serve(manifest_dir: &Path, config: ServerConfig) -> Result<ServerHandle> {
    if config.batch_count == 0 {
        return Err(Error::config("batch_count must be at least 1"));
    }
    let manifest = ChunkManifest::load(manifest_dir)?;
    let region = TrustedRegion::new(config.enclave)?;
    if manifest.largest_chunk_bytes() > config.enclave.budget_bytes {
        log::warn!(
            "largest chunk ({} bytes) exceeds the trusted budget ({} bytes); batches will fail",
            manifest.largest_chunk_bytes(),
            config.enclave.budget_bytes
        );
    }
    let listener = TcpListener::bind(&config.listen)?;
    let addr = listener.local_addr()?;
    let admin_listener = match &config.admin_listen {
        Some(a) => {
            let l = TcpListener::bind(a)?;
            if !l.local_addr()?.ip().is_loopback() {
                return Err(Error::config("admin listener must bind a loopback address"));
            }
            Some(l)
        }
        None => None,
    };
    let admin_addr = admin_listener.as_ref().map(|l| l.local_addr()).transpose()?;

    let shared = Arc::new(Shared {
        state: Mutex::new(QueueState::default()),
        cv: Condvar::new(),
        stats: Mutex::new(ServerStats {
            manifest_generation: manifest.generation,
            corpus_keys: manifest.corpus_key_count,
            ..Default::default()
        }),
        stopping: AtomicBool::new(false),
    });
    log::info!(
        "serving generation {} ({} chunks, {} keys) on {addr}",
        manifest.generation,
        manifest.chunk_count(),
        manifest.corpus_key_count
    );

    let mut threads = Vec::new();
    let worker = Worker {
        shared: shared.clone(),
        dir: manifest_dir.to_path_buf(),
        manifest,
        region,
        attestor: Attestor::new(AttestationKey::stub(), &config.policy),
        sessions: HashMap::new(),
        config: config.clone(),
    };
    threads.push(thread::Builder::new().name("enclave".into()).spawn(move || worker.run())?);

    let s = shared.clone();
    threads.push(thread::Builder::new().name("accept".into()).spawn(move || accept_loop(listener, s))?);

    if let Some(l) = admin_listener {
        let admin = AdminHandle { shared: shared.clone() };
        threads.push(thread::Builder::new().name("admin".into()).spawn(move || admin_loop(l, admin))?);
    }

    Ok(ServerHandle {
        admin: AdminHandle { shared },
        addr,
        admin_addr,
        threads,
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stopping.load(Ordering::SeqCst) {
            break;
        }
        match stream {
            Ok(s) => {
                let sh = shared.clone();
                let _ = thread::Builder::new().name("conn".into()).spawn(move || {
                    let peer = s.peer_addr().ok();
                    if let Err(e) = handle_connection(s, &sh) {
                        log::debug!("connection {peer:?} closed: {e}");
                    }
                });
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
}

fn send_error(stream: &mut TcpStream, code: ErrorCode, msg: &str) -> Result<()> {
    write_message(stream, MsgType::Error, &error_payload(code, msg))
}

fn handle_connection(mut stream: TcpStream, shared: &Shared) -> Result<()> {
    let _ = stream.set_nodelay(true);
    let mut session: Option<[u8; 16]> = None;
    loop {
        let (ty, payload) = match read_message(&mut stream) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(e) => {
                let _ = send_error(&mut stream, ErrorCode::Protocol, &e.to_string());
                return Err(e);
            }
        };
        match ty {
            MsgType::Handshake => {
                let hello = match ClientHello::from_bytes(&payload) {
                    Ok(h) => h,
                    Err(e) => {
                        send_error(&mut stream, ErrorCode::Protocol, &e.to_string())?;
                        return Err(e);
                    }
                };
                let (tx, rx) = mpsc::channel();
                {
                    let mut st = shared.state.lock().unwrap();
                    if st.shutdown {
                        return send_error(&mut stream, ErrorCode::Internal, "server shutting down");
                    }
                    st.handshakes.push_back(HandshakeJob { hello, reply: tx });
                }
                shared.cv.notify_all();
                match rx.recv() {
                    Ok(Ok((sid, resp))) => {
                        session = Some(sid);
                        write_message(&mut stream, MsgType::HandshakeResp, &resp)?;
                    }
                    Ok(Err(e)) => return send_error(&mut stream, ErrorCode::Internal, &e.to_string()),
                    Err(_) => return send_error(&mut stream, ErrorCode::Internal, "enclave worker stopped"),
                }
            }
            MsgType::Query => {
                let Some(sid) = session else {
                    send_error(&mut stream, ErrorCode::Protocol, "query before handshake")?;
                    return Err(Error::protocol("query before handshake"));
                };
                if frame_session_id(&payload) != Some(sid) {
                    send_error(&mut stream, ErrorCode::Protocol, "frame does not belong to this connection's session")?;
                    return Err(Error::protocol("foreign session frame"));
                }
                let (tx, rx) = mpsc::channel();
                {
                    let mut st = shared.state.lock().unwrap();
                    if st.shutdown {
                        return send_error(&mut stream, ErrorCode::Internal, "server shutting down");
                    }
                    st.queries.push_back(PendingQuery {
                        session_id: sid,
                        frame: payload,
                        enqueued: Instant::now(),
                        reply: tx,
                    });
                }
                shared.cv.notify_all();
                match rx.recv() {
                    Ok((ty, p)) => write_message(&mut stream, ty, &p)?,
                    Err(_) => return send_error(&mut stream, ErrorCode::Internal, "query dropped during shutdown"),
                }
            }
            other => {
                send_error(&mut stream, ErrorCode::Protocol, &format!("unexpected {other:?} message"))?;
                return Err(Error::protocol("unexpected message type"));
            }
        }
    }
}

fn admin_loop(listener: TcpListener, admin: AdminHandle) {
    for stream in listener.incoming() {
        if admin.shared.stopping.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        if !stream.peer_addr().map(|a| a.ip().is_loopback()).unwrap_or(false) {
            continue;
        }
        let mut line = String::new();
        let mut reader = BufReader::new(&stream);
        if reader.read_line(&mut line).is_err() {
            continue;
        }
        let out = match line.trim() {
            "reload" => match admin.reload_manifest() {
                Ok(g) => vec![format!("ok generation={g}")],
                Err(e) => vec![format!("error {e}")],
            },
            "stats" => admin.stats().to_lines(),
            "queue" => admin.queue_dump(),
            other => vec![format!("error unknown command {other:?}; use reload, stats or queue")],
        };
        let mut w = &stream;
        for l in out {
            let _ = writeln!(w, "{l}");
        }
    }
}

/// Sends one admin command to a running server and returns its reply lines.
pub fn admin_command(addr: &str, command: &str) -> Result<Vec<String>> {
    let mut s = TcpStream::connect(addr)?;
    writeln!(s, "{command}")?;
    s.shutdown(std::net::Shutdown::Write)?;
    BufReader::new(s).lines().map(|l| l.map_err(Error::from)).collect()
}

struct Worker {
    shared: Arc<Shared>,
    dir: PathBuf,
    manifest: ChunkManifest,
    region: TrustedRegion,
    attestor: Attestor,
    sessions: HashMap<[u8; 16], Session>,
    config: ServerConfig,
}

impl Worker {
    fn batch_ready(&self, st: &QueueState) -> bool {
        st.queries.len() >= self.config.batch_count
            || st
                .queries
                .front()
                .is_some_and(|q| q.enqueued.elapsed() >= Duration::from_millis(self.config.batch_wait_ms))
    }

    fn run(mut self) {
        let wait = Duration::from_millis(self.config.batch_wait_ms);
        let shared = self.shared.clone();
        loop {
            let (handshakes, reloads, batch) = {
                let mut st = shared.state.lock().unwrap();
                loop {
                    if st.shutdown {
                        return;
                    }
                    if !st.handshakes.is_empty() || !st.reloads.is_empty() || self.batch_ready(&st) {
                        break;
                    }
                    let timeout = match st.queries.front() {
                        Some(q) => wait.saturating_sub(q.enqueued.elapsed()).max(Duration::from_millis(1)),
                        None => Duration::from_secs(1),
                    };
                    st = shared.cv.wait_timeout(st, timeout).unwrap().0;
                    self.purge_sessions();
                }
                let handshakes: Vec<_> = st.handshakes.drain(..).collect();
                let reloads: Vec<_> = st.reloads.drain(..).collect();
                let batch: Vec<_> = if self.batch_ready(&st) {
                    let n = st.queries.len().min(self.config.batch_count);
                    st.queries.drain(..n).collect()
                } else {
                    Vec::new()
                };
                (handshakes, reloads, batch)
            };
            for job in handshakes {
                let r = self.handshake(&job.hello);
                let _ = job.reply.send(r);
            }
            for tx in reloads {
                let _ = tx.send(self.reload());
            }
            if !batch.is_empty() {
                self.run_batch(batch);
            }
            self.purge_sessions();
        }
    }

    fn purge_sessions(&mut self) {
        let now = now_secs();
        self.sessions.retain(|_, s| !s.is_expired_at(now));
        self.shared.stats.lock().unwrap().live_sessions = self.sessions.len();
    }

    fn handshake(&mut self, hello: &ClientHello) -> Result<([u8; 16], Vec<u8>)> {
        let params = self.manifest.theta.to_bytes();
        let (resp, session) = self.attestor.respond(hello, &params, self.config.session_ttl_secs)?;
        log::debug!("session {} established", hex16(&resp.session_id));
        self.sessions.insert(resp.session_id, session);
        let mut stats = self.shared.stats.lock().unwrap();
        stats.handshakes += 1;
        stats.live_sessions = self.sessions.len();
        Ok((resp.session_id, resp.to_bytes()))
    }

    fn reload(&mut self) -> Result<u64> {
        let m = ChunkManifest::load(&self.dir)?;
        if m.theta != self.manifest.theta {
            log::warn!("reloaded manifest changes theta; clients must re-handshake");
        }
        log::info!("manifest reloaded: generation {} -> {}", self.manifest.generation, m.generation);
        let g = m.generation;
        {
            let mut stats = self.shared.stats.lock().unwrap();
            stats.manifest_generation = g;
            stats.corpus_keys = m.corpus_key_count;
        }
        self.manifest = m;
        Ok(g)
    }

    fn fail(&self, reply: &mpsc::Sender<Reply>, code: ErrorCode, msg: &str) {
        self.shared.stats.lock().unwrap().queries_failed += 1;
        let _ = reply.send((MsgType::Error, error_payload(code, msg)));
    }

    fn run_batch(&mut self, pending: Vec<PendingQuery>) {
        let mut batch = QueryBatch::new();
        let mut routes: HashMap<u64, (mpsc::Sender<Reply>, [u8; 16])> = HashMap::new();
        let mut deferred = Vec::new();
        for pq in pending {
            let Some(session) = self.sessions.get_mut(&pq.session_id) else {
                self.fail(&pq.reply, ErrorCode::Expired, "unknown or expired session");
                continue;
            };
            let client_id = session.client_id();
            if routes.contains_key(&client_id) {
                // second query on one session waits for the next batch
                deferred.push(pq);
                continue;
            }
            let plain = match session.open(&pq.frame) {
                Ok(p) => p,
                Err(Error::SessionExpired) => {
                    self.fail(&pq.reply, ErrorCode::Expired, "session expired");
                    continue;
                }
                Err(e) => {
                    self.fail(&pq.reply, ErrorCode::Protocol, &e.to_string());
                    continue;
                }
            };
            let keys = match decode_query(&plain) {
                Ok(k) => k,
                Err(e) => {
                    self.fail(&pq.reply, ErrorCode::Protocol, &e.to_string());
                    continue;
                }
            };
            if batch.push(ClientQuery { client_id, keys }).is_ok() {
                routes.insert(client_id, (pq.reply, pq.session_id));
            }
        }
        if !deferred.is_empty() {
            let mut st = self.shared.state.lock().unwrap();
            for pq in deferred.into_iter().rev() {
                st.queries.push_front(pq);
            }
        }
        if batch.is_empty() {
            return;
        }

        let settings = BatchSettings {
            psi: self.config.psi,
            emit_matched_count: self.config.policy.emit_matched_count,
        };
        let result = execute_batch(
            &batch,
            &self.manifest.theta,
            &self.manifest,
            &mut self.region,
            self.attestor.key(),
            now_secs(),
            settings,
        );
        match result {
            Ok(out) => {
                log::info!("batch {}", out.report.csv_row());
                let mut answered = 0;
                for r in &out.responses {
                    let Some((reply, sid)) = routes.remove(&r.client_id) else { continue };
                    let Some(session) = self.sessions.get_mut(&sid) else { continue };
                    match session.seal(&r.to_bytes()) {
                        Ok(frame) => {
                            answered += 1;
                            let _ = reply.send((MsgType::Response, frame));
                        }
                        Err(e) => self.fail(&reply, ErrorCode::Expired, &e.to_string()),
                    }
                }
                for rej in &out.rejected {
                    if let Some((reply, _)) = routes.remove(&rej.client_id) {
                        self.fail(&reply, ErrorCode::Rejected, &rej.reason);
                    }
                }
                let mut stats = self.shared.stats.lock().unwrap();
                stats.batches += 1;
                stats.queries_answered += answered;
                stats.last_batch = Some(out.report);
            }
            Err(e) => {
                log::error!("batch of {} clients failed: {e}", batch.len());
                for (_, (reply, _)) in routes.drain() {
                    self.fail(&reply, ErrorCode::Internal, &format!("batch failed: {e}"));
                }
            }
        }
    }
}
