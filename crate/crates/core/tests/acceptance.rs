//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset: `cargo test --test acceptance -- 3 9`.

mod common;

use std::collections::HashSet;
use std::net::SocketAddr;
use std::process::ExitCode;
use std::sync::{Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use log::{Log, Metadata, Record};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use common::instance::{random_instance, run_instance};
use pct_core::bench::{make_query_batch, oracle_contacts, shuffled, time_batch, Generator, GeneratorConfig, MobilityModel, QUERY_PERSON_OFFSET};
use pct_core::channel::{AttestationKey, Attestor, ClientHandshake, EnclavePolicy, HandshakeResponse, TrustAnchor};
use pct_core::chunk::{chunk_encoded_keys, chunk_serialized_sizes, map_to_chunked_dictionary, serialize_chunk, ChunkBuildOptions};
use pct_core::codec::{encode_points, TrajectoryPoint};
use pct_core::dictionary::{build_fsa, Backend, FsaAutomaton};
use pct_core::enclave::{EnclaveConfig, PagingMode, TrustedRegion, DEFAULT_BUDGET_BYTES};
use pct_core::keys::KeyBlock;
use pct_core::psi::{execute_batch, map_to_unique_array, BatchSettings, ClientQuery, MemoryChunks, QueryBatch};
use pct_core::service::{client_query, serve, ClientOptions, ServerConfig};
use pct_core::{Error, Result};

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

/// Peak trusted bytes of every STRICT run in criteria 1 and 8.
static PEAKS: Mutex<Vec<(u8, u64, u64)>> = Mutex::new(Vec::new());

fn record_peak(criterion: u8, peak: u64, budget: u64) {
    PEAKS.lock().unwrap().push((criterion, peak, budget));
}

fn random_key_set(rng: &mut StdRng, max: usize) -> Vec<Vec<u8>> {
    const ALPHABET: &[u8] = b"0123456789bcdefghjkmnpqrstuvwxyz";
    let len = rng.gen_range(1..=14);
    let sigma = rng.gen_range(2..=ALPHABET.len());
    let n = rng.gen_range(0..=max);
    let mut keys: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..len).map(|_| ALPHABET[rng.gen_range(0..sigma)]).collect())
        .collect();
    keys.sort();
    keys.dedup();
    keys
}

fn walk(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        ..Default::default()
    }
}

fn fsa_bytes(keys: &KeyBlock) -> Result<u64> {
    Ok(serialize_chunk(keys, Backend::Fsa)?.len() as u64)
}

fn hash_bytes(keys: &KeyBlock) -> Result<u64> {
    Ok(serialize_chunk(keys, Backend::Hash)?.len() as u64)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = StdRng::seed_from_u64(1001);
    let (mut mismatches, mut clients, mut contacts, mut nested) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..1000 {
        let inst = random_instance(&mut rng, 100_000, 50, 1440);
        let want = inst.oracle();
        // full nested loop where it is affordable
        let pairs = inst.corpus.len() * inst.clients.iter().map(|c| c.len()).sum::<usize>();
        if pairs <= 2_000_000 {
            nested += 1;
            let th = &inst.theta;
            for (c, &w) in inst.clients.iter().zip(&want) {
                let n = common::nested_loop_contact(c, &inst.corpus, th.geo_digits as u32, th.period_start, th.period_end, th.segment_seconds);
                if n != w {
                    return Err(format!("instance {i}: set oracle and nested-loop oracle disagree"));
                }
            }
        }
        let backend = if rng.gen_bool(0.5) { Backend::Fsa } else { Backend::Hash };
        let entries = [50u64, 1_000, 20_000, 1_000_000][rng.gen_range(0..4)];
        let r = run_instance(&inst, backend, entries, DEFAULT_BUDGET_BYTES, rng.gen_bool(0.3)).map_err(fail)?;
        record_peak(1, r.peak_trusted_bytes, DEFAULT_BUDGET_BYTES);
        mismatches += r.contacts.iter().zip(&want).filter(|(a, b)| a != b).count();
        clients += want.len();
        contacts += want.iter().filter(|&&c| c).count();
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs < 300.0,
        format!("1000 instances, {clients} clients ({contacts} in contact), {mismatches} mismatches, {nested} also checked by nested loop, {secs:.1}s"),
    )
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut rng = StdRng::seed_from_u64(1002);
    for set in 0..200 {
        let keys = random_key_set(&mut rng, 1000);
        let fsa = build_fsa(&keys).map_err(fail)?;
        let len = keys.first().map_or(0, |k| k.len());
        for _ in 0..10_000 {
            let probe: Vec<u8> = if !keys.is_empty() && rng.gen_bool(0.5) {
                let mut p = keys[rng.gen_range(0..keys.len())].clone();
                if rng.gen_bool(0.3) {
                    let j = rng.gen_range(0..p.len());
                    p[j] = b"0123456789bcdefghjkmnpqrstuvwxyz"[rng.gen_range(0..32)];
                }
                p
            } else {
                (0..len.max(1)).map(|_| b"0123456789bcdefghjkmnpqrstuvwxyz"[rng.gen_range(0..32)]).collect()
            };
            if fsa.contains(&probe) != common::sorted_contains(&keys, &probe) {
                return Err(format!("set {set}: membership of {:?} disagrees with binary search", String::from_utf8_lossy(&probe)));
            }
        }
        let minimal = common::hopcroft_state_count(&common::build_trie(&keys));
        if fsa.state_count() != minimal {
            return Err(format!("set {set}: {} states, minimal automaton has {minimal}", fsa.state_count()));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(secs < 120.0, format!("200 sets x 10^4 probes agree with binary search, state counts equal Hopcroft minimization, {secs:.1}s"))
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let g = GeneratorConfig::default();
    let keys = Generator::new(g.clone()).and_then(|gen| gen.unique_keys(&g.theta(), 1_000_000)).map_err(fail)?;
    let (f, h) = (fsa_bytes(&keys).map_err(fail)?, hash_bytes(&keys).map_err(fail)?);
    let ratio = f as f64 / h as f64;
    let secs = t.elapsed().as_secs_f64();
    check(
        keys.width() == 14 && ratio <= 0.35 && secs < 300.0,
        format!("10^6 walk keys: FSA {f} B, hash {h} B, ratio {ratio:.3} (<= 0.35), {secs:.1}s"),
    )
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let g = GeneratorConfig::default();
    let gen = Generator::new(g.clone()).map_err(fail)?;
    let small = gen.unique_keys(&g.theta(), 1_000_000).map_err(fail)?;
    let (f1, h1) = (fsa_bytes(&small).map_err(fail)?, hash_bytes(&small).map_err(fail)?);
    drop(small);
    let big = gen.unique_keys(&g.theta(), 5_000_000).map_err(fail)?;
    let (f5, h5) = (fsa_bytes(&big).map_err(fail)?, hash_bytes(&big).map_err(fail)?);
    let (fg, hg) = (f5 as f64 / f1 as f64, h5 as f64 / h1 as f64);
    let secs = t.elapsed().as_secs_f64();
    check(
        fg <= 4.0 && hg >= 4.5 && secs < 600.0,
        format!("10^6 -> 5x10^6 keys: FSA grows {fg:.2}x (<= 4.0), hash grows {hg:.2}x (>= 4.5), {secs:.1}s"),
    )
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let g = walk(100 + trial);
        let keys = Generator::new(g.clone()).and_then(|gen| gen.unique_keys(&g.theta(), 1_000_000)).map_err(fail)?;
        let sorted: u64 = chunk_serialized_sizes(&keys, 100_000, Backend::Fsa).map_err(fail)?.iter().sum();
        let mixed: u64 = chunk_serialized_sizes(&shuffled(&keys, trial), 100_000, Backend::Fsa).map_err(fail)?.iter().sum();
        let r = sorted as f64 / mixed as f64;
        worst = worst.max(r);
        if sorted > mixed {
            return Err(format!("trial {trial}: sorted chunks {sorted} B > shuffled chunks {mixed} B"));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(true, format!("20 corpora of 10^6 keys in chunks of 10^5: sorted <= shuffled in every trial (largest sorted/shuffled {worst:.3}), {secs:.1}s"))
}

fn criterion_6() -> Outcome {
    let mut ratios = Vec::new();
    for seed in 1..=10u64 {
        let w = walk(seed);
        let u = GeneratorConfig {
            model: MobilityModel::Uniform,
            ..walk(seed)
        };
        let n = 200_000;
        let kw = Generator::new(w.clone()).and_then(|g| g.unique_keys(&w.theta(), n)).map_err(fail)?;
        let ku = Generator::new(u.clone()).and_then(|g| g.unique_keys(&u.theta(), n)).map_err(fail)?;
        if kw.len() != ku.len() || kw.width() != ku.width() {
            return Err("key sets differ in size or key length".into());
        }
        let (fw, fu) = (fsa_bytes(&kw).map_err(fail)?, fsa_bytes(&ku).map_err(fail)?);
        if fw >= fu {
            return Err(format!("seed {seed}: walk FSA {fw} B >= uniform FSA {fu} B"));
        }
        ratios.push(fw as f64 / fu as f64);
    }
    let max = ratios.iter().cloned().fold(0.0, f64::max);
    check(true, format!("10 seeds, 2x10^5 keys each: walk FSA smaller than uniform FSA every time (largest ratio {max:.3})"))
}

fn criterion_7() -> Outcome {
    let peaks = PEAKS.lock().unwrap().clone();
    let over: Vec<_> = peaks.iter().filter(|(_, p, b)| p > b).collect();
    let runs = |c: u8| peaks.iter().filter(|r| r.0 == c).count();
    let max = peaks.iter().map(|r| r.1).max().unwrap_or(0);
    // a chunk larger than the budget must fail loudly
    let keys = {
        let g = GeneratorConfig::default();
        Generator::new(g.clone()).and_then(|gen| gen.unique_keys(&g.theta(), 200_000)).map_err(fail)?
    };
    let src = MemoryChunks::from_sorted(&keys, keys.len(), Backend::Hash).map_err(fail)?;
    let budget = src.total_bytes() / 2;
    let mut region = TrustedRegion::new(EnclaveConfig {
        budget_bytes: budget,
        paging_mode: PagingMode::Strict,
        penalty_ns_per_byte: 0,
    })
    .map_err(fail)?;
    let batch = QueryBatch::from_entries([ClientQuery {
        client_id: 1,
        keys: KeyBlock::from_bytes(14, keys.get(0).to_vec()).map_err(fail)?,
    }])
    .map_err(fail)?;
    let theta = GeneratorConfig::default().theta();
    let oversized = match execute_batch(&batch, &theta, &src, &mut region, &AttestationKey::stub(), 0, BatchSettings::default()) {
        Err(Error::BudgetExceeded { what, .. }) => what.contains("chunk 0"),
        _ => false,
    };
    check(
        over.is_empty() && runs(1) == 1000 && runs(8) > 0 && oversized && region.used_bytes() == 0,
        format!(
            "{} runs from criterion 1 and {} from criterion 8, max peak {max} B <= budget, {} over; {} B chunk under a {budget} B budget: {}",
            runs(1),
            runs(8),
            over.len(),
            src.total_bytes(),
            if oversized { "budget exceeded error" } else { "NO ERROR" }
        ),
    )
}

fn criterion_8() -> Outcome {
    const N_Q: usize = 10_000;
    const CHUNK: usize = 500_000;
    let g = GeneratorConfig::default();
    let theta = g.theta();
    let gen = Generator::new(g.clone()).map_err(fail)?;
    // exactly N_Q distinct query keys, split over 10 clients
    let mut seen = HashSet::new();
    let mut qkeys = Vec::new();
    let mut person = QUERY_PERSON_OFFSET;
    while qkeys.len() < N_Q {
        let (k, _) = encode_points(&gen.person(person), &theta).map_err(fail)?;
        for key in k.iter() {
            if qkeys.len() < N_Q && seen.insert(key.to_vec()) {
                qkeys.push(key.to_vec());
            }
        }
        person += 1;
    }
    let batch = QueryBatch::from_entries(qkeys.chunks(N_Q / 10).enumerate().map(|(i, c)| ClientQuery {
        client_id: i as u64,
        keys: KeyBlock::from_bytes(14, c.concat()).unwrap(),
    }))
    .map_err(fail)?;
    // chunks are disjoint random samples of one corpus, so every chunk costs the same
    let corpus = shuffled(&gen.unique_keys(&theta, 8 * CHUNK).map_err(fail)?, 8);
    let mut times = Vec::new();
    let mut lines = Vec::new();
    for n_d in [1usize, 2, 4, 8] {
        let mut src = MemoryChunks::new(14);
        let mut part = KeyBlock::with_capacity(14, n_d * CHUNK);
        for c in 0..n_d {
            let mut block = KeyBlock::with_capacity(14, CHUNK);
            for i in c * CHUNK..(c + 1) * CHUNK {
                block.push(corpus.get(i)).map_err(fail)?;
            }
            block.sort_dedup();
            part.append(&block).map_err(fail)?;
            src.push(serialize_chunk(&block, Backend::Fsa).map_err(fail)?, block.get(0), block.get(block.len() - 1));
        }
        part.sort_dedup();
        let expected = oracle_contacts(&batch, &part);
        let enclave = EnclaveConfig::default();
        let r = time_batch(&batch, &theta, &src, &enclave, BatchSettings::default(), Some(&expected), 2, 9).map_err(fail)?;
        record_peak(8, r.peak_trusted_bytes, enclave.budget_bytes);
        if r.n_q != N_Q || r.n_d != n_d || r.probe_count != (n_d * N_Q) as u64 {
            return Err(format!("N_D={n_d}: N_Q={} probes={} (want {})", r.n_q, r.probe_count, n_d * N_Q));
        }
        times.push(r.psi_ms);
        lines.push(format!("N_D={n_d} {:.1}ms", r.psi_ms));
    }
    let ratio = times[3] / times[0];
    check(
        (8.0 * 0.65..=8.0 * 1.35).contains(&ratio),
        format!("probe_count = N_D x 10^4 exactly; median psi {}; N_D=8 / N_D=1 = {ratio:.2} (8 +/- 35%)", lines.join(", ")),
    )
}

fn criterion_9() -> Outcome {
    let t = Instant::now();
    let g = GeneratorConfig::default();
    let theta = g.theta();
    let corpus = Generator::new(g.clone()).and_then(|gen| gen.unique_keys(&theta, 10_000_000)).map_err(fail)?;
    let batch = make_query_batch(&g, &theta, 1000, 1440).map_err(fail)?;
    let expected = oracle_contacts(&batch, &corpus);
    let tmp = tempfile::tempdir().map_err(fail)?;
    let enclave = EnclaveConfig::default();
    let mut res = Vec::new();
    for (backend, entries) in [(Backend::Fsa, 10_000_000u64), (Backend::Hash, 2_000_000)] {
        let dir = tmp.path().join(backend.to_string());
        let m = chunk_encoded_keys(&corpus, &ChunkBuildOptions::new(theta, entries, backend), &dir).map_err(fail)?;
        let r = time_batch(&batch, &theta, &m, &enclave, BatchSettings::default(), Some(&expected), 1, 3).map_err(fail)?;
        if r.peak_trusted_bytes > enclave.budget_bytes {
            return Err(format!("{backend}: peak {} over budget", r.peak_trusted_bytes));
        }
        res.push((backend, m.chunk_count(), m.largest_chunk_bytes(), r));
    }
    let total = |r: &pct_core::psi::BatchReport| r.assemble_ms + r.psi_ms + r.respond_ms;
    let (f, h) = (&res[0].3, &res[1].3);
    let psi_ratio = f.psi_ms / h.psi_ms;
    let total_ratio = total(f) / total(h);
    let secs = t.elapsed().as_secs_f64();
    let desc: Vec<String> = res
        .iter()
        .map(|(b, n, big, r)| format!("{b}: {n} chunks of <= {:.1} MB, psi {:.0}ms, total {:.0}ms", *big as f64 / 1e6, r.psi_ms, total(r)))
        .collect();
    check(
        psi_ratio <= 0.5 && total_ratio <= 0.5 && secs < 1800.0,
        format!("10^7 keys, 1000 x 1440-point queries; {}; FSA/hash psi {psi_ratio:.2}, total {total_ratio:.2} (<= 0.5), {secs:.0}s", desc.join("; ")),
    )
}

fn criterion_10() -> Outcome {
    const BUDGET: u64 = 64 << 20;
    let g = GeneratorConfig::default();
    let theta = g.theta();
    let per_client_bytes = 1440 * 14;
    let big_clients = (60_000_000usize).div_ceil(per_client_bytes);
    let all = make_query_batch(&g, &theta, big_clients, 1440).map_err(fail)?;
    let region_cfg = EnclaveConfig {
        budget_bytes: BUDGET,
        paging_mode: PagingMode::Penalized,
        penalty_ns_per_byte: 1,
    };
    let assemble = |n: usize| -> Result<(f64, f64, usize, u64)> {
        let batch = QueryBatch::from_entries(all.entries()[..n].iter().cloned())?;
        let mut ms = Vec::new();
        let mut pen = 0.0;
        let mut peak = 0;
        for _ in 0..5 {
            let mut region = TrustedRegion::new(region_cfg)?;
            let t = Instant::now();
            let set = map_to_unique_array(&batch, &theta, &mut region)?;
            ms.push(t.elapsed().as_secs_f64() * 1e3);
            pen = region.stats().paging_penalty_ms();
            peak = region.peak_bytes();
            set.release(&mut region)?;
        }
        Ok((pct_core::bench::median(&mut ms), pen, batch.total_keys(), peak))
    };
    let mut rows = Vec::new();
    for n in [100, 200, 400, 800] {
        rows.push((n, assemble(n).map_err(fail)?));
    }
    let per_key: Vec<f64> = rows.iter().map(|(_, r)| r.0 / r.2 as f64).collect();
    let mid = {
        let mut v = per_key.clone();
        pct_core::bench::median(&mut v)
    };
    let linear = per_key.iter().all(|&p| p / mid > 0.5 && p / mid < 2.0);
    let quiet = rows.iter().all(|(_, r)| r.1 == 0.0 && r.3 <= BUDGET);
    let (big_ms, big_pen, big_keys, big_peak) = assemble(big_clients).map_err(fail)?;
    let knee = big_pen > 0.0 && big_peak > BUDGET;
    let desc: Vec<String> = rows.iter().map(|(n, r)| format!("{n}:{:.1}ms", r.0)).collect();
    check(
        linear && quiet && knee,
        format!(
            "assemble {} (per-key cost within 2x of median, no penalty below budget); {big_clients} clients = {:.1} MB of queries under a 64 MiB PENALIZED budget: peak {:.1} MB, penalty {big_pen:.1}ms, assemble {big_ms:.0}ms",
            desc.join(" "),
            (big_keys * 14) as f64 / 1e6,
            big_peak as f64 / 1e6
        ),
    )
}

/// Collects every log line in the process for the leak check.
struct Capture(Mutex<Vec<String>>);

impl Log for Capture {
    fn enabled(&self, _: &Metadata) -> bool {
        true
    }
    fn log(&self, r: &Record) {
        self.0.lock().unwrap().push(format!("{} {} {}", r.level(), r.target(), r.args()));
    }
    fn flush(&self) {}
}

fn logger() -> &'static Capture {
    static L: OnceLock<&'static Capture> = OnceLock::new();
    L.get_or_init(|| {
        let l: &'static Capture = Box::leak(Box::new(Capture(Mutex::new(Vec::new()))));
        let _ = log::set_logger(l);
        log::set_max_level(log::LevelFilter::Trace);
        l
    })
}

fn criterion_11() -> Outcome {
    let attestor = Attestor::new(AttestationKey::stub(), &EnclavePolicy::default());
    let (hs, hello) = ClientHandshake::start();
    let (resp, mut server) = attestor.respond(&hello, b"params", 600).map_err(fail)?;
    let mut client = hs.finish(&resp, &TrustAnchor::default(), 600).map_err(fail)?;
    let mut rng = StdRng::seed_from_u64(1011);
    for _ in 0..1000 {
        let msg: Vec<u8> = (0..rng.gen_range(0..512)).map(|_| rng.gen()).collect();
        let back = server.open(&client.seal(&msg).map_err(fail)?).map_err(fail)?;
        let reply = client.open(&server.seal(&back).map_err(fail)?).map_err(fail)?;
        if reply != msg {
            return Err("round trip changed the message".into());
        }
    }
    let mut flips = 0;
    for _ in 0..100 {
        let msg: Vec<u8> = (0..rng.gen_range(1..32)).map(|_| rng.gen()).collect();
        let frame = client.seal(&msg).map_err(fail)?;
        for bit in 0..frame.len() * 8 {
            let mut bad = frame.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            if server.open(&bad).is_ok() {
                return Err(format!("flipped bit {bit} was accepted"));
            }
            flips += 1;
        }
        server.open(&frame).map_err(fail)?;
    }
    // tampered measurement
    let (hs, hello) = ClientHandshake::start();
    let (resp, _) = attestor.respond(&hello, b"params", 600).map_err(fail)?;
    let mut bytes = resp.to_bytes();
    bytes[3] ^= 0x40;
    let tampered = HandshakeResponse::from_bytes(&bytes).map_err(fail)?;
    let measurement_rejected = matches!(hs.finish(&tampered, &TrustAnchor::default(), 600), Err(Error::Handshake(_)));

    // end to end: no plaintext key on the untrusted side
    let log = logger();
    let dir = tempfile::tempdir().map_err(fail)?;
    let g = GeneratorConfig {
        num_people: 20,
        points_per_person: 200,
        ..Default::default()
    };
    let theta = g.theta();
    let gen = Generator::new(g.clone()).map_err(fail)?;
    let pts: Vec<TrajectoryPoint> = gen.generate().into_iter().flatten().collect();
    map_to_chunked_dictionary(&pts, &ChunkBuildOptions::new(theta, 1000, Backend::Fsa), dir.path()).map_err(fail)?;
    let handle = serve(
        dir.path(),
        ServerConfig {
            listen: "127.0.0.1:0".into(),
            batch_count: 16,
            batch_wait_ms: 1000,
            ..Default::default()
        },
    )
    .map_err(fail)?;
    let addr: SocketAddr = handle.local_addr();
    let mut secrets = Vec::new();
    let mut clients = Vec::new();
    for i in 0..8u64 {
        let traj = gen.person(i * 2)[..60].to_vec();
        secrets.extend(encode_points(&traj, &theta).map_err(fail)?.0.to_strings());
        clients.push(thread::spawn(move || client_query(addr, &traj, &ClientOptions::default())));
    }
    let mut dumps = Vec::new();
    while !clients.iter().all(|c| c.is_finished()) {
        dumps.extend(handle.queue_dump());
        dumps.extend(handle.stats().to_lines());
        thread::sleep(Duration::from_millis(10));
    }
    let mut answered = 0;
    for c in clients {
        if c.join().map_err(|_| "client panicked".to_string())?.map_err(fail)?.response.contact {
            answered += 1;
        }
    }
    handle.shutdown();
    let lines = log.0.lock().unwrap().clone();
    let hex = |s: &str| s.bytes().map(|b| format!("{b:02x}")).collect::<String>();
    let leaks = lines
        .iter()
        .chain(&dumps)
        .filter(|l| secrets.iter().any(|k| l.contains(k.as_str()) || l.contains(&hex(k))))
        .count();
    let dumped = dumps.iter().filter(|l| l.starts_with("session=")).count();
    check(
        measurement_rejected && leaks == 0 && dumped > 0 && answered == 8,
        format!(
            "1000 round trips; {flips} single-bit flips over 100 frames all rejected; tampered measurement {}; {} log lines and {dumped} queue dump lines hold none of {} query keys",
            if measurement_rejected { "rejected" } else { "ACCEPTED" },
            lines.len(),
            secrets.len()
        ),
    )
}

fn criterion_12() -> Outcome {
    let mut rng = StdRng::seed_from_u64(1012);
    for set in 0..1000 {
        let keys = random_key_set(&mut rng, 500);
        let fsa = build_fsa(&keys).map_err(fail)?;
        let bytes = fsa.serialize();
        let back = FsaAutomaton::deserialize(&bytes).map_err(fail)?;
        if back.keys().collect::<Vec<_>>() != keys {
            return Err(format!("set {set}: language changed"));
        }
        if back.serialize() != bytes {
            return Err(format!("set {set}: re-serialization differs"));
        }
        let mut bad = bytes.clone();
        let i = bad.len() - 1 - rng.gen_range(0..4);
        bad[i] ^= 1 << rng.gen_range(0..8);
        if !matches!(FsaAutomaton::deserialize(&bad), Err(Error::Integrity(_))) {
            return Err(format!("set {set}: corrupted CRC accepted"));
        }
        let mut bad = bytes.clone();
        let i = rng.gen_range(0..bad.len() - 4);
        bad[i] ^= 1 << rng.gen_range(0..8);
        if FsaAutomaton::deserialize(&bad).is_ok() {
            return Err(format!("set {set}: corrupted body accepted"));
        }
    }
    check(true, "1000 sets: language-equal, byte-identical re-serialization; corrupted CRC and body bytes rejected".into())
}

fn main() -> ExitCode {
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u8, &str, fn() -> Outcome); 12] = [
        (1, "oracle PSI equivalence", criterion_1),
        (2, "FSA exactness and minimality", criterion_2),
        (3, "compression ratio", criterion_3),
        (4, "sublinear FSA growth", criterion_4),
        (5, "sorted chunking", criterion_5),
        (6, "clustered vs uniform", criterion_6),
        (8, "cost-model linearity", criterion_8),
        (7, "budget compliance", criterion_7),
        (9, "FSA vs hash PSI speed", criterion_9),
        (10, "assemble-time knee", criterion_10),
        (11, "secure channel", criterion_11),
        (12, "serialization", criterion_12),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        if n == 7 && !only.is_empty() && !(only.contains(&1) && only.contains(&8)) {
            println!("SKIP criterion 7 ({name}): needs criteria 1 and 8 in the same run");
            continue;
        }
        let t = Instant::now();
        let out = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("PASS criterion {n} ({name}) [{secs:.1}s]: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}) [{secs:.1}s]: {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
