use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pct_core::bench::{bench_assemble, bench_compression, bench_psi, generator, BenchConfig, BoundingBox, GeneratorConfig, MobilityModel};
use pct_core::channel::EnclavePolicy;
use pct_core::chunk::{update_corpus, ChunkBuildOptions};
use pct_core::codec::{parse_trajectory_file, Theta, TrajectoryPoint};
use pct_core::dictionary::Backend;
use pct_core::enclave::{EnclaveConfig, PagingMode, DEFAULT_BUDGET_BYTES};
use pct_core::psi::PsiOptions;
use pct_core::service::{admin_command, client_query, serve, ClientOptions, ServerConfig};
use pct_core::{Error, Result};

#[derive(Parser)]
#[command(name = "pct", version, about = "Private contact tracing: corpus ingest, query server and client")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode trajectories and write a chunked corpus (adds to an existing one).
    Ingest(IngestArgs),
    /// Run the query server.
    Serve(ServeArgs),
    /// Ask a server whether a trajectory had contact.
    Query(QueryArgs),
    /// Generate synthetic trajectories, one CSV per person.
    Gen(GenArgs),
    /// Run an experiment driver and write a CSV report.
    Bench(BenchArgs),
    /// Send a command (reload, stats, queue) to a server's admin listener.
    Admin(AdminArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// A CSV file, or a directory of CSV files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 10)]
    geo_digits: u8,
    #[arg(long, default_value_t = 600)]
    segment_seconds: u64,
    #[arg(long)]
    period_start: i64,
    #[arg(long)]
    period_end: i64,
    #[arg(long, default_value_t = 4)]
    time_width: u8,
    #[arg(long, default_value_t = 1_000_000)]
    chunk_entries: u64,
    #[arg(long, default_value = "fsa")]
    backend: Backend,
    /// Drop corpus keys whose time segment ended at or before this time.
    #[arg(long)]
    expire_before: Option<i64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    #[arg(long, default_value_t = 64)]
    batch_count: usize,
    #[arg(long, default_value_t = 200)]
    batch_wait_ms: u64,
    #[arg(long, default_value_t = DEFAULT_BUDGET_BYTES)]
    budget_bytes: u64,
    #[arg(long, default_value = "strict")]
    paging_mode: PagingMode,
    #[arg(long, default_value_t = 1)]
    penalty_ns_per_byte: u64,
    #[arg(long, default_value_t = pct_core::channel::DEFAULT_SESSION_TTL_SECS)]
    session_ttl_secs: u64,
    /// Include per-client match counts in responses (diagnostics; changes the measurement).
    #[arg(long)]
    emit_matched_count: bool,
    /// Probe each chunk only with the part of Q inside its key range.
    #[arg(long)]
    range_pruning: bool,
    /// Loopback address for admin commands.
    #[arg(long)]
    admin_listen: Option<String>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    server: String,
    #[arg(long)]
    input: PathBuf,
    /// Expect a server built with --emit-matched-count.
    #[arg(long)]
    matched_count_policy: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    people: usize,
    #[arg(long, default_value_t = 1440)]
    points: usize,
    #[arg(long, default_value = "walk")]
    model: MobilityModel,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// lat0,lon0,lat1,lon1
    #[arg(long)]
    bbox: Option<BoundingBox>,
    #[arg(long)]
    step_scale: Option<f64>,
    #[arg(long)]
    start_time: Option<i64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(value_parser = ["compression", "psi", "assemble"])]
    kind: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdminArgs {
    #[arg(long)]
    admin: String,
    #[arg(value_parser = ["reload", "stats", "queue"])]
    command: String,
}

fn read_points(input: &Path) -> Result<Vec<TrajectoryPoint>> {
    let mut files = Vec::new();
    if input.is_dir() {
        for e in fs::read_dir(input)? {
            let p = e?.path();
            if p.extension().is_some_and(|x| x == "csv") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(input.to_path_buf());
    }
    let mut points = Vec::new();
    for f in files {
        let pts = parse_trajectory_file(BufReader::new(fs::File::open(&f)?)).map_err(|e| match e {
            Error::Parse { line, message } => Error::InvalidInput(format!("{}:{line}: {message}", f.display())),
            e => e,
        })?;
        points.extend(pts);
    }
    Ok(points)
}

fn ingest(a: IngestArgs) -> Result<()> {
    let theta = Theta::new(a.geo_digits, a.period_start, a.period_end, a.segment_seconds, a.time_width)?;
    let points = read_points(&a.input)?;
    let opts = ChunkBuildOptions::new(theta, a.chunk_entries, a.backend);
    let r = update_corpus(&a.out, &opts, &points, a.expire_before.unwrap_or(i64::MIN))?;
    let m = &r.manifest;
    println!(
        "generation {}: {} keys in {} chunks ({} bytes); encoded {}, dropped {} out of period, expired {}",
        m.generation,
        m.corpus_key_count,
        m.chunk_count(),
        m.total_bytes(),
        r.encode.encoded,
        r.encode.dropped_out_of_period,
        r.expired_keys
    );
    Ok(())
}

fn run_serve(a: ServeArgs) -> Result<()> {
    let config = ServerConfig {
        listen: a.listen,
        batch_count: a.batch_count,
        batch_wait_ms: a.batch_wait_ms,
        enclave: EnclaveConfig {
            budget_bytes: a.budget_bytes,
            paging_mode: a.paging_mode,
            penalty_ns_per_byte: a.penalty_ns_per_byte,
        },
        session_ttl_secs: a.session_ttl_secs,
        policy: EnclavePolicy {
            emit_matched_count: a.emit_matched_count,
        },
        psi: PsiOptions {
            range_pruning: a.range_pruning,
        },
        admin_listen: a.admin_listen,
    };
    let handle = serve(&a.manifest, config)?;
    println!("listening on {}", handle.local_addr());
    if let Some(admin) = handle.admin_addr() {
        println!("admin on {admin}");
    }
    handle.wait();
    Ok(())
}

fn run_query(a: QueryArgs) -> Result<()> {
    let points = read_points(&a.input)?;
    let opts = ClientOptions {
        anchor: pct_core::channel::TrustAnchor::for_policy(&EnclavePolicy {
            emit_matched_count: a.matched_count_policy,
        }),
        ..Default::default()
    };
    let out = client_query(a.server.as_str(), &points, &opts)?;
    let r = out.response;
    print!("contact={} timestamp={}", r.contact, r.timestamp);
    if let Some(n) = r.matched_count {
        print!(" matched_count={n}");
    }
    println!();
    if out.encode.dropped_out_of_period > 0 {
        eprintln!("note: {} points fell outside the server's retention period", out.encode.dropped_out_of_period);
    }
    Ok(())
}

fn run_gen(a: GenArgs) -> Result<()> {
    let mut cfg = GeneratorConfig {
        num_people: a.people,
        points_per_person: a.points,
        model: a.model,
        seed: a.seed,
        ..Default::default()
    };
    if let Some(b) = a.bbox {
        cfg.bbox = b;
    }
    if let Some(s) = a.step_scale {
        cfg.step_scale_deg = s;
    }
    if let Some(t) = a.start_time {
        cfg.start_time = t;
    }
    let paths = generator::write_people(&cfg, &a.out)?;
    let theta = cfg.theta();
    println!(
        "wrote {} files to {}; period {}..{}",
        paths.len(),
        a.out.display(),
        theta.period_start,
        theta.period_end
    );
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    };
    let report = match a.kind.as_str() {
        "compression" => bench_compression(&cfg.compression, &cfg.generator)?,
        "psi" => bench_psi(&cfg.psi, &cfg.generator, &cfg.enclave)?,
        _ => bench_assemble(&cfg.assemble, &cfg.generator, &cfg.enclave)?,
    };
    report.write(&a.out)?;
    println!("{} rows written to {}", report.rows.len(), a.out.display());
    Ok(())
}

fn run_admin(a: AdminArgs) -> Result<()> {
    let lines = admin_command(&a.admin, &a.command)?;
    for l in &lines {
        println!("{l}");
    }
    if lines.first().is_some_and(|l| l.starts_with("error")) {
        return Err(Error::Config(lines[0].clone()));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Serve(a) => run_serve(a),
        Command::Query(a) => run_query(a),
        Command::Gen(a) => run_gen(a),
        Command::Bench(a) => run_bench(a),
        Command::Admin(a) => run_admin(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
