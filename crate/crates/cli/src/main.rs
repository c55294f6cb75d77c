//! `pir`: set up coded storage, run servers, retrieve files privately, and
//! check the scheme's rate, privacy and file-length properties.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mds_pir::analysis::{self, AnalysisError, PrivacyMode, PrivacyReport, Report};
use mds_pir::net::{self, NetError};
use mds_pir::rng::{self, FILES_STREAM};
use mds_pir::sim::{self, SimError};
use mds_pir::store::{self, Deployment, StoreError};
use mds_pir::{derive_params, gen_master_query, retrieve, SchemeError, SourceFile, SystemParams};

#[derive(Parser)]
#[command(name = "pir", version, about = "Private information retrieval over MDS-coded storage")]
struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest M files and write source manifests and per-server storage.
    Setup(SetupArgs),
    /// Retrieve one file, from a storage directory or from running servers.
    Retrieve(RetrieveArgs),
    /// Serve one storage file over TCP.
    Serve(ServeArgs),
    /// Check a property of the scheme; exit status 1 on failure.
    Verify(VerifyArgs),
    /// Monte-Carlo sweep over a grid of (N,K,M).
    Bench(BenchArgs),
}

#[derive(Args)]
struct ParamArgs {
    /// Number of servers.
    #[arg(long)]
    n: usize,
    /// MDS code dimension.
    #[arg(long)]
    k: usize,
    /// Number of files.
    #[arg(long)]
    m: usize,
    /// Field prime.
    #[arg(long, env = "PIR_PRIME", default_value_t = 257)]
    p: u64,
}

impl ParamArgs {
    fn derive(&self) -> Result<SystemParams, CliError> {
        Ok(derive_params(self.n, self.k, self.m, self.p)?)
    }
}

#[derive(Args)]
struct SetupArgs {
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long, env = "PIR_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "pir-data")]
    out: PathBuf,
    /// Use these files (exactly M, one per flag) instead of random content.
    #[arg(long)]
    ingest: Vec<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    /// Index of the wanted file.
    #[arg(long)]
    theta: usize,
    /// Directory written by `setup` (in-process retrieval).
    #[arg(long, conflicts_with = "servers", required_unless_present = "servers")]
    storage: Option<PathBuf>,
    /// Comma-separated server addresses in server-index order (networked retrieval).
    #[arg(long, value_delimiter = ',')]
    servers: Vec<String>,
    #[arg(long, requires = "servers")]
    n: Option<usize>,
    #[arg(long, requires = "servers")]
    k: Option<usize>,
    #[arg(long, requires = "servers")]
    m: Option<usize>,
    #[arg(long, env = "PIR_PRIME", default_value_t = 257)]
    p: u64,
    #[arg(long, env = "PIR_SEED", default_value_t = 0)]
    seed: u64,
    /// Write the recovered bytes here (ingested files only).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Network deadline in milliseconds.
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
}

#[derive(Args)]
struct ServeArgs {
    /// A storage file written by `setup`.
    #[arg(long)]
    storage: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7000")]
    listen: String,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Privacy,
    Rank,
    Capacity,
    Bound,
    Enumerate,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long, env = "PIR_SEED", default_value_t = 0)]
    seed: u64,
    /// Largest query space enumerated exhaustively.
    #[arg(long, default_value_t = analysis::DEFAULT_ENUMERATION_BUDGET)]
    budget: u128,
    /// Samples for the statistical privacy check (used when the space exceeds the budget).
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Random query realizations for the rank check.
    #[arg(long, default_value_t = 1_000)]
    realizations: u64,
    /// Fix the requested file in the rank check (default: cycle through all).
    #[arg(long)]
    theta: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Points `N,K,M` separated by `;`, e.g. `5,3,3;4,2,3`.
    #[arg(long, default_value = "5,3,3")]
    grid: String,
    #[arg(long, env = "PIR_PRIME", default_value_t = 257)]
    p: u64,
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
    #[arg(long, env = "PIR_SEED", default_value_t = 0)]
    seed: u64,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    msg: String,
}

const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

impl CliError {
    fn new(code: u8, msg: impl fmt::Display) -> Self {
        Self {
            code,
            msg: msg.to_string(),
        }
    }
}

impl From<SchemeError> for CliError {
    fn from(e: SchemeError) -> Self {
        let code = match e {
            SchemeError::Invariant(_) | SchemeError::CorruptAnswer { .. } | SchemeError::Code(_) => EXIT_CHECK,
            _ => EXIT_USAGE,
        };
        Self::new(code, e)
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Scheme(s) => s.into(),
            StoreError::FieldTooSmall(_) => Self::new(EXIT_USAGE, e),
            _ => Self::new(EXIT_IO, e),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Scheme(s) => s.into(),
            NetError::Store(s) => s.into(),
            _ => Self::new(EXIT_IO, e),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Scheme(s) => s.into(),
            _ => Self::new(EXIT_USAGE, e),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Scheme(s) => s.into(),
            SimError::Analysis(a) => a.into(),
            SimError::TrialFailed { .. } => Self::new(EXIT_CHECK, e),
            SimError::NoTrials => Self::new(EXIT_USAGE, e),
        }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).init();

    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let res = match &cli.command {
        Command::Setup(a) => setup(a, cli.format),
        Command::Retrieve(a) => cmd_retrieve(a, cli.format),
        Command::Serve(a) => serve(a),
        Command::Verify(a) => verify(a, cli.format),
        Command::Bench(a) => bench(a, cli.format),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn setup(a: &SetupArgs, format: Format) -> Result<(), CliError> {
    let params = a.params.derive()?;
    let deployment = if a.ingest.is_empty() {
        Deployment::random(params, &mut rng::stream(a.seed, FILES_STREAM))
    } else {
        let inputs = a
            .ingest
            .iter()
            .map(|p| {
                let bytes = std::fs::read(p).map_err(|e| io_err(p, e))?;
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned());
                Ok((name, bytes))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Deployment::from_bytes(params, &inputs)?
    };
    deployment.write(&a.out)?;
    let blocks = deployment.blocks();
    match format {
        Format::Json => println!(
            "{}",
            json!({
                "params": params.header(),
                "out": a.out,
                "blocks": blocks,
                "storage_files": blocks * params.n_servers(),
                "source_files": params.m_files(),
                "lambda": params.lambda(),
                "L": params.file_len(),
            })
        ),
        Format::Csv => {
            println!("N,K,M,p,blocks,lambda,L,out");
            println!(
                "{},{},{},{},{blocks},{},{},{}",
                params.n_servers(),
                params.k_mds(),
                params.m_files(),
                params.prime(),
                params.lambda(),
                params.file_len(),
                a.out.display()
            );
        }
        Format::Text => {
            println!("{params}: lambda={}, L={}", params.lambda(), params.file_len());
            println!(
                "wrote {} source manifests and {} storage files ({blocks} block(s) x {} servers, {} fragments of {} elements each) to {}",
                params.m_files(),
                blocks * params.n_servers(),
                params.n_servers(),
                params.m_files(),
                params.lambda(),
                a.out.display()
            );
        }
    }
    Ok(())
}

struct Retrieved {
    params: SystemParams,
    blocks: Vec<SourceFile>,
    per_server: Vec<usize>,
    bytes: Option<Vec<u8>>,
    wire: Option<(usize, usize)>,
}

fn cmd_retrieve(a: &RetrieveArgs, format: Format) -> Result<(), CliError> {
    let out = match &a.storage {
        Some(dir) => retrieve_local(dir, a)?,
        None => retrieve_remote(a)?,
    };
    if let (Some(path), Some(bytes)) = (&a.output, &out.bytes) {
        std::fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    } else if a.output.is_some() {
        return Err(CliError::new(EXIT_USAGE, "--output needs an ingested deployment with known byte length"));
    }

    let params = &out.params;
    let download: usize = out.per_server.iter().sum();
    let blocks = out.blocks.len();
    let l_total = params.file_len() * blocks;
    let expected = analysis::expected_download(params);
    let capacity = analysis::scheme_rate(params);
    let rows: Vec<Vec<Vec<u64>>> = out
        .blocks
        .iter()
        .map(|b| b.rows().iter().map(|r| r.iter().map(|e| e.value()).collect()).collect())
        .collect();
    match format {
        Format::Json => {
            let mut v = json!({
                "params": params.header(),
                "theta": a.theta,
                "blocks": blocks,
                "L": params.file_len(),
                "download": download,
                "per_server": out.per_server,
                "expected_download_per_block": expected.to_string(),
                "capacity": capacity.to_string(),
                "rows": rows,
            });
            if let Some((sent, received)) = out.wire {
                v["bytes_sent"] = json!(sent);
                v["bytes_received"] = json!(received);
            }
            if let Some(bytes) = &out.bytes {
                v["byte_len"] = json!(bytes.len());
            }
            println!("{v}");
        }
        Format::Csv => {
            println!("theta,blocks,L,download,expected_download_per_block,capacity");
            println!("{},{blocks},{},{download},{expected},{capacity}", a.theta, params.file_len());
        }
        Format::Text => {
            println!("file {} of {params}: {blocks} block(s), L = {} per block", a.theta, params.file_len());
            println!(
                "download: {download} elements (per server {})",
                out.per_server.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
            );
            println!(
                "realized rate {l_total}/{download}; expected download per block {expected} ({:.4}), capacity {capacity}",
                analysis::to_f64(&expected)
            );
            if let Some((sent, received)) = out.wire {
                println!("wire: {sent} bytes sent, {received} bytes received");
            }
            match &out.bytes {
                Some(bytes) => println!("recovered {} bytes", bytes.len()),
                None => {
                    for (b, block) in rows.iter().enumerate() {
                        println!("block {b}: {block:?}");
                    }
                }
            }
        }
    }
    Ok(())
}

fn retrieve_local(dir: &Path, a: &RetrieveArgs) -> Result<Retrieved, CliError> {
    let catalog = store::read_catalog(dir)?;
    let params = catalog.params.validate()?;
    let mut blocks = Vec::with_capacity(catalog.blocks);
    let mut per_server = vec![0; params.n_servers()];
    for b in 0..catalog.blocks {
        let storages = store::load_block(dir, b, &params)?;
        let r = retrieve(a.theta, &storages, &params, &mut rng::stream(a.seed, b as u64))?;
        for (acc, d) in per_server.iter_mut().zip(&r.per_server) {
            *acc += d;
        }
        blocks.push(r.file);
    }
    let bytes = match catalog.files.get(a.theta).and_then(|e| e.byte_len) {
        Some(len) => Some(store::blocks_to_bytes(&blocks, len)?),
        None => None,
    };
    Ok(Retrieved {
        params,
        blocks,
        per_server,
        bytes,
        wire: None,
    })
}

fn retrieve_remote(a: &RetrieveArgs) -> Result<Retrieved, CliError> {
    let (Some(n), Some(k), Some(m)) = (a.n, a.k, a.m) else {
        return Err(CliError::new(EXIT_USAGE, "networked retrieval needs --n, --k and --m"));
    };
    let params = derive_params(n, k, m, a.p)?;
    let out = net::client_retrieve(&a.servers, a.theta, &params, a.seed, Duration::from_millis(a.timeout_ms))?;
    Ok(Retrieved {
        params,
        blocks: vec![out.retrieval.file],
        per_server: out.retrieval.per_server,
        bytes: None,
        wire: Some((out.bytes_sent, out.bytes_received)),
    })
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    net::serve(&a.storage, a.listen.as_str())?;
    Ok(())
}

fn verify(a: &VerifyArgs, format: Format) -> Result<(), CliError> {
    let params = a.params.derive()?;
    let (report, summary) = match a.mode {
        Mode::Capacity => {
            let r = analysis::capacity_report(&params);
            let (rate, cap) = (&r.details["R"], &r.details["C"]);
            let s = if rate == cap {
                format!("R = C = {}", cap.as_str().unwrap_or_default())
            } else {
                format!("R = {} but C = {}", rate.as_str().unwrap_or_default(), cap.as_str().unwrap_or_default())
            };
            (r, s)
        }
        Mode::Bound => {
            let r = analysis::bound_report(&params);
            let d = &r.details;
            let s = if d["tight"] == true {
                format!("L={}, bound={}, tight", d["L"], d["bound"])
            } else {
                format!(
                    "L={}, bound={}, not tight (gap {}, threshold M > {})",
                    d["L"],
                    d["bound"],
                    d["gap"].as_str().unwrap_or_default(),
                    d["threshold"]
                )
            };
            (r, s)
        }
        Mode::Privacy => {
            let mode = match params.query_space_size() {
                Some(size) if size <= a.budget => PrivacyMode::Exhaustive { budget: a.budget },
                _ => PrivacyMode::Statistical {
                    samples: a.samples,
                    seed: a.seed,
                },
            };
            let pr = analysis::verify_privacy(&params, mode)?;
            let s = match &pr {
                PrivacyReport::Exhaustive { space_size, checks } => format!(
                    "bijection over |V|={space_size} for {} of {} (theta,t) pairs",
                    checks.iter().filter(|c| c.bijective).count(),
                    checks.len()
                ),
                PrivacyReport::Statistical {
                    samples,
                    per_test_alpha,
                    min_p_value,
                    checks,
                } => format!(
                    "chi-square uniformity, {samples} samples, {} entry tests, min p = {min_p_value:.4} vs per-test alpha {per_test_alpha:.2e}",
                    checks.len()
                ),
            };
            (analysis::privacy_report(&params, &pr), s)
        }
        Mode::Rank => rank_check(&params, a)?,
        Mode::Enumerate => {
            let enumerated = sim::exact_expectation_by_enumeration(&params, a.budget)?;
            let formula = analysis::expected_download(&params);
            let pass = enumerated == formula;
            let s = format!("enumerated D = {enumerated}, formula D = {formula}");
            let r = Report::new(
                "enumerate",
                &params,
                None,
                pass,
                json!({ "enumerated": enumerated.to_string(), "formula": formula.to_string() }),
            );
            (r, s)
        }
    };
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report).expect("serializable")),
        Format::Csv => {
            let h = report.params;
            println!("check,N,K,M,p,pass");
            println!("{},{},{},{},{},{}", report.check, h.n, h.k, h.m, h.p, report.pass);
        }
        Format::Text => {
            println!("{report}");
            println!("{summary}: {}", if report.pass { "PASS" } else { "FAIL" });
        }
    }
    if report.pass {
        Ok(())
    } else {
        Err(CliError::new(EXIT_CHECK, format!("{} check failed", report.check)))
    }
}

fn rank_check(params: &SystemParams, a: &VerifyArgs) -> Result<(Report, String), CliError> {
    if let Some(theta) = a.theta {
        if theta >= params.m_files() {
            return Err(SchemeError::Index {
                what: "file",
                index: theta,
                bound: params.m_files(),
            }
            .into());
        }
    }
    let mut r_hist: BTreeMap<usize, u64> = BTreeMap::new();
    let mut failures = Vec::new();
    for i in 0..a.realizations {
        let theta = a.theta.unwrap_or((i % params.m_files() as u64) as usize);
        let master = gen_master_query(params, &mut rng::stream(a.seed, i));
        let rep = analysis::verify_rank_identity(&master, theta, params)?;
        if let Some(r) = rep.r {
            *r_hist.entry(r).or_default() += 1;
        }
        if !rep.pass() {
            failures.push(json!({ "realization": i, "query": master.to_string(), "report": rep }));
        }
    }
    let pass = failures.is_empty() && a.realizations > 0;
    let hist = r_hist.iter().map(|(r, c)| format!("r={r}: {c}")).collect::<Vec<_>>().join(", ");
    let s = format!(
        "D_rel = L + K*r on {} of {} realizations ({hist})",
        a.realizations - failures.len() as u64,
        a.realizations
    );
    let r = Report::new(
        "rank",
        params,
        a.theta,
        pass,
        json!({
            "realizations": a.realizations,
            "r_distribution": r_hist.iter().map(|(r, c)| (r.to_string(), c)).collect::<BTreeMap<_, _>>(),
            "failures": failures,
        }),
    );
    Ok((r, s))
}

fn parse_grid(s: &str) -> Result<Vec<(usize, usize, usize)>, CliError> {
    s.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let v = p
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::new(EXIT_USAGE, format!("grid point {p:?}: {e}")))?;
            match v[..] {
                [n, k, m] => Ok((n, k, m)),
                _ => Err(CliError::new(EXIT_USAGE, format!("grid point {p:?} needs N,K,M"))),
            }
        })
        .collect()
}

fn bench(a: &BenchArgs, format: Format) -> Result<(), CliError> {
    let grid = parse_grid(&a.grid)?;
    let table = sim::sweep(&grid, a.p, a.trials, a.seed);
    for f in &table.failures {
        eprintln!("skipped ({},{},{}): {}", f.n, f.k, f.m, f.error);
    }
    let mut buf = Vec::new();
    match format {
        Format::Csv => table.write_csv(&mut buf).map_err(|e| CliError::new(EXIT_IO, e))?,
        Format::Json => {
            serde_json::to_writer_pretty(&mut buf, &table).expect("serializable");
            buf.push(b'\n');
        }
        Format::Text => {
            use std::io::Write;
            let _ = writeln!(
                buf,
                "{:>3} {:>3} {:>3} {:>6} {:>8} {:>12} {:>14} {:>10} {:>12} {:>6} tight",
                "N", "K", "M", "L", "trials", "mean D", "exact D", "rate", "capacity", "bound"
            );
            for r in &table.rows {
                let _ = writeln!(
                    buf,
                    "{:>3} {:>3} {:>3} {:>6} {:>8} {:>12} {:>14} {:>10} {:>12} {:>6} {}",
                    r.n,
                    r.k,
                    r.m,
                    r.l,
                    r.trials,
                    r.mean_download.as_deref().unwrap_or("-"),
                    r.exact_download,
                    r.empirical_rate.as_deref().unwrap_or("-"),
                    r.capacity,
                    r.bound,
                    r.tight
                );
            }
        }
    }
    match &a.out {
        Some(path) => std::fs::write(path, &buf).map_err(|e| io_err(path, e))?,
        None => print!("{}", String::from_utf8_lossy(&buf)),
    }
    Ok(())
}
