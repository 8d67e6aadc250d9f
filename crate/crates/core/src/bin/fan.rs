use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use rand_chacha::ChaCha20Rng;
use rand_core::{OsRng, SeedableRng};

use fan_core::abi::{capability_names, parse_capabilities, EventKind, ALL_CAPABILITIES};
use fan_core::bench::{bench_attach, BenchOptions};
use fan_core::cell::FeatureId;
use fan_core::client::{ClientNode, PluginReply};
use fan_core::manager::package::{package, peek_name, Entry, PackageHeader, Version, FLAG_EPHEMERAL_ONLY, MAGIC};
use fan_core::manager::{
    parse_and_verify, repo, resolve_plugin, verify_manifest, KeyPair, RepoManifest, Timestamp, TrustStore,
};
use fan_core::relay::{NodeId, Policy, Record, RelayNode};
use fan_core::sim::{to_jsonl, SimConfig, Simulation};
use fan_core::socket::{record_line, Transport};
use fan_core::toolkit::assemble_program;
use fan_core::vm::{disassemble, Program, DEFAULT_GAS};

#[derive(Parser)]
#[command(name = "fan", version, about = "Pluginizable onion-routing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a .fasm source into raw bytecode.
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Disassemble raw bytecode or a .fanp package.
    Disasm { input: PathBuf },
    /// Generate an Ed25519 signing key (FILE and FILE.pub).
    Keygen {
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Build and sign a plugin package.
    Package(PackageArgs),
    /// Manage a plugin repository.
    #[command(subcommand)]
    Repo(RepoCommand),
    /// Verify a package against a trust directory (and optionally a repository).
    Verify {
        package: PathBuf,
        #[arg(long)]
        trust: PathBuf,
        /// Also check the repository manifest and the package's entry in it.
        #[arg(long)]
        repo: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Run simulated scenarios.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Relay over TCP.
    #[command(subcommand)]
    Relay(RelayCommand),
    /// Client over TCP.
    #[command(subcommand)]
    Client(ClientCommand),
}

#[derive(Args)]
struct PackageArgs {
    /// Raw bytecode, or a .fasm source (entry PCs may then be labels).
    #[arg(long)]
    code: PathBuf,
    #[arg(long)]
    name: String,
    #[arg(long, default_value = "1.0.0")]
    version: Version,
    /// Capability list, e.g. LOG,TIMER.
    #[arg(long, default_value = "")]
    caps: String,
    /// Comma-separated feature ids (32..=255).
    #[arg(long, value_delimiter = ',')]
    feature: Vec<u8>,
    /// EVENT=PC, repeatable.
    #[arg(long)]
    entry: Vec<String>,
    #[arg(long, default_value_t = 4096)]
    memory: u32,
    #[arg(long)]
    ephemeral: bool,
    #[arg(long)]
    key: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Subcommand)]
enum RepoCommand {
    /// Create root.json and an empty targets.json.
    Init {
        dir: PathBuf,
        /// Root keys, repeatable.
        #[arg(long, required = true)]
        key: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threshold: u32,
        /// YYYY-MM-DDTHH:MM:SSZ; defaults to one year from now.
        #[arg(long)]
        expires: Option<Timestamp>,
    },
    /// Add a package to targets (clears signatures).
    Add {
        dir: PathBuf,
        package: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value = "0xff")]
        max_caps: String,
    },
    /// Sign targets.json.
    Sign {
        dir: PathBuf,
        #[arg(long)]
        key: PathBuf,
    },
    /// Change the targets expiry (clears signatures).
    SetExpiry { dir: PathBuf, expires: Timestamp },
}

#[derive(Subcommand)]
enum SimCommand {
    Run {
        config: PathBuf,
        /// Write the JSON-lines trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Time parse, verify, instantiate and on_attach.
    Attach {
        package: PathBuf,
        #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
        iters: u64,
        #[arg(long)]
        trust: PathBuf,
        /// Instantiate with this arena size instead of the package's.
        #[arg(long)]
        memory: Option<u32>,
        /// Drop the file from the page cache before every read.
        #[arg(long)]
        cold: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PolicyArgs {
    /// Largest capability set plugins may hold.
    #[arg(long, default_value = "0xff")]
    max_caps: String,
    #[arg(long, default_value_t = DEFAULT_GAS)]
    gas: u64,
    /// Do not echo DATA cells.
    #[arg(long)]
    no_echo: bool,
}

impl PolicyArgs {
    fn policy(&self) -> Result<Policy, CliError> {
        let max_capabilities = parse_capabilities(&self.max_caps).map_err(CliError::Usage)?;
        Ok(Policy { max_capabilities, gas_per_event: self.gas, echo: !self.no_echo, ..Policy::default() })
    }
}

#[derive(Subcommand)]
enum RelayCommand {
    Run {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        trust: PathBuf,
        /// Relays to connect to at startup, repeatable.
        #[arg(long)]
        peer: Vec<String>,
        /// Packages to attach globally, repeatable.
        #[arg(long)]
        global: Vec<PathBuf>,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Stop after this many ms (default: run forever).
        #[arg(long)]
        duration_ms: Option<u64>,
    },
}

#[derive(Subcommand)]
enum ClientCommand {
    /// Connect to the relays (entry first), build a circuit through them and
    /// exchange the given data.
    Run {
        #[arg(long, required = true, num_args = 1..)]
        connect: Vec<String>,
        #[arg(long)]
        trust: Option<PathBuf>,
        /// DATA payloads to send, repeatable.
        #[arg(long)]
        data: Vec<String>,
        /// HOP=PACKAGE, repeatable.
        #[arg(long)]
        inject: Vec<String>,
        /// Package attached locally to the circuit.
        #[arg(long)]
        attach: Vec<PathBuf>,
        /// Time to keep the circuit open after the last request.
        #[arg(long, default_value_t = 500)]
        wait_ms: u64,
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failed(String),
}

impl CliError {
    fn failed(e: impl std::fmt::Display) -> CliError {
        CliError::Failed(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn load_key(path: &Path) -> Result<KeyPair, CliError> {
    KeyPair::load(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn load_trust(dir: &Path) -> Result<TrustStore, CliError> {
    TrustStore::load_dir(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))
}

fn cmd_asm(input: &Path, output: &Path) -> CliResult {
    let source = String::from_utf8(read(input)?).map_err(CliError::failed)?;
    let asm = assemble_program(&source).map_err(|e| CliError::Failed(format!("{}: {e}", input.display())))?;
    write(output, &asm.to_bytes())?;
    for e in EventKind::ALL {
        if let Some(pc) = asm.labels.get(e.name()) {
            println!("{}={pc}", e.name());
        }
    }
    Ok(())
}

fn cmd_disasm(input: &Path) -> CliResult {
    let bytes = read(input)?;
    let code = if bytes.starts_with(MAGIC) {
        // Header as comments; the signature is not checked here.
        let pkg = package_code(&bytes).ok_or_else(|| CliError::Failed("malformed package".into()))?;
        println!("; package {}", peek_name(&bytes).unwrap_or_default());
        pkg
    } else {
        bytes
    };
    let program = Program::parse(&code).map_err(CliError::failed)?;
    print!("{}", disassemble(&program));
    Ok(())
}

/// Code section of a package without verifying it.
fn package_code(bytes: &[u8]) -> Option<Vec<u8>> {
    let mut p = 8 + 32 + 6 + 4;
    let f = *bytes.get(p)? as usize;
    p += 1 + f;
    let e = *bytes.get(p)? as usize;
    p += 1 + 6 * e + 4;
    let len = u32::from_le_bytes(bytes.get(p..p + 4)?.try_into().ok()?) as usize;
    p += 4;
    bytes.get(p..p + len).map(<[u8]>::to_vec)
}

fn cmd_keygen(output: &Path) -> CliResult {
    let key = KeyPair::generate();
    key.save(output).map_err(CliError::failed)?;
    println!("{}", hex::encode(key.key_id()));
    Ok(())
}

fn cmd_package(a: &PackageArgs) -> CliResult {
    let key = load_key(&a.key)?;
    let raw = read(&a.code)?;
    let (code, labels) = if a.code.extension().is_some_and(|e| e == "fasm") {
        let source = String::from_utf8(raw).map_err(CliError::failed)?;
        let asm = assemble_program(&source).map_err(|e| CliError::Failed(format!("{}: {e}", a.code.display())))?;
        (asm.to_bytes(), asm.labels)
    } else {
        (raw, Default::default())
    };
    let capability_mask = parse_capabilities(&a.caps).map_err(CliError::Usage)?;
    let feature_ids = a
        .feature
        .iter()
        .map(|&f| FeatureId::new(f).map_err(|e| CliError::Usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut entries = Vec::new();
    for spec in &a.entry {
        let (event, pc) =
            spec.split_once('=').ok_or_else(|| CliError::Usage(format!("--entry {spec:?}: expected EVENT=PC")))?;
        let event = EventKind::from_name(event).ok_or_else(|| CliError::Usage(format!("unknown event {event:?}")))?;
        let pc = match pc.parse::<u32>() {
            Ok(pc) => pc,
            Err(_) => {
                *labels.get(pc).ok_or_else(|| CliError::Usage(format!("--entry {spec:?}: no such label")))? as u32
            }
        };
        entries.push(Entry { event_id: event.id(), pc });
    }
    let header = PackageHeader {
        flags: if a.ephemeral { FLAG_EPHEMERAL_ONLY } else { 0 },
        name: a.name.clone(),
        version: a.version,
        capability_mask,
        feature_ids,
        entries,
        memory_size: a.memory,
    };
    let bytes = package(&header, &code, &key).map_err(CliError::failed)?;
    write(&a.output, &bytes)?;
    eprintln!("{}: {} bytes, signed by {}", a.output.display(), bytes.len(), hex::encode(key.key_id()));
    Ok(())
}

fn cmd_repo(c: &RepoCommand) -> CliResult {
    match c {
        RepoCommand::Init { dir, key, threshold, expires } => {
            let keys = key.iter().map(|k| load_key(k)).collect::<Result<Vec<_>, _>>()?;
            if *threshold == 0 || *threshold as usize > keys.len() {
                return Err(CliError::Usage(format!("threshold {threshold} with {} keys", keys.len())));
            }
            let expires = expires.unwrap_or_else(|| Timestamp::now().plus_secs(365 * 86_400));
            fs::create_dir_all(dir).map_err(CliError::failed)?;
            repo::init(dir, &keys, *threshold, expires).map_err(CliError::failed)?;
        }
        RepoCommand::Add { dir, package, name, max_caps } => {
            let caps = parse_capabilities(max_caps).map_err(CliError::Usage)?;
            let bytes = read(package)?;
            let name = repo::add(dir, &bytes, name.as_deref(), caps).map_err(CliError::failed)?;
            println!("{name}");
        }
        RepoCommand::Sign { dir, key } => {
            let m = repo::sign(dir, &load_key(key)?).map_err(CliError::failed)?;
            println!("{} of {} signatures", m.signatures.len(), m.root.threshold);
        }
        RepoCommand::SetExpiry { dir, expires } => repo::set_expiry(dir, *expires).map_err(CliError::failed)?,
    }
    Ok(())
}

fn cmd_verify(path: &Path, trust: &Path, repo_dir: Option<&Path>, name: Option<&str>) -> CliResult {
    let bytes = read(path)?;
    let trust = load_trust(trust)?;
    let pkg = parse_and_verify(&bytes, &trust).map_err(CliError::failed)?;
    if let Some(dir) = repo_dir {
        let m = RepoManifest::load(dir).map_err(CliError::failed)?;
        verify_manifest(&m, Timestamp::now()).map_err(CliError::failed)?;
        let name = name.unwrap_or(pkg.name());
        resolve_plugin(&m, name, &bytes).map_err(CliError::failed)?;
    }
    let h = &pkg.header;
    println!(
        "{} {} caps={} features={:?} memory={} signer={}",
        h.name,
        h.version,
        capability_names(h.capability_mask).join(","),
        h.feature_ids.iter().map(|f| f.get()).collect::<Vec<_>>(),
        h.memory_size,
        hex::encode(pkg.signer_key_id)
    );
    Ok(())
}

fn cmd_sim(config: &Path, trace: Option<&Path>) -> CliResult {
    let cfg = SimConfig::load(config).map_err(|e| CliError::Failed(format!("{}: {e}", config.display())))?;
    let report = Simulation::new(cfg).map_err(CliError::failed)?.run();
    let text = to_jsonl(&report.trace);
    match trace {
        Some(p) => write(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    for e in &report.expectations {
        eprintln!("{} t={} {}: {}", if e.ok { "ok  " } else { "FAIL" }, e.t_ms, e.description, e.observed);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failed("expectations failed".into()))
    }
}

fn cmd_bench(c: &BenchCommand) -> CliResult {
    let BenchCommand::Attach { package, iters, trust, memory, cold, output } = c;
    let trust = load_trust(trust)?;
    let opts = BenchOptions { iterations: *iters as usize, memory_size: *memory, cold: *cold };
    let start = Instant::now();
    let r = bench_attach(package, &trust, &opts).map_err(|e| {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::failed(e)
        }
    })?;
    let json = r.to_json();
    println!("{json}");
    if let Some(p) = output {
        write(p, format!("{json}\n").as_bytes())?;
    }
    eprintln!("median {:.1} us, p95 {:.1} us ({:.1?} total)", r.median_us, r.p95_us, start.elapsed());
    Ok(())
}

fn stdout_sink(node: NodeId) -> impl FnMut(u64, Record) {
    move |t, r| {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{}", record_line(t, node, &r));
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_relay(
    listen: &str,
    key: &Path,
    trust: &Path,
    peers: &[String],
    globals: &[PathBuf],
    policy: &PolicyArgs,
    duration_ms: Option<u64>,
) -> CliResult {
    let key = load_key(key)?;
    let id = NodeId::from_key_id(&key.key_id());
    let mut node = RelayNode::new(
        id,
        load_trust(trust)?,
        policy.policy()?,
        ChaCha20Rng::from_rng(OsRng).map_err(CliError::failed)?,
    );
    let mut t = Transport::new(id);
    let addr = t.listen(listen).map_err(|e| CliError::Failed(format!("listen {listen}: {e}")))?;
    eprintln!("relay {id} listening on {addr}");
    let mut sink = stdout_sink(id);
    for g in globals {
        let (_, actions) =
            node.attach_global(&read(g)?, t.now_ms()).map_err(|e| CliError::Failed(format!("{}: {e}", g.display())))?;
        t.apply(actions, &mut sink);
    }
    for p in peers {
        let peer = t.connect(p.as_str()).map_err(|e| CliError::Failed(format!("connect {p}: {e}")))?;
        eprintln!("connected to {peer} at {p}");
    }
    let end = duration_ms.map(|d| Instant::now() + Duration::from_millis(d));
    loop {
        let step = Instant::now() + Duration::from_millis(100);
        t.poll(&mut node, end.map_or(step, |e| e.min(step)), &mut sink);
        if end.is_some_and(|e| Instant::now() >= e) {
            return Ok(());
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_client(
    connect: &[String],
    trust: Option<&Path>,
    data: &[String],
    inject: &[String],
    attach: &[PathBuf],
    wait_ms: u64,
    timeout_ms: u64,
) -> CliResult {
    let mut injects = Vec::new();
    for spec in inject {
        let (hop, path) =
            spec.split_once('=').ok_or_else(|| CliError::Usage(format!("--inject {spec:?}: expected HOP=PACKAGE")))?;
        let hop: usize = hop.parse().map_err(|_| CliError::Usage(format!("--inject {spec:?}: bad hop")))?;
        injects.push((hop, read(Path::new(path))?));
    }
    let attach = attach.iter().map(|p| read(p)).collect::<Result<Vec<_>, _>>()?;
    let trust = match trust {
        Some(d) => load_trust(d)?,
        None => TrustStore::new(),
    };
    let mut rng = ChaCha20Rng::from_rng(OsRng).map_err(CliError::failed)?;
    let mut idb = [0u8; 16];
    rand_core::RngCore::fill_bytes(&mut rng, &mut idb);
    let id = NodeId(idb);
    let policy = Policy { max_capabilities: ALL_CAPABILITIES, ..Policy::default() };
    let mut client = ClientNode::new(id, trust, policy, rng);
    let mut t = Transport::new(id);
    let mut route = Vec::new();
    for addr in connect {
        let peer = t.connect(addr.as_str()).map_err(|e| CliError::Failed(format!("connect {addr}: {e}")))?;
        route.push(peer);
    }
    let timeout = Duration::from_millis(timeout_ms);
    let mut sink = stdout_sink(id);
    t.poll(&mut client, Instant::now(), &mut sink);
    let (serial, actions) = client.build_circuit(&route, t.now_ms()).map_err(CliError::failed)?;
    t.apply(actions, &mut sink);
    let settled =
        |c: &ClientNode| c.circuit(serial).is_some_and(|c| c.state != fan_core::client::CircuitState::Building);
    if !t.poll_until(&mut client, timeout, &mut sink, settled) {
        let actions = client.abandon(serial, "build timeout", t.now_ms());
        t.apply(actions, &mut sink);
        return Err(CliError::Failed("circuit build timed out".into()));
    }
    if !client.circuit(serial).is_some_and(|c| c.is_open()) {
        return Err(CliError::Failed(format!("circuit failed: {}", client.circuit(serial).expect("circuit").state)));
    }
    for pkg in &attach {
        let (_, actions) = client.attach_local(serial, pkg, t.now_ms()).map_err(CliError::failed)?;
        t.apply(actions, &mut sink);
    }
    let mut failures = 0;
    for (hop, pkg) in &injects {
        let actions = client.inject_plugin(serial, *hop, pkg).map_err(CliError::failed)?;
        t.apply(actions, &mut sink);
        let replied = |c: &ClientNode| c.circuit(serial).is_none_or(|c| !c.replies.is_empty() || !c.is_open());
        if !t.poll_until(&mut client, timeout, &mut sink, replied) {
            return Err(CliError::Failed(format!("no reply from hop {hop}")));
        }
        for r in client.take_replies(serial) {
            match r {
                PluginReply::Ack { hop, latency_us, name } => {
                    eprintln!("hop {hop}: attached {name} in {latency_us} us")
                }
                PluginReply::Err { hop, code, message } => {
                    failures += 1;
                    eprintln!("hop {hop}: error {code}: {message}");
                }
            }
        }
    }
    for d in data {
        let actions = client.send_data(serial, 1, d.as_bytes()).map_err(CliError::failed)?;
        t.apply(actions, &mut sink);
        let got = |c: &ClientNode| c.circuit(serial).is_none_or(|c| !c.received.is_empty() || !c.is_open());
        if !t.poll_until(&mut client, timeout, &mut sink, got) {
            return Err(CliError::Failed("no echo".into()));
        }
        for (_, body) in client.take_received(serial) {
            println!("{}", String::from_utf8_lossy(&body));
        }
    }
    t.poll(&mut client, Instant::now() + Duration::from_millis(wait_ms), &mut sink);
    if let Ok(actions) = client.close(serial, t.now_ms()) {
        t.apply(actions, &mut sink);
    }
    if failures > 0 {
        return Err(CliError::Failed(format!("{failures} plugin deliveries failed")));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Asm { input, output } => cmd_asm(input, output),
        Command::Disasm { input } => cmd_disasm(input),
        Command::Keygen { output } => cmd_keygen(output),
        Command::Package(a) => cmd_package(a),
        Command::Repo(c) => cmd_repo(c),
        Command::Verify { package, trust, repo, name } => cmd_verify(package, trust, repo.as_deref(), name.as_deref()),
        Command::Sim(SimCommand::Run { config, trace }) => cmd_sim(config, trace.as_deref()),
        Command::Bench(c) => cmd_bench(c),
        Command::Relay(RelayCommand::Run { listen, key, trust, peer, global, policy, duration_ms }) => {
            cmd_relay(listen, key, trust, peer, global, policy, *duration_ms)
        }
        Command::Client(ClientCommand::Run { connect, trust, data, inject, attach, wait_ms, timeout_ms }) => {
            cmd_client(connect, trust.as_deref(), data, inject, attach, *wait_ms, *timeout_ms)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Failed(msg)) => {
            eprintln!("fan: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("fan: {msg}");
            ExitCode::from(2)
        }
    }
}
