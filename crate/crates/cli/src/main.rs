//! `chrono`: runs attack scenarios, mutex and store simulations, serves a
//! store cluster over TCP and checks recorded traces.
//!
//! Every run writes `<scenario>.csv` and `<scenario>.json` (plus the trace
//! for simulations) under `--out`. The exit code is 0 iff every checker
//! passed; otherwise the failure list is printed to stderr as JSON.

use std::fs;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use vlc_apps::attacks::{run_scenario, Attack, ScenarioConfig};
use vlc_apps::causal::check_trace;
use vlc_apps::mutex::{check_exclusion_trace, run_mutex, standard_plans, MutexConfig};
use vlc_apps::report::{attack_report, mutex_report, store_report, to_csv, RunReport};
use vlc_apps::store::{
    build_cluster, check_sessions, client_key, cluster_label, run_store, run_store_tcp, server_key,
    store_node, StoreConfig, TCP_RTO,
};
use vlc_core::BackendKind;
use vlc_sim::tcp::TcpNode;
use vlc_sim::{FaultPlan, ProcId, Trace};

#[derive(Parser)]
#[command(
    name = "chrono",
    version,
    about = "Verifiable logical clock scenarios, benchmarks and trace checks"
)]
struct Cli {
    /// Directory for every artifact of the run.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a store cluster config and the public keys it derives.
    Keys(KeysArgs),
    /// Run a Byzantine sender scenario against causal delivery.
    Attack(AttackArgs),
    /// Simulate the mutual exclusion protocol.
    Mutex(MutexArgs),
    /// Serve or benchmark the causally consistent store.
    Store {
        #[command(subcommand)]
        cmd: StoreCmd,
    },
    /// Check a recorded trace (JSON lines).
    Check { trace: PathBuf },
}

#[derive(Args)]
struct KeysArgs {
    #[arg(long, default_value_t = 3)]
    servers: usize,
    #[arg(long, default_value_t = 2)]
    clients: usize,
    #[arg(long, default_value_t = 1000)]
    ops: u64,
    #[arg(long, default_value_t = 0.01)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Backend::Quorum)]
    backend: Backend,
    /// First TCP port; participants get consecutive ports.
    #[arg(long, default_value_t = 7400)]
    base_port: u16,
}

#[derive(Args)]
struct AttackArgs {
    /// erroneous-clock, cherry-pick, stale-own-clock, honest or all.
    #[arg(default_value = "all")]
    attack: String,
    #[arg(long, value_enum, default_value_t = BackendChoice::All)]
    backend: BackendChoice,
    /// Run without the MONO frontend.
    #[arg(long)]
    no_mono: bool,
    /// The victim skips proof checks (negative control).
    #[arg(long)]
    no_verify: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MutexArgs {
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    contenders: usize,
    #[arg(long, default_value_t = 1)]
    rounds: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Backend::Quorum)]
    backend: Backend,
    /// jitter, reorder-dup or lossy.
    #[arg(long, default_value = "jitter")]
    plan: String,
}

#[derive(Subcommand)]
enum StoreCmd {
    /// Run participants of a cluster over TCP.
    Serve(ServeArgs),
    /// Simulate a closed-loop workload and report throughput and latency.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run only this participant (servers first, then clients), bound to
    /// its configured address. Without it the whole cluster runs on
    /// localhost in this process.
    #[arg(long)]
    id: Option<ProcId>,
    #[arg(long, default_value_t = 120)]
    limit_secs: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 3)]
    servers: usize,
    #[arg(long, default_value_t = 2)]
    clients: usize,
    /// Fraction of operations that are writes.
    #[arg(long, default_value_t = 0.01)]
    ratio: f64,
    #[arg(long, default_value_t = 10_000)]
    ops: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Backend::Quorum)]
    backend: Backend,
    #[arg(long, value_enum, default_value_t = StorePlan::Reliable)]
    plan: StorePlan,
    /// Every server forges its replies.
    #[arg(long)]
    byzantine: bool,
    /// Enforce the per-client key ACL through the APP frontend.
    #[arg(long)]
    acl: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Quorum,
    Attested,
}

impl From<Backend> for BackendKind {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Quorum => BackendKind::Quorum,
            Backend::Attested => BackendKind::Attested,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendChoice {
    Quorum,
    Attested,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum StorePlan {
    /// Bounded random delay, nothing lost.
    Reliable,
    /// Reordering, duplication and 5% loss.
    Faulty,
}

/// `store serve` configuration, as written by `chrono keys`.
#[derive(Serialize, Deserialize)]
struct ClusterFile {
    store: StoreConfig,
    /// Servers first, then clients.
    addrs: Vec<SocketAddr>,
}

#[derive(Serialize)]
struct KeyListing {
    label: String,
    servers: Vec<String>,
    clients: Vec<String>,
    validators: Vec<(u32, String)>,
}

type CmdResult = Result<Vec<RunReport>, String>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHRONO_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = fs::create_dir_all(&cli.out) {
        eprintln!("cannot create {}: {e}", cli.out.display());
        return ExitCode::from(2);
    }
    let result = match cli.cmd {
        Cmd::Keys(a) => keys(&cli.out, a),
        Cmd::Attack(a) => attack(&cli.out, a),
        Cmd::Mutex(a) => mutex(&cli.out, a),
        Cmd::Store {
            cmd: StoreCmd::Serve(a),
        } => serve(&cli.out, a),
        Cmd::Store {
            cmd: StoreCmd::Bench(a),
        } => bench(&cli.out, a),
        Cmd::Check { trace } => check(&trace),
    };
    let reports = match result {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut failures = Vec::new();
    for r in &reports {
        let verdicts: Vec<String> = r
            .checkers
            .iter()
            .map(|(k, ok)| format!("{k}={}", if *ok { "pass" } else { "fail" }))
            .collect();
        println!(
            "{} seed={} backend={} {}",
            r.scenario,
            r.seed,
            r.backend,
            verdicts.join(" ")
        );
        failures.extend(r.failures.iter().map(|f| format!("{}: {f}", r.scenario)));
    }
    if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("{}", serde_json::json!({ "failures": failures }));
        ExitCode::FAILURE
    }
}

fn file_stem(scenario: &str) -> String {
    scenario.replace('/', "-")
}

/// Writes the report as CSV and JSON, and the trace if there is one.
fn emit(out: &Path, rep: &RunReport, trace: Option<&Trace>) -> Result<(), String> {
    let stem = file_stem(&format!("{}-{}-s{}", rep.scenario, rep.backend, rep.seed));
    let write = |name: String, body: &[u8]| {
        fs::write(out.join(&name), body).map_err(|e| format!("{name}: {e}"))
    };
    write(format!("{stem}.csv"), to_csv(&rep.rows()).as_bytes())?;
    write(format!("{stem}.json"), rep.to_json().as_bytes())?;
    if let Some(t) = trace {
        write(format!("{stem}.trace.jsonl"), t.to_jsonl().as_bytes())?;
    }
    Ok(())
}

fn keys(out: &Path, a: KeysArgs) -> CmdResult {
    let store = StoreConfig {
        backend: a.backend.into(),
        ..StoreConfig::new(a.servers, a.clients, a.ops, a.ratio, a.seed)
    };
    let label = cluster_label(&store);
    let (cluster, _, _) = build_cluster(&store, &label);
    let validators = match (cluster.verifier.quorum(), cluster.verifier.attested()) {
        (Some(q), _) => q
            .registry
            .iter()
            .map(|(id, pk)| (*id, pk.to_hex()))
            .collect(),
        (None, Some(t)) => vec![(0, t.root.to_hex())],
        (None, None) => vec![],
    };
    let listing = KeyListing {
        label: label.clone(),
        servers: (0..a.servers)
            .map(|i| server_key(&label, i).public().to_hex())
            .collect(),
        clients: (0..a.clients)
            .map(|i| client_key(&label, i).public().to_hex())
            .collect(),
        validators,
    };
    let addrs = (0..a.servers + a.clients)
        .map(|i| {
            let port = a
                .base_port
                .checked_add(i as u16)
                .ok_or("port range overflows")?;
            Ok(SocketAddr::from(([127, 0, 0, 1], port)))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let cluster_file = ClusterFile { store, addrs };
    fs::write(out.join("cluster.json"), pretty(&cluster_file)).map_err(|e| e.to_string())?;
    fs::write(out.join("keys.json"), pretty(&listing)).map_err(|e| e.to_string())?;
    println!(
        "wrote {} and {}",
        out.join("cluster.json").display(),
        out.join("keys.json").display()
    );
    Ok(vec![])
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

fn attack(out: &Path, a: AttackArgs) -> CmdResult {
    let attacks = if a.attack == "all" {
        Attack::ADVERSARIAL.to_vec()
    } else {
        vec![a.attack.parse::<Attack>()?]
    };
    let backends = match a.backend {
        BackendChoice::Quorum => vec![BackendKind::Quorum],
        BackendChoice::Attested => vec![BackendKind::Attested],
        BackendChoice::All => BackendKind::ALL.to_vec(),
    };
    let mut reports = Vec::new();
    for backend in backends {
        for &attack in &attacks {
            let cfg = ScenarioConfig {
                mono: !a.no_mono,
                check_proofs: !a.no_verify,
                seed: a.seed,
                ..ScenarioConfig::defended(backend)
            };
            let o = run_scenario(attack, cfg);
            println!("{attack} on {}: verdict {}", backend.name(), o.verdict());
            let rep = attack_report(&o);
            emit(out, &rep, Some(&o.trace))?;
            reports.push(rep);
        }
    }
    Ok(reports)
}

fn mutex(out: &Path, a: MutexArgs) -> CmdResult {
    let (name, plan) = standard_plans()
        .into_iter()
        .find(|(n, _)| *n == a.plan)
        .ok_or_else(|| {
            format!(
                "unknown plan {:?}; use jitter, reorder-dup or lossy",
                a.plan
            )
        })?;
    if a.n == 0 {
        return Err("--n must be at least 1".into());
    }
    let cfg = MutexConfig {
        rounds: a.rounds,
        ..MutexConfig::new(a.n, a.contenders, a.backend.into(), a.seed)
    };
    let r = run_mutex(&cfg, &plan, None).map_err(|e| e.to_string())?;
    let rep = mutex_report(&cfg, name, &r);
    println!(
        "{} of {} requests granted, {} messages, finished at tick {}",
        r.grants.len(),
        cfg.contenders as u64 * cfg.rounds as u64,
        r.total_messages(),
        r.end_time
    );
    emit(out, &rep, Some(&r.trace))?;
    Ok(vec![rep])
}

fn bench(out: &Path, a: BenchArgs) -> CmdResult {
    if a.servers == 0 || a.clients == 0 {
        return Err("need at least one server and one client".into());
    }
    if !(0.0..=1.0).contains(&a.ratio) {
        return Err("--ratio must be within [0, 1]".into());
    }
    let cfg = StoreConfig {
        backend: a.backend.into(),
        byzantine: a.byzantine,
        acl: a.acl,
        ..StoreConfig::new(a.servers, a.clients, a.ops, a.ratio, a.seed)
    };
    let plan = match a.plan {
        StorePlan::Reliable => FaultPlan::reliable(a.seed),
        StorePlan::Faulty => FaultPlan {
            seed: a.seed,
            delay_min: 1,
            delay_max: 10,
            reorder_prob: 0.1,
            duplicate_prob: 0.05,
            drop_prob: 0.05,
            ..FaultPlan::default()
        },
    };
    let r = run_store(&cfg, &plan).map_err(|e| e.to_string())?;
    let rep = store_report(&cfg, "store/bench", &r);
    println!(
        "{} ops completed, {} failed, throughput {:.1} ops per 1000 ticks, p50 {} p99 {}",
        r.completed,
        r.failed,
        r.throughput(),
        r.latency(0.5),
        r.latency(0.99)
    );
    emit(out, &rep, Some(&r.trace))?;
    Ok(vec![rep])
}

fn serve(out: &Path, a: ServeArgs) -> CmdResult {
    let text = fs::read_to_string(&a.config).map_err(|e| format!("{}: {e}", a.config.display()))?;
    let file: ClusterFile =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", a.config.display()))?;
    let cfg = file.store;
    let total = cfg.servers + cfg.clients;
    if file.addrs.len() != total {
        return Err(format!(
            "{} addresses for {total} participants",
            file.addrs.len()
        ));
    }
    let limit = Duration::from_secs(a.limit_secs);
    let Some(id) = a.id else {
        let (sum, stopped) = run_store_tcp(&cfg, limit).map_err(|e| e.to_string())?;
        let mut rep = RunReport::new("store/serve", cfg.seed, cfg.backend, cfg.servers, &cfg);
        rep.latency = vlc_apps::report::Quantiles::of(&sum.latencies);
        rep.metric("completed", sum.completed as f64);
        rep.metric("failed", sum.failed as f64);
        rep.check(
            "stopped",
            if stopped {
                vec![]
            } else {
                vec![format!("not done within {}s", a.limit_secs)]
            },
        );
        rep.check(
            "forgery",
            if sum.accepted_forged == 0 {
                vec![]
            } else {
                vec![format!("{} forged replies accepted", sum.accepted_forged)]
            },
        );
        if !cfg.byzantine {
            rep.check(
                "convergence",
                if sum.converged {
                    vec![]
                } else {
                    vec!["replicas diverged".into()]
                },
            );
        }
        println!("{} ops completed over TCP, latency in ms", sum.completed);
        emit(out, &rep, None)?;
        return Ok(vec![rep]);
    };
    let node = store_node(&cfg, id, TCP_RTO)
        .ok_or_else(|| format!("no participant {id}; the cluster has {total}"))?;
    let listener = TcpListener::bind(file.addrs[id as usize])
        .map_err(|e| format!("bind {}: {e}", file.addrs[id as usize]))?;
    let is_client = node.is_client();
    log::info!("participant {id} listening on {}", file.addrs[id as usize]);
    // A server runs until the limit; a client until its workload is done.
    let (node, stopped) = TcpNode::new(id, listener, file.addrs.clone(), node)
        .run(|p| is_client && p.finished(), limit);
    let sum = vlc_apps::store::summarize([&node]);
    let mut rep = RunReport::new(
        &format!("store/serve/{id}"),
        cfg.seed,
        cfg.backend,
        cfg.servers,
        &cfg,
    );
    if is_client {
        rep.latency = vlc_apps::report::Quantiles::of(&sum.latencies);
        rep.metric("completed", sum.completed as f64);
        rep.metric("failed", sum.failed as f64);
        rep.check(
            "finished",
            if stopped {
                vec![]
            } else {
                vec![format!("workload not done within {}s", a.limit_secs)]
            },
        );
        rep.check(
            "forgery",
            if sum.accepted_forged == 0 {
                vec![]
            } else {
                vec![format!("{} forged replies accepted", sum.accepted_forged)]
            },
        );
    } else {
        let versions = sum
            .versions
            .first()
            .map(|v| v.values().sum::<u64>())
            .unwrap_or(0);
        rep.metric("installed_versions", versions as f64);
        // Alone, `converged` means nothing is left parked on missing dependencies.
        rep.check(
            "drained",
            if sum.converged {
                vec![]
            } else {
                vec!["entries still pending".into()]
            },
        );
    }
    emit(out, &rep, None)?;
    Ok(vec![rep])
}

fn check(path: &Path) -> CmdResult {
    let f = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let trace =
        Trace::read_jsonl(BufReader::new(f)).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rep = RunReport::new(
        &format!("check/{}", path.display()),
        0,
        BackendKind::Quorum,
        0,
        &path.display().to_string(),
    );
    rep.backend = "-".into();
    rep.check(
        "transport",
        trace
            .check_transport()
            .err()
            .map(|e| e.to_string())
            .into_iter()
            .collect(),
    );
    let notes: Vec<&str> = trace.notes().filter_map(|e| e.note.as_deref()).collect();
    let procs: Vec<ProcId> = {
        let n = trace
            .events
            .iter()
            .map(|e| e.src.max(e.dst) + 1)
            .max()
            .unwrap_or(0);
        (0..n).collect()
    };
    if notes.iter().any(|n| n.starts_with("deliver ")) {
        rep.check(
            "causal",
            check_trace(&trace, &procs)
                .iter()
                .map(|v| v.to_string())
                .collect(),
        );
    }
    if notes.iter().any(|n| n.starts_with("grant ")) {
        rep.check(
            "exclusion",
            check_exclusion_trace(&trace)
                .iter()
                .map(|v| v.to_string())
                .collect(),
        );
    }
    if notes
        .iter()
        .any(|n| n.starts_with("get ") || n.starts_with("put "))
    {
        rep.check(
            "sessions",
            check_sessions(&trace)
                .iter()
                .map(|v| v.to_string())
                .collect(),
        );
    }
    rep.metric("events", trace.events.len() as f64);
    Ok(vec![rep])
}
