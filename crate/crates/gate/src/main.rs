use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sieve_core::config::Config;
use sieve_core::coordinator::Coordinator;
use sieve_core::device::{DeviceState, StateStore, Strategy};
use sieve_core::energy::NetworkProfile;
use sieve_core::fleet::Fleet;
use sieve_core::photo::load_device_dir;
use sieve_core::predicates::PredicateRegistry;
use sieve_core::query::{decode_query_bytes, QuerySpec};
use sieve_gate::corpus::{CorpusSpec, PlantedCorpus};
use sieve_gate::experiments::incremental::{run_incremental, run_trials};
use sieve_gate::experiments::latency::{run_latency_experiment, LatencySetup};
use sieve_gate::experiments::partition::{phone_photos, run_dynamic, run_partition_experiment};
use sieve_gate::policy::{PolicyKind, UserPolicy};
use sieve_gate::report::{emit, Provenance};
use sieve_gate::workloads;
use sieve_server::client::Client;
use sieve_server::remote::DeviceLoop;
use sieve_server::wire::{StreamLine, SubmitRequest};

#[derive(Parser)]
#[command(name = "sieve", version, about = "Budgeted content search over a fleet of photo devices")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for everything random.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; reports go to stdout without one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Runs the HTTP server, optionally with an in-process device fleet.
    Serve(ServeArgs),
    #[command(subcommand)]
    Device(DeviceCmd),
    #[command(subcommand)]
    Query(QueryCmd),
    #[command(subcommand)]
    Experiment(ExperimentCmd),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Writes a planted corpus to `--out`.
    Gen(CorpusArgs),
}

#[derive(Args, Clone)]
struct CorpusArgs {
    #[arg(long, default_value_t = 85)]
    devices: usize,
    #[arg(long, default_value_t = 36)]
    photos: usize,
    #[arg(long, default_value_t = 0.8)]
    locality: f64,
    #[arg(long, default_value_t = 0.02)]
    relevant_fraction: f64,
    #[arg(long, default_value_t = 0.02)]
    decoy_fraction: f64,
}

impl CorpusArgs {
    fn spec(&self, seed: u64) -> CorpusSpec {
        CorpusSpec {
            devices: self.devices,
            photos_per_device: self.photos,
            locality: self.locality,
            relevant_fraction: self.relevant_fraction,
            decoy_fraction: self.decoy_fraction,
            seed,
            ..CorpusSpec::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Wifi,
    #[value(name = "3g")]
    G3,
}

impl ProfileArg {
    fn profile(self, config: &Config) -> NetworkProfile {
        match self {
            ProfileArg::Wifi => config.wifi.clone(),
            ProfileArg::G3 => config.g3.clone(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Partitioned,
    Local,
    FullOffload,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Partitioned => Strategy::Partitioned,
            StrategyArg::Local => Strategy::Local,
            StrategyArg::FullOffload => Strategy::FullOffload,
        }
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: std::net::SocketAddr,
    /// Corpus directory with one subdirectory per device to serve in-process.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Where in-process devices keep their search logs.
    #[arg(long)]
    state: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "wifi")]
    profile: ProfileArg,
    /// Wall milliseconds per simulated millisecond for in-process devices.
    #[arg(long)]
    pacing: Option<f64>,
}

#[derive(Subcommand)]
enum DeviceCmd {
    /// Runs one phone against a remote server until interrupted.
    Run(DeviceArgs),
}

#[derive(Args)]
struct DeviceArgs {
    #[arg(long)]
    server: String,
    /// Directory holding this device's photos.
    #[arg(long)]
    photos: PathBuf,
    #[arg(long)]
    id: String,
    #[arg(long)]
    state: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "wifi")]
    profile: ProfileArg,
    /// Stop after this many tasks.
    #[arg(long)]
    max_tasks: Option<usize>,
}

#[derive(Subcommand)]
enum QueryCmd {
    /// Submits a query and streams its results as NDJSON.
    Submit(SubmitArgs),
}

#[derive(Args)]
struct SubmitArgs {
    #[arg(long)]
    server: String,
    /// Query XML file.
    #[arg(long, conflicts_with = "template")]
    query: Option<PathBuf>,
    /// Built-in query: cloudy_sky, all_accept, query1, query2, query3, query1_content.
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    budget: u64,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    max_photos: Option<usize>,
    /// Give up after this many seconds.
    #[arg(long, default_value_t = 600)]
    timeout_s: u64,
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Oracle and no-feedback search processes against a planted corpus.
    Incremental(IncrementalArgs),
    /// Energy of each strategy on one device over WiFi and 3G.
    Partition(PartitionArgs),
    /// Delay injection in the middle of a partitioned search.
    Dynamic(DynamicArgs),
    /// First-result latency and result intervals for 1 and 6 devices.
    Latency(LatencyArgs),
}

#[derive(Args)]
struct IncrementalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Corpus seed; defaults to `--seed`.
    #[arg(long)]
    corpus_seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 20)]
    target: usize,
    /// Budget schedule; the last entry repeats.
    #[arg(long, value_delimiter = ',', default_values_t = [120u64, 60])]
    budgets: Vec<u64>,
    /// Run a single policy instead of the paired trials.
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    /// Score cut for the threshold policy.
    #[arg(long, default_value_t = 0.9)]
    min_score: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Oracle,
    MarkNone,
    Threshold,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long, default_value_t = 100)]
    photos: usize,
    #[arg(long, default_value_t = 500_000)]
    bytes: u64,
    /// Energy is compared over the photos after this one.
    #[arg(long, default_value_t = 50)]
    window_from: usize,
}

#[derive(Args)]
struct DynamicArgs {
    #[arg(long, default_value_t = 150)]
    photos: usize,
    #[arg(long, default_value_t = 500_000)]
    bytes: u64,
    #[arg(long, default_value_t = 50)]
    inject_at: usize,
    #[arg(long, default_value_t = 1000.0)]
    extra_rtt_ms: f64,
    #[arg(long, default_value_t = 100)]
    remove_at: usize,
    #[arg(long, value_enum, default_value = "wifi")]
    profile: ProfileArg,
}

#[derive(Args)]
struct LatencyArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 600)]
    budget: u64,
    #[arg(long, default_value_t = 60)]
    photos: usize,
    /// Pace the fleet against the wall clock and time the stream.
    #[arg(long)]
    wall_clock: bool,
    /// Wall milliseconds per simulated millisecond with `--wall-clock`.
    #[arg(long, default_value_t = 0.01)]
    pacing: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("sieve: asserted properties do not hold");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("sieve: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => Config::default(),
    })
}

fn run(cli: Cli) -> Result<bool> {
    let common = cli.common;
    let config = load_config(common.config.as_deref())?;
    let out = common.out.as_deref();
    match cli.command {
        Command::Corpus(CorpusCmd::Gen(args)) => {
            let Some(dir) = out else { bail!("corpus gen needs --out") };
            let corpus = PlantedCorpus::generate(&args.spec(common.seed))?;
            corpus.write(dir).with_context(|| format!("writing {}", dir.display()))?;
            eprintln!("wrote {} photos on {} devices ({} relevant) to {}", corpus.photo_count(), corpus.devices.len(), corpus.relevant_count(), dir.display());
            Ok(true)
        }
        Command::Serve(args) => serve(args, config),
        Command::Device(DeviceCmd::Run(args)) => device_run(args, &config),
        Command::Query(QueryCmd::Submit(args)) => submit(args, common.seed, out),
        Command::Experiment(e) => experiment(e, &config, common.seed, out),
    }
}

fn serve(args: ServeArgs, config: Config) -> Result<bool> {
    let profile = args.profile.profile(&config);
    let hardware = config.energy_model(&profile);
    let coordinator = Arc::new(Coordinator::new(PredicateRegistry::builtin(), config));
    let server = sieve_server::spawn(coordinator.clone(), args.addr)?;
    eprintln!("listening on {}", server.url());
    match args.corpus {
        Some(dir) => {
            let mut fleet = Fleet::from_dirs(&dir, args.state.as_deref(), &profile, hardware)?;
            fleet.pacing = args.pacing;
            fleet.register_all(&coordinator);
            eprintln!("serving {} in-process devices", fleet.device_ids().len());
            fleet.serve(&coordinator, Duration::from_millis(50), &|| false)?;
            server.stop()?;
        }
        None => server.join()?,
    }
    Ok(true)
}

fn device_run(args: DeviceArgs, config: &Config) -> Result<bool> {
    let profile = args.profile.profile(config);
    let photos = load_device_dir(&args.photos).with_context(|| format!("loading {}", args.photos.display()))?;
    let mut state = DeviceState::new(args.id, photos, profile.clone(), config.energy_model(&profile));
    if let Some(dir) = args.state {
        state = state.with_store(StateStore::persistent(dir)?);
    }
    let client = Client::new(&args.server)?;
    let lp = DeviceLoop { max_tasks: args.max_tasks, ..DeviceLoop::default() };
    let tasks = lp.run(&client, &mut state, &PredicateRegistry::builtin(), &AtomicBool::new(false))?;
    eprintln!("ran {tasks} tasks");
    Ok(true)
}

fn query_xml(args: &SubmitArgs) -> Result<String> {
    match (&args.query, &args.template) {
        (Some(path), _) => Ok(decode_query_bytes(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?)),
        (None, Some(name)) => workloads::by_name(name).map(|q| q.to_xml()).with_context(|| format!("no template named {name:?}")),
        (None, None) => bail!("give --query or --template"),
    }
}

fn submit(args: SubmitArgs, seed: u64, out: Option<&Path>) -> Result<bool> {
    let client = Client::new(&args.server)?;
    let request = SubmitRequest {
        query_xml: query_xml(&args)?,
        budget: args.budget,
        seed,
        strategy: args.strategy.map(Into::into),
        max_photos: args.max_photos,
    };
    let view = client.submit(&request)?;
    eprintln!("session {} on {} devices", view.session, view.allocation.devices);
    let deadline = std::time::Instant::now() + Duration::from_secs(args.timeout_s);
    let mut lines = Vec::new();
    let mut cursor = 0;
    let print = |line: StreamLine, lines: &mut Vec<String>| {
        let text = serde_json::to_string(&line).expect("stream lines serialize");
        if out.is_none() {
            println!("{text}");
        }
        lines.push(text);
    };
    loop {
        let page = client.results(&view.session, cursor, Duration::from_secs(5))?;
        cursor = page.next_cursor;
        for r in page.records {
            print(StreamLine::Result(r), &mut lines);
        }
        if let Some(done) = page.completion {
            print(StreamLine::Completion(done), &mut lines);
            break;
        }
        if std::time::Instant::now() > deadline {
            bail!("session {} did not complete in {}s", view.session, args.timeout_s);
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{}.ndjson", view.session)), lines.join("\n") + "\n")?;
    }
    Ok(true)
}

#[derive(Serialize)]
struct Summary<T: Serialize> {
    provenance: Provenance,
    #[serde(flatten)]
    body: T,
}

fn experiment(cmd: ExperimentCmd, config: &Config, seed: u64, out: Option<&Path>) -> Result<bool> {
    match cmd {
        ExperimentCmd::Incremental(args) => {
            let corpus_seed = args.corpus_seed.unwrap_or(seed);
            let spec = args.corpus.spec(corpus_seed);
            let corpus = PlantedCorpus::generate(&spec)?;
            let query = workloads::cloudy_sky();
            let params = serde_json::json!({ "corpus": spec, "target": args.target, "budgets": args.budgets, "trials": args.trials, "query": query.to_xml() });
            let provenance = Provenance::new("incremental", seed, config, params);
            if let Some(kind) = args.policy {
                let kind = match kind {
                    PolicyArg::Oracle => PolicyKind::Oracle,
                    PolicyArg::MarkNone => PolicyKind::MarkNone,
                    PolicyArg::Threshold => PolicyKind::Threshold { min_score: args.min_score },
                };
                let policy = UserPolicy::new(kind, args.budgets.clone(), args.target);
                let report = run_incremental(&corpus, &policy, config, &query, seed)?;
                let ok = report.summary.cost_per_relevant.is_some_and(|c| c < report.summary.single_pass.cost_per_relevant);
                emit(out, "incremental", &report.rows, &Summary { provenance, body: &report.summary })?;
                return Ok(ok);
            }
            let (rows, summary) = run_trials(&corpus, &args.budgets, args.target, config, &query, args.trials, seed)?;
            emit(out, "incremental", &rows, &Summary { provenance, body: &summary })?;
            Ok(summary.holds)
        }
        ExperimentCmd::Partition(args) => {
            let photos = phone_photos(args.photos, args.bytes, seed);
            let queries = [("query1", workloads::query1()), ("query2", workloads::query2()), ("query3", workloads::query3())];
            let profiles = [config.wifi.clone(), config.g3.clone()];
            let report = run_partition_experiment(&queries, &profiles, &photos, config, seed, args.window_from)?;
            let params = serde_json::json!({ "photos": args.photos, "bytes": args.bytes, "window_from": args.window_from, "queries": named_xml(&queries) });
            let ok = report.checks.iter().all(|c| c.holds);
            emit(out, "partition", &report.cells, &Summary { provenance: Provenance::new("partition", seed, config, params), body: serde_json::json!({ "checks": report.checks, "holds": ok }) })?;
            Ok(ok)
        }
        ExperimentCmd::Dynamic(args) => {
            let photos = phone_photos(args.photos, args.bytes, seed);
            let profile = args.profile.profile(config);
            let report = run_dynamic(&workloads::query1(), &photos, &profile, config, seed, args.inject_at, args.extra_rtt_ms, Some(args.remove_at))?;
            let params = serde_json::json!({ "photos": args.photos, "bytes": args.bytes, "profile": profile.name, "query": workloads::query1().to_xml() });
            let s = &report.summary;
            let ok = s.restore_ok && (args.extra_rtt_ms == 0.0 || s.shift_ok);
            emit(out, "dynamic", &report.rows, &Summary { provenance: Provenance::new("dynamic", seed, config, params), body: s })?;
            Ok(ok)
        }
        ExperimentCmd::Latency(args) => {
            let queries = [("all_accept", workloads::all_accept()), ("query2", workloads::query2()), ("query3", workloads::query3())];
            let setup = LatencySetup {
                photos_per_device: args.photos,
                budget: args.budget,
                corpus_seed: seed,
                pacing: args.wall_clock.then_some(args.pacing),
                ..LatencySetup::default()
            };
            let report = run_latency_experiment(&queries, &[1, 6], args.trials, &setup, config, seed)?;
            let median = |q: &str, n: usize| report.row(q, n).and_then(|r| r.first_result_ms).map(|x| x.median);
            let fewer_is_slower = queries.iter().all(|(q, _)| matches!((median(q, 6), median(q, 1)), (Some(six), Some(one)) if six <= one));
            let params = serde_json::json!({ "setup": { "photos_per_device": setup.photos_per_device, "photo_bytes": setup.photo_bytes, "budget": setup.budget, "pacing": setup.pacing }, "trials": args.trials, "queries": named_xml(&queries) });
            let body = serde_json::json!({ "rows": report.rows, "six_devices_no_slower": fewer_is_slower });
            emit(out, "latency", &report.trials, &Summary { provenance: Provenance::new("latency", seed, config, params), body })?;
            Ok(fewer_is_slower)
        }
    }
}

fn named_xml(queries: &[(&str, QuerySpec)]) -> serde_json::Value {
    queries.iter().map(|(n, q)| (n.to_string(), serde_json::Value::String(q.to_xml()))).collect::<serde_json::Map<_, _>>().into()
}
