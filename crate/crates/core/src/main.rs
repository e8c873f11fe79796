use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tlm::kernels::Backend;
use tlm::model::{gen_random_model, load_model, save_model, Model, Preset};
use tlm::scheduler::{default_trace, read_trace, skewed_trace, ClockMode, EngineConfig, SimulatedCost};
use tlm::serving::{
    compare_alloc, format_json, format_table, run_bench, serve_on, BenchOptions, BenchRow, Server, ServerOptions,
    WorkerSettings, DEFAULT_QUEUE_LIMIT,
};
use tlm::topology::{detect_topology, plan_workers, Setting, Topology, WorkerPlan};
use tlm::Result;

#[derive(Parser)]
#[command(name = "tlm", version, about = "CPU inference engine with a tiled KV cache")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Replay a trace and report throughput.
    Bench(BenchArgs),
    /// Write a randomly initialised model file.
    GenModel(GenModelArgs),
    /// Compare tiled and contiguous KV allocation on a trace.
    CompareAlloc(CompareArgs),
}

#[derive(Args)]
struct WorkerArgs {
    /// Worker count, or "auto" for one per node.
    #[arg(long, default_value = "auto")]
    workers: Setting,
    /// Threads per worker, or "auto" for node cores minus one.
    #[arg(long, default_value = "auto")]
    threads_per_worker: Setting,
    /// Topology file; the OS node map is used when absent.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Tiles per worker pool.
    #[arg(long, default_value_t = 4096)]
    tiles: usize,
    #[arg(long, default_value_t = 16)]
    tile_size: usize,
    /// Matrix-multiply backend: naive or blocked.
    #[arg(long, default_value = "blocked", value_parser = parse_backend)]
    backend: Backend,
    #[arg(long, default_value_t = 1)]
    decode_reserve: usize,
    /// Skip CPU pinning.
    #[arg(long)]
    no_pin: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// 0 picks a free port; the bound address is printed on stdout.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value_t = 64)]
    max_batch: usize,
    #[arg(long, default_value_t = DEFAULT_QUEUE_LIMIT)]
    queue_limit: u64,
    /// Largest accepted max_new_tokens; defaults to the model context.
    #[arg(long)]
    max_new_tokens_cap: Option<usize>,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Args)]
struct ModelSource {
    /// Model file written by gen-model.
    #[arg(long, conflicts_with = "preset")]
    model: Option<PathBuf>,
    /// Generate the model in memory instead of loading it.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long, default_value_t = 7, requires = "preset")]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Table,
    Json,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    source: ModelSource,
    /// JSONL trace; a seeded stand-in workload is used when absent.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    requests: usize,
    #[arg(long, default_value_t = 1)]
    trace_seed: u64,
    /// Concurrent sequences per worker; a comma list runs a sweep.
    #[arg(long, value_delimiter = ',', default_value = "16")]
    parallel: Vec<usize>,
    #[arg(long, default_value = "wall", value_parser = parse_clock)]
    clock: ClockMode,
    #[arg(long, value_enum, default_value = "table")]
    format: OutputFormat,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, default_value = "tiny")]
    preset: Preset,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// JSONL trace; a seeded skewed-length workload is used when absent.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    requests: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    tiles: usize,
    #[arg(long, default_value_t = 16)]
    tile_size: usize,
    #[arg(long, default_value_t = 1)]
    decode_reserve: usize,
    #[arg(long, value_enum, default_value = "table")]
    format: OutputFormat,
}

fn parse_backend(s: &str) -> std::result::Result<Backend, String> {
    Backend::from_name(s).map_err(|e| e.to_string())
}

fn parse_clock(s: &str) -> std::result::Result<ClockMode, String> {
    s.parse().map_err(|e: tlm::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Serve(args) => cmd_serve(args),
        Command::Bench(args) => cmd_bench(args),
        Command::GenModel(args) => cmd_gen_model(args),
        Command::CompareAlloc(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn plan(args: &WorkerArgs) -> Result<WorkerPlan> {
    let topology = match &args.topology {
        Some(path) => Topology::load(path)?,
        None => detect_topology(),
    };
    tracing::info!(source = ?topology.source(), nodes = topology.nodes().len(), "topology");
    plan_workers(&topology, args.workers, args.threads_per_worker)
}

fn worker_settings(args: &WorkerArgs, max_batch: usize) -> WorkerSettings {
    WorkerSettings {
        engine: EngineConfig {
            max_batch,
            decode_reserve_tiles: args.decode_reserve,
            backend: args.backend,
            ..EngineConfig::default()
        },
        total_tiles: args.tiles,
        tile_size: args.tile_size,
        pin: !args.no_pin,
    }
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let model = Arc::new(load_model(&args.model)?);
    let plan = plan(&args.workers)?;
    let server = Arc::new(Server::start(
        model.clone(),
        ServerOptions {
            plan,
            worker: worker_settings(&args.workers, args.max_batch),
            max_new_tokens_cap: args.max_new_tokens_cap.unwrap_or(model.config().max_seq_len),
            queue_limit: args.queue_limit,
        },
    )?);
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| tlm::Error::InvalidConfig(format!("bad listen address: {e}")))?;
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        println!("listening on http://{}", listener.local_addr()?);
        serve_on(server, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })?;
    Ok(())
}

fn model_label(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

fn load_source(source: &ModelSource) -> Result<(Model, String)> {
    match (&source.model, source.preset) {
        (Some(path), _) => Ok((load_model(path)?, model_label(path))),
        (None, Some(preset)) => Ok((gen_random_model(preset, source.seed), preset.name().to_string())),
        (None, None) => Err(tlm::Error::InvalidConfig("either --model or --preset is required".into())),
    }
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let (model, label) = load_source(&args.source)?;
    let model = Arc::new(model);
    let trace = match &args.trace {
        Some(path) => read_trace(path)?,
        None => default_trace(args.requests, args.trace_seed),
    };
    let plan = plan(&args.workers)?;
    let vcpu = plan.total_threads();
    let mut rows = Vec::new();
    for &parallel in &args.parallel {
        let options = BenchOptions {
            plan: plan.clone(),
            parallel,
            engine: worker_settings(&args.workers, parallel).engine,
            total_tiles: args.workers.tiles,
            tile_size: args.workers.tile_size,
            clock: args.clock,
            cost: SimulatedCost::default(),
            pin: !args.workers.no_pin,
        };
        let result = run_bench(model.clone(), &trace, &options)?;
        tracing::info!(parallel, generated_tok_per_s = result.server.aggregate.generated_tok_per_s, "bench row");
        rows.push(BenchRow::new(vcpu, label.clone(), &result));
    }
    match args.format {
        OutputFormat::Table => print!("{}", format_table(&rows)),
        OutputFormat::Json => print!("{}", format_json(&rows)?),
    }
    Ok(())
}

fn cmd_gen_model(args: GenModelArgs) -> Result<()> {
    let model = gen_random_model(args.preset, args.seed);
    save_model(&model, &args.out)?;
    println!(
        "wrote {} ({} preset, seed {}, {} parameters)",
        args.out.display(),
        args.preset.name(),
        args.seed,
        model.parameter_count()
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let trace = match &args.trace {
        Some(path) => read_trace(path)?,
        None => skewed_trace(args.requests, args.seed),
    };
    let report = compare_alloc(&trace, args.tiles, args.tile_size, args.decode_reserve)?;
    match args.format {
        OutputFormat::Table => print!("{}", report.to_table()),
        OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}
