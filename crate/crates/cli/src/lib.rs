//! Subcommand implementations shared by the `music` and `music-sim` binaries.

use std::fs::{self, File};
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Args;

use music_core::analytics::read_segments;
use music_core::controller::ControllerConfig;
use music_core::edge::VirtualClock;
use music_core::policy::{PolicyParams, PolicyRegistry};
use music_core::replay::{replay, replay_files, trace_from_logs, ReplayError, ReplayParams};
use music_core::report::MetricsReport;
use music_core::scenario::{Scenario, ScenarioError};
use music_core::sim::Simulation;
use music_core::wire::{CommandMsg, CommandType, SensorFrequency};
use music_service::{run_fleet, start, ServiceConfig};

/// Failure classes, mapped to exit codes 2 and 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(3),
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Prints the error and picks the exit code.
pub fn finish(result: Result<(), CliError>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn init_logging(level: &str) -> Result<(), CliError> {
    let level: tracing::Level = level
        .parse()
        .map_err(|_| CliError::Config(format!("unknown log level `{level}`")))?;
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .try_init();
    Ok(())
}

fn runtime_rt() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime)
}

#[derive(Debug, Args)]
pub struct ControllerArgs {
    #[arg(long, default_value = "0.0.0.0")]
    pub bind: IpAddr,
    #[arg(long, default_value_t = 7000)]
    pub data_port: u16,
    #[arg(long, default_value_t = 7001)]
    pub cmd_port: u16,
    /// HTTP API port; omit to run without the API.
    #[arg(long)]
    pub api_port: Option<u16>,
    #[arg(long, default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub keepalive_period_s: f64,
    #[arg(long, default_value_t = 30.0)]
    pub liveness_timeout_s: f64,
    /// Policy name; defaults to the scenario's policy or `default`.
    #[arg(long)]
    pub policy: Option<String>,
    /// Scenario file supplying policy parameters, the sensor table and road segments.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Where to write the registry on shutdown.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn controller(args: ControllerArgs) -> Result<(), CliError> {
    if !(args.keepalive_period_s > 0.0) || !(args.liveness_timeout_s > args.keepalive_period_s) {
        return Err(CliError::Config(
            "need 0 < --keepalive-period-s < --liveness-timeout-s".into(),
        ));
    }
    let mut cfg = ServiceConfig::new(
        SocketAddr::new(args.bind, args.data_port),
        SocketAddr::new(args.bind, args.cmd_port),
    );
    cfg.api_addr = args.api_port.map(|p| SocketAddr::new(args.bind, p));
    cfg.controller = ControllerConfig {
        keepalive_period_ms: (args.keepalive_period_s * 1000.0) as i64,
        liveness_timeout_ms: (args.liveness_timeout_s * 1000.0) as i64,
        data_dir: Some(args.data_dir.clone()),
        ..ControllerConfig::default()
    };
    if let Some(s) = &args.scenario {
        let s = Scenario::load(s)?;
        cfg.policy = s.policy.name.clone();
        cfg.setup = s.policy_setup();
        cfg.table = s.table.clone();
        cfg.engine = s.policy.engine;
        cfg.controller.snapshot_horizon_ms = s.controller.snapshot_horizon_ms;
    }
    if let Some(p) = args.policy {
        cfg.policy = p;
    }
    let registry = PolicyRegistry::default();
    if !registry.contains(&cfg.policy) {
        return Err(CliError::Config(format!("unknown policy `{}`", cfg.policy)));
    }

    runtime_rt()?.block_on(async move {
        let svc = start(cfg, &registry).await.map_err(|e| match e {
            music_service::ServiceError::Policy(p) => CliError::Config(p.to_string()),
            other => runtime(other),
        })?;
        eprintln!(
            "controller: data {} command {}{}",
            svc.data_addr,
            svc.cmd_addr,
            svc.api_addr.map(|a| format!(" api http://{a}")).unwrap_or_default()
        );
        tokio::signal::ctrl_c().await.map_err(runtime)?;
        let shared = svc.shared.clone();
        svc.shutdown().await.map_err(runtime)?;
        if let Some(dir) = args.out_dir {
            fs::create_dir_all(&dir).map_err(runtime)?;
            let nodes = shared.controller.nodes();
            let json = serde_json::to_vec_pretty(&nodes).map_err(runtime)?;
            fs::write(dir.join("registry.json"), json).map_err(runtime)?;
        }
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long)]
    pub scenario: String,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Sim seconds per wall second; overrides the scenario.
    #[arg(long, conflicts_with = "fast")]
    pub acceleration: Option<f64>,
    /// Run as fast as possible.
    #[arg(long)]
    pub fast: bool,
    /// Run the fleet over TCP against an in-process controller service.
    #[arg(long)]
    pub live: bool,
    /// Controller data log directory; defaults to `<out-dir>/data`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

pub fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut scenario = Scenario::load(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(a) = args.acceleration {
        if !(a > 0.0 && a.is_finite()) {
            return Err(CliError::Config(format!("--acceleration must be > 0, got {a}")));
        }
        scenario.acceleration = Some(a);
    }
    if args.fast {
        scenario.acceleration = None;
    }
    scenario.controller.data_dir = Some(args.data_dir.clone().unwrap_or_else(|| args.out_dir.join("data")));
    let report = if args.live {
        simulate_live(scenario)?
    } else {
        let sim = Simulation::new(scenario).map_err(|e| CliError::Config(e.to_string()))?;
        sim.run()
    };
    report.write(&args.out_dir).map_err(runtime)?;
    print!("{}", report.render_text());
    Ok(())
}

fn simulate_live(scenario: Scenario) -> Result<MetricsReport, CliError> {
    let accel = scenario.acceleration.unwrap_or(1.0);
    let clock = Arc::new(VirtualClock::free_running(scenario.start_ms, accel).map_err(runtime)?);
    let local: SocketAddr = "127.0.0.1:0".parse().expect("literal address");
    let mut cfg = ServiceConfig::new(local, local);
    cfg.controller = scenario.controller.clone();
    cfg.policy = scenario.policy.name.clone();
    cfg.setup = scenario.policy_setup();
    cfg.table = scenario.table.clone();
    cfg.engine = scenario.policy.engine;
    cfg.control_period_ms = scenario.step_ms;
    cfg.clock = clock.clone();
    runtime_rt()?.block_on(async move {
        let svc = start(cfg, &PolicyRegistry::default()).await.map_err(runtime)?;
        let fleet = run_fleet(&scenario, svc.data_addr, svc.cmd_addr, clock.clone())
            .await
            .map_err(runtime)?;
        tokio::time::sleep(std::time::Duration::from_millis(200)).await;
        let shared = svc.shared.clone();
        svc.shutdown().await.map_err(runtime)?;
        let edges: Vec<_> = fleet
            .edges
            .iter()
            .map(|e| (e, fleet.link_bytes.get(e.imei()).copied().unwrap_or(0)))
            .collect();
        let engine = shared.engine.lock();
        let log = shared.log.lock();
        Ok(MetricsReport::build(&scenario, &shared.controller, &engine, &edges, &log, scenario.end_ms()))
    })
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Trace CSV (vehicle_id,timestamp,latitude,longitude).
    #[arg(long, required_unless_present = "logs", conflicts_with = "logs")]
    pub trace: Option<PathBuf>,
    /// Controller data log directory to take GPS fixes from instead.
    #[arg(long)]
    pub logs: Option<PathBuf>,
    /// Segments CSV (segment_id,start_lat,start_lon,end_lat,end_lon[,free_flow_kmh]).
    #[arg(long)]
    pub segments: PathBuf,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub window_s: Option<u32>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub snap_radius_km: Option<f64>,
}

fn replay_error(e: ReplayError) -> CliError {
    CliError::Config(e.to_string())
}

pub fn replay_cmd(args: ReplayArgs) -> Result<(), CliError> {
    let mut params = ReplayParams::from(&PolicyParams::default());
    if let Some(w) = args.window_s {
        params.window_s = w;
    }
    if let Some(a) = args.alpha {
        params.hotspot.alpha = a;
    }
    if let Some(k) = args.k {
        params.hotspot.k = k;
    }
    if let Some(l) = args.lambda {
        params.lambda = l;
    }
    if let Some(r) = args.snap_radius_km {
        params.snap_radius_km = r;
    }
    params.hotspot.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let out = match (&args.trace, &args.logs) {
        (Some(trace), _) => replay_files(trace, &args.segments, params).map_err(replay_error)?,
        (None, Some(logs)) => {
            let fixes = trace_from_logs(logs).map_err(replay_error)?;
            let file = File::open(&args.segments)
                .map_err(|e| CliError::Config(format!("{}: {e}", args.segments.display())))?;
            let segments =
                read_segments(file).map_err(|e| CliError::Config(format!("{}: {e}", args.segments.display())))?;
            replay(&fixes, &segments, params).map_err(replay_error)?
        }
        (None, None) => return Err(CliError::Config("need --trace or --logs".into())),
    };
    out.write(&args.out_dir).map_err(runtime)?;
    let flagged: Vec<String> = out
        .flags
        .flags
        .iter()
        .filter(|f| f.flagged)
        .map(|f| f.segment.to_string())
        .collect();
    println!("segments = {}", out.flags.flags.len());
    println!("flagged = {}", flagged.join(","));
    println!("out_dir = {}", args.out_dir.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct StatusArgs {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub api: String,
}

pub fn status(args: StatusArgs) -> Result<(), CliError> {
    let client = music_client::Client::new(args.api);
    runtime_rt()?.block_on(async move {
        let m = client.metrics().await.map_err(runtime)?;
        let p = client.policy().await.map_err(runtime)?;
        println!("policy = {}", p.name);
        println!("policy_id = {}", p.in_force.policy_id);
        println!("nodes = {}", m.nodes);
        println!("alive = {}", m.alive);
        println!("bytes_rx = {}", m.bytes_rx);
        println!("bytes_tx = {}", m.bytes_tx);
        println!("records_rx = {}", m.records_rx);
        for (k, v) in &m.commands_sent {
            println!("commands.{k} = {v}");
        }
        for n in client.nodes().await.map_err(runtime)? {
            println!(
                "node.{} = {} battery={} alive={} addr={}",
                n.node.imei,
                n.node.session.name(),
                n.node.battery,
                n.node.alive,
                n.node.last_addr
            );
        }
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct DispatchArgs {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub api: String,
    pub imei: String,
    /// START, STOP, SEND or CAPTURE_IMAGE.
    pub command: String,
    /// `name=hz` pairs for START.
    #[arg(long = "sensor")]
    pub sensors: Vec<String>,
    /// Ask for a compressed upload (SEND).
    #[arg(long)]
    pub compress: bool,
}

fn parse_command(args: &DispatchArgs) -> Result<CommandMsg, CliError> {
    let kind = CommandType::parse(&args.command.to_ascii_uppercase())
        .ok_or_else(|| CliError::Config(format!("unknown command `{}`", args.command)))?;
    Ok(match kind {
        CommandType::Start => {
            let sensors = args
                .sensors
                .iter()
                .map(|s| {
                    let (name, hz) = s
                        .split_once('=')
                        .ok_or_else(|| CliError::Config(format!("--sensor `{s}` is not name=hz")))?;
                    let hz: f64 = hz
                        .parse()
                        .map_err(|_| CliError::Config(format!("--sensor `{s}`: bad frequency")))?;
                    Ok(SensorFrequency::new(name, hz))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            CommandMsg::Start { sensors }
        }
        CommandType::Stop => CommandMsg::Stop,
        CommandType::Send => CommandMsg::Send {
            compress: args.compress,
        },
        CommandType::CaptureImage => CommandMsg::CaptureImage,
    })
}

pub fn dispatch(args: DispatchArgs) -> Result<(), CliError> {
    let cmd = parse_command(&args)?;
    let client = music_client::Client::new(args.api.clone());
    runtime_rt()?.block_on(async move {
        let r = client.dispatch(&args.imei, &cmd).await.map_err(runtime)?;
        println!("{} {} -> {}", r.imei, r.command, r.session.name());
        Ok(())
    })
}
