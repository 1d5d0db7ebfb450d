//! The controller as a network service: data and command listeners over
//! TCP, a policy loop, an HTTP/JSON API, and a fleet of simulated edges that
//! talk to it over real sockets.

mod api;
pub mod fleet;
mod net;

use std::collections::VecDeque;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use music_core::command::SensorTable;
use music_core::controller::{Controller, ControllerConfig};
use music_core::edge::VirtualClock;
use music_core::policy::{
    DispatchRecord, EngineConfig, PolicyEngine, PolicyError, PolicyParams, PolicyRegistry, PolicySetup, TickRecord,
};
use music_core::report::RunLog;

pub use fleet::{run_fleet, FleetError, FleetReport};

/// Ticks and dispatches kept for the API.
const HISTORY: usize = 1024;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {what} listener on {addr}: {source}")]
    Bind {
        what: &'static str,
        addr: SocketAddr,
        #[source]
        source: io::Error,
    },
    #[error("data directory: {0}")]
    Storage(#[source] io::Error),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("flushing data logs: {0}")]
    Flush(#[source] io::Error),
}

pub struct ServiceConfig {
    pub data_addr: SocketAddr,
    pub cmd_addr: SocketAddr,
    /// `None` runs without the HTTP API.
    pub api_addr: Option<SocketAddr>,
    pub controller: ControllerConfig,
    pub policy: String,
    pub setup: PolicySetup,
    pub table: SensorTable,
    pub engine: EngineConfig,
    /// Sim time between liveness sweeps and control passes.
    pub control_period_ms: i64,
    pub clock: Arc<VirtualClock>,
}

impl ServiceConfig {
    /// Default policy on the given ports, wall-clock time.
    pub fn new(data_addr: SocketAddr, cmd_addr: SocketAddr) -> Self {
        ServiceConfig {
            data_addr,
            cmd_addr,
            api_addr: None,
            controller: ControllerConfig::default(),
            policy: "default".into(),
            setup: PolicySetup {
                params: PolicyParams::default(),
                segments: Vec::new(),
            },
            table: SensorTable::default(),
            engine: EngineConfig::default(),
            control_period_ms: 1000,
            clock: Arc::new(wall_clock()),
        }
    }
}

/// A clock that tracks the system time.
pub fn wall_clock() -> VirtualClock {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as i64);
    VirtualClock::free_running(now, 1.0).expect("acceleration 1 is valid")
}

/// State shared by the listeners, the policy loop and the API.
pub struct Shared {
    pub controller: Controller,
    pub engine: Mutex<PolicyEngine>,
    pub clock: Arc<VirtualClock>,
    pub log: Mutex<RunLog>,
    history: Mutex<(VecDeque<TickRecord>, VecDeque<DispatchRecord>)>,
}

impl Shared {
    pub fn now_ms(&self) -> i64 {
        self.clock.now_ms()
    }

    pub fn recent_ticks(&self) -> Vec<TickRecord> {
        self.history.lock().0.iter().cloned().collect()
    }

    pub fn recent_dispatches(&self) -> Vec<DispatchRecord> {
        self.history.lock().1.iter().cloned().collect()
    }

    /// One liveness sweep, tick if due, and control pass.
    pub fn control_pass(&self) {
        let now = self.now_ms();
        let died = self.controller.liveness_sweep(now);
        let mut engine = self.engine.lock();
        let tick = engine.tick_due(now).then(|| engine.tick(&self.controller.snapshot(now)));
        let sent = engine.control(&self.controller, now, &mut |_| {});
        drop(engine);

        let mut log = self.log.lock();
        log.deaths.extend(died.into_iter().map(|i| (now, i)));
        let mut h = self.history.lock();
        if let Some(t) = tick {
            log.ticks.push(t.clone());
            h.0.push_back(t);
            if h.0.len() > HISTORY {
                h.0.pop_front();
            }
        }
        for d in sent {
            log.dispatches.push(d.clone());
            h.1.push_back(d);
            if h.1.len() > HISTORY {
                h.1.pop_front();
            }
        }
    }
}

pub struct RunningService {
    pub data_addr: SocketAddr,
    pub cmd_addr: SocketAddr,
    pub api_addr: Option<SocketAddr>,
    pub shared: Arc<Shared>,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningService {
    /// Stops accepting, closes connections, ends the policy loop and flushes
    /// the data logs.
    pub async fn shutdown(self) -> Result<(), ServiceError> {
        let _ = self.stop.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
        self.shared.controller.flush().map_err(ServiceError::Flush)?;
        tracing::info!("controller stopped; data logs flushed");
        Ok(())
    }
}

async fn bind(what: &'static str, addr: SocketAddr) -> Result<TcpListener, ServiceError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::Bind { what, addr, source })
}

/// Binds every listener and starts the service. Must run inside a tokio
/// runtime.
pub async fn start(cfg: ServiceConfig, registry: &PolicyRegistry) -> Result<RunningService, ServiceError> {
    let policy = registry.build(&cfg.policy, &cfg.setup)?;
    let engine = PolicyEngine::new(policy, cfg.setup.params.clone(), cfg.table.clone(), cfg.engine);
    let controller = Controller::new(cfg.controller.clone()).map_err(ServiceError::Storage)?;

    let data = bind("data", cfg.data_addr).await?;
    let cmd = bind("command", cfg.cmd_addr).await?;
    let api = match cfg.api_addr {
        Some(a) => Some(bind("api", a).await?),
        None => None,
    };
    let local = |l: &TcpListener| l.local_addr().expect("bound listener has an address");
    let (data_addr, cmd_addr) = (local(&data), local(&cmd));
    let api_addr = api.as_ref().map(local);

    let shared = Arc::new(Shared {
        controller,
        engine: Mutex::new(engine),
        clock: cfg.clock.clone(),
        log: Mutex::new(RunLog::default()),
        history: Mutex::new((VecDeque::new(), VecDeque::new())),
    });
    let (stop, stop_rx) = watch::channel(false);
    let conn_ids = Arc::new(std::sync::atomic::AtomicU64::new(1));
    let mut tasks = vec![
        tokio::spawn(net::serve(data, net::Role::Data, shared.clone(), conn_ids.clone(), stop_rx.clone())),
        tokio::spawn(net::serve(cmd, net::Role::Command, shared.clone(), conn_ids, stop_rx.clone())),
        tokio::spawn(policy_loop(
            shared.clone(),
            cfg.clock.wall_duration(cfg.control_period_ms),
            stop_rx.clone(),
        )),
    ];
    if let Some(l) = api {
        tasks.push(tokio::spawn(api::serve(l, shared.clone(), stop_rx)));
    }
    tracing::info!(%data_addr, %cmd_addr, api = ?api_addr, policy = %cfg.policy, "controller listening");
    Ok(RunningService {
        data_addr,
        cmd_addr,
        api_addr,
        shared,
        stop,
        tasks,
    })
}

async fn policy_loop(shared: Arc<Shared>, period: Duration, mut stop: watch::Receiver<bool>) {
    let mut every = tokio::time::interval(period.max(Duration::from_millis(5)));
    every.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        tokio::select! {
            _ = every.tick() => shared.control_pass(),
            _ = stop.changed() => break,
        }
    }
}
