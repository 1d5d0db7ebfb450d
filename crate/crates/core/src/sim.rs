//! Deterministic in-process fleet run: controller, edges and policy loop
//! advanced together in fixed steps of the virtual clock.
//!
//! Within a step at time `t`: address churn and outages, edge sampling up
//! to `t`, delivery of queued frames, liveness sweep, policy tick when due,
//! then command dispatch with each reply delivered right away.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::controller::{Channel, CommandSink, Controller, DeltaKind, FrameOutcome, SinkClosed};
use crate::edge::{ClockError, EdgeNode, VirtualClock};
use crate::policy::{DispatchRecord, PolicyEngine, PolicyError, PolicyRegistry, TickRecord};
use crate::report::{MetricsReport, RunLog};
use crate::scenario::{NodeSpec, Scenario};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("clock: {0}")]
    Clock(#[from] ClockError),
    #[error("controller: {0}")]
    Io(#[from] std::io::Error),
}

/// In-memory command connection.
#[derive(Debug, Default)]
pub struct QueueSink {
    frames: Mutex<VecDeque<Vec<u8>>>,
    closed: AtomicBool,
}

impl QueueSink {
    pub fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.frames.lock().clear();
    }

    pub fn drain(&self) -> Vec<Vec<u8>> {
        self.frames.lock().drain(..).collect()
    }
}

impl CommandSink for QueueSink {
    fn send_frame(&self, frame: &[u8]) -> Result<(), SinkClosed> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(SinkClosed);
        }
        self.frames.lock().push_back(frame.to_vec());
        Ok(())
    }
}

#[derive(Debug)]
struct Link {
    cmd_conn: u64,
    data_conn: u64,
    addr: String,
    sink: Arc<QueueSink>,
}

struct SimNode {
    spec: NodeSpec,
    edge: EdgeNode,
    link: Option<Link>,
    /// Frame bytes counted at the transport boundary.
    link_bytes_tx: u64,
}

impl SimNode {
    fn in_outage(&self, offset_ms: i64) -> bool {
        self.spec.outages.iter().any(|&(a, b)| offset_ms >= a && offset_ms < b)
    }

    fn close_link(&mut self, controller: &Controller) {
        if let Some(link) = self.link.take() {
            link.sink.close();
            controller.unbind_command_route(self.edge.imei(), link.cmd_conn);
        }
        self.edge.on_disconnected();
    }

    fn deliver(&mut self, controller: &Controller, now_ms: i64, log: &mut RunLog) {
        let Some(link) = &self.link else {
            return;
        };
        let sink: Arc<dyn CommandSink> = link.sink.clone();
        for frame in self.edge.take_frames() {
            self.link_bytes_tx += frame.bytes.len() as u64;
            let conn = match frame.channel {
                Channel::Command => link.cmd_conn,
                Channel::Data => link.data_conn,
            };
            let sink = (frame.channel == Channel::Command).then_some(&sink);
            match controller.handle_frame(frame.channel, conn, &link.addr, &frame.bytes, sink, now_ms) {
                Ok(FrameOutcome::KeepAlive(d)) if d.kind == DeltaKind::Revived => {
                    log.revivals.push((now_ms, d.imei));
                }
                Ok(_) => {}
                Err(e) => {
                    tracing::warn!(imei = %self.edge.imei(), error = %e, "frame rejected");
                    log.rejected_frames += 1;
                }
            }
        }
    }

    /// Obeys every command waiting on the link and delivers the replies.
    fn pump(&mut self, controller: &Controller, now_ms: i64, log: &mut RunLog) {
        let Some(link) = &self.link else {
            return;
        };
        for frame in link.sink.drain() {
            if let Err(e) = self.edge.receive(&frame, now_ms) {
                tracing::warn!(imei = %self.edge.imei(), error = %e, "bad command frame");
            }
        }
        self.deliver(controller, now_ms, log);
    }
}

pub struct Simulation {
    scenario: Scenario,
    controller: Controller,
    engine: PolicyEngine,
    nodes: Vec<SimNode>,
    index: BTreeMap<String, usize>,
    clock: VirtualClock,
    now_ms: Option<i64>,
    next_conn: u64,
    log: RunLog,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        Simulation::with_registry(scenario, &PolicyRegistry::default())
    }

    /// Like [`new`](Self::new) but resolves the policy in `registry`, which
    /// may hold custom policies.
    pub fn with_registry(scenario: Scenario, registry: &PolicyRegistry) -> Result<Self, SimError> {
        let policy = registry.build(&scenario.policy.name, &scenario.policy_setup())?;
        let engine = PolicyEngine::new(
            policy,
            scenario.policy.params.clone(),
            scenario.table.clone(),
            scenario.policy.engine,
        );
        let mut cfg = scenario.controller.clone();
        cfg.retention_ms = None;
        let controller = Controller::new(cfg)?;
        let nodes: Vec<SimNode> = scenario
            .nodes
            .iter()
            .map(|spec| SimNode {
                edge: EdgeNode::new(spec.edge.clone(), scenario.env.clone(), scenario.seed),
                spec: spec.clone(),
                link: None,
                link_bytes_tx: 0,
            })
            .collect();
        let index = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.edge.imei().to_string(), i))
            .collect();
        let clock = VirtualClock::stepped(scenario.start_ms, scenario.acceleration)?;
        Ok(Simulation {
            scenario,
            controller,
            engine,
            nodes,
            index,
            clock,
            now_ms: None,
            next_conn: 1,
            log: RunLog::default(),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn engine(&self) -> &PolicyEngine {
        &self.engine
    }

    pub fn edge(&self, imei: &str) -> Option<&EdgeNode> {
        self.index.get(imei).map(|&i| &self.nodes[i].edge)
    }

    pub fn edges(&self) -> impl Iterator<Item = &EdgeNode> {
        self.nodes.iter().map(|n| &n.edge)
    }

    /// Frame bytes each node wrote at the transport boundary.
    pub fn link_bytes(&self) -> BTreeMap<String, u64> {
        self.nodes
            .iter()
            .map(|n| (n.edge.imei().to_string(), n.link_bytes_tx))
            .collect()
    }

    pub fn now_ms(&self) -> Option<i64> {
        self.now_ms
    }

    pub fn ticks(&self) -> &[TickRecord] {
        &self.log.ticks
    }

    pub fn dispatches(&self) -> &[DispatchRecord] {
        &self.log.dispatches
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn is_finished(&self) -> bool {
        self.now_ms.is_some_and(|t| t + self.scenario.step_ms > self.scenario.end_ms())
    }

    /// Advances one step. Returns false once the scenario end has been run.
    pub fn step(&mut self) -> bool {
        let t = match self.now_ms {
            None => self.scenario.start_ms,
            Some(t) => t + self.scenario.step_ms,
        };
        if t > self.scenario.end_ms() {
            return false;
        }
        let prev = self.now_ms;
        self.now_ms = Some(t);
        let offset = t - self.scenario.start_ms;
        let prev_offset = prev.map(|p| p - self.scenario.start_ms);
        let Simulation {
            controller,
            engine,
            nodes,
            index,
            next_conn,
            log,
            ..
        } = self;

        for node in nodes.iter_mut() {
            let churn_now = node
                .spec
                .churn_at_ms
                .iter()
                .any(|&c| c <= offset && prev_offset.is_none_or(|p| c > p));
            if churn_now && node.link.is_some() {
                node.close_link(controller);
                node.edge.churn();
            }
            if node.link.is_some() && node.in_outage(offset) {
                node.close_link(controller);
            }
            node.edge.step(t);
            if node.link.is_none() && node.edge.wants_connect(t) {
                if node.in_outage(offset) {
                    node.edge.on_connect_failed(t);
                } else {
                    let link = Link {
                        cmd_conn: *next_conn,
                        data_conn: *next_conn + 1,
                        addr: node.edge.source_addr(),
                        sink: Arc::new(QueueSink::default()),
                    };
                    *next_conn += 2;
                    node.link = Some(link);
                    node.edge.on_connected(t);
                }
            }
            node.deliver(controller, t, log);
        }

        for imei in controller.liveness_sweep(t) {
            log.deaths.push((t, imei));
        }

        if engine.tick_due(t) {
            let snapshot = controller.snapshot(t);
            log.ticks.push(engine.tick(&snapshot));
        }

        let sent = engine.control(controller, t, &mut |imei| {
            if let Some(&i) = index.get(imei) {
                nodes[i].pump(controller, t, log);
            }
        });
        log.dispatches.extend(sent);

        if let Err(e) = self.clock.advance_to(t) {
            tracing::error!(error = %e, "clock");
        }
        true
    }

    pub fn run_until(&mut self, t_ms: i64) {
        while self.now_ms.is_none_or(|t| t < t_ms) && self.step() {}
    }

    /// Runs to the scenario end and builds the report.
    pub fn run(mut self) -> MetricsReport {
        while self.step() {}
        self.report()
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport::build(
            &self.scenario,
            &self.controller,
            &self.engine,
            &self.nodes.iter().map(|n| (&n.edge, n.link_bytes_tx)).collect::<Vec<_>>(),
            &self.log,
            self.now_ms.unwrap_or(self.scenario.start_ms),
        )
    }
}

/// Runs `scenario` to completion.
pub fn run_scenario(scenario: Scenario) -> Result<MetricsReport, SimError> {
    Ok(Simulation::new(scenario)?.run())
}
