//! The backend driver: node registry, liveness, session tracking, data
//! storage and command dispatch.
//!
//! Transports (TCP in the service, in-memory links in the simulator) feed
//! frames in through [`Controller::handle_frame`] and register a
//! [`CommandSink`] per command connection. All state lives behind one lock so
//! every operation is atomic with respect to the others.

mod registry;
mod store;

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use registry::{NodeRecord, SessionState, TransitionError};
pub use store::{read_log, DataStore, StoredEntry, QUARANTINE_FILE};

use crate::analytics::GeoPoint;
use crate::wire::{self, CommandMsg, CommandType, KeepAliveMsg, Message, WireError};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("unknown node `{0}`")]
    NotFound(String),
    #[error("node `{0}` is dead; command suppressed")]
    NodeDead(String),
    #[error("node `{0}` has no command connection")]
    NotConnected(String),
    #[error("invalid transition for `{imei}`: {source}")]
    InvalidTransition {
        imei: String,
        #[source]
        source: TransitionError,
    },
    #[error("edges may not send commands")]
    UnexpectedCommand,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("storage: {0}")]
    Io(#[from] io::Error),
}

/// Write half of a command connection.
pub trait CommandSink: Send + Sync {
    /// Queues one complete frame. Fails once the connection is gone.
    fn send_frame(&self, frame: &[u8]) -> Result<(), SinkClosed>;
}

#[derive(Debug, Clone, Copy, Error)]
#[error("command connection closed")]
pub struct SinkClosed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Data,
    Command,
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub keepalive_period_ms: i64,
    pub liveness_timeout_ms: i64,
    /// Window of data included in snapshots.
    pub snapshot_horizon_ms: i64,
    /// In-memory retention of stored data; `None` keeps everything.
    pub retention_ms: Option<i64>,
    pub data_dir: Option<PathBuf>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            keepalive_period_ms: 10_000,
            liveness_timeout_ms: 30_000,
            snapshot_horizon_ms: 3_600_000,
            retention_ms: Some(3_600_000),
            data_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaKind {
    Registered,
    Updated,
    Revived,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryDelta {
    pub imei: String,
    pub kind: DeltaKind,
    pub addr_changed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataOutcome {
    pub imei: String,
    pub records: usize,
    /// The message closed the node's pending upload.
    pub session_complete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameOutcome {
    KeepAlive(RegistryDelta),
    Data(DataOutcome),
}

/// Per-node traffic counters, measured on encoded frame lengths.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTraffic {
    pub bytes_rx: u64,
    pub bytes_tx: u64,
    pub keepalives_rx: u64,
    pub sensor_data_rx: u64,
    pub image_data_rx: u64,
    pub records_rx: u64,
    pub commands_tx: BTreeMap<CommandType, u64>,
}

/// Consistent copy of the registry and recent data.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub taken_at_ms: i64,
    pub nodes: BTreeMap<String, Arc<NodeRecord>>,
    pub recent: BTreeMap<String, Vec<Arc<StoredEntry>>>,
}

impl Snapshot {
    pub fn alive(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values().map(Arc::as_ref).filter(|n| n.alive)
    }

    pub fn node(&self, imei: &str) -> Option<&NodeRecord> {
        self.nodes.get(imei).map(Arc::as_ref)
    }
}

struct Route {
    conn_id: u64,
    sink: Arc<dyn CommandSink>,
}

struct State {
    nodes: BTreeMap<String, Arc<NodeRecord>>,
    store: DataStore,
    traffic: BTreeMap<String, NodeTraffic>,
    quarantined: u64,
}

pub struct Controller {
    config: ControllerConfig,
    state: Mutex<State>,
    routes: Mutex<HashMap<String, Route>>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> io::Result<Self> {
        let store = match &config.data_dir {
            Some(dir) => DataStore::persistent(dir)?,
            None => DataStore::in_memory(),
        }
        .with_retention(config.retention_ms);
        Ok(Controller {
            config,
            state: Mutex::new(State {
                nodes: BTreeMap::new(),
                store,
                traffic: BTreeMap::new(),
                quarantined: 0,
            }),
            routes: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn on_keepalive(&self, msg: &KeepAliveMsg, addr: &str, now_ms: i64) -> RegistryDelta {
        let mut st = self.state.lock();
        Self::absorb_keepalive(&mut st, msg, addr, now_ms)
    }

    fn absorb_keepalive(st: &mut State, msg: &KeepAliveMsg, addr: &str, now_ms: i64) -> RegistryDelta {
        match st.nodes.get_mut(&msg.imei) {
            Some(rec) => {
                let rec = Arc::make_mut(rec);
                let addr_changed = rec.last_addr != addr;
                let revived = rec.absorb(msg, addr, now_ms);
                if revived {
                    tracing::info!(imei = %msg.imei, "node revived");
                }
                RegistryDelta {
                    imei: msg.imei.clone(),
                    kind: if revived {
                        DeltaKind::Revived
                    } else {
                        DeltaKind::Updated
                    },
                    addr_changed,
                }
            }
            None => {
                tracing::info!(imei = %msg.imei, addr, "node registered");
                st.nodes.insert(
                    msg.imei.clone(),
                    Arc::new(NodeRecord::from_keepalive(msg, addr, now_ms)),
                );
                RegistryDelta {
                    imei: msg.imei.clone(),
                    kind: DeltaKind::Registered,
                    addr_changed: true,
                }
            }
        }
    }

    /// Marks every node silent for longer than the timeout as dead and
    /// returns the ones that just died.
    pub fn liveness_sweep(&self, now_ms: i64) -> Vec<String> {
        let mut st = self.state.lock();
        let timeout = self.config.liveness_timeout_ms;
        let mut died = Vec::new();
        for rec in st.nodes.values_mut() {
            if rec.alive && rec.silent_for_ms(now_ms) > timeout {
                Arc::make_mut(rec).alive = false;
                died.push(rec.imei.clone());
            }
        }
        for imei in &died {
            tracing::warn!(%imei, "node marked dead");
        }
        died
    }

    /// Binds the command connection `conn_id` to `imei`, replacing any older one.
    pub fn bind_command_route(&self, imei: &str, conn_id: u64, sink: Arc<dyn CommandSink>) {
        self.routes
            .lock()
            .insert(imei.to_string(), Route { conn_id, sink });
    }

    /// Drops the route if it still belongs to `conn_id`.
    pub fn unbind_command_route(&self, imei: &str, conn_id: u64) {
        let mut routes = self.routes.lock();
        if routes.get(imei).is_some_and(|r| r.conn_id == conn_id) {
            routes.remove(imei);
        }
    }

    pub fn route_conn(&self, imei: &str) -> Option<u64> {
        self.routes.lock().get(imei).map(|r| r.conn_id)
    }

    /// Encodes `cmd`, writes it to the node's command connection and advances
    /// the session state. Nothing changes if any check or the write fails.
    pub fn dispatch(&self, imei: &str, cmd: &CommandMsg, now_ms: i64) -> Result<SessionState, ControllerError> {
        let mut st = self.state.lock();
        let rec = st
            .nodes
            .get_mut(imei)
            .ok_or_else(|| ControllerError::NotFound(imei.to_string()))?;
        if rec.alive && rec.silent_for_ms(now_ms) > self.config.liveness_timeout_ms {
            Arc::make_mut(rec).alive = false;
            tracing::warn!(%imei, "node marked dead at dispatch");
        }
        if !rec.alive {
            return Err(ControllerError::NodeDead(imei.to_string()));
        }
        let next = rec
            .session
            .on_command(cmd, now_ms)
            .map_err(|source| ControllerError::InvalidTransition {
                imei: imei.to_string(),
                source,
            })?;
        let frame = wire::encode(&Message::Command(cmd.clone()))?;
        {
            let routes = self.routes.lock();
            let route = routes
                .get(imei)
                .ok_or_else(|| ControllerError::NotConnected(imei.to_string()))?;
            route
                .sink
                .send_frame(&frame)
                .map_err(|_| ControllerError::NotConnected(imei.to_string()))?;
        }
        Arc::make_mut(rec).session = next.clone();
        let t = st.traffic.entry(imei.to_string()).or_default();
        t.bytes_tx += frame.len() as u64;
        *t.commands_tx.entry(cmd.kind()).or_default() += 1;
        Ok(next)
    }

    /// Stores a data message. A sensor-data end marker arriving after SEND
    /// closes the session.
    pub fn on_data(&self, msg: Message, now_ms: i64) -> Result<DataOutcome, ControllerError> {
        let mut st = self.state.lock();
        self.store_data(&mut st, msg, now_ms)
    }

    fn store_data(&self, st: &mut State, msg: Message, now_ms: i64) -> Result<DataOutcome, ControllerError> {
        let (imei, position, records, end_marker) = match &msg {
            Message::SensorData(m) => (
                m.imei.clone(),
                GeoPoint {
                    latitude: m.latitude,
                    longitude: m.longitude,
                },
                m.record_count()?,
                m.is_end_marker(),
            ),
            Message::ImageData(m) => (
                m.imei.clone(),
                GeoPoint {
                    latitude: m.latitude,
                    longitude: m.longitude,
                },
                0,
                false,
            ),
            _ => return Err(ControllerError::UnexpectedCommand),
        };
        let Some(rec) = st.nodes.get_mut(&imei) else {
            st.store.quarantine(msg, now_ms)?;
            st.quarantined += 1;
            tracing::warn!(%imei, "data from unknown sender quarantined");
            return Err(ControllerError::NotFound(imei));
        };
        let rec = Arc::make_mut(rec);
        rec.location = position;
        let mut session_complete = false;
        if end_marker {
            if let Some(next) = rec.session.on_upload_complete(now_ms) {
                rec.session = next;
                session_complete = true;
            }
        }
        let is_image = matches!(msg, Message::ImageData(_));
        st.store.append(&imei, msg, now_ms)?;
        let t = st.traffic.entry(imei.clone()).or_default();
        if is_image {
            t.image_data_rx += 1;
        } else {
            t.sensor_data_rx += 1;
        }
        t.records_rx += records as u64;
        Ok(DataOutcome {
            imei,
            records,
            session_complete,
        })
    }

    /// Entry point for transports: decodes one frame and routes it. A
    /// keepalive on a command connection binds that connection to the node.
    pub fn handle_frame(
        &self,
        channel: Channel,
        conn_id: u64,
        addr: &str,
        frame: &[u8],
        sink: Option<&Arc<dyn CommandSink>>,
        now_ms: i64,
    ) -> Result<FrameOutcome, ControllerError> {
        let msg = wire::decode(frame)?;
        let mut st = self.state.lock();
        let outcome = match msg {
            Message::KeepAlive(ka) => {
                let delta = Self::absorb_keepalive(&mut st, &ka, addr, now_ms);
                st.traffic.entry(ka.imei.clone()).or_default().keepalives_rx += 1;
                if channel == Channel::Command {
                    if let Some(sink) = sink {
                        if self.route_conn(&ka.imei) != Some(conn_id) {
                            self.bind_command_route(&ka.imei, conn_id, sink.clone());
                        }
                    }
                }
                FrameOutcome::KeepAlive(delta)
            }
            Message::Command(_) => return Err(ControllerError::UnexpectedCommand),
            data => FrameOutcome::Data(self.store_data(&mut st, data, now_ms)?),
        };
        let imei = match &outcome {
            FrameOutcome::KeepAlive(d) => &d.imei,
            FrameOutcome::Data(d) => &d.imei,
        };
        st.traffic.entry(imei.clone()).or_default().bytes_rx += frame.len() as u64;
        Ok(outcome)
    }

    pub fn snapshot(&self, now_ms: i64) -> Snapshot {
        let st = self.state.lock();
        Snapshot {
            taken_at_ms: now_ms,
            nodes: st.nodes.clone(),
            recent: st.store.recent(now_ms - self.config.snapshot_horizon_ms),
        }
    }

    pub fn node(&self, imei: &str) -> Option<NodeRecord> {
        self.state.lock().nodes.get(imei).map(|r| (**r).clone())
    }

    /// Every registered node, in imei order.
    pub fn nodes(&self) -> Vec<NodeRecord> {
        self.state.lock().nodes.values().map(|r| (**r).clone()).collect()
    }

    pub fn alive_nodes(&self) -> Vec<String> {
        let st = self.state.lock();
        st.nodes.values().filter(|n| n.alive).map(|n| n.imei.clone()).collect()
    }

    pub fn traffic(&self) -> BTreeMap<String, NodeTraffic> {
        self.state.lock().traffic.clone()
    }

    pub fn quarantined(&self) -> u64 {
        self.state.lock().quarantined
    }

    /// Every stored entry per node (bounded by retention).
    pub fn stored(&self) -> BTreeMap<String, Vec<Arc<StoredEntry>>> {
        self.state.lock().store.all().clone()
    }

    pub fn flush(&self) -> io::Result<()> {
        self.state.lock().store.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{ImageDataMsg, SensorDataMsg, SensorFrequency};

    #[derive(Default)]
    struct VecSink {
        frames: Mutex<Vec<Vec<u8>>>,
        closed: std::sync::atomic::AtomicBool,
    }

    impl CommandSink for VecSink {
        fn send_frame(&self, frame: &[u8]) -> Result<(), SinkClosed> {
            if self.closed.load(std::sync::atomic::Ordering::SeqCst) {
                return Err(SinkClosed);
            }
            self.frames.lock().push(frame.to_vec());
            Ok(())
        }
    }

    fn listing1() -> KeepAliveMsg {
        KeepAliveMsg {
            battery_life: 95,
            imei: "353323062860043".into(),
            ip: "172.16.19.89".into(),
            latitude: 40.7348562,
            longitude: -73.9949165,
            sensors: vec!["Accelerometer".into(), "Compass".into()],
        }
    }

    fn controller() -> Controller {
        Controller::new(ControllerConfig::default()).unwrap()
    }

    fn connected(c: &Controller, now: i64) -> Arc<VecSink> {
        let sink = Arc::new(VecSink::default());
        c.on_keepalive(&listing1(), "10.0.0.1:5000", now);
        c.bind_command_route("353323062860043", 1, sink.clone());
        sink
    }

    fn start() -> CommandMsg {
        CommandMsg::Start {
            sensors: vec![SensorFrequency::new("GPS", 1.0)],
        }
    }

    const IMEI: &str = "353323062860043";

    #[test]
    fn keepalive_registers() {
        let c = controller();
        let d = c.on_keepalive(&listing1(), "10.0.0.1:5000", 0);
        assert_eq!(d.kind, DeltaKind::Registered);
        let n = c.node(IMEI).unwrap();
        assert_eq!(n.battery, 95);
        assert_eq!(n.sensors, ["Accelerometer", "Compass"]);
        assert_eq!(n.reported_ip, "172.16.19.89");
        assert!(n.alive);
    }

    #[test]
    fn address_churn_keeps_identity() {
        let c = controller();
        c.on_keepalive(&listing1(), "10.0.0.1:5000", 0);
        let d = c.on_keepalive(&listing1(), "10.0.0.9:6000", 10_000);
        assert!(d.addr_changed);
        let n = c.node(IMEI).unwrap();
        assert_eq!(n.last_addr, "10.0.0.9:6000");
        assert_eq!(n.registered_ms, 0);
        assert_eq!(c.snapshot(10_000).nodes.len(), 1);
    }

    #[test]
    fn last_seen_is_monotone() {
        let c = controller();
        c.on_keepalive(&listing1(), "a", 0);
        c.on_keepalive(&listing1(), "a", 10_000);
        assert_eq!(c.node(IMEI).unwrap().last_seen_ms, 10_000);
        c.on_keepalive(&listing1(), "a", 4_000);
        assert_eq!(c.node(IMEI).unwrap().last_seen_ms, 10_000);
    }

    #[test]
    fn sweep_cases() {
        let c = controller();
        assert!(c.liveness_sweep(0).is_empty());
        c.on_keepalive(&listing1(), "a", 0);
        assert!(c.liveness_sweep(5_000).is_empty());
        assert_eq!(c.liveness_sweep(35_000), vec![IMEI.to_string()]);
        // Already dead: not reported twice.
        assert!(c.liveness_sweep(36_000).is_empty());
        let d = c.on_keepalive(&listing1(), "a", 40_000);
        assert_eq!(d.kind, DeltaKind::Revived);
    }

    #[test]
    fn dispatch_state_machine() {
        let c = controller();
        let sink = connected(&c, 0);
        assert!(c.dispatch(IMEI, &start(), 1).unwrap().is_recording());
        assert!(matches!(
            c.dispatch(IMEI, &start(), 2),
            Err(ControllerError::InvalidTransition { .. })
        ));
        c.dispatch(IMEI, &CommandMsg::Stop, 3).unwrap();
        let s = c.dispatch(IMEI, &CommandMsg::Send { compress: false }, 4).unwrap();
        assert!(matches!(s, SessionState::AwaitingSend { send_issued: true, .. }));
        assert_eq!(sink.frames.lock().len(), 3);
        assert_eq!(
            wire::decode(&sink.frames.lock()[1]).unwrap(),
            Message::Command(CommandMsg::Stop)
        );
    }

    #[test]
    fn dispatch_errors() {
        let c = controller();
        assert!(matches!(
            c.dispatch("nope", &start(), 0),
            Err(ControllerError::NotFound(_))
        ));
        c.on_keepalive(&listing1(), "a", 0);
        assert!(matches!(
            c.dispatch(IMEI, &start(), 1),
            Err(ControllerError::NotConnected(_))
        ));
        // Failed write leaves state untouched.
        assert!(c.node(IMEI).unwrap().session.is_idle());
        let sink = Arc::new(VecSink::default());
        c.bind_command_route(IMEI, 7, sink.clone());
        c.liveness_sweep(31_000);
        assert!(matches!(
            c.dispatch(IMEI, &start(), 31_000),
            Err(ControllerError::NodeDead(_))
        ));
        assert!(sink.frames.lock().is_empty());
    }

    #[test]
    fn dispatch_notices_expired_node_between_sweeps() {
        let c = controller();
        let sink = connected(&c, 0);
        assert!(matches!(
            c.dispatch(IMEI, &start(), 30_001),
            Err(ControllerError::NodeDead(_))
        ));
        assert!(sink.frames.lock().is_empty());
    }

    #[test]
    fn upload_closes_session() {
        let c = controller();
        let _sink = connected(&c, 0);
        c.dispatch(IMEI, &start(), 0).unwrap();
        c.dispatch(IMEI, &CommandMsg::Stop, 20_000).unwrap();
        c.dispatch(IMEI, &CommandMsg::Send { compress: false }, 20_000).unwrap();
        let out = c
            .on_data(SensorDataMsg::end_marker(IMEI, 1.0, 2.0).into(), 20_500)
            .unwrap();
        assert!(out.session_complete);
        assert_eq!(c.node(IMEI).unwrap().session, SessionState::Idle { since_ms: 20_500 });
    }

    #[test]
    fn image_does_not_transition() {
        let c = controller();
        let _sink = connected(&c, 0);
        c.dispatch(IMEI, &CommandMsg::CaptureImage, 1).unwrap();
        let img = ImageDataMsg {
            imei: IMEI.into(),
            latitude: 1.0,
            longitude: 2.0,
            encoded_image_string: "AAAA".into(),
        };
        let out = c.on_data(img.into(), 2).unwrap();
        assert!(!out.session_complete);
        assert!(c.node(IMEI).unwrap().session.is_idle());
        assert_eq!(c.snapshot(2).recent[IMEI].len(), 1);
    }

    #[test]
    fn unknown_sender_quarantined() {
        let c = controller();
        let err = c
            .on_data(SensorDataMsg::end_marker("ghost", 0.0, 0.0).into(), 0)
            .unwrap_err();
        assert!(matches!(err, ControllerError::NotFound(_)));
        assert_eq!(c.quarantined(), 1);
    }

    #[test]
    fn command_frame_binds_route() {
        let c = controller();
        let sink: Arc<dyn CommandSink> = Arc::new(VecSink::default());
        let frame = wire::encode(&listing1().into()).unwrap();
        c.handle_frame(Channel::Command, 42, "1.2.3.4:1", &frame, Some(&sink), 0)
            .unwrap();
        assert_eq!(c.route_conn(IMEI), Some(42));
        c.unbind_command_route(IMEI, 41);
        assert_eq!(c.route_conn(IMEI), Some(42));
        c.unbind_command_route(IMEI, 42);
        assert_eq!(c.route_conn(IMEI), None);
        let t = &c.traffic()[IMEI];
        assert_eq!(t.bytes_rx, frame.len() as u64);
        assert_eq!(t.keepalives_rx, 1);
    }

    #[test]
    fn empty_snapshot() {
        let s = controller().snapshot(0);
        assert!(s.nodes.is_empty());
        assert!(s.recent.is_empty());
    }
}
