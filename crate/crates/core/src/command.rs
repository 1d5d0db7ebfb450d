//! Turns sensing policies into command sequences.
//!
//! [`compile`] diffs two policies into START/STOP/SEND/CAPTURE_IMAGE batches.
//! [`Scheduler`] keeps the policy in force, feeds compiled batches to nodes in
//! order as their session state allows, and runs the sense/break duty cycle
//! that keeps data flowing from active nodes.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{NodeRecord, SessionState, Snapshot};
use crate::wire::{CommandMsg, SensorFrequency};

/// SEND asks for compression above this estimated payload.
pub const COMPRESS_THRESHOLD_BYTES: f64 = 64.0 * 1024.0;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("invalid frequency {0} Hz; must be > 0")]
    InvalidFrequency(f64),
    #[error("policy id {next} does not follow {prev}")]
    StalePolicy { prev: u64, next: u64 },
    #[error("sensor table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub name: String,
    /// Hz.
    pub max_frequency: f64,
    /// Hz.
    pub default_frequency: f64,
    /// Encoded size estimate of one record, used for payload accounting.
    pub bytes_per_sample: u32,
}

impl SensorSpec {
    pub fn new(name: &str, max_frequency: f64, default_frequency: f64, bytes_per_sample: u32) -> Self {
        SensorSpec {
            name: name.into(),
            max_frequency,
            default_frequency,
            bytes_per_sample,
        }
    }

    fn validate(&self) -> Result<(), CommandError> {
        if !(self.default_frequency > 0.0 && self.default_frequency <= self.max_frequency) {
            return Err(CommandError::Table(format!(
                "`{}` needs 0 < default_frequency ({}) <= max_frequency ({})",
                self.name, self.default_frequency, self.max_frequency
            )));
        }
        Ok(())
    }
}

pub const ACCELEROMETER: &str = "Accelerometer";
pub const AIR_QUALITY: &str = "AirQuality";
pub const GPS: &str = "GPS";
pub const COMPASS: &str = "Compass";
pub const HUMIDITY: &str = "Humidity";
pub const DUST: &str = "Dust";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorTable {
    specs: BTreeMap<String, SensorSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecEntry {
    max_frequency: f64,
    default_frequency: f64,
    #[serde(default = "default_bytes")]
    bytes_per_sample: u32,
}

fn default_bytes() -> u32 {
    128
}

impl Default for SensorTable {
    fn default() -> Self {
        SensorTable::from_specs([
            SensorSpec::new(ACCELEROMETER, 100.0, 20.0, 150),
            SensorSpec::new(AIR_QUALITY, 1.0, 1.0, 350),
            SensorSpec::new(GPS, 1.0, 1.0, 140),
            SensorSpec::new(COMPASS, 50.0, 10.0, 110),
            SensorSpec::new(HUMIDITY, 1.0, 1.0, 110),
            SensorSpec::new(DUST, 1.0, 1.0, 110),
        ])
        .expect("built-in table is valid")
    }
}

impl SensorTable {
    pub fn from_specs(specs: impl IntoIterator<Item = SensorSpec>) -> Result<Self, CommandError> {
        let specs: BTreeMap<_, _> = specs.into_iter().map(|s| (s.name.clone(), s)).collect();
        for s in specs.values() {
            s.validate()?;
        }
        Ok(SensorTable { specs })
    }

    /// Parses the key-value form:
    ///
    /// ```toml
    /// [AirQuality]
    /// max_frequency = 1.0
    /// default_frequency = 1.0
    /// bytes_per_sample = 350
    /// ```
    pub fn from_toml_str(src: &str) -> Result<Self, CommandError> {
        let raw: BTreeMap<String, SpecEntry> =
            toml::from_str(src).map_err(|e| CommandError::Table(e.to_string()))?;
        Self::from_entries(raw)
    }

    fn from_entries(raw: BTreeMap<String, SpecEntry>) -> Result<Self, CommandError> {
        Self::from_specs(raw.into_iter().map(|(name, e)| SensorSpec {
            name,
            max_frequency: e.max_frequency,
            default_frequency: e.default_frequency,
            bytes_per_sample: e.bytes_per_sample,
        }))
    }

    /// This table with `overrides` replacing or adding entries.
    pub fn merged(&self, overrides: &SensorTable) -> SensorTable {
        let mut specs = self.specs.clone();
        specs.extend(overrides.specs.iter().map(|(k, v)| (k.clone(), v.clone())));
        SensorTable { specs }
    }

    pub fn get(&self, name: &str) -> Option<&SensorSpec> {
        self.specs.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SensorSpec> {
        self.specs.values()
    }

    /// Every sensor of `node` the table knows, at its default frequency.
    pub fn defaults_for(&self, sensors: &[String]) -> Vec<SensorFrequency> {
        sensors
            .iter()
            .filter_map(|s| self.get(s))
            .map(|spec| SensorFrequency::new(&spec.name, spec.default_frequency))
            .collect()
    }

    /// Clamps every entry, dropping sensors the table does not know.
    pub fn clamp_all(&self, sensors: &[SensorFrequency]) -> Vec<SensorFrequency> {
        sensors
            .iter()
            .filter_map(|s| match self.get(&s.name) {
                Some(spec) => match clamp_frequency(s.frequency, spec) {
                    Ok(f) => Some(SensorFrequency::new(&s.name, f)),
                    Err(e) => {
                        tracing::warn!(sensor = %s.name, error = %e, "dropping sensor");
                        None
                    }
                },
                None => {
                    tracing::warn!(sensor = %s.name, "sensor not in table; dropped");
                    None
                }
            })
            .collect()
    }
}

/// A sensor never runs faster than its hardware allows.
pub fn clamp_frequency(requested: f64, spec: &SensorSpec) -> Result<f64, CommandError> {
    if !(requested > 0.0) || !requested.is_finite() {
        return Err(CommandError::InvalidFrequency(requested));
    }
    Ok(requested.min(spec.max_frequency))
}

/// What one node should be doing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Directive {
    pub active: bool,
    pub sensors: Vec<SensorFrequency>,
    pub capture_image: bool,
}

impl Directive {
    pub fn inactive() -> Self {
        Directive::default()
    }

    pub fn active(sensors: Vec<SensorFrequency>) -> Self {
        Directive {
            active: true,
            sensors,
            capture_image: false,
        }
    }

    pub fn with_capture(mut self, capture: bool) -> Self {
        self.capture_image = capture;
        self
    }

    fn senses(&self) -> bool {
        self.active && !self.sensors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SensingPolicy {
    pub policy_id: u64,
    pub directives: BTreeMap<String, Directive>,
}

impl SensingPolicy {
    pub fn directive(&self, imei: &str) -> Option<&Directive> {
        self.directives.get(imei)
    }

    pub fn active_nodes(&self) -> impl Iterator<Item = &str> {
        self.directives
            .iter()
            .filter(|(_, d)| d.active)
            .map(|(k, _)| k.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompiledBatch {
    /// Commands in dispatch order; per-node order is significant.
    pub commands: Vec<(String, CommandMsg)>,
    /// Nodes whose directive could not be applied (unknown or dead).
    pub skipped: Vec<String>,
}

/// Estimated upload size of a stopped session.
pub fn estimated_payload_bytes(session: &SessionState, now_ms: i64, table: &SensorTable) -> f64 {
    let (from, to, sensors) = match session {
        SessionState::Recording { since_ms, sensors } => (*since_ms, now_ms, sensors),
        SessionState::AwaitingSend {
            started_ms,
            stopped_at_ms,
            sensors,
            ..
        } => (*started_ms, *stopped_at_ms, sensors),
        SessionState::Idle { .. } => return 0.0,
    };
    let secs = (to - from).max(0) as f64 / 1000.0;
    sensors
        .iter()
        .map(|s| {
            let bytes = table.get(&s.name).map_or(128, |spec| spec.bytes_per_sample);
            s.frequency * secs * f64::from(bytes)
        })
        .sum()
}

fn send_for(session: Option<&SessionState>, now_ms: i64, table: &SensorTable) -> CommandMsg {
    let estimate = session.map_or(0.0, |s| estimated_payload_bytes(s, now_ms, table));
    CommandMsg::Send {
        compress: estimate > COMPRESS_THRESHOLD_BYTES,
    }
}

/// Sensors the node can run, clamped.
fn effective_sensors(d: &Directive, node: Option<&NodeRecord>, table: &SensorTable) -> Vec<SensorFrequency> {
    let clamped = table.clamp_all(&d.sensors);
    match node {
        Some(n) if !n.sensors.is_empty() => clamped
            .into_iter()
            .filter(|s| n.sensors.contains(&s.name))
            .collect(),
        _ => clamped,
    }
}

/// Diffs `prev` against `next` into commands. Nodes absent from `next` are
/// left alone; nodes absent from `prev` are treated as inactive.
pub fn compile(
    prev: &SensingPolicy,
    next: &SensingPolicy,
    snapshot: &Snapshot,
    table: &SensorTable,
) -> Result<CompiledBatch, CommandError> {
    if next.policy_id <= prev.policy_id {
        return Err(CommandError::StalePolicy {
            prev: prev.policy_id,
            next: next.policy_id,
        });
    }
    let idle = Directive::inactive();
    let mut batch = CompiledBatch::default();
    for (imei, nd) in &next.directives {
        let pd = prev.directives.get(imei).unwrap_or(&idle);
        let node = snapshot.node(imei);
        let before = effective_sensors(pd, node, table);
        let after = effective_sensors(nd, node, table);
        let was = pd.active && !before.is_empty();
        let now = nd.active && !after.is_empty();

        let mut cmds = Vec::new();
        let send = || send_for(node.map(|n| &n.session), snapshot.taken_at_ms, table);
        match (was, now) {
            (true, false) => cmds.extend([CommandMsg::Stop, send()]),
            (false, true) => cmds.push(CommandMsg::Start { sensors: after }),
            (true, true) if before != after => {
                cmds.extend([CommandMsg::Stop, send(), CommandMsg::Start { sensors: after }])
            }
            _ => {}
        }
        if nd.capture_image && !pd.capture_image {
            cmds.push(CommandMsg::CaptureImage);
        }
        if cmds.is_empty() {
            continue;
        }
        match node {
            Some(n) if n.alive => batch
                .commands
                .extend(cmds.into_iter().map(|c| (imei.clone(), c))),
            Some(_) => {
                tracing::warn!(%imei, "directive for dead node deferred");
                batch.skipped.push(imei.clone());
            }
            None => {
                tracing::warn!(%imei, "directive for unknown node skipped");
                batch.skipped.push(imei.clone());
            }
        }
    }
    Ok(batch)
}

/// Sense and break durations of the duty cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleTiming {
    pub sense_ms: i64,
    pub break_ms: i64,
}

impl Default for CycleTiming {
    fn default() -> Self {
        CycleTiming {
            sense_ms: 20_000,
            break_ms: 10_000,
        }
    }
}

/// One duty-cycle decision for a node that should be sensing `sensors`.
fn cycle_step(
    node: &NodeRecord,
    sensors: &[SensorFrequency],
    now_ms: i64,
    table: &SensorTable,
    timing: CycleTiming,
) -> Option<CommandMsg> {
    match &node.session {
        SessionState::Idle { since_ms } if now_ms - since_ms >= timing.break_ms && !sensors.is_empty() => {
            Some(CommandMsg::Start {
                sensors: sensors.to_vec(),
            })
        }
        SessionState::Recording { since_ms, .. } if now_ms - since_ms >= timing.sense_ms => {
            Some(CommandMsg::Stop)
        }
        SessionState::AwaitingSend {
            send_issued: false, ..
        } => Some(send_for(Some(&node.session), now_ms, table)),
        _ => None,
    }
}

/// Default behaviour for a newly joined node: sense at default frequencies
/// for the sense period, stop, send, break, repeat. The next START waits
/// until the previous upload has fully arrived.
pub fn default_cycle_tick(
    node: &NodeRecord,
    now_ms: i64,
    table: &SensorTable,
    timing: CycleTiming,
) -> Option<CommandMsg> {
    cycle_step(node, &table.defaults_for(&node.sensors), now_ms, table, timing)
}

/// Policy in force plus per-node command queues.
#[derive(Debug, Clone)]
pub struct Scheduler {
    table: SensorTable,
    timing: CycleTiming,
    applied: SensingPolicy,
    queues: BTreeMap<String, VecDeque<CommandMsg>>,
}

/// A command chosen by [`Scheduler::next_command`].
#[derive(Debug, Clone, PartialEq)]
pub struct Pending {
    pub cmd: CommandMsg,
    from_queue: bool,
}

impl Scheduler {
    pub fn new(table: SensorTable, timing: CycleTiming) -> Self {
        Scheduler {
            table,
            timing,
            applied: SensingPolicy::default(),
            queues: BTreeMap::new(),
        }
    }

    pub fn table(&self) -> &SensorTable {
        &self.table
    }

    pub fn timing(&self) -> CycleTiming {
        self.timing
    }

    pub fn applied(&self) -> &SensingPolicy {
        &self.applied
    }

    pub fn queued(&self, imei: &str) -> usize {
        self.queues.get(imei).map_or(0, VecDeque::len)
    }

    /// Replaces the policy in force with `next`. Nodes seen for the first
    /// time join the duty cycle rather than starting immediately; directives
    /// that could not be applied stay pending and are retried next time.
    pub fn apply(&mut self, next: SensingPolicy, snapshot: &Snapshot) -> Result<CompiledBatch, CommandError> {
        let mut prev = self.applied.clone();
        for (imei, d) in &next.directives {
            prev.directives
                .entry(imei.clone())
                .or_insert_with(|| Directive {
                    capture_image: false,
                    ..d.clone()
                });
        }
        let batch = compile(&prev, &next, snapshot, &self.table)?;
        for (imei, cmd) in &batch.commands {
            self.queues.entry(imei.clone()).or_default().push_back(cmd.clone());
        }
        let mut applied = next;
        for imei in &batch.skipped {
            match prev.directives.get(imei) {
                Some(d) if self.applied.directives.contains_key(imei) => {
                    applied.directives.insert(imei.clone(), d.clone());
                }
                _ => {
                    applied.directives.remove(imei);
                }
            }
        }
        self.applied = applied;
        Ok(batch)
    }

    /// Next command for `node` given its current session, if any is due.
    pub fn next_command(&mut self, node: &NodeRecord, now_ms: i64) -> Option<Pending> {
        let queue = self.queues.entry(node.imei.clone()).or_default();
        while let Some(head) = queue.front() {
            let s = &node.session;
            let emit = match (head, s) {
                (CommandMsg::CaptureImage, _) => Some(head.clone()),
                (CommandMsg::Start { .. }, SessionState::Idle { .. }) => Some(head.clone()),
                (CommandMsg::Start { sensors }, SessionState::Recording { sensors: current, .. }) => {
                    if sensors == current {
                        None
                    } else {
                        return Some(Pending {
                            cmd: CommandMsg::Stop,
                            from_queue: false,
                        });
                    }
                }
                (CommandMsg::Start { .. }, SessionState::AwaitingSend { send_issued, .. }) => {
                    if *send_issued {
                        return None;
                    }
                    return Some(Pending {
                        cmd: send_for(Some(s), now_ms, &self.table),
                        from_queue: false,
                    });
                }
                (CommandMsg::Stop, SessionState::Recording { .. }) => Some(CommandMsg::Stop),
                (
                    CommandMsg::Send { .. },
                    SessionState::AwaitingSend {
                        send_issued: false, ..
                    },
                ) => Some(send_for(Some(s), now_ms, &self.table)),
                _ => None,
            };
            match emit {
                Some(cmd) => {
                    return Some(Pending {
                        cmd,
                        from_queue: true,
                    })
                }
                None => {
                    queue.pop_front();
                }
            }
        }

        let directive = self.applied.directives.get(&node.imei);
        match directive {
            Some(d) if d.senses() => {
                let sensors = effective_sensors(d, Some(node), &self.table);
                cycle_step(node, &sensors, now_ms, &self.table, self.timing)
            }
            _ => match &node.session {
                SessionState::Recording { .. } => Some(CommandMsg::Stop),
                SessionState::AwaitingSend {
                    send_issued: false, ..
                } => Some(send_for(Some(&node.session), now_ms, &self.table)),
                _ => None,
            },
        }
        .map(|cmd| Pending {
            cmd,
            from_queue: false,
        })
    }

    /// Records that `pending` was dispatched (or must be dropped).
    pub fn acknowledge(&mut self, imei: &str, pending: &Pending) {
        if pending.from_queue {
            if let Some(q) = self.queues.get_mut(imei) {
                q.pop_front();
            }
        }
    }

    pub fn forget(&mut self, imei: &str) {
        self.queues.remove(imei);
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::analytics::GeoPoint;

    fn node(imei: &str, session: SessionState, alive: bool) -> NodeRecord {
        NodeRecord {
            imei: imei.into(),
            last_addr: "a".into(),
            reported_ip: "a".into(),
            registered_ms: 0,
            last_seen_ms: 0,
            battery: 90,
            location: GeoPoint {
                latitude: 28.5,
                longitude: 77.2,
            },
            sensors: vec![GPS.into(), AIR_QUALITY.into(), ACCELEROMETER.into()],
            session,
            alive,
        }
    }

    fn snapshot(nodes: Vec<NodeRecord>, at: i64) -> Snapshot {
        Snapshot {
            taken_at_ms: at,
            nodes: nodes.into_iter().map(|n| (n.imei.clone(), Arc::new(n))).collect(),
            recent: BTreeMap::new(),
        }
    }

    fn policy(id: u64, ds: &[(&str, Directive)]) -> SensingPolicy {
        SensingPolicy {
            policy_id: id,
            directives: ds.iter().map(|(k, d)| (k.to_string(), d.clone())).collect(),
        }
    }

    fn gps(f: f64) -> Vec<SensorFrequency> {
        vec![SensorFrequency::new(GPS, f)]
    }

    #[test]
    fn clamp_cases() {
        let t = SensorTable::default();
        assert_eq!(clamp_frequency(50.0, t.get(AIR_QUALITY).unwrap()).unwrap(), 1.0);
        assert_eq!(clamp_frequency(0.5, t.get(AIR_QUALITY).unwrap()).unwrap(), 0.5);
        let acc = t.get(ACCELEROMETER).unwrap();
        assert_eq!(clamp_frequency(acc.default_frequency, acc).unwrap(), 20.0);
        assert!(matches!(
            clamp_frequency(0.0, acc),
            Err(CommandError::InvalidFrequency(_))
        ));
        assert!(clamp_frequency(-1.0, acc).is_err());
    }

    #[test]
    fn table_from_toml() {
        let t = SensorTable::from_toml_str(
            "[AirQuality]\nmax_frequency = 2.0\ndefault_frequency = 1.0\nbytes_per_sample = 300\n",
        )
        .unwrap();
        assert_eq!(t.get(AIR_QUALITY).unwrap().bytes_per_sample, 300);
        assert!(SensorTable::from_toml_str("[X]\nmax_frequency = 1.0\ndefault_frequency = 2.0\n").is_err());
        assert!(SensorTable::from_toml_str("[X]\nmax_frequency = 1.0\n").is_err());
    }

    #[test]
    fn deactivation_is_stop_send() {
        let snap = snapshot(vec![node("a", SessionState::Idle { since_ms: 0 }, true)], 0);
        let t = SensorTable::default();
        let b = compile(
            &policy(1, &[("a", Directive::active(gps(1.0)))]),
            &policy(2, &[("a", Directive::inactive())]),
            &snap,
            &t,
        )
        .unwrap();
        let cmds: Vec<_> = b.commands.iter().map(|(_, c)| c.clone()).collect();
        assert_eq!(cmds, [CommandMsg::Stop, CommandMsg::Send { compress: false }]);
    }

    #[test]
    fn activation_is_start() {
        let snap = snapshot(vec![node("a", SessionState::Idle { since_ms: 0 }, true)], 0);
        let b = compile(
            &policy(1, &[("a", Directive::inactive())]),
            &policy(2, &[("a", Directive::active(gps(1.0)))]),
            &snap,
            &SensorTable::default(),
        )
        .unwrap();
        assert_eq!(
            b.commands,
            [("a".to_string(), CommandMsg::Start { sensors: gps(1.0) })]
        );
    }

    #[test]
    fn identical_policies_compile_to_nothing() {
        let snap = snapshot(vec![node("a", SessionState::Idle { since_ms: 0 }, true)], 0);
        let d = Directive::active(gps(1.0)).with_capture(true);
        let b = compile(&policy(1, &[("a", d.clone())]), &policy(2, &[("a", d)]), &snap, &SensorTable::default())
            .unwrap();
        assert!(b.commands.is_empty());
    }

    #[test]
    fn frequency_change_restarts_and_clamps() {
        let snap = snapshot(vec![node("a", SessionState::Idle { since_ms: 0 }, true)], 0);
        let b = compile(
            &policy(1, &[("a", Directive::active(gps(0.5)))]),
            &policy(2, &[("a", Directive::active(gps(9.0)))]),
            &snap,
            &SensorTable::default(),
        )
        .unwrap();
        let cmds: Vec<_> = b.commands.iter().map(|(_, c)| c.clone()).collect();
        assert_eq!(
            cmds,
            [
                CommandMsg::Stop,
                CommandMsg::Send { compress: false },
                CommandMsg::Start { sensors: gps(1.0) }
            ]
        );
    }

    #[test]
    fn dead_and_unknown_skipped() {
        let snap = snapshot(vec![node("dead", SessionState::Idle { since_ms: 0 }, false)], 0);
        let b = compile(
            &policy(1, &[]),
            &policy(
                2,
                &[("dead", Directive::active(gps(1.0))), ("ghost", Directive::active(gps(1.0)))],
            ),
            &snap,
            &SensorTable::default(),
        )
        .unwrap();
        assert!(b.commands.is_empty());
        assert_eq!(b.skipped, ["dead", "ghost"]);
    }

    #[test]
    fn stale_policy_rejected() {
        let snap = snapshot(vec![], 0);
        assert!(matches!(
            compile(&policy(3, &[]), &policy(3, &[]), &snap, &SensorTable::default()),
            Err(CommandError::StalePolicy { .. })
        ));
    }

    #[test]
    fn large_session_requests_compression() {
        let t = SensorTable::default();
        let rec = SessionState::Recording {
            since_ms: 0,
            sensors: vec![SensorFrequency::new(ACCELEROMETER, 100.0)],
        };
        // 100 Hz * 20 s * 150 B = 300 kB.
        assert!(estimated_payload_bytes(&rec, 20_000, &t) > COMPRESS_THRESHOLD_BYTES);
        assert_eq!(
            send_for(Some(&rec), 20_000, &t),
            CommandMsg::Send { compress: true }
        );
        assert_eq!(send_for(Some(&rec), 100, &t), CommandMsg::Send { compress: false });
    }

    #[test]
    fn default_cycle_cases() {
        let t = SensorTable::default();
        let timing = CycleTiming::default();
        let idle = node("a", SessionState::Idle { since_ms: 0 }, true);
        assert_eq!(default_cycle_tick(&idle, 9_999, &t, timing), None);
        assert!(matches!(
            default_cycle_tick(&idle, 10_000, &t, timing),
            Some(CommandMsg::Start { .. })
        ));
        let rec = node(
            "a",
            SessionState::Recording {
                since_ms: 10_000,
                sensors: gps(1.0),
            },
            true,
        );
        assert_eq!(default_cycle_tick(&rec, 29_000, &t, timing), None);
        assert_eq!(default_cycle_tick(&rec, 30_000, &t, timing), Some(CommandMsg::Stop));
        let waiting = node(
            "a",
            SessionState::AwaitingSend {
                stopped_at_ms: 30_000,
                started_ms: 10_000,
                sensors: gps(1.0),
                send_issued: true,
            },
            true,
        );
        assert_eq!(default_cycle_tick(&waiting, 90_000, &t, timing), None);
    }

    #[test]
    fn scheduler_defers_start_until_upload_done() {
        let t = SensorTable::default();
        let mut s = Scheduler::new(t, CycleTiming::default());
        let rec = node(
            "a",
            SessionState::Recording {
                since_ms: 0,
                sensors: gps(1.0),
            },
            true,
        );
        s.apply(policy(1, &[("a", Directive::active(gps(1.0)))]), &snapshot(vec![rec.clone()], 0))
            .unwrap();
        s.apply(policy(2, &[("a", Directive::active(gps(0.5)))]), &snapshot(vec![rec.clone()], 5_000))
            .unwrap();
        assert_eq!(s.queued("a"), 3);

        let p = s.next_command(&rec, 5_000).unwrap();
        assert_eq!(p.cmd, CommandMsg::Stop);
        s.acknowledge("a", &p);
        let waiting = node(
            "a",
            SessionState::AwaitingSend {
                stopped_at_ms: 5_000,
                started_ms: 0,
                sensors: gps(1.0),
                send_issued: false,
            },
            true,
        );
        let p = s.next_command(&waiting, 5_000).unwrap();
        assert_eq!(p.cmd, CommandMsg::Send { compress: false });
        s.acknowledge("a", &p);
        let sent = node(
            "a",
            SessionState::AwaitingSend {
                stopped_at_ms: 5_000,
                started_ms: 0,
                sensors: gps(1.0),
                send_issued: true,
            },
            true,
        );
        assert_eq!(s.next_command(&sent, 5_000), None);
        let idle = node("a", SessionState::Idle { since_ms: 5_001 }, true);
        let p = s.next_command(&idle, 5_001).unwrap();
        assert_eq!(p.cmd, CommandMsg::Start { sensors: gps(0.5) });
        s.acknowledge("a", &p);
        assert_eq!(s.queued("a"), 0);
    }

    #[test]
    fn scheduler_new_node_waits_for_break() {
        let mut s = Scheduler::new(SensorTable::default(), CycleTiming::default());
        let idle = node("a", SessionState::Idle { since_ms: 0 }, true);
        let b = s
            .apply(policy(1, &[("a", Directive::active(gps(1.0)))]), &snapshot(vec![idle.clone()], 0))
            .unwrap();
        assert!(b.commands.is_empty());
        assert_eq!(s.next_command(&idle, 0), None);
        assert!(matches!(
            s.next_command(&idle, 10_000).map(|p| p.cmd),
            Some(CommandMsg::Start { .. })
        ));
    }

    #[test]
    fn scheduler_keeps_pending_directive_for_dead_node() {
        let mut s = Scheduler::new(SensorTable::default(), CycleTiming::default());
        let live = node("a", SessionState::Idle { since_ms: 0 }, true);
        s.apply(policy(1, &[("a", Directive::inactive())]), &snapshot(vec![live], 0))
            .unwrap();
        let dead = node("a", SessionState::Idle { since_ms: 0 }, false);
        let b = s
            .apply(policy(2, &[("a", Directive::active(gps(1.0)))]), &snapshot(vec![dead], 5_000))
            .unwrap();
        assert_eq!(b.skipped, ["a"]);
        assert!(!s.applied().directive("a").unwrap().active);
        let revived = node("a", SessionState::Idle { since_ms: 0 }, true);
        let b = s
            .apply(policy(3, &[("a", Directive::active(gps(1.0)))]), &snapshot(vec![revived], 10_000))
            .unwrap();
        assert_eq!(b.commands.len(), 1);
    }
}
